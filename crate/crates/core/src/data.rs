//! Synthetic toy data, split management, the `BPRS` array container and
//! SLP-like directory ingestion.
//!
//! Toy pressure is a sum of Gaussian contact blobs laid out by a posture
//! template and scaled so the supported mass equals the subject's mass.
//! Depth is a decreasing function of contact pressure and body silhouette,
//! blurred by the cover level. Covers occlude the camera, not the mat, so
//! pressure does not depend on the cover.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bridgepress_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, dimension, Error, Result};
use crate::ils::{AnthroRecord, AnthroScale};
use crate::physics::{
    gaussian_smooth, normalize, resize_pressure, smooth_grid, NormMode, NormalizationSpec, PressureMap,
    CANONICAL_SHAPE, CANONICAL_SIGMA, GRAVITY, KPA_TO_PA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cover {
    Uncovered,
    Cov1mm,
    Cov3mm,
}

impl Cover {
    pub const ALL: [Cover; 3] = [Cover::Uncovered, Cover::Cov1mm, Cover::Cov3mm];

    pub fn level(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Cover::Uncovered => "uncovered",
            Cover::Cov1mm => "cov1mm",
            Cover::Cov3mm => "cov3mm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Cover::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown cover `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Posture {
    Supine,
    Left,
    Right,
}

impl Posture {
    pub const ALL: [Posture; 3] = [Posture::Supine, Posture::Left, Posture::Right];

    pub fn name(self) -> &'static str {
        match self {
            Posture::Supine => "supine",
            Posture::Left => "left",
            Posture::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Posture::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown posture `{s}`")))
    }
}

/// Row-major depth image.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return dimension(format!("{height}×{width} depth needs {} values, got {}", height * width, values.len()));
        }
        Ok(DepthMap { height, width, values })
    }

    /// Min–max scaling of this image alone onto `[0, 1]`.
    pub fn normalized(&self) -> Result<DepthMap> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::DegenerateInput("constant depth image".into()));
        }
        DepthMap::new(self.height, self.width, self.values.iter().map(|v| (v - lo) / (hi - lo)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub depth_shape: (usize, usize),
    pub pressure_shape: (usize, usize),
    pub taxel_area_m2: f64,
    pub mass_range: (f64, f64),
    pub height_range: (f64, f64),
    /// Blur σ (depth pixels) per cover level.
    pub cover_blur: [f64; 3],
    /// Odd subjects get sharper, higher-peaked contact blobs, mimicking a
    /// synthetic source with a different pressure range.
    pub range_mismatch: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            depth_shape: (54, 128),
            pressure_shape: CANONICAL_SHAPE,
            taxel_area_m2: 0.03 * 0.031,
            mass_range: (45.0, 110.0),
            height_range: (1.5, 1.95),
            cover_blur: [0.0, 1.0, 2.0],
            range_mismatch: false,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let (dh, dw) = self.depth_shape;
        let (ph, pw) = self.pressure_shape;
        if ph < 8 || pw < 16 || dh < ph || dw < pw {
            return config(format!("toy grids too small: depth {dh}×{dw}, pressure {ph}×{pw}"));
        }
        if !(self.taxel_area_m2 > 0.0) {
            return config("taxel area must be positive");
        }
        let (m0, m1) = self.mass_range;
        let (h0, h1) = self.height_range;
        if !(0.0 < m0 && m0 < m1 && 0.0 < h0 && h0 < h1) {
            return config(format!("bad anthropometric ranges {:?} / {:?}", self.mass_range, self.height_range));
        }
        if self.cover_blur.iter().any(|s| !(*s >= 0.0)) {
            return config("cover blur must be ≥ 0");
        }
        Ok(())
    }

    pub fn anthro_scale(&self) -> AnthroScale {
        AnthroScale { mass_max: self.mass_range.1, height_max: self.height_range.1 }
    }

    /// Mat length along the body axis, in metres.
    fn mat_length_m(&self) -> f64 {
        self.pressure_shape.1 as f64 * 0.03
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub depth: DepthMap,
    pub pressure: PressureMap,
    pub anthro: AnthroRecord,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 chain
    let mut z = 0x853c_49e6_748f_ea9bu64;
    for p in parts {
        z = z.wrapping_add(*p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Seed of subject `id` in a dataset drawn with `seed`.
pub fn subject_seed(seed: u64, id: u32) -> u64 {
    mix_seed(&[seed, id as u64])
}

/// Blob in pressure-grid coordinates: centre (row, col), widths, amplitude.
#[derive(Debug, Clone, Copy)]
struct Blob {
    r: f64,
    c: f64,
    sr: f64,
    sc: f64,
    amp: f64,
}

impl Blob {
    fn at(&self, r: f64, c: f64) -> f64 {
        let dr = (r - self.r) / self.sr;
        let dc = (c - self.c) / self.sc;
        self.amp * (-0.5 * (dr * dr + dc * dc)).exp()
    }
}

fn posture_blobs(spec: &ToySpec, rec: &AnthroRecord, pose: Posture, sharp: bool, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let (ph, pw) = spec.pressure_shape;
    let len = (rec.height_m / spec.mat_length_m() * pw as f64).min(pw as f64 - 4.0);
    let c0 = rng.random_range(1.0..(pw as f64 - len - 1.0).max(1.5));
    let mid = ph as f64 / 2.0 + rng.random_range(-1.5..1.5);
    let bmi = rec.mass_kg / (rec.height_m * rec.height_m);
    let width = (bmi / 22.0).sqrt().clamp(0.8, 1.25) * ph as f64 / 27.0;
    let sharpen = if sharp { 0.7 } else { 1.0 };
    // (fraction along the body, row offset, row σ, col σ, amplitude)
    let template: &[(f64, f64, f64, f64, f64)] = match pose {
        Posture::Supine => &[
            (0.06, 0.0, 1.6, 1.6, 0.8),
            (0.20, 4.0, 1.8, 2.2, 1.0),
            (0.20, -4.0, 1.8, 2.2, 1.0),
            (0.32, 0.0, 3.0, 3.0, 0.6),
            (0.50, 0.0, 2.5, 3.0, 1.5),
            (0.65, 2.5, 1.5, 3.0, 0.5),
            (0.65, -2.5, 1.5, 3.0, 0.5),
            (0.85, 2.2, 1.2, 2.5, 0.5),
            (0.85, -2.2, 1.2, 2.5, 0.5),
            (0.97, 2.2, 1.0, 1.0, 0.9),
            (0.97, -2.2, 1.0, 1.0, 0.9),
        ],
        Posture::Left | Posture::Right => &[
            (0.06, 2.0, 1.5, 1.5, 0.7),
            (0.20, 1.5, 1.5, 2.0, 1.3),
            (0.35, 0.5, 1.8, 3.0, 0.5),
            (0.50, 1.0, 1.8, 2.5, 1.8),
            (0.72, -1.0, 1.3, 1.5, 0.7),
            (0.95, -0.5, 1.0, 1.2, 0.6),
        ],
    };
    let dir = if pose == Posture::Left { -1.0 } else { 1.0 };
    let tilt = rng.random_range(-0.04..0.04);
    template
        .iter()
        .map(|&(f, dr, sr, sc, amp)| {
            let c = c0 + f * len;
            let r = mid + dir * dr * width + tilt * (c - c0);
            let jitter = rng.random_range(0.9..1.1);
            Blob { r, c, sr: sr * width * sharpen, sc: sc * sharpen, amp: amp * jitter }
        })
        .collect()
}

fn silhouette(spec: &ToySpec, blobs: &[Blob]) -> Vec<Blob> {
    let s = spec.pressure_shape.0 as f64 / 27.0;
    blobs.iter().map(|b| Blob { sr: b.sr + 2.0 * s, sc: b.sc + 2.0, amp: 1.0, ..*b }).collect()
}

/// Draws one subject's anthropometrics.
pub fn draw_anthro(spec: &ToySpec, subject_seed: u64) -> AnthroRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[subject_seed, 1]));
    let gender = rng.random_range(0..2u8);
    let height_m = rng.random_range(spec.height_range.0..spec.height_range.1);
    let mass_kg = rng.random_range(spec.mass_range.0..spec.mass_range.1);
    AnthroRecord { mass_kg, height_m, gender }
}

/// One toy sample. Pressure supports exactly the subject's mass; depth
/// for cover level `k` is the level-0 depth blurred by `cover_blur[k]`.
pub fn gen_toy_sample(spec: &ToySpec, subject_seed: u64, pose: Posture, cover: Cover) -> Result<ToySample> {
    spec.validate()?;
    let anthro = draw_anthro(spec, subject_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[subject_seed, 2, pose as u64]));
    let sharp = spec.range_mismatch && subject_seed % 2 == 1;
    let blobs = posture_blobs(spec, &anthro, pose, sharp, &mut rng);
    let (ph, pw) = spec.pressure_shape;
    let field = |r: f64, c: f64| blobs.iter().map(|b| b.at(r, c)).sum::<f64>();
    let raw: Vec<f64> = (0..ph * pw).map(|i| field((i / pw) as f64, (i % pw) as f64)).collect();
    let total: f64 = raw.iter().sum();
    let k = anthro.mass_kg * GRAVITY / (KPA_TO_PA * spec.taxel_area_m2 * total);
    let pressure = PressureMap::new(ph, pw, raw.iter().map(|v| v * k).collect(), spec.taxel_area_m2)?;

    let (dh, dw) = spec.depth_shape;
    let (sy, sx) = (ph as f64 / dh as f64, pw as f64 / dw as f64);
    let body = silhouette(spec, &blobs);
    let depth: Vec<f64> = (0..dh * dw)
        .map(|i| {
            let r = ((i / dw) as f64 + 0.5) * sy - 0.5;
            let c = ((i % dw) as f64 + 0.5) * sx - 0.5;
            let contact = k * field(r, c);
            let shape = body.iter().map(|b| b.at(r, c)).sum::<f64>().min(1.0);
            1.0 - 0.3 * (contact / 5.0).tanh() - 0.2 * shape
        })
        .collect();
    let sigma = spec.cover_blur[cover.level()];
    let depth = if sigma > 0.0 { smooth_grid(&depth, dh, dw, sigma)? } else { depth };
    Ok(ToySample { depth: DepthMap::new(dh, dw, depth)?, pressure, anthro })
}

// ------------------------------------------------------------------- splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl Splits {
    pub fn of(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, subject: u32) -> Option<Split> {
        Split::ALL.into_iter().find(|s| self.of(*s).contains(&subject))
    }

    /// Synthetic subjects only ever join the training split.
    pub fn add_synthetic(&mut self, ids: &[u32]) -> Result<()> {
        if let Some(id) = ids.iter().find(|id| self.split_of(**id).is_some()) {
            return contract(format!("synthetic subject {id} already assigned"));
        }
        self.train.extend_from_slice(ids);
        self.train.sort_unstable();
        Ok(())
    }

    pub fn is_disjoint(&self) -> bool {
        let all: Vec<u32> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        all.iter().collect::<BTreeSet<_>>().len() == all.len()
    }
}

/// Subject-disjoint shuffled partition. Validation and test sizes are
/// rounded shares; training takes the rest.
pub fn make_splits(subject_ids: &[u32], ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return config(format!("split ratios {ratios:?} must be ≥ 0 and sum to 1"));
    }
    let unique: BTreeSet<u32> = subject_ids.iter().copied().collect();
    if unique.len() != subject_ids.len() {
        return contract("duplicate subject ids");
    }
    if unique.len() < 5 {
        return config(format!("need at least 5 subjects, got {}", unique.len()));
    }
    let mut ids: Vec<u32> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let n_val = (b * n).round() as usize;
    let n_test = ((c * n).round() as usize).min(ids.len() - n_val);
    let n_train = ids.len() - n_val - n_test;
    let sorted = |s: &[u32]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: sorted(&ids[..n_train]),
        val: sorted(&ids[n_train..n_train + n_val]),
        test: sorted(&ids[n_train + n_val..]),
    })
}

// ---------------------------------------------------------------- container

pub const CONTAINER_MAGIC: &[u8; 4] = b"BPRS";
pub const CONTAINER_VERSION: u16 = 1;

/// An f64 array with its key/value header.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Caller keys (`role`, `units`, …); structural keys are managed here.
    pub header: BTreeMap<String, String>,
}

const RESERVED_KEYS: [&str; 3] = ["shape", "dtype", "byte_order"];

impl Container {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Length(format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(Container { shape: shape.to_vec(), data, header: BTreeMap::new() })
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.header.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("container header lacks `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return contract("container payload must be finite");
        }
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Length(format!("shape {:?} vs {} values", self.shape, self.data.len())));
        }
        let mut head = String::new();
        let shape: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(head, "shape={}", shape.join(","));
        head.push_str("dtype=f64\nbyte_order=little\n");
        for (k, v) in &self.header {
            if RESERVED_KEYS.contains(&k.as_str()) || k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
                return contract(format!("invalid header entry `{k}`"));
            }
            let _ = writeln!(head, "{k}={v}");
        }
        let mut out = Vec::with_capacity(10 + head.len() + 8 * self.data.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(head.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::Format("bad magic; not a BPRS container".into()));
        }
        if bytes.len() < 10 {
            return Err(Error::Length("container preamble truncated".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version > CONTAINER_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: CONTAINER_VERSION });
        }
        if version == 0 {
            return Err(Error::Format("container version 0 is invalid".into()));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let Some(head) = bytes.get(10..10 + hlen) else {
            return Err(Error::Length(format!("header of {hlen} bytes exceeds file")));
        };
        let head = std::str::from_utf8(head).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in head.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line `{line}` lacks `=`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        if header.get("dtype").map(String::as_str) != Some("f64") {
            return Err(Error::Format("dtype must be f64".into()));
        }
        if header.get("byte_order").map(String::as_str) != Some("little") {
            return Err(Error::Format("byte order must be little".into()));
        }
        let shape_s = header.remove("shape").ok_or_else(|| Error::Format("header lacks shape".into()))?;
        let shape: Vec<usize> = if shape_s.is_empty() {
            vec![]
        } else {
            shape_s
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("bad shape `{shape_s}`"))))
                .collect::<Result<_>>()?
        };
        header.remove("dtype");
        header.remove("byte_order");
        let payload = &bytes[10 + hlen..];
        let n: usize = shape.iter().product();
        if payload.len() != 8 * n {
            return Err(Error::Length(format!(
                "shape {shape:?} needs {} payload bytes, found {}",
                8 * n,
                payload.len()
            )));
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Container { shape, data, header })
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let bytes = c.to_bytes()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

// ------------------------------------------------------------------ dataset

/// One preprocessed sample: depth normalized per image, pressure smoothed
/// and in kPa.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject: u32,
    pub pose: Posture,
    pub cover: Cover,
    pub depth: DepthMap,
    pub pressure: PressureMap,
    pub anthro: AnthroRecord,
}

impl Sample {
    pub fn id(&self) -> String {
        format!("s{:03}_{}_{}", self.subject, self.pose.name(), self.cover.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub splits: Splits,
    pub normalization: NormalizationSpec,
    pub anthro_scale: AnthroScale,
    pub excluded: Vec<u32>,
    pub counts_by_cover: BTreeMap<Cover, usize>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let ids = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        for sp in Split::ALL {
            let _ = writeln!(s, "split.{}={}", sp.name(), ids(self.splits.of(sp)));
        }
        let mode = match self.normalization.mode {
            NormMode::Global => "global",
            NormMode::Individual => "individual",
        };
        let _ = writeln!(s, "norm.mode={mode}");
        if let Some(m) = self.normalization.global_max_kpa {
            let _ = writeln!(s, "norm.global_max_kpa={m:?}");
        }
        let _ = writeln!(s, "anthro.mass_max={:?}", self.anthro_scale.mass_max);
        let _ = writeln!(s, "anthro.height_max={:?}", self.anthro_scale.height_max);
        let _ = writeln!(s, "excluded={}", ids(&self.excluded));
        for (c, n) in &self.counts_by_cover {
            let _ = writeln!(s, "count.{}={n}", c.name());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Manifest(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Manifest(format!("`{k}` is not a number")))
        };
        let ids = |k: &str| -> Result<Vec<u32>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|x| x.parse().map_err(|_| Error::Manifest(format!("bad id in `{k}`")))).collect()
        };
        let normalization = match get("norm.mode")?.as_str() {
            "global" => NormalizationSpec::global(num("norm.global_max_kpa")?),
            "individual" => NormalizationSpec::individual(),
            m => return Err(Error::Manifest(format!("unknown normalization mode `{m}`"))),
        };
        let mut counts_by_cover = BTreeMap::new();
        for c in Cover::ALL {
            if let Some(v) = kv.get(&format!("count.{}", c.name())) {
                counts_by_cover.insert(c, v.parse().map_err(|_| Error::Manifest("bad count".into()))?);
            }
        }
        let splits = Splits { train: ids("split.train")?, val: ids("split.val")?, test: ids("split.test")? };
        if !splits.is_disjoint() {
            return Err(Error::Manifest("splits share subjects".into()));
        }
        Ok(DatasetManifest {
            seed: get("seed")?.parse().map_err(|_| Error::Manifest("bad seed".into()))?,
            splits,
            normalization,
            anthro_scale: AnthroScale { mass_max: num("anthro.mass_max")?, height_max: num("anthro.height_max")? },
            excluded: ids("excluded")?,
            counts_by_cover,
        })
    }
}

/// `key=value` lines; `#` comments and blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Manifest(format!("line {}: expected key=value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Manifest(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
        }
    }
    Ok(out)
}

/// Preprocessed samples plus the manifest that describes them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: DatasetManifest,
}

/// Resize to the canonical grid, then smooth. Both steps preserve mass.
pub fn preprocess_pressure(p: &PressureMap) -> Result<PressureMap> {
    let p = if p.shape() != CANONICAL_SHAPE { resize_pressure(p, CANONICAL_SHAPE)? } else { p.clone() };
    gaussian_smooth(&p, CANONICAL_SIGMA)
}

fn counts(samples: &[Sample]) -> BTreeMap<Cover, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.cover).or_insert(0) += 1;
    }
    m
}

fn global_max(samples: &[Sample]) -> f64 {
    samples.iter().map(|s| s.pressure.max()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDatasetSpec {
    pub toy: ToySpec,
    pub subjects: u32,
    /// Samples per subject, taken from (posture, cover) pairs in posture-
    /// major order within each cover level.
    pub samples_per_subject: usize,
    pub seed: u64,
    pub norm_mode: NormMode,
}

impl ToyDatasetSpec {
    pub fn new(subjects: u32, samples_per_subject: usize, seed: u64) -> Self {
        ToyDatasetSpec { toy: ToySpec::default(), subjects, samples_per_subject, seed, norm_mode: NormMode::Global }
    }

    fn combos(&self) -> Vec<(Posture, Cover)> {
        Cover::ALL
            .iter()
            .flat_map(|c| Posture::ALL.iter().map(move |p| (*p, *c)))
            .take(self.samples_per_subject)
            .collect()
    }
}

/// Raw toy samples (unsmoothed) keyed by subject, posture and cover.
pub fn gen_toy_raw(spec: &ToyDatasetSpec) -> Result<Vec<(u32, Posture, Cover, ToySample)>> {
    if spec.samples_per_subject == 0 || spec.samples_per_subject > 9 {
        return config("samples per subject must be in 1..=9");
    }
    let mut out = Vec::new();
    for id in 0..spec.subjects {
        let seed = subject_seed(spec.seed, id);
        for (pose, cover) in spec.combos() {
            out.push((id, pose, cover, gen_toy_sample(&spec.toy, seed, pose, cover)?));
        }
    }
    Ok(out)
}

fn finish(samples: Vec<Sample>, seed: u64, splits: Splits, mode: NormMode, scale: AnthroScale, excluded: Vec<u32>) -> Result<Dataset> {
    let normalization = match mode {
        NormMode::Global => NormalizationSpec::global(global_max(&samples)),
        NormMode::Individual => NormalizationSpec::individual(),
    };
    normalization.validate()?;
    let manifest = DatasetManifest { seed, splits, normalization, anthro_scale: scale, excluded, counts_by_cover: counts(&samples) };
    Ok(Dataset { samples, manifest })
}

/// Generates, preprocesses and splits a toy dataset in memory.
pub fn toy_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    let raw = gen_toy_raw(spec)?;
    let samples = raw
        .into_iter()
        .map(|(subject, pose, cover, s)| {
            Ok(Sample {
                subject,
                pose,
                cover,
                depth: s.depth.normalized()?,
                pressure: preprocess_pressure(&s.pressure)?,
                anthro: s.anthro,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<u32> = (0..spec.subjects).collect();
    let splits = make_splits(&ids, (0.6, 0.2, 0.2), spec.seed)?;
    finish(samples, spec.seed, splits, spec.norm_mode, spec.toy.anthro_scale(), vec![])
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        let ids = self.manifest.splits.of(split);
        (0..self.samples.len()).filter(|i| ids.contains(&self.samples[*i].subject)).collect()
    }

    pub fn depth_shape(&self) -> (usize, usize) {
        self.samples.first().map(|s| (s.depth.height, s.depth.width)).unwrap_or((0, 0))
    }

    pub fn pressure_shape(&self) -> (usize, usize) {
        self.samples.first().map(|s| s.pressure.shape()).unwrap_or((0, 0))
    }

    /// `[N, 1, H, W]` normalized depth.
    pub fn depth_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let (h, w) = self.depth_shape();
        let data = idx.iter().flat_map(|i| self.samples[*i].depth.values.iter().copied()).collect();
        Ok(Tensor::from_vec(&[idx.len(), 1, h, w], data)?)
    }

    pub fn normalized_pressure(&self, i: usize) -> Result<PressureMap> {
        normalize(&self.samples[i].pressure, &self.manifest.normalization)
    }

    /// `[N, 1, 27, 64]` normalized pressure and the per-sample divisors.
    pub fn pressure_batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let (h, w) = self.pressure_shape();
        let mut data = Vec::with_capacity(idx.len() * h * w);
        let mut div = Vec::with_capacity(idx.len());
        for &i in idx {
            let p = self.normalized_pressure(i)?;
            div.push(p.normalized_by().expect("normalized"));
            data.extend_from_slice(p.values());
        }
        Ok((Tensor::from_vec(&[idx.len(), 1, h, w], data)?, div))
    }

    pub fn anthro(&self, idx: &[usize]) -> Vec<AnthroRecord> {
        idx.iter().map(|i| self.samples[*i].anthro).collect()
    }
}

// ------------------------------------------------------- directory layout

fn sample_paths(root: &Path, split: Split, subject: u32, pose: Posture, cover: Cover) -> [PathBuf; 3] {
    let dir = root.join(split.name()).join(format!("s{subject:03}"));
    let stem = format!("{}_{}", pose.name(), cover.name());
    ["depth", "pressure", "anthro"].map(|r| dir.join(format!("{stem}.{r}.bprs")))
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `<split>/<subject>/<pose>_<cover>.{depth,pressure,anthro}.bprs`
/// and the manifest. `preprocessed` marks pressure already on the
/// canonical grid and smoothed, so ingestion does not smooth it again.
pub fn export_layout(
    root: &Path,
    samples: &[(u32, Posture, Cover, DepthMap, PressureMap, AnthroRecord)],
    manifest: &DatasetManifest,
    preprocessed: bool,
) -> Result<()> {
    for (subject, pose, cover, depth, pressure, anthro) in samples {
        let split = manifest
            .splits
            .split_of(*subject)
            .ok_or_else(|| Error::Manifest(format!("subject {subject} has no split")))?;
        let [dp, pp, ap] = sample_paths(root, split, *subject, *pose, *cover);
        write_container(&dp, &Container::new(&[depth.height, depth.width], depth.values.clone())?.with("role", "depth").with("units", "m"))?;
        let pc = Container::new(&[pressure.height(), pressure.width()], pressure.values().to_vec())?
            .with("role", "pressure")
            .with("units", "kPa")
            .with("taxel_area_m2", format!("{:?}", pressure.taxel_area_m2()))
            .with("preprocessed", preprocessed);
        write_container(&pp, &pc)?;
        let ac = Container::new(&[3], vec![anthro.mass_kg, anthro.height_m, anthro.gender as f64])?
            .with("role", "anthro")
            .with("units", "kg,m,flag");
        write_container(&ap, &ac)?;
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))
}

/// Writes a preprocessed dataset in the directory layout.
pub fn export_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    let rows: Vec<_> = ds
        .samples
        .iter()
        .map(|s| (s.subject, s.pose, s.cover, s.depth.clone(), s.pressure.clone(), s.anthro))
        .collect();
    export_layout(root, &rows, &ds.manifest, true)
}

fn check_role(c: &Container, role: &str, path: &Path) -> Result<()> {
    if c.get("role")? != role {
        return Err(Error::Manifest(format!("{} holds role `{}`, expected `{role}`", path.display(), c.get("role")?)));
    }
    Ok(())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Outcome of ingestion: the dataset and the subjects skipped as excluded.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub skipped: Vec<u32>,
}

/// Reads an exported layout. Pressure is resized and smoothed unless
/// marked preprocessed; depth is normalized per image; the normalization
/// divisor is recomputed from what was read. Subjects in `exclude` (and
/// the manifest's own exclusions) are skipped.
pub fn ingest_slp_like(root: &Path, exclude: &[u32]) -> Result<Ingested> {
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let excluded: BTreeSet<u32> = exclude.iter().chain(&manifest.excluded).copied().collect();
    let mut samples = Vec::new();
    let mut skipped = BTreeSet::new();
    for split in Split::ALL {
        let sdir = root.join(split.name());
        if !sdir.exists() {
            continue;
        }
        for subj_dir in read_dir_sorted(&sdir)? {
            let name = subj_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let subject: u32 = name
                .strip_prefix('s')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Manifest(format!("bad subject directory `{name}`")))?;
            if manifest.splits.split_of(subject) != Some(split) {
                return Err(Error::Manifest(format!("subject {subject} found under `{}` but manifest disagrees", split.name())));
            }
            if excluded.contains(&subject) {
                skipped.insert(subject);
                continue;
            }
            let mut stems = BTreeSet::new();
            for f in read_dir_sorted(&subj_dir)? {
                let fname = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if let Some(stem) = fname.strip_suffix(".bprs").and_then(|s| s.rsplit_once('.')).map(|(a, _)| a.to_string()) {
                    stems.insert(stem);
                }
            }
            for stem in stems {
                let (p, c) = stem.split_once('_').ok_or_else(|| Error::Manifest(format!("bad sample name `{stem}`")))?;
                let (pose, cover) = (Posture::parse(p)?, Cover::parse(c)?);
                let [dp, pp, ap] = sample_paths(root, split, subject, pose, cover);
                for path in [&dp, &pp, &ap] {
                    if !path.exists() {
                        return Err(Error::Manifest(format!("missing role file {}", path.display())));
                    }
                }
                let dc = read_container(&dp)?;
                check_role(&dc, "depth", &dp)?;
                let pc = read_container(&pp)?;
                check_role(&pc, "pressure", &pp)?;
                let ac = read_container(&ap)?;
                check_role(&ac, "anthro", &ap)?;
                if dc.shape.len() != 2 || pc.shape.len() != 2 || ac.shape != [3] {
                    return Err(Error::Format(format!("unexpected array ranks for `{stem}` of subject {subject}")));
                }
                let area: f64 = pc.get("taxel_area_m2")?.parse().map_err(|_| Error::Format("bad taxel area".into()))?;
                let pressure = PressureMap::new(pc.shape[0], pc.shape[1], pc.data, area)?;
                let pressure = if pc.header.get("preprocessed").map(String::as_str) == Some("true") {
                    pressure
                } else {
                    preprocess_pressure(&pressure)?
                };
                let depth = DepthMap::new(dc.shape[0], dc.shape[1], dc.data)?.normalized()?;
                let anthro = AnthroRecord { mass_kg: ac.data[0], height_m: ac.data[1], gender: ac.data[2] as u8 };
                samples.push(Sample { subject, pose, cover, depth, pressure, anthro });
            }
        }
    }
    let mut splits = manifest.splits.clone();
    for v in [&mut splits.train, &mut splits.val, &mut splits.test] {
        v.retain(|id| !excluded.contains(id));
    }
    let dataset = finish(
        samples,
        manifest.seed,
        splits,
        manifest.normalization.mode,
        manifest.anthro_scale,
        excluded.into_iter().collect(),
    )?;
    Ok(Ingested { dataset, skipped: skipped.into_iter().collect() })
}

/// Writes raw toy samples (unsmoothed pressure, unnormalized depth) with a
/// manifest; the counterpart of [`ingest_slp_like`].
pub fn write_toy_layout(root: &Path, spec: &ToyDatasetSpec) -> Result<DatasetManifest> {
    let raw = gen_toy_raw(spec)?;
    let ids: Vec<u32> = (0..spec.subjects).collect();
    let splits = make_splits(&ids, (0.6, 0.2, 0.2), spec.seed)?;
    let gmax = raw.iter().map(|r| r.3.pressure.max()).fold(0.0, f64::max);
    let normalization = match spec.norm_mode {
        NormMode::Global => NormalizationSpec::global(gmax),
        NormMode::Individual => NormalizationSpec::individual(),
    };
    let mut counts_by_cover = BTreeMap::new();
    for r in &raw {
        *counts_by_cover.entry(r.2).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        seed: spec.seed,
        splits,
        normalization,
        anthro_scale: spec.toy.anthro_scale(),
        excluded: vec![],
        counts_by_cover,
    };
    let rows: Vec<_> = raw.into_iter().map(|(id, p, c, s)| (id, p, c, s.depth, s.pressure, s.anthro)).collect();
    export_layout(root, &rows, &manifest, false)?;
    Ok(manifest)
}
