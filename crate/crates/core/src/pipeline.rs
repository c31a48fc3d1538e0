//! Training regimes, checkpoints and inference.
//!
//! * `cgan`: generator (optionally with ILS) against a conditional PatchGAN,
//!   reconstruction mix with WOL.
//! * `bbdm` / `bbdm_ils`: pixel-space bridge from depth (pooled to the mat
//!   grid) to pressure; the ILS variant informs the denoiser bottleneck.
//! * `lbbdm`: a skip-free autoencoder is pretrained on both domains, frozen,
//!   and the bridge runs between its depth and pressure latents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bridgepress_tensor::optim::{Adam, AdamConfig};
use bridgepress_tensor::{no_grad, ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bridge::{self, make_schedule, standard_normal, BridgeSchedule};
use crate::data::{parse_kv, Container, Dataset, Split};
use crate::error::{config, contract, Error, Result};
use crate::ils::{AnthroRecord, AnthroScale};
use crate::metrics;
use crate::models::{self, DenoiserConfig, DiscriminatorConfig, GeneratorConfig, LossWeights};
use crate::physics::{mass_from_pressure, NormalizationSpec, PressureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Cgan,
    Bbdm,
    BbdmIls,
    Lbbdm,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Cgan => "cgan",
            Regime::Bbdm => "bbdm",
            Regime::BbdmIls => "bbdm-ils",
            Regime::Lbbdm => "lbbdm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cgan" => Ok(Regime::Cgan),
            "bbdm" => Ok(Regime::Bbdm),
            "bbdm-ils" | "bbdm_ils" => Ok(Regime::BbdmIls),
            "lbbdm" => Ok(Regime::Lbbdm),
            _ => config(format!("unknown regime `{s}`")),
        }
    }

    pub fn samples(self) -> bool {
        self != Regime::Cgan
    }
}

/// Every knob of a run. Serialized as `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Only meaningful for `cgan`; `None` there means the default weight.
    pub gamma: Option<f64>,
    pub y_real: f64,
    pub y_gen: f64,
    /// Generator ILS (`cgan`).
    pub use_ils: bool,
    pub diffusion_steps: usize,
    pub sample_steps: usize,
    pub s_scale: f64,
    pub ae_epochs: usize,
    /// ILS inside the autoencoder (`lbbdm`).
    pub ae_ils: bool,
    /// ILS at the denoiser bottleneck (`lbbdm`).
    pub denoiser_ils: bool,
    pub c1: usize,
    pub c2: usize,
    pub latent_channels: usize,
    pub ils_heads: usize,
    /// Name of the reported snapshot, kept even when fewer epochs ran.
    pub snapshot: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            regime: Regime::Cgan,
            seed: 0,
            epochs: 30,
            batch_size: 16,
            lr: AdamConfig::default().lr,
            lambda: w.lambda,
            alpha: w.alpha,
            beta: w.beta,
            gamma: None,
            y_real: w.y_real,
            y_gen: w.y_gen,
            use_ils: true,
            diffusion_steps: bridge::DEFAULT_T,
            sample_steps: bridge::DEFAULT_SAMPLE_STEPS,
            s_scale: 1.0,
            ae_epochs: 10,
            ae_ils: true,
            denoiser_ils: false,
            c1: 4,
            c2: 8,
            latent_channels: 8,
            ils_heads: 2,
            snapshot: "epoch100".into(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "regime", "seed", "epochs", "batch_size", "lr", "lambda", "alpha", "beta", "gamma", "y_real", "y_gen",
    "use_ils", "T", "S", "s_scale", "ae_epochs", "ae_ils", "denoiser_ils", "c1", "c2", "latent_channels",
    "ils_heads", "snapshot",
];

fn parse_val<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Configuration(format!("bad value `{v}` for `{k}`")))
}

impl TrainConfig {
    /// Applies `key=value` overrides; unknown keys are rejected.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "regime" => self.regime = Regime::parse(v)?,
                "seed" => self.seed = parse_val(k, v)?,
                "epochs" => self.epochs = parse_val(k, v)?,
                "batch_size" => self.batch_size = parse_val(k, v)?,
                "lr" => self.lr = parse_val(k, v)?,
                "lambda" => self.lambda = parse_val(k, v)?,
                "alpha" => self.alpha = parse_val(k, v)?,
                "beta" => self.beta = parse_val(k, v)?,
                "gamma" => self.gamma = if v == "none" { None } else { Some(parse_val(k, v)?) },
                "y_real" => self.y_real = parse_val(k, v)?,
                "y_gen" => self.y_gen = parse_val(k, v)?,
                "use_ils" => self.use_ils = parse_val(k, v)?,
                "T" => self.diffusion_steps = parse_val(k, v)?,
                "S" => self.sample_steps = parse_val(k, v)?,
                "s_scale" => self.s_scale = parse_val(k, v)?,
                "ae_epochs" => self.ae_epochs = parse_val(k, v)?,
                "ae_ils" => self.ae_ils = parse_val(k, v)?,
                "denoiser_ils" => self.denoiser_ils = parse_val(k, v)?,
                "c1" => self.c1 = parse_val(k, v)?,
                "c2" => self.c2 = parse_val(k, v)?,
                "latent_channels" => self.latent_channels = parse_val(k, v)?,
                "ils_heads" => self.ils_heads = parse_val(k, v)?,
                "snapshot" => self.snapshot = v.clone(),
                _ => return config(format!("unknown config key `{k}`")),
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text).map_err(|e| Error::Configuration(e.to_string()))?;
        let mut c = TrainConfig::default();
        c.apply(&kv)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let gamma = self.gamma.map_or("none".to_string(), |g| format!("{g:?}"));
        let rows: [(&str, String); 23] = [
            ("regime", self.regime.name().into()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("lambda", format!("{:?}", self.lambda)),
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("gamma", gamma),
            ("y_real", format!("{:?}", self.y_real)),
            ("y_gen", format!("{:?}", self.y_gen)),
            ("use_ils", self.use_ils.to_string()),
            ("T", self.diffusion_steps.to_string()),
            ("S", self.sample_steps.to_string()),
            ("s_scale", format!("{:?}", self.s_scale)),
            ("ae_epochs", self.ae_epochs.to_string()),
            ("ae_ils", self.ae_ils.to_string()),
            ("denoiser_ils", self.denoiser_ils.to_string()),
            ("c1", self.c1.to_string()),
            ("c2", self.c2.to_string()),
            ("latent_channels", self.latent_channels.to_string()),
            ("ils_heads", self.ils_heads.to_string()),
            ("snapshot", self.snapshot.clone()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_some() && self.regime != Regime::Cgan {
            return config(format!(
                "WOL weight gamma does not apply to the {} regime, which predicts noise",
                self.regime.name()
            ));
        }
        if self.batch_size == 0 {
            return config("batch_size must be ≥ 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config("lr must be positive");
        }
        if self.sample_steps == 0 {
            return config("S must be ≥ 1");
        }
        if self.regime.samples() {
            make_schedule(self.diffusion_steps, self.s_scale)?.subsequence(self.sample_steps)?;
        }
        self.weights().validate()?;
        self.generator().validate()?;
        if self.regime == Regime::Lbbdm {
            self.autoencoder().validate()?;
        }
        if self.regime.samples() {
            self.denoiser((1, 1), 1).validate()?;
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        let d = LossWeights::default();
        LossWeights {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma.unwrap_or(d.gamma),
            y_real: self.y_real,
            y_gen: self.y_gen,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            c1: self.c1,
            c2: self.c2,
            latent_channels: self.latent_channels,
            use_ils: self.use_ils,
            ils_heads: self.ils_heads,
            ..GeneratorConfig::toy()
        }
    }

    pub fn autoencoder(&self) -> GeneratorConfig {
        GeneratorConfig {
            c1: self.c1,
            c2: self.c2,
            latent_channels: self.latent_channels,
            second_bottleneck: Some(self.latent_channels),
            use_ils: self.ae_ils,
            ils_heads: self.ils_heads,
            ..GeneratorConfig::autoencoder()
        }
    }

    pub fn denoiser(&self, shape: (usize, usize), channels: usize) -> DenoiserConfig {
        let use_ils = match self.regime {
            Regime::BbdmIls => true,
            Regime::Lbbdm => self.denoiser_ils,
            _ => false,
        };
        DenoiserConfig { use_ils, ils_heads: self.ils_heads, c1: 2 * self.c1, c2: self.c2, ..DenoiserConfig::toy(shape, channels) }
    }

    pub fn schedule(&self) -> Result<BridgeSchedule> {
        make_schedule(self.diffusion_steps, self.s_scale)
    }
}

/// Dataset facts a checkpoint needs at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct DataInfo {
    pub normalization: NormalizationSpec,
    pub anthro_scale: AnthroScale,
    pub taxel_area_m2: f64,
    pub pressure_shape: (usize, usize),
    pub depth_shape: (usize, usize),
    pub splits: String,
    pub dataset_seed: u64,
}

impl DataInfo {
    pub fn of(ds: &Dataset) -> Result<Self> {
        let first = ds.samples.first().ok_or_else(|| Error::DegenerateInput("empty dataset".into()))?;
        let m = &ds.manifest;
        let ids = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        Ok(DataInfo {
            normalization: m.normalization,
            anthro_scale: m.anthro_scale,
            taxel_area_m2: first.pressure.taxel_area_m2(),
            pressure_shape: ds.pressure_shape(),
            depth_shape: ds.depth_shape(),
            splits: format!("{}|{}|{}", ids(&m.splits.train), ids(&m.splits.val), ids(&m.splits.test)),
            dataset_seed: m.seed,
        })
    }

    pub fn global_max(&self) -> Result<f64> {
        self.normalization
            .global_max_kpa
            .ok_or_else(|| Error::Configuration("training needs global pressure normalization".into()))
    }
}

/// One row of the per-epoch CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub values: Vec<(String, f64)>,
}

/// Everything needed to reproduce and identify a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub data: DataInfo,
    pub epochs_run: usize,
    pub history: Vec<EpochRow>,
    /// Autoencoder checksum for `lbbdm`.
    pub ae_checksum: Option<String>,
}

impl RunManifest {
    /// Stable id derived from the configuration and the data description.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_text());
        h.update(format!("{:?}", self.data));
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run_id={}", self.run_id());
        s.push_str(&self.config.to_text());
        let d = &self.data;
        match d.normalization.global_max_kpa {
            Some(g) => {
                let _ = writeln!(s, "data.norm.global_max_kpa={g:?}");
            }
            None => s.push_str("data.norm.global_max_kpa=none\n"),
        }
        let _ = writeln!(s, "data.anthro.mass_max={:?}", d.anthro_scale.mass_max);
        let _ = writeln!(s, "data.anthro.height_max={:?}", d.anthro_scale.height_max);
        let _ = writeln!(s, "data.taxel_area_m2={:?}", d.taxel_area_m2);
        let _ = writeln!(s, "data.pressure_shape={}x{}", d.pressure_shape.0, d.pressure_shape.1);
        let _ = writeln!(s, "data.depth_shape={}x{}", d.depth_shape.0, d.depth_shape.1);
        let _ = writeln!(s, "data.splits={}", d.splits);
        let _ = writeln!(s, "data.seed={}", d.dataset_seed);
        let _ = writeln!(s, "epochs_run={}", self.epochs_run);
        if let Some(c) = &self.ae_checksum {
            let _ = writeln!(s, "ae_checksum={c}");
        }
        for row in &self.history {
            let vals: Vec<String> = row.values.iter().map(|(k, v)| format!("{k}:{v:?}")).collect();
            let _ = writeln!(s, "history.{}={}", row.epoch, vals.join(";"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg_kv = BTreeMap::new();
        let mut rest = BTreeMap::new();
        for (k, v) in kv {
            if CONFIG_KEYS.contains(&k.as_str()) {
                cfg_kv.insert(k, v);
            } else {
                rest.insert(k, v);
            }
        }
        let mut config = TrainConfig::default();
        config.apply(&cfg_kv).map_err(|e| Error::Manifest(e.to_string()))?;
        let get = |k: &str| rest.get(k).ok_or_else(|| Error::Manifest(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Manifest(format!("bad `{k}`"))) };
        let shape = |k: &str| -> Result<(usize, usize)> {
            let v = get(k)?;
            let (a, b) = v.split_once('x').ok_or_else(|| Error::Manifest(format!("bad `{k}`")))?;
            Ok((
                a.parse().map_err(|_| Error::Manifest(format!("bad `{k}`")))?,
                b.parse().map_err(|_| Error::Manifest(format!("bad `{k}`")))?,
            ))
        };
        let normalization = match get("data.norm.global_max_kpa")?.as_str() {
            "none" => NormalizationSpec::individual(),
            _ => NormalizationSpec::global(num("data.norm.global_max_kpa")?),
        };
        let data = DataInfo {
            normalization,
            anthro_scale: AnthroScale { mass_max: num("data.anthro.mass_max")?, height_max: num("data.anthro.height_max")? },
            taxel_area_m2: num("data.taxel_area_m2")?,
            pressure_shape: shape("data.pressure_shape")?,
            depth_shape: shape("data.depth_shape")?,
            splits: get("data.splits")?.clone(),
            dataset_seed: get("data.seed")?.parse().map_err(|_| Error::Manifest("bad data.seed".into()))?,
        };
        let mut history = Vec::new();
        for (k, v) in &rest {
            if let Some(e) = k.strip_prefix("history.") {
                let epoch = e.parse().map_err(|_| Error::Manifest(format!("bad `{k}`")))?;
                let values = v
                    .split(';')
                    .filter(|x| !x.is_empty())
                    .map(|kv| {
                        let (a, b) = kv.split_once(':').ok_or_else(|| Error::Manifest(format!("bad `{k}`")))?;
                        Ok((a.to_string(), b.parse().map_err(|_| Error::Manifest(format!("bad `{k}`")))?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                history.push(EpochRow { epoch, values });
            }
        }
        history.sort_by_key(|r| r.epoch);
        let m = RunManifest {
            config,
            data,
            epochs_run: get("epochs_run")?.parse().map_err(|_| Error::Manifest("bad epochs_run".into()))?,
            history,
            ae_checksum: rest.get("ae_checksum").cloned(),
        };
        if let Some(id) = rest.get("run_id") {
            if *id != m.run_id() {
                return Err(Error::Manifest(format!("run id {id} does not match contents ({})", m.run_id())));
            }
        }
        Ok(m)
    }
}

pub fn history_csv(rows: &[EpochRow]) -> String {
    let mut s = String::new();
    if let Some(first) = rows.first() {
        let head: Vec<&str> = first.values.iter().map(|(k, _)| k.as_str()).collect();
        let _ = writeln!(s, "epoch,{}", head.join(","));
    }
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|(_, v)| format!("{v:?}")).collect();
        let _ = writeln!(s, "{},{}", r.epoch, vals.join(","));
    }
    s
}

// -------------------------------------------------------------- checkpoints

pub fn params_to_container(ps: &ParamSet) -> Result<Container> {
    let mut data = Vec::new();
    let mut index = Vec::new();
    for (name, t) in ps.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        index.push(format!("{name}:{}", dims.join("x")));
        data.extend_from_slice(t.data());
    }
    let n = data.len();
    Ok(Container::new(&[n], data)?.with("role", "params").with("params", index.join(";")))
}

pub fn params_from_container(c: &Container) -> Result<ParamSet> {
    if c.get("role")? != "params" {
        return Err(Error::Format("container does not hold parameters".into()));
    }
    let mut ps = ParamSet::new();
    let mut offset = 0;
    let index = c.get("params")?;
    for entry in index.split(';').filter(|e| !e.is_empty()) {
        let (name, dims) = entry.split_once(':').ok_or_else(|| Error::Format(format!("bad param entry `{entry}`")))?;
        let shape: Vec<usize> = if dims.is_empty() {
            vec![]
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dims `{dims}`"))))
                .collect::<Result<_>>()?
        };
        let n: usize = shape.iter().product();
        let Some(vals) = c.data.get(offset..offset + n) else {
            return Err(Error::Length(format!("parameter `{name}` runs past the payload")));
        };
        ps.insert(name, Tensor::param(&shape, vals.to_vec())?)?;
        offset += n;
    }
    if offset != c.data.len() {
        return Err(Error::Length("parameter payload has trailing values".into()));
    }
    Ok(ps)
}

pub fn checksum(ps: &ParamSet) -> String {
    Sha256::digest(ps.canonical_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: RunManifest,
    /// `generator`, `discriminator`, `denoiser`, `autoencoder`.
    pub nets: BTreeMap<String, ParamSet>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const HISTORY_FILE: &str = "metrics.csv";

impl Checkpoint {
    pub fn net(&self, name: &str) -> Result<&ParamSet> {
        self.nets
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("checkpoint has no `{name}` network")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ps) in &self.nets {
            crate::data::write_container(&dir.join(format!("{name}.bprs")), &params_to_container(ps)?)?;
        }
        let csv = dir.join(HISTORY_FILE);
        fs::write(&csv, self.manifest.history_csv()).map_err(|e| Error::io(&csv, e))?;
        // manifest last: its presence marks a complete checkpoint
        let tmp = dir.join("manifest.txt.tmp");
        fs::write(&tmp, self.manifest.to_text()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE)).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = RunManifest::parse(&text)?;
        let names: &[&str] = match manifest.config.regime {
            Regime::Cgan => &["generator", "discriminator"],
            Regime::Bbdm | Regime::BbdmIls => &["denoiser"],
            Regime::Lbbdm => &["autoencoder", "denoiser"],
        };
        let mut nets = BTreeMap::new();
        for n in names {
            let c = crate::data::read_container(&dir.join(format!("{n}.bprs")))?;
            nets.insert(n.to_string(), params_from_container(&c)?);
        }
        if let (Some(sum), Some(ae)) = (&manifest.ae_checksum, nets.get("autoencoder")) {
            if checksum(ae) != *sum {
                return Err(Error::Manifest("autoencoder checksum mismatch".into()));
            }
        }
        Ok(Checkpoint { manifest, nets })
    }
}

// ----------------------------------------------------------------- helpers

fn batches(idx: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    v.chunks(size).map(<[usize]>::to_vec).collect()
}

fn adam(cfg: &TrainConfig) -> Adam {
    Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() })
}

fn require_split(ds: &Dataset, split: Split) -> Result<Vec<usize>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::DegenerateInput(format!("{} split is empty", split.name())));
    }
    Ok(idx)
}

/// Depth pooled onto the pressure grid.
fn depth_on_mat(ds: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let d = ds.depth_batch(idx)?;
    let (dh, _) = ds.depth_shape();
    let (ph, _) = ds.pressure_shape();
    let k = dh / ph;
    Ok(if k > 1 { d.avg_pool2d(k)? } else { d })
}

/// Physical map from a normalized network output, clamped at zero.
pub fn to_physical(values: &[f64], info: &DataInfo, divisor: f64) -> Result<PressureMap> {
    let (h, w) = info.pressure_shape;
    PressureMap::new(h, w, values.iter().map(|v| v.max(0.0) * divisor).collect(), info.taxel_area_m2)
}

/// Validation MSE (normalized units) and BM MAE (kg) of batched predictions.
fn val_stats(ds: &Dataset, idx: &[usize], info: &DataInfo, pred: &Tensor) -> Result<(f64, f64)> {
    let (target, div) = ds.pressure_batch(idx)?;
    let mse = metrics::mse(target.data(), pred.data())?;
    let per = pred.len() / idx.len();
    let mut err = 0.0;
    for (k, i) in idx.iter().enumerate() {
        let p = to_physical(&pred.data()[k * per..(k + 1) * per], info, div[k])?;
        err += (ds.samples[*i].anthro.mass_kg - mass_from_pressure(&p)?).abs();
    }
    Ok((mse, err / idx.len() as f64))
}

// -------------------------------------------------------------------- cGAN

pub fn generator_predict(ps: &ParamSet, cfg: &GeneratorConfig, depth: &Tensor, anthro: &[AnthroRecord], scale: &AnthroScale) -> Result<Tensor> {
    let _g = no_grad();
    models::generator_forward(ps, cfg, depth, Some(anthro), Some(scale))
}

fn eval_generator(ds: &Dataset, idx: &[usize], info: &DataInfo, ps: &ParamSet, gcfg: &GeneratorConfig) -> Result<(f64, f64)> {
    let mut preds = Vec::new();
    for chunk in idx.chunks(32) {
        let d = ds.depth_batch(chunk)?;
        preds.extend_from_slice(generator_predict(ps, gcfg, &d, &ds.anthro(chunk), &info.anthro_scale)?.data());
    }
    let (h, w) = info.pressure_shape;
    val_stats(ds, idx, info, &Tensor::from_vec(&[idx.len(), 1, h, w], preds)?)
}

pub fn train_cgan(ds: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.regime != Regime::Cgan {
        return config("train_cgan needs the cgan regime");
    }
    cfg.validate()?;
    let info = DataInfo::of(ds)?;
    info.global_max()?;
    let train = require_split(ds, Split::Train)?;
    let val = require_split(ds, Split::Val)?;
    let gcfg = cfg.generator();
    let dcfg = DiscriminatorConfig { c1: cfg.c1, c2: cfg.c2, ..DiscriminatorConfig::toy_conditional() };
    let w = cfg.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = models::init_generator(&gcfg, &mut rng)?;
    let mut d = models::init_discriminator(&dcfg, &mut rng)?;
    let (mut opt_g, mut opt_d) = (adam(cfg), adam(cfg));

    let mut history = Vec::new();
    let (mse0, bm0) = eval_generator(ds, &val, &info, &g, &gcfg)?;
    history.push(EpochRow {
        epoch: 0,
        values: vec![
            ("loss_d".into(), f64::NAN),
            ("loss_g".into(), f64::NAN),
            ("adversarial".into(), f64::NAN),
            ("ssim_loss".into(), f64::NAN),
            ("l2".into(), f64::NAN),
            ("wol_kpa".into(), f64::NAN),
            ("val_mse".into(), mse0),
            ("val_bm_mae_kg".into(), bm0),
        ],
    });
    for epoch in 1..=cfg.epochs {
        let mut acc = [0.0; 6];
        let mut n = 0.0;
        for b in batches(&train, cfg.batch_size, &mut rng) {
            let depth = ds.depth_batch(&b)?;
            let (p, div) = ds.pressure_batch(&b)?;
            let anthro = ds.anthro(&b);
            let p_hat = models::generator_forward(&g, &gcfg, &depth, Some(&anthro), Some(&info.anthro_scale))?;

            let l_d = models::loss_discriminator_cond(&d, &dcfg, &depth, &p, &p_hat, &w)?;
            d.zero_grads();
            l_d.backward()?;
            opt_d.step(&mut d)?;

            let l_g = models::loss_generator_cond(&d, &dcfg, &depth, &p, &p_hat, &div, &w)?;
            g.zero_grads();
            l_g.total.backward()?;
            opt_g.step(&mut g)?;

            let vals = [l_d.item()?, l_g.total.item()?, l_g.adversarial, l_g.ssim, l_g.l2, l_g.wol];
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
            n += 1.0;
        }
        let (mse, bm) = eval_generator(ds, &val, &info, &g, &gcfg)?;
        let names = ["loss_d", "loss_g", "adversarial", "ssim_loss", "l2", "wol_kpa"];
        let mut values: Vec<(String, f64)> = names.iter().zip(acc).map(|(k, a)| (k.to_string(), a / n)).collect();
        values.push(("val_mse".into(), mse));
        values.push(("val_bm_mae_kg".into(), bm));
        history.push(EpochRow { epoch, values });
    }
    let manifest = RunManifest { config: cfg.clone(), data: info, epochs_run: cfg.epochs, history, ae_checksum: None };
    let nets = BTreeMap::from([("generator".to_string(), g), ("discriminator".to_string(), d)]);
    Ok(Checkpoint { manifest, nets })
}

// -------------------------------------------------------------------- bridge

/// Bridge training pairs: `x0` (target) and `y` (condition) as `[N, C, H, W]`.
struct BridgeBatch {
    x0: Tensor,
    y: Tensor,
    anthro: Vec<AnthroRecord>,
}

/// `x_t` and regression target for one batch with per-sample `t`.
fn bridge_inputs(b: &BridgeBatch, ts: &[usize], sched: &BridgeSchedule, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::with_capacity(ts.len());
    let mut targets = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let (x0, y) = (b.x0.index0(i)?, b.y.index0(i)?);
        let eps = standard_normal(x0.shape(), rng);
        xs.push(bridge::forward_diffuse(&x0, &y, t, &eps, sched)?);
        targets.push(bridge::training_target(&x0, &y, t, &eps, sched)?);
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&targets)?))
}

fn denoise(ps: &ParamSet, dcfg: &DenoiserConfig, x_t: &Tensor, y: &Tensor, ts: &[usize], b_anthro: &[AnthroRecord], scale: &AnthroScale) -> Result<Tensor> {
    let anthro = dcfg.use_ils.then_some((b_anthro, Some(scale)));
    models::denoiser_forward(ps, dcfg, x_t, y, ts, anthro)
}

struct BridgeRun<'a> {
    cfg: &'a TrainConfig,
    dcfg: DenoiserConfig,
    sched: BridgeSchedule,
    scale: AnthroScale,
}

impl BridgeRun<'_> {
    fn loss(&self, ps: &ParamSet, b: &BridgeBatch, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = b.anthro.len();
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=self.sched.steps())).collect();
        let (x_t, target) = bridge_inputs(b, &ts, &self.sched, rng)?;
        let eps_hat = denoise(ps, &self.dcfg, &x_t, &b.y, &ts, &b.anthro, &self.scale)?;
        models::mse_loss(&target, &eps_hat)
    }

    /// Trains on `train` and logs the objective on `val` (fixed noise).
    fn fit(&self, train: &[BridgeBatch], val: &[BridgeBatch], rng: &mut ChaCha8Rng) -> Result<(ParamSet, Vec<EpochRow>)> {
        let mut ps = models::init_denoiser(&self.dcfg, rng)?;
        let mut opt = adam(self.cfg);
        let mut history = Vec::new();
        let val_loss = |ps: &ParamSet| -> Result<f64> {
            let _g = no_grad();
            let mut vr = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
            let mut s = 0.0;
            for b in val {
                s += self.loss(ps, b, &mut vr)?.item()?;
            }
            Ok(s / val.len().max(1) as f64)
        };
        history.push(EpochRow { epoch: 0, values: vec![("train_loss".into(), f64::NAN), ("val_loss".into(), val_loss(&ps)?)] });
        for epoch in 1..=self.cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(rng);
            let mut acc = 0.0;
            for &k in &order {
                let l = self.loss(&ps, &train[k], rng)?;
                ps.zero_grads();
                l.backward()?;
                opt.step(&mut ps)?;
                acc += l.item()?;
            }
            history.push(EpochRow {
                epoch,
                values: vec![("train_loss".into(), acc / train.len() as f64), ("val_loss".into(), val_loss(&ps)?)],
            });
        }
        Ok((ps, history))
    }
}

fn pixel_batches(ds: &Dataset, idx: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BridgeBatch>> {
    batches(idx, size, rng)
        .into_iter()
        .map(|b| Ok(BridgeBatch { x0: ds.pressure_batch(&b)?.0, y: depth_on_mat(ds, &b)?, anthro: ds.anthro(&b) }))
        .collect()
}

pub fn train_bbdm(ds: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    if !matches!(cfg.regime, Regime::Bbdm | Regime::BbdmIls) {
        return config("train_bbdm needs the bbdm or bbdm-ils regime");
    }
    cfg.validate()?;
    let info = DataInfo::of(ds)?;
    info.global_max()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = pixel_batches(ds, &require_split(ds, Split::Train)?, cfg.batch_size, &mut rng)?;
    let val = pixel_batches(ds, &require_split(ds, Split::Val)?, cfg.batch_size, &mut rng)?;
    let run = BridgeRun { cfg, dcfg: cfg.denoiser(info.pressure_shape, 1), sched: cfg.schedule()?, scale: info.anthro_scale };
    let (ps, history) = run.fit(&train, &val, &mut rng)?;
    let manifest = RunManifest { config: cfg.clone(), data: info, epochs_run: cfg.epochs, history, ae_checksum: None };
    Ok(Checkpoint { manifest, nets: BTreeMap::from([("denoiser".to_string(), ps)]) })
}

// --------------------------------------------------------------------- LBBDM

/// Pretrained autoencoder. Once frozen its parameters must not change;
/// [`Autoencoder::verify`] compares against the checksum taken at freeze
/// time.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: GeneratorConfig,
    pub params: ParamSet,
    frozen: Option<String>,
    pub history: Vec<EpochRow>,
}

impl Autoencoder {
    pub fn new(cfg: GeneratorConfig, params: ParamSet) -> Self {
        Autoencoder { cfg, params, frozen: None, history: vec![] }
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = Some(checksum(&self.params));
        self
    }

    pub fn checksum(&self) -> Option<&str> {
        self.frozen.as_deref()
    }

    pub fn verify(&self) -> Result<()> {
        match &self.frozen {
            None => contract("autoencoder is not frozen"),
            Some(sum) if *sum != checksum(&self.params) => contract("frozen autoencoder parameters changed"),
            Some(_) => Ok(()),
        }
    }

    /// Latent of normalized 27×64 maps, informed when the AE uses ILS.
    pub fn encode(&self, x: &Tensor, anthro: &[AnthroRecord], scale: &AnthroScale) -> Result<Tensor> {
        let _g = no_grad();
        let enc = models::encode(&self.params, &self.cfg, x)?;
        models::inform(&self.params, &self.cfg, &enc.latent, Some(anthro), Some(scale))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let _g = no_grad();
        models::decode(&self.params, &self.cfg, z, None)
    }
}

/// Unconditional self-reconstruction on both domains with one shared
/// autoencoder.
pub fn pretrain_autoencoder(ds: &Dataset, cfg: &TrainConfig, ae_cfg: &GeneratorConfig) -> Result<Autoencoder> {
    ae_cfg.validate()?;
    if !ae_cfg.skips.is_empty() {
        return config("autoencoder pretraining requires skips to be disabled");
    }
    let info = DataInfo::of(ds)?;
    if ae_cfg.in_shape != info.pressure_shape || ae_cfg.in_pool != 1 {
        return config("autoencoder must take maps on the pressure grid");
    }
    let w = LossWeights { gamma: 0.0, ..cfg.weights() };
    let dcfg = DiscriminatorConfig { c1: cfg.c1, c2: cfg.c2, ..DiscriminatorConfig::toy_unconditional() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut g = models::init_generator(ae_cfg, &mut rng)?;
    let mut d = models::init_discriminator(&dcfg, &mut rng)?;
    let (mut opt_g, mut opt_d) = (adam(cfg), adam(cfg));
    let train = require_split(ds, Split::Train)?;
    let val = require_split(ds, Split::Val)?;
    let scale = info.anthro_scale;
    let recon = |ps: &ParamSet, x: &Tensor, a: &[AnthroRecord]| -> Result<Tensor> {
        let enc = models::encode(ps, ae_cfg, x)?;
        let z = models::inform(ps, ae_cfg, &enc.latent, Some(a), Some(&scale))?;
        models::decode(ps, ae_cfg, &z, None)
    };
    let val_ssim = |ps: &ParamSet| -> Result<f64> {
        let _g = no_grad();
        let x = ds.pressure_batch(&val)?.0;
        let l = models::ssim_loss(&x, &recon(ps, &x, &ds.anthro(&val))?)?;
        Ok(1.0 - l.item()?)
    };
    let mut history = vec![EpochRow {
        epoch: 0,
        values: vec![("loss_d".into(), f64::NAN), ("loss_g".into(), f64::NAN), ("val_ssim".into(), val_ssim(&g)?)],
    }];
    for epoch in 1..=cfg.ae_epochs {
        let (mut ld, mut lg, mut n) = (0.0, 0.0, 0.0);
        for b in batches(&train, cfg.batch_size, &mut rng) {
            let a = ds.anthro(&b);
            for x in [ds.pressure_batch(&b)?.0, depth_on_mat(ds, &b)?] {
                let x_hat = recon(&g, &x, &a)?;
                let (l_d, l_g) = models::loss_unconditional_pair(&d, &dcfg, &x, &x_hat, &w)?;
                d.zero_grads();
                l_d.backward()?;
                opt_d.step(&mut d)?;
                g.zero_grads();
                l_g.total.backward()?;
                opt_g.step(&mut g)?;
                ld += l_d.item()?;
                lg += l_g.total.item()?;
                n += 1.0;
            }
        }
        history.push(EpochRow {
            epoch,
            values: vec![("loss_d".into(), ld / n), ("loss_g".into(), lg / n), ("val_ssim".into(), val_ssim(&g)?)],
        });
    }
    let mut ae = Autoencoder::new(ae_cfg.clone(), g).freeze();
    ae.history = history;
    Ok(ae)
}

fn latent_batches(ds: &Dataset, ae: &Autoencoder, idx: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BridgeBatch>> {
    let scale = ds.manifest.anthro_scale;
    batches(idx, size, rng)
        .into_iter()
        .map(|b| {
            let a = ds.anthro(&b);
            Ok(BridgeBatch {
                x0: ae.encode(&ds.pressure_batch(&b)?.0, &a, &scale)?,
                y: ae.encode(&depth_on_mat(ds, &b)?, &a, &scale)?,
                anthro: a,
            })
        })
        .collect()
}

/// Bridge between frozen-AE latents of depth (`y`) and pressure (`x0`).
pub fn train_lbbdm(ds: &Dataset, ae: &Autoencoder, cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.regime != Regime::Lbbdm {
        return config("train_lbbdm needs the lbbdm regime");
    }
    cfg.validate()?;
    ae.verify()?;
    let info = DataInfo::of(ds)?;
    info.global_max()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = latent_batches(ds, ae, &require_split(ds, Split::Train)?, cfg.batch_size, &mut rng)?;
    let val = latent_batches(ds, ae, &require_split(ds, Split::Val)?, cfg.batch_size, &mut rng)?;
    let (c, h, w) = ae.cfg.latent_shape();
    let run = BridgeRun { cfg, dcfg: cfg.denoiser((h, w), c), sched: cfg.schedule()?, scale: info.anthro_scale };
    let (ps, mut history) = run.fit(&train, &val, &mut rng)?;
    ae.verify()?;
    for (row, ae_row) in history.iter_mut().zip(&ae.history) {
        row.values.extend(ae_row.values.iter().map(|(k, v)| (format!("ae_{k}"), *v)));
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        data: info,
        epochs_run: cfg.epochs,
        history,
        ae_checksum: ae.checksum().map(str::to_string),
    };
    let nets = BTreeMap::from([("autoencoder".to_string(), ae.params.clone()), ("denoiser".to_string(), ps)]);
    Ok(Checkpoint { manifest, nets })
}

/// Pretrains (unless given) and then trains the latent bridge.
pub fn run_lbbdm(ds: &Dataset, cfg: &TrainConfig, pretrained: Option<Autoencoder>) -> Result<Checkpoint> {
    let ae = match pretrained {
        Some(ae) => ae,
        None => pretrain_autoencoder(ds, cfg, &cfg.autoencoder())?,
    };
    train_lbbdm(ds, &ae, cfg)
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    match cfg.regime {
        Regime::Cgan => train_cgan(ds, cfg),
        Regime::Bbdm | Regime::BbdmIls => train_bbdm(ds, cfg),
        Regime::Lbbdm => run_lbbdm(ds, cfg, None),
    }
}

impl Checkpoint {
    /// The frozen autoencoder of an `lbbdm` checkpoint.
    pub fn autoencoder(&self) -> Result<Autoencoder> {
        let ae = Autoencoder::new(self.manifest.config.autoencoder(), self.net("autoencoder")?.clone()).freeze();
        if ae.checksum() != self.manifest.ae_checksum.as_deref() {
            return Err(Error::Manifest("autoencoder checksum mismatch".into()));
        }
        Ok(ae)
    }
}

// ----------------------------------------------------------------- inference

#[derive(Debug, Clone)]
pub struct Inference {
    /// Denormalized pressure in kPa.
    pub pressure: PressureMap,
    pub mass_kg: f64,
    /// Network evaluations used (1 for the generator, S for samplers).
    pub steps: usize,
}

/// One depth image (`[1, 1, H, W]`, normalized per image) to pressure.
/// `steps` overrides the sampler length for diffusion regimes.
pub fn infer(ckpt: &Checkpoint, depth: &Tensor, anthro: &AnthroRecord, steps: Option<usize>, seed: u64) -> Result<Inference> {
    let m = &ckpt.manifest;
    let cfg = &m.config;
    let info = &m.data;
    let (dh, dw) = info.depth_shape;
    if depth.shape() != [1, 1, dh, dw] {
        return Err(Error::Dimension(format!("depth must be [1, 1, {dh}, {dw}], got {:?}", depth.shape())));
    }
    let divisor = info.global_max()?;
    let scale = info.anthro_scale;
    let recs = [*anthro];
    let s = steps.unwrap_or(cfg.sample_steps);
    let (pred, used) = match cfg.regime {
        Regime::Cgan => {
            if steps.is_some_and(|s| s != 1) {
                return config("the cgan regime is a one-step generator");
            }
            (generator_predict(ckpt.net("generator")?, &cfg.generator(), depth, &recs, &scale)?, 1)
        }
        Regime::Bbdm | Regime::BbdmIls => {
            let k = dh / info.pressure_shape.0;
            let y = if k > 1 { depth.avg_pool2d(k)? } else { depth.clone() };
            let dcfg = cfg.denoiser(info.pressure_shape, 1);
            (sample_bridge(ckpt.net("denoiser")?, &dcfg, cfg, &y, &recs, &scale, s, seed)?, s)
        }
        Regime::Lbbdm => {
            let ae = ckpt.autoencoder()?;
            let k = dh / info.pressure_shape.0;
            let d = if k > 1 { depth.avg_pool2d(k)? } else { depth.clone() };
            let y = ae.encode(&d, &recs, &scale)?;
            let (c, h, w) = ae.cfg.latent_shape();
            let dcfg = cfg.denoiser((h, w), c);
            let z = sample_bridge(ckpt.net("denoiser")?, &dcfg, cfg, &y, &recs, &scale, s, seed)?;
            (ae.decode(&z)?, s)
        }
    };
    let pressure = to_physical(pred.data(), info, divisor)?;
    Ok(Inference { mass_kg: mass_from_pressure(&pressure)?, pressure, steps: used })
}

#[allow(clippy::too_many_arguments)]
fn sample_bridge(
    ps: &ParamSet,
    dcfg: &DenoiserConfig,
    cfg: &TrainConfig,
    y: &Tensor,
    recs: &[AnthroRecord],
    scale: &AnthroScale,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let _g = no_grad();
    let sched = cfg.schedule()?;
    let (x, _) = bridge::sample(
        y,
        |x_t, y, t| denoise(ps, dcfg, x_t, y, &vec![t; x_t.shape()[0]], recs, scale),
        &sched,
        steps,
        seed,
        false,
    )?;
    Ok(x)
}

/// Worker count from `BRIDGEPRESS_THREADS`, defaulting to all cores.
pub fn worker_threads() -> usize {
    std::env::var("BRIDGEPRESS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n: &usize| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs [`infer`] over many inputs on a worker pool. Chain `i` uses seed
/// `seed + i`, so results do not depend on the worker count.
pub fn infer_many(ckpt: &Checkpoint, inputs: &[(Tensor, AnthroRecord)], steps: Option<usize>, seed: u64) -> Result<Vec<Inference>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
    pool.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, (d, a))| infer(ckpt, d, a, steps, seed.wrapping_add(i as u64)))
            .collect()
    })
}
