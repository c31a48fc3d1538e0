//! Pressure-map physics and preprocessing.
//!
//! A [`PressureMap`] stores pressures in kPa on a uniform taxel grid. Body
//! mass follows from force balance, `M = Σ pᵢ·Aᵢ / g`, with pressures
//! converted to Pa. Maps may be normalized for training; a normalized map
//! remembers its divisor and refuses physical queries until denormalized.

use crate::error::{config, contract, dimension, Error, Result};

pub const GRAVITY: f64 = 9.81;
pub const KPA_TO_PA: f64 = 1000.0;
/// Canonical mat grid after preprocessing (rows × columns).
pub const CANONICAL_SHAPE: (usize, usize) = (27, 64);
/// Canonical smoothing width.
pub const CANONICAL_SIGMA: f64 = 1.4;

#[derive(Debug, Clone, PartialEq)]
pub struct PressureMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    taxel_area_m2: f64,
    gravity: f64,
    /// Divisor applied by [`normalize`]; `None` in physical kPa space.
    normalized_by: Option<f64>,
}

impl PressureMap {
    /// Physical map in kPa. Values must be finite and non-negative.
    pub fn new(height: usize, width: usize, values: Vec<f64>, taxel_area_m2: f64) -> Result<Self> {
        if values.len() != height * width {
            return dimension(format!(
                "{height}×{width} grid needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        if !(taxel_area_m2.is_finite() && taxel_area_m2 > 0.0) {
            return config(format!("taxel area must be positive, got {taxel_area_m2}"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return contract(format!("pressure values must be finite and ≥ 0, found {v}"));
        }
        Ok(PressureMap { height, width, values, taxel_area_m2, gravity: GRAVITY, normalized_by: None })
    }

    /// Map already divided by `divisor` (e.g. a network output).
    pub fn new_normalized(
        height: usize,
        width: usize,
        values: Vec<f64>,
        taxel_area_m2: f64,
        divisor: f64,
    ) -> Result<Self> {
        if !(divisor.is_finite() && divisor > 0.0) {
            return config(format!("normalization divisor must be positive, got {divisor}"));
        }
        let mut p = Self::new(height, width, values, taxel_area_m2)?;
        p.normalized_by = Some(divisor);
        Ok(p)
    }

    pub fn zeros(height: usize, width: usize, taxel_area_m2: f64) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width], taxel_area_m2)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn taxel_area_m2(&self) -> f64 {
        self.taxel_area_m2
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn normalized_by(&self) -> Option<f64> {
        self.normalized_by
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized_by.is_some()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Same geometry and normalization state, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(self.height, self.width, values, self.taxel_area_m2)?;
        p.gravity = self.gravity;
        p.normalized_by = self.normalized_by;
        Ok(p)
    }

    /// `a·self + b·other`, used for linearity checks; coefficients must keep
    /// the result non-negative.
    pub fn lin_comb(&self, a: f64, other: &PressureMap, b: f64) -> Result<Self> {
        check_compatible(self, other)?;
        self.with_values(self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect())
    }
}

fn check_compatible(p: &PressureMap, q: &PressureMap) -> Result<()> {
    if p.shape() != q.shape() {
        return dimension(format!("pressure shapes {:?} and {:?} differ", p.shape(), q.shape()));
    }
    if p.normalized_by != q.normalized_by {
        return contract(format!(
            "normalization state differs: {:?} vs {:?}",
            p.normalized_by, q.normalized_by
        ));
    }
    Ok(())
}

/// Total body mass in kg supported by the map.
pub fn mass_from_pressure(p: &PressureMap) -> Result<f64> {
    if p.is_normalized() {
        return contract("mass_from_pressure needs a denormalized (kPa) map");
    }
    let sum_kpa: f64 = p.values.iter().sum();
    Ok(sum_kpa * KPA_TO_PA * p.taxel_area_m2 / p.gravity)
}

/// Mass-consistency loss `|Σᵢ (pᵢ − p̂ᵢ)|`.
pub fn wol(p: &PressureMap, p_hat: &PressureMap) -> Result<f64> {
    check_compatible(p, p_hat)?;
    Ok(p.values.iter().zip(&p_hat.values).map(|(a, b)| a - b).sum::<f64>().abs())
}

/// `Σᵢ |pᵢ − p̂ᵢ|`, an upper bound on [`wol`].
pub fn wol_l1(p: &PressureMap, p_hat: &PressureMap) -> Result<f64> {
    check_compatible(p, p_hat)?;
    Ok(p.values.iter().zip(&p_hat.values).map(|(a, b)| (a - b).abs()).sum())
}

/// Normalized 1-d Gaussian taps over `[-r, r]` with `r = ⌈3σ⌉`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return config(format!("gaussian sigma must be > 0, got {sigma}"));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / z).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian filter on a row-major grid with reflected borders.
pub fn smooth_grid(values: &[f64], height: usize, width: usize, sigma: f64) -> Result<Vec<f64>> {
    if values.len() != height * width {
        return dimension("grid size mismatch");
    }
    let k = gaussian_kernel_1d(sigma)?;
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * values[y * width + reflect_index(x as isize + j as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[reflect_index(y as isize + j as isize - r, height) * width + x])
                .sum();
        }
    }
    Ok(out)
}

pub fn gaussian_smooth(p: &PressureMap, sigma: f64) -> Result<PressureMap> {
    let out = smooth_grid(&p.values, p.height, p.width, sigma)?;
    // taps are non-negative; clear round-off below zero
    p.with_values(out.into_iter().map(|v| v.max(0.0)).collect())
}

/// Row-stochastic overlap weights mapping `src` cells onto `dst` cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = hi.min((j + 1) as f64) - lo.max(j as f64);
                    (overlap > 0.0).then_some((j, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted downsampling to `target` (rows, cols). The taxel area is
/// rescaled so the supported mass is unchanged.
pub fn resize_pressure(p: &PressureMap, target: (usize, usize)) -> Result<PressureMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return dimension("resize target must be non-empty");
    }
    if th > p.height || tw > p.width {
        return Err(Error::Unsupported(format!(
            "upsampling {}×{} to {th}×{tw}",
            p.height, p.width
        )));
    }
    let values = resize_grid(&p.values, p.height, p.width, th, tw);
    let area = p.taxel_area_m2 * (p.height * p.width) as f64 / (th * tw) as f64;
    let mut out = PressureMap::new(th, tw, values.into_iter().map(|v| v.max(0.0)).collect(), area)?;
    out.gravity = p.gravity;
    out.normalized_by = p.normalized_by;
    Ok(out)
}

/// Area-weighted resampling of a row-major grid (downsampling only).
pub fn resize_grid(values: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let wy = area_weights(h, th);
    let wx = area_weights(w, tw);
    let mut rows = vec![0.0; th * w];
    for (i, taps) in wy.iter().enumerate() {
        for &(j, a) in taps {
            for x in 0..w {
                rows[i * w + x] += a * values[j * w + x];
            }
        }
    }
    let mut out = vec![0.0; th * tw];
    for y in 0..th {
        for (i, taps) in wx.iter().enumerate() {
            out[y * tw + i] = taps.iter().map(|&(j, a)| a * rows[y * w + j]).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// One dataset-wide divisor; preserves cross-sample mass semantics.
    Global,
    /// Each map divided by its own maximum.
    Individual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec {
    pub mode: NormMode,
    pub global_max_kpa: Option<f64>,
}

impl NormalizationSpec {
    pub fn global(max_kpa: f64) -> Self {
        NormalizationSpec { mode: NormMode::Global, global_max_kpa: Some(max_kpa) }
    }

    pub fn individual() -> Self {
        NormalizationSpec { mode: NormMode::Individual, global_max_kpa: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == NormMode::Global {
            match self.global_max_kpa {
                Some(m) if m.is_finite() && m > 0.0 => {}
                other => return config(format!("global normalization needs a positive max, got {other:?}")),
            }
        }
        Ok(())
    }
}

pub fn normalize(p: &PressureMap, spec: &NormalizationSpec) -> Result<PressureMap> {
    spec.validate()?;
    if p.is_normalized() {
        return contract("map is already normalized");
    }
    let divisor = match spec.mode {
        NormMode::Global => spec.global_max_kpa.expect("validated"),
        NormMode::Individual => {
            let m = p.max();
            if m <= 0.0 {
                return Err(Error::DegenerateInput("all-zero map cannot be individually normalized".into()));
            }
            m
        }
    };
    let mut out = p.with_values(p.values.iter().map(|v| v / divisor).collect())?;
    out.normalized_by = Some(divisor);
    Ok(out)
}

/// Inverse of [`normalize`] using the divisor recorded on the map.
pub fn denormalize(p: &PressureMap, spec: &NormalizationSpec) -> Result<PressureMap> {
    let Some(divisor) = p.normalized_by else {
        return contract("map is not normalized");
    };
    if spec.mode == NormMode::Global && spec.global_max_kpa != Some(divisor) {
        return contract(format!(
            "map was normalized by {divisor}, spec says {:?}",
            spec.global_max_kpa
        ));
    }
    let mut out = p.with_values(p.values.iter().map(|v| v * divisor).collect())?;
    out.normalized_by = None;
    Ok(out)
}
