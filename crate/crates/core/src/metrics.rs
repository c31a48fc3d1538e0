//! Evaluation metrics. Image metrics work in normalized units (peak 1);
//! `mse_kpa` and `bm_mae` need denormalized maps.

use std::fmt::Write as _;

use bridgepress_tensor::{no_grad, Conv2dSpec, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Cover;
use crate::error::{contract, dimension, Error, Result};
use crate::models::{gaussian_window, ssim_per_sample, ssim_window, SSIM_C1, SSIM_C2, SSIM_SIGMA};
use crate::physics::{mass_from_pressure, PressureMap};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const DEFAULT_MPPA_TOLERANCE: f64 = 0.01;
/// Posture-IoU threshold as a fraction of the dataset's global maximum.
pub const DEFAULT_IOU_FRACTION: f64 = 0.01;
pub const FRECHET_EPS: f64 = 1e-6;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return dimension(format!("metric inputs differ in size: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    /// 11×11 Gaussian window (σ = 1.5) shrunk to fit, dynamic range 1.
    pub fn standard(h: usize, w: usize) -> Self {
        SsimParams { window: ssim_window(h, w), sigma: SSIM_SIGMA, c1: SSIM_C1, c2: SSIM_C2 }
    }
}

/// Mean SSIM over all window placements that fit inside the `h×w` grid.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, prm: &SsimParams) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != h * w {
        return dimension(format!("{} values for a {h}×{w} grid", a.len()));
    }
    if prm.window == 0 || prm.window > h.min(w) {
        return dimension(format!("window {} does not fit {h}×{w}", prm.window));
    }
    let _g = no_grad();
    let ta = Tensor::from_vec(&[1, 1, h, w], a.to_vec())?;
    let tb = Tensor::from_vec(&[1, 1, h, w], b.to_vec())?;
    let win = gaussian_window(prm.window, prm.sigma);
    ssim_per_sample(&ta, &tb, &win, prm.c1, prm.c2)?.item().map_err(Error::from)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

pub fn mssim(pairs: &[(&[f64], &[f64])], h: usize, w: usize, prm: &SsimParams) -> Result<f64> {
    Ok(mean(pairs.iter().map(|(a, b)| ssim(a, b, h, w, prm)).collect::<Result<Vec<_>>>()?))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    Ok(mean(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y))))
}

/// `10·log10(peak²/MSE)`, capped for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

pub fn mpsnr(pairs: &[(&[f64], &[f64])], peak: f64) -> Result<f64> {
    Ok(mean(pairs.iter().map(|(a, b)| psnr(a, b, peak)).collect::<Result<Vec<_>>>()?))
}

/// Fraction of pixels with `|a − b| ≤ tolerance`.
pub fn mppa(a: &[f64], b: &[f64], tolerance: f64) -> Result<f64> {
    same_len(a, b)?;
    if !(tolerance >= 0.0) {
        return contract(format!("MPPA tolerance must be ≥ 0, got {tolerance}"));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| (*x - *y).abs() <= tolerance).count() as f64 / a.len() as f64)
}

pub fn mse_kpa(a: &PressureMap, b: &PressureMap) -> Result<f64> {
    if a.is_normalized() || b.is_normalized() {
        return contract("mse_kpa needs denormalized maps");
    }
    if a.shape() != b.shape() {
        return dimension(format!("maps {:?} vs {:?}", a.shape(), b.shape()));
    }
    mse(a.values(), b.values())
}

/// IoU of the supports `{v > threshold}`.
pub fn posture_iou(a: &[f64], b: &[f64], threshold: f64) -> Result<f64> {
    same_len(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (ia, ib) = (*x > threshold, *y > threshold);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        return Err(Error::DegenerateInput("both pressure supports are empty".into()));
    }
    Ok(inter as f64 / union as f64)
}

pub enum MassReference<'a> {
    /// Masses integrated from reference maps.
    Maps(&'a [PressureMap]),
    /// Externally measured masses in kg.
    Measured(&'a [f64]),
}

/// Mean `|M_ref − M(pred)|` in kg.
pub fn bm_mae(preds: &[PressureMap], refs: MassReference<'_>) -> Result<f64> {
    let masses: Vec<f64> = match refs {
        MassReference::Maps(m) => m.iter().map(mass_from_pressure).collect::<Result<_>>()?,
        MassReference::Measured(m) => m.to_vec(),
    };
    if masses.len() != preds.len() {
        return Err(Error::Length(format!("{} predictions vs {} references", preds.len(), masses.len())));
    }
    if preds.is_empty() {
        return Err(Error::DegenerateInput("no samples".into()));
    }
    let errs = preds
        .iter()
        .zip(&masses)
        .map(|(p, m)| Ok((m - mass_from_pressure(p)?).abs()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(errs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    /// Set when a covariance was rank-deficient and `εI` was added.
    pub regularized: bool,
}

fn moments(feats: &[Vec<f64>], dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = feats.len();
    let mu = DMatrix::from_fn(dim, 1, |i, _| feats.iter().map(|f| f[i]).sum::<f64>() / n as f64);
    let mut cov = DMatrix::zeros(dim, dim);
    for f in feats {
        let d = DMatrix::from_fn(dim, 1, |i, _| f[i] - mu[i]);
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    let sym = (&cov + cov.transpose()) * 0.5;
    (mu, sym)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

fn is_rank_deficient(m: &DMatrix<f64>) -> bool {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.iter().cloned().fold(0.0, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= 1e-12 * max
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the trace of the product
/// root taken as `tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetResult> {
    let dim = a.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || a.iter().chain(b).any(|f| f.len() != dim) {
        return dimension("feature vectors must be non-empty and share one dimension");
    }
    if a.len() < dim + 1 || b.len() < dim + 1 {
        return Err(Error::DegenerateInput(format!(
            "need ≥ {} samples per set for {dim}-d features, got {} and {}",
            dim + 1,
            a.len(),
            b.len()
        )));
    }
    let (mu1, mut s1) = moments(a, dim);
    let (mu2, mut s2) = moments(b, dim);
    let mut regularized = false;
    for s in [&mut s1, &mut s2] {
        if is_rank_deficient(s) {
            *s += DMatrix::identity(dim, dim) * FRECHET_EPS;
            regularized = true;
        }
    }
    // √Σ₁Σ₂√Σ₁ = (√Σ₂√Σ₁)ᵀ(√Σ₂√Σ₁), so its root's trace is the sum of
    // singular values of √Σ₂√Σ₁; this avoids squaring small eigenvalues
    let prod = psd_sqrt(&s2) * psd_sqrt(&s1);
    let tr_root: f64 = prod.singular_values().iter().sum();
    let diff = &mu1 - &mu2;
    let d = diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_root;
    Ok(FrechetResult { distance: d.max(0.0), regularized })
}

/// Fixed-seed random convolutional projection used as the Fréchet feature
/// extractor: one 3×3 stride-2 conv with ReLU, then per-channel spatial
/// mean and max.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    weight: Tensor,
}

impl RandomConvFeatures {
    pub const CHANNELS: usize = 4;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = bridgepress_tensor::params::he_uniform(&mut rng, &[Self::CHANNELS, 1, 3, 3], 9);
        RandomConvFeatures { weight: w.detach() }
    }

    pub fn dim(&self) -> usize {
        2 * Self::CHANNELS
    }

    pub fn extract(&self, values: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        let _g = no_grad();
        let x = Tensor::from_vec(&[1, 1, h, w], values.to_vec())?;
        let f = x.conv2d(&self.weight, None, Conv2dSpec { stride: 2, pad: 1 })?.relu();
        let per = f.len() / Self::CHANNELS;
        let mut out = Vec::with_capacity(self.dim());
        for c in f.data().chunks(per) {
            out.push(c.iter().sum::<f64>() / per as f64);
        }
        for c in f.data().chunks(per) {
            out.push(c.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        Ok(out)
    }
}

/// Per-sample metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub cover: Cover,
    pub mppa: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub mse_kpa: f64,
    pub iou: f64,
    pub mass_abs_err_kg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSettings {
    pub mppa_tolerance: f64,
    pub iou_fraction: f64,
    /// kPa divisor taking maps to the normalized (peak 1) space.
    pub global_max_kpa: f64,
}

impl MetricSettings {
    pub fn new(global_max_kpa: f64) -> Self {
        MetricSettings { mppa_tolerance: DEFAULT_MPPA_TOLERANCE, iou_fraction: DEFAULT_IOU_FRACTION, global_max_kpa }
    }
}

/// One evaluation pair: denormalized prediction and reference.
pub struct EvalPair<'a> {
    pub id: String,
    pub cover: Cover,
    pub pred: &'a PressureMap,
    pub reference: &'a PressureMap,
    /// Measured mass; otherwise the reference map's integrated mass is used.
    pub mass_kg: Option<f64>,
}

pub fn sample_metrics(pair: &EvalPair<'_>, s: &MetricSettings) -> Result<SampleMetrics> {
    let (h, w) = pair.reference.shape();
    if pair.pred.shape() != (h, w) {
        return dimension(format!("prediction {:?} vs reference {:?}", pair.pred.shape(), (h, w)));
    }
    let g = s.global_max_kpa;
    let pn: Vec<f64> = pair.pred.values().iter().map(|v| v / g).collect();
    let rn: Vec<f64> = pair.reference.values().iter().map(|v| v / g).collect();
    let m_ref = match pair.mass_kg {
        Some(m) => m,
        None => mass_from_pressure(pair.reference)?,
    };
    Ok(SampleMetrics {
        id: pair.id.clone(),
        cover: pair.cover,
        mppa: mppa(&rn, &pn, s.mppa_tolerance)?,
        ssim: ssim(&rn, &pn, h, w, &SsimParams::standard(h, w))?,
        psnr: psnr(&rn, &pn, 1.0)?,
        mse_kpa: mse_kpa(pair.reference, pair.pred)?,
        iou: posture_iou(&rn, &pn, s.iou_fraction)?,
        mass_abs_err_kg: (m_ref - mass_from_pressure(pair.pred)?).abs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricMeans {
    pub count: usize,
    pub mppa: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub mse_kpa: f64,
    pub iou: f64,
    pub bm_mae_kg: f64,
}

impl MetricMeans {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a SampleMetrics>) -> Self {
        let rows: Vec<&SampleMetrics> = rows.into_iter().collect();
        let f = |g: fn(&SampleMetrics) -> f64| mean(rows.iter().map(|r| g(r)));
        MetricMeans {
            count: rows.len(),
            mppa: f(|r| r.mppa),
            ssim: f(|r| r.ssim),
            psnr: f(|r| r.psnr),
            mse_kpa: f(|r| r.mse_kpa),
            iou: f(|r| r.iou),
            bm_mae_kg: f(|r| r.mass_abs_err_kg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub settings: MetricSettings,
    pub rows: Vec<SampleMetrics>,
    pub overall: MetricMeans,
    pub by_cover: Vec<(Cover, MetricMeans)>,
    /// Fréchet distance over random-conv features; `None` when a set is
    /// too small for a covariance.
    pub frechet: Option<FrechetResult>,
}

impl MetricReport {
    pub fn build(pairs: &[EvalPair<'_>], settings: MetricSettings) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::DegenerateInput("nothing to evaluate".into()));
        }
        let rows = pairs.iter().map(|p| sample_metrics(p, &settings)).collect::<Result<Vec<_>>>()?;
        let overall = MetricMeans::of(&rows);
        let by_cover = Cover::ALL
            .iter()
            .filter(|c| rows.iter().any(|r| r.cover == **c))
            .map(|c| (*c, MetricMeans::of(rows.iter().filter(|r| r.cover == *c))))
            .collect();
        let fx = RandomConvFeatures::new(0);
        let feats = |use_pred: bool| {
            pairs
                .iter()
                .map(|p| {
                    let m = if use_pred { p.pred } else { p.reference };
                    let v: Vec<f64> = m.values().iter().map(|x| x / settings.global_max_kpa).collect();
                    fx.extract(&v, m.height(), m.width())
                })
                .collect::<Result<Vec<_>>>()
        };
        let frechet = if pairs.len() > fx.dim() {
            Some(frechet_distance(&feats(false)?, &feats(true)?)?)
        } else {
            None
        };
        Ok(MetricReport { settings, rows, overall, by_cover, frechet })
    }

    /// One row per sample, then one summary row per cover level and overall.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# mppa_tolerance={} iou_fraction={} global_max_kpa={}",
            self.settings.mppa_tolerance, self.settings.iou_fraction, self.settings.global_max_kpa
        );
        s.push_str("id,cover,count,mppa,ssim,psnr_db,mse_kpa2,posture_iou,bm_mae_kg\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},1,{},{},{},{},{},{}",
                r.id, r.cover.name(), r.mppa, r.ssim, r.psnr, r.mse_kpa, r.iou, r.mass_abs_err_kg
            );
        }
        let mut summary = |label: &str, cover: &str, m: &MetricMeans| {
            let _ = writeln!(
                s,
                "{label},{cover},{},{},{},{},{},{},{}",
                m.count, m.mppa, m.ssim, m.psnr, m.mse_kpa, m.iou, m.bm_mae_kg
            );
        };
        for (c, m) in &self.by_cover {
            summary("mean", c.name(), m);
        }
        summary("mean", "all", &self.overall);
        match &self.frechet {
            Some(f) => {
                let _ = writeln!(s, "# frechet_random_conv={} regularized={}", f.distance, f.regularized);
            }
            None => s.push_str("# frechet_random_conv=na\n"),
        }
        s
    }
}
