//! Toy-scale networks and their training objectives.
//!
//! All image tensors are `[N, C, H, W]`. Parameters live in one
//! [`ParamSet`] per network; a convolution `p` stores `p.w` as
//! `[Co, Ci, 3, 3]` (or `1×1`) and `p.b` as `[Co]`. Generator ILS
//! parameters sit under `ils.`, denoiser ILS parameters likewise.

use bridgepress_tensor::{no_grad, Conv2dSpec, ParamSet, Tensor};
use rand::Rng;

use bridgepress_tensor::params::{he_uniform, zeros_param};
use bridgepress_tensor::nn::{init_linear, linear};

use crate::error::{config, contract, dimension, Result};
use crate::ils::{ils_batch, init_ils_params, AnthroRecord, AnthroScale, IlsConfig, LatentTensor};

const LEAKY_SLOPE: f64 = 0.2;
const SAME: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1 };
const DOWN: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };
const POINT: Conv2dSpec = Conv2dSpec { stride: 1, pad: 0 };

fn init_conv<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, ci: usize, co: usize, k: usize, rng: &mut R) -> Result<()> {
    ps.insert(format!("{name}.w"), he_uniform(rng, &[co, ci, k, k], ci * k * k))?;
    ps.insert(format!("{name}.b"), zeros_param(&[co]))?;
    Ok(())
}

fn conv(ps: &ParamSet, name: &str, x: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.w"))?;
    let b = ps.get(&format!("{name}.b"))?;
    Ok(x.conv2d(w, Some(b), spec)?)
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => dimension(format!("{what} must be [N, C, H, W], got {s:?}")),
    }
}

fn down_extent(n: usize) -> usize {
    (n + 1) / 2
}

// ---------------------------------------------------------------- generator

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Input (depth) grid.
    pub in_shape: (usize, usize),
    /// Average-pool factor taking the input grid to the output grid.
    pub in_pool: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub c1: usize,
    pub c2: usize,
    /// `C_z`.
    pub latent_channels: usize,
    /// Encoder stages (0 and/or 1) whose features are concatenated into the
    /// matching decoder stage.
    pub skips: Vec<usize>,
    /// Extra 1×1 bottleneck width; the latent then has this many channels.
    pub second_bottleneck: Option<usize>,
    pub use_ils: bool,
    pub ils_heads: usize,
}

impl GeneratorConfig {
    /// Depth 54×128 → pressure 27×64 with both skips.
    pub fn toy() -> Self {
        GeneratorConfig {
            in_shape: (54, 128),
            in_pool: 2,
            in_channels: 1,
            out_channels: 1,
            c1: 4,
            c2: 8,
            latent_channels: 8,
            skips: vec![0, 1],
            second_bottleneck: None,
            use_ils: true,
            ils_heads: 2,
        }
    }

    /// Skip-free autoencoder with a second bottleneck, for latent bridge
    /// pretraining on 27×64 maps.
    pub fn autoencoder() -> Self {
        GeneratorConfig {
            in_shape: (27, 64),
            in_pool: 1,
            skips: vec![],
            second_bottleneck: Some(8),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.in_shape;
        if self.in_pool == 0 || h % self.in_pool != 0 || w % self.in_pool != 0 {
            return config(format!("input {h}×{w} not divisible by pool {}", self.in_pool));
        }
        if [self.c1, self.c2, self.latent_channels, self.in_channels, self.out_channels].contains(&0) {
            return config("generator widths must be positive");
        }
        if let Some(&bad) = self.skips.iter().find(|&&s| s > 1) {
            return config(format!("skip index {bad} is not an encoder stage (0 or 1)"));
        }
        if self.second_bottleneck.is_some() && !self.skips.is_empty() {
            return config("a second bottleneck requires skips to be disabled");
        }
        if self.second_bottleneck == Some(0) {
            return config("second bottleneck width must be positive");
        }
        if self.use_ils {
            self.ils_config().validate()?;
        }
        Ok(())
    }

    pub fn out_shape(&self) -> (usize, usize) {
        (self.in_shape.0 / self.in_pool, self.in_shape.1 / self.in_pool)
    }

    /// Channels of the latent fed to ILS and the decoder.
    pub fn latent_width(&self) -> usize {
        self.second_bottleneck.unwrap_or(self.latent_channels)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.out_shape();
        (self.latent_width(), down_extent(down_extent(h)), down_extent(down_extent(w)))
    }

    pub fn ils_config(&self) -> IlsConfig {
        IlsConfig { channels: self.latent_width(), heads: self.ils_heads }
    }
}

pub fn init_generator<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    init_conv(&mut ps, "enc0", cfg.in_channels, cfg.c1, 3, rng)?;
    init_conv(&mut ps, "enc1", cfg.c1, cfg.c2, 3, rng)?;
    init_conv(&mut ps, "bottleneck", cfg.c2, cfg.latent_channels, 3, rng)?;
    if let Some(cb) = cfg.second_bottleneck {
        init_conv(&mut ps, "bottleneck2", cfg.latent_channels, cb, 1, rng)?;
    }
    let cz = cfg.latent_width();
    let skip1 = if cfg.skips.contains(&1) { cfg.c2 } else { 0 };
    let skip0 = if cfg.skips.contains(&0) { cfg.c1 } else { 0 };
    init_conv(&mut ps, "dec1", cz + skip1, cfg.c2, 3, rng)?;
    init_conv(&mut ps, "dec0", cfg.c2 + skip0, cfg.c1, 3, rng)?;
    init_conv(&mut ps, "out", cfg.c1, cfg.out_channels, 3, rng)?;
    if cfg.use_ils {
        ps.extend_prefixed("ils", init_ils_params(&cfg.ils_config(), rng)?)?;
    }
    Ok(ps)
}

/// Encoder output: the latent plus the per-stage features used as skips.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub latent: Tensor,
    pub stage0: Tensor,
    pub stage1: Tensor,
}

pub fn encode(ps: &ParamSet, cfg: &GeneratorConfig, x: &Tensor) -> Result<Encoded> {
    let [_, c, h, w] = dims4(x, "generator input")?;
    if c != cfg.in_channels || (h, w) != cfg.in_shape {
        return dimension(format!(
            "generator expects [N, {}, {}, {}], got {:?}",
            cfg.in_channels, cfg.in_shape.0, cfg.in_shape.1, x.shape()
        ));
    }
    let x = if cfg.in_pool > 1 { x.avg_pool2d(cfg.in_pool)? } else { x.clone() };
    let stage0 = conv(ps, "enc0", &x, SAME)?.silu();
    let stage1 = conv(ps, "enc1", &stage0, DOWN)?.silu();
    let mut latent = conv(ps, "bottleneck", &stage1, DOWN)?;
    if cfg.second_bottleneck.is_some() {
        latent = conv(ps, "bottleneck2", &latent.silu(), POINT)?;
    }
    Ok(Encoded { latent, stage0, stage1 })
}

/// Decodes a (possibly informed) latent. Skip features are required exactly
/// when the config enables them.
pub fn decode(ps: &ParamSet, cfg: &GeneratorConfig, z: &Tensor, skips: Option<&Encoded>) -> Result<Tensor> {
    let [_, cz, hz, wz] = dims4(z, "latent")?;
    let (c, lh, lw) = cfg.latent_shape();
    if (cz, hz, wz) != (c, lh, lw) {
        return dimension(format!("latent {:?} does not match configured [{c}, {lh}, {lw}]", z.shape()));
    }
    if !cfg.skips.is_empty() && skips.is_none() {
        return contract("decoder configured with skips but none supplied");
    }
    let (h, w) = cfg.out_shape();
    let (h1, w1) = (down_extent(h), down_extent(w));
    let mut u = z.resize_nearest(h1, w1)?;
    if cfg.skips.contains(&1) {
        u = Tensor::concat(&[u, skips.unwrap().stage1.clone()], 1)?;
    }
    let u = conv(ps, "dec1", &u, SAME)?.silu();
    let mut u = u.resize_nearest(h, w)?;
    if cfg.skips.contains(&0) {
        u = Tensor::concat(&[u, skips.unwrap().stage0.clone()], 1)?;
    }
    let u = conv(ps, "dec0", &u, SAME)?.silu();
    conv(ps, "out", &u, SAME)
}

/// Layer norm over channels at every latent position, with unit scale and
/// zero offset. This is what the ILS block reduces to with zeroed weights.
pub fn latent_layer_norm(z: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4(z, "latent")?;
    let (scale, offset) = (Tensor::ones(&[c]), Tensor::zeros(&[c]));
    let outs = (0..n)
        .map(|i| {
            let seq = LatentTensor::new(z.index0(i)?)?.flatten()?;
            let normed = seq.layer_norm(&scale, &offset, bridgepress_tensor::nn::LAYER_NORM_EPS)?;
            Ok(LatentTensor::unflatten(&normed, h, w)?.into_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&outs)?)
}

/// Applies the generator's ILS hook, or passes the latent through.
pub fn inform(
    ps: &ParamSet,
    cfg: &GeneratorConfig,
    z: &Tensor,
    anthro: Option<&[AnthroRecord]>,
    scale: Option<&AnthroScale>,
) -> Result<Tensor> {
    match (cfg.use_ils, anthro) {
        (true, Some(recs)) => ils_batch(&ps.sub("ils"), z, recs, scale, cfg.ils_heads),
        (true, None) => contract("generator uses ILS but no anthropometrics were given"),
        (false, _) => Ok(z.clone()),
    }
}

/// `p̂ = D(inform(E(d)))`.
pub fn generator_forward(
    ps: &ParamSet,
    cfg: &GeneratorConfig,
    d: &Tensor,
    anthro: Option<&[AnthroRecord]>,
    scale: Option<&AnthroScale>,
) -> Result<Tensor> {
    let enc = encode(ps, cfg, d)?;
    let z = inform(ps, cfg, &enc.latent, anthro, scale)?;
    decode(ps, cfg, &z, Some(&enc))
}

// ------------------------------------------------------------ discriminator

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    /// Conditional mode stacks the (pooled) condition with the image.
    pub conditional: bool,
    pub image_channels: usize,
    pub cond_channels: usize,
    /// Pool factor applied to the condition to reach the image grid.
    pub cond_pool: usize,
    pub c1: usize,
    pub c2: usize,
}

impl DiscriminatorConfig {
    pub fn toy_conditional() -> Self {
        DiscriminatorConfig { conditional: true, image_channels: 1, cond_channels: 1, cond_pool: 2, c1: 4, c2: 8 }
    }

    pub fn toy_unconditional() -> Self {
        DiscriminatorConfig { conditional: false, cond_channels: 0, cond_pool: 1, ..Self::toy_conditional() }
    }

    pub fn input_channels(&self) -> usize {
        self.image_channels + if self.conditional { self.cond_channels } else { 0 }
    }
}

pub fn init_discriminator<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Result<ParamSet> {
    if cfg.c1 == 0 || cfg.c2 == 0 || cfg.image_channels == 0 || cfg.cond_pool == 0 {
        return config("discriminator widths must be positive");
    }
    let mut ps = ParamSet::new();
    init_conv(&mut ps, "d0", cfg.input_channels(), cfg.c1, 3, rng)?;
    init_conv(&mut ps, "d1", cfg.c1, cfg.c2, 3, rng)?;
    init_conv(&mut ps, "logit", cfg.c2, 1, 3, rng)?;
    Ok(ps)
}

/// PatchGAN logits `[N, 1, ⌈H/4⌉, ⌈W/4⌉]`.
pub fn discriminator_forward(
    ps: &ParamSet,
    cfg: &DiscriminatorConfig,
    cond: Option<&Tensor>,
    x: &Tensor,
) -> Result<Tensor> {
    let [n, c, h, w] = dims4(x, "discriminator image")?;
    if c != cfg.image_channels {
        return dimension(format!("discriminator expects {} image channels, got {c}", cfg.image_channels));
    }
    let input = match (cfg.conditional, cond) {
        (true, Some(d)) => {
            let d = if cfg.cond_pool > 1 { d.avg_pool2d(cfg.cond_pool)? } else { d.clone() };
            if d.shape() != [n, cfg.cond_channels, h, w] {
                return dimension(format!("condition {:?} does not match image {:?}", d.shape(), x.shape()));
            }
            Tensor::concat(&[d, x.clone()], 1)?
        }
        (true, None) => return contract("conditional discriminator needs a condition"),
        (false, Some(_)) => return contract("unconditional discriminator takes no condition"),
        (false, None) => x.clone(),
    };
    let h = conv(ps, "d0", &input, DOWN)?.leaky_relu(LEAKY_SLOPE);
    let h = conv(ps, "d1", &h, DOWN)?.leaky_relu(LEAKY_SLOPE);
    conv(ps, "logit", &h, SAME)
}

// ------------------------------------------------------------------- losses

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub y_real: f64,
    pub y_gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 100.0, alpha: 3.0, beta: 0.01, gamma: 0.01, y_real: 0.9, y_gen: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return config(format!("loss weight {name} must be finite and ≥ 0, got {v}"));
            }
        }
        for (name, v) in [("y_real", self.y_real), ("y_gen", self.y_gen)] {
            if !(0.0..=1.0).contains(&v) {
                return config(format!("label {name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Side length of the SSIM window for a map of the given extent: 11, or
/// the largest odd size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(11);
    if m % 2 == 0 { m - 1 } else { m }
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized `k×k` Gaussian window as a `[1, 1, k, k]` conv weight.
pub fn gaussian_window(k: usize, sigma: f64) -> Tensor {
    let c = (k as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..k).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut data = Vec::with_capacity(k * k);
    for a in &g {
        for b in &g {
            data.push(a * b / (s * s));
        }
    }
    Tensor::from_vec(&[1, 1, k, k], data).expect("finite window")
}

/// Per-sample mean SSIM `[N]` of single-channel `[N, 1, H, W]` maps over
/// all valid window placements (no padding).
pub fn ssim_per_sample(a: &Tensor, b: &Tensor, window: &Tensor, c1: f64, c2: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return dimension(format!("ssim inputs {:?} vs {:?}", a.shape(), b.shape()));
    }
    let [n, c, _, _] = dims4(a, "ssim input")?;
    if c != 1 {
        return dimension("ssim works on single-channel maps");
    }
    let f = |x: &Tensor| -> Result<Tensor> { Ok(x.conv2d(window, None, POINT)?) };
    let mu_a = f(a)?;
    let mu_b = f(b)?;
    let aa = f(&a.square())?.sub(&mu_a.square())?;
    let bb = f(&b.square())?.sub(&mu_b.square())?;
    let ab = f(&a.mul(b)?)?.sub(&mu_a.mul(&mu_b)?)?;
    let num = mu_a.mul(&mu_b)?.scale(2.0).add_scalar(c1).mul(&ab.scale(2.0).add_scalar(c2))?;
    let den = mu_a.square().add(&mu_b.square())?.add_scalar(c1).mul(&aa.add(&bb)?.add_scalar(c2))?;
    let map = num.div(&den)?;
    let per = map.shape()[2] * map.shape()[3];
    Ok(map.reshape(&[n, per])?.mean_last()?)
}

/// `1 − mean SSIM` with the standard window and constants.
pub fn ssim_loss(p: &Tensor, p_hat: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = dims4(p, "ssim input")?;
    let win = gaussian_window(ssim_window(h, w), SSIM_SIGMA);
    Ok(ssim_per_sample(p, p_hat, &win, SSIM_C1, SSIM_C2)?.mean().neg().add_scalar(1.0))
}

pub fn mse_loss(p: &Tensor, p_hat: &Tensor) -> Result<Tensor> {
    Ok(p.sub(p_hat)?.square().mean())
}

/// Batch mean of `|Σ(p − p̂)|` on denormalized maps; `divisors[i]` is the
/// kPa value that sample `i` was normalized by.
pub fn wol_loss(p: &Tensor, p_hat: &Tensor, divisors: &[f64]) -> Result<Tensor> {
    if p.shape() != p_hat.shape() {
        return dimension(format!("WOL inputs {:?} vs {:?}", p.shape(), p_hat.shape()));
    }
    let n = p.shape().first().copied().unwrap_or(0);
    if divisors.len() != n || divisors.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return contract(format!("WOL needs {n} positive normalization divisors, got {divisors:?}"));
    }
    let sums = p.sub(p_hat)?.reshape(&[n, p.len() / n.max(1)])?.sum_last()?;
    let kpa = sums.mul(&Tensor::from_vec(&[n], divisors.to_vec())?)?;
    Ok(kpa.abs().mean())
}

/// Mean smoothed-label cross entropy of both discriminator heads, averaged:
/// `½·(BCE(real, y_real) + BCE(fake, y_gen))`.
pub fn discriminator_loss_from_logits(real: &Tensor, fake: &Tensor, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let r = real.bce_with_logits(w.y_real).mean();
    let f = fake.bce_with_logits(w.y_gen).mean();
    Ok(r.add(&f)?.scale(0.5))
}

/// Conditional discriminator loss. `p_hat` is detached so only the
/// discriminator receives gradients.
pub fn loss_discriminator_cond(
    d_ps: &ParamSet,
    d_cfg: &DiscriminatorConfig,
    d: &Tensor,
    p: &Tensor,
    p_hat: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let real = discriminator_forward(d_ps, d_cfg, Some(d), p)?;
    let fake = discriminator_forward(d_ps, d_cfg, Some(d), &p_hat.detach())?;
    discriminator_loss_from_logits(&real, &fake, w)
}

/// Generator loss terms, kept apart for logging.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub adversarial: f64,
    pub ssim: f64,
    pub l2: f64,
    pub wol: f64,
}

fn reconstruction_mix(p: &Tensor, p_hat: &Tensor, wol_divisors: Option<&[f64]>, w: &LossWeights) -> Result<(Tensor, f64, f64, f64)> {
    let s = ssim_loss(p, p_hat)?;
    let l2 = mse_loss(p, p_hat)?;
    let mut mix = s.scale(w.alpha).add(&l2.scale(w.beta))?;
    let mut wol_v = 0.0;
    if let Some(div) = wol_divisors {
        let wol = wol_loss(p, p_hat, div)?;
        wol_v = wol.item()?;
        mix = mix.add(&wol.scale(w.gamma))?;
    }
    Ok((mix.scale(w.lambda), s.item()?, l2.item()?, wol_v))
}

/// `BCE(D(d, p̂), 1) + λ·(α·L_SSIM + β·L_L2 + γ·L_WOL)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_generator_cond(
    d_ps: &ParamSet,
    d_cfg: &DiscriminatorConfig,
    d: &Tensor,
    p: &Tensor,
    p_hat: &Tensor,
    divisors: &[f64],
    w: &LossWeights,
) -> Result<GeneratorLoss> {
    w.validate()?;
    let adv = discriminator_forward(d_ps, d_cfg, Some(d), p_hat)?.bce_with_logits(1.0).mean();
    let (mix, ssim, l2, wol) = reconstruction_mix(p, p_hat, Some(divisors), w)?;
    Ok(GeneratorLoss { adversarial: adv.item()?, total: adv.add(&mix)?, ssim, l2, wol })
}

/// Unconditional autoencoding pair: discriminator loss and generator loss
/// `BCE(D(x̂), 1) + λ·(α·L_SSIM + β·L_L2)`.
pub fn loss_unconditional_pair(
    d_ps: &ParamSet,
    d_cfg: &DiscriminatorConfig,
    x: &Tensor,
    x_hat: &Tensor,
    w: &LossWeights,
) -> Result<(Tensor, GeneratorLoss)> {
    w.validate()?;
    let real = discriminator_forward(d_ps, d_cfg, None, x)?;
    let fake = discriminator_forward(d_ps, d_cfg, None, &x_hat.detach())?;
    let l_d = discriminator_loss_from_logits(&real, &fake, w)?;
    let adv = discriminator_forward(d_ps, d_cfg, None, x_hat)?.bce_with_logits(1.0).mean();
    let (mix, ssim, l2, _) = reconstruction_mix(x, x_hat, None, w)?;
    let g = GeneratorLoss { adversarial: adv.item()?, total: adv.add(&mix)?, ssim, l2, wol: 0.0 };
    Ok((l_d, g))
}

// ----------------------------------------------------------------- denoiser

pub const TIME_FREQS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub shape: (usize, usize),
    /// Channels of `x_t` (and of `y`).
    pub channels: usize,
    pub c1: usize,
    pub c2: usize,
    pub use_ils: bool,
    pub ils_heads: usize,
}

impl DenoiserConfig {
    pub fn toy(shape: (usize, usize), channels: usize) -> Self {
        DenoiserConfig { shape, channels, c1: 8, c2: 8, use_ils: false, ils_heads: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c1, self.c2, self.channels, self.shape.0, self.shape.1].contains(&0) {
            return config("denoiser sizes must be positive");
        }
        if self.use_ils {
            self.ils_config().validate()?;
        }
        Ok(())
    }

    pub fn ils_config(&self) -> IlsConfig {
        IlsConfig { channels: self.c2, heads: self.ils_heads }
    }
}

pub fn init_denoiser<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    init_linear(&mut ps, "temb", 2 * TIME_FREQS, cfg.c1, rng)?;
    init_conv(&mut ps, "in", 2 * cfg.channels, cfg.c1, 3, rng)?;
    init_conv(&mut ps, "down1", cfg.c1, cfg.c2, 3, rng)?;
    init_conv(&mut ps, "down2", cfg.c2, cfg.c2, 3, rng)?;
    init_conv(&mut ps, "up1", 2 * cfg.c2, cfg.c2, 3, rng)?;
    init_conv(&mut ps, "up0", cfg.c2 + cfg.c1, cfg.c1, 3, rng)?;
    init_conv(&mut ps, "out", cfg.c1, cfg.channels, 3, rng)?;
    if cfg.use_ils {
        ps.extend_prefixed("ils", init_ils_params(&cfg.ils_config(), rng)?)?;
    }
    Ok(ps)
}

/// `[sin(t·f_k), cos(t·f_k)]` with `f_k = 10000^(−k/16)`.
pub fn time_embedding(ts: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * 2 * TIME_FREQS);
    for &t in ts {
        let freqs = (0..TIME_FREQS).map(|k| (-(10000f64.ln()) * k as f64 / TIME_FREQS as f64).exp());
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t as f64 * f).sin(), (t as f64 * f).cos())).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::from_vec(&[ts.len(), 2 * TIME_FREQS], data).expect("finite embedding")
}

/// `ε̂ = U(concat(x_t, y), t)`; `t` holds one timestep per sample.
pub fn denoiser_forward(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    x_t: &Tensor,
    y: &Tensor,
    t: &[usize],
    anthro: Option<(&[AnthroRecord], Option<&AnthroScale>)>,
) -> Result<Tensor> {
    let [n, c, h, w] = dims4(x_t, "denoiser state")?;
    if y.shape() != x_t.shape() || (c, h, w) != (cfg.channels, cfg.shape.0, cfg.shape.1) {
        return dimension(format!(
            "denoiser expects x_t and y of [N, {}, {}, {}], got {:?} and {:?}",
            cfg.channels, cfg.shape.0, cfg.shape.1, x_t.shape(), y.shape()
        ));
    }
    if t.len() != n {
        return dimension(format!("{} timesteps for a batch of {n}", t.len()));
    }
    let temb = linear(ps, "temb", &time_embedding(t))?.silu();
    let h0 = conv(ps, "in", &Tensor::concat(&[x_t.clone(), y.clone()], 1)?, SAME)?
        .silu()
        .add_prefix(&temb)?;
    let h1 = conv(ps, "down1", &h0, DOWN)?.silu();
    let mut h2 = conv(ps, "down2", &h1, DOWN)?.silu();
    match (cfg.use_ils, anthro) {
        (true, Some((recs, scale))) => h2 = ils_batch(&ps.sub("ils"), &h2, recs, scale, cfg.ils_heads)?,
        (true, None) => return contract("denoiser uses ILS but no anthropometrics were given"),
        (false, _) => {}
    }
    let u1 = h2.resize_nearest(h1.shape()[2], h1.shape()[3])?;
    let u1 = conv(ps, "up1", &Tensor::concat(&[u1, h1], 1)?, SAME)?.silu();
    let u0 = u1.resize_nearest(h, w)?;
    let u0 = conv(ps, "up0", &Tensor::concat(&[u0, h0], 1)?, SAME)?.silu();
    conv(ps, "out", &u0, SAME)
}

/// Evaluates `f` without recording a graph.
pub fn eval<T>(f: impl FnOnce() -> T) -> T {
    let _g = no_grad();
    f()
}
