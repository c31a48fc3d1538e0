//! Informed latent space: anthropometric tokens injected into an image
//! latent by cross-attention.
//!
//! Mass, height and gender are each mapped by their own affine layer to a
//! `C_z`-wide token (order m, h, g). The three tokens self-attend, are layer
//! normalized, and then serve as keys/values for a cross-attention whose
//! queries are the `H_z·W_z` latent positions:
//!
//! ```text
//! E   = [mlp_m(m / m_max); mlp_h(h / h_max); mlp_g(g)]
//! A   = layernorm(MHA(E, E, E))
//! z̃  = layernorm(z + MHA(z, A, A))
//! ```
//!
//! The token block has no residual around its attention; the latent block
//! does.

use bridgepress_tensor::nn::{init_attention, init_layer_norm, init_linear, layer_norm, linear, multi_head_attention};
use bridgepress_tensor::{ParamSet, Tensor};
use rand::Rng;

use crate::error::{config, contract, dimension, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnthroRecord {
    pub mass_kg: f64,
    pub height_m: f64,
    /// 0 or 1.
    pub gender: u8,
}

/// Dataset-level divisors ("largest possible values").
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnthroScale {
    pub mass_max: f64,
    pub height_max: f64,
}

impl AnthroRecord {
    pub fn validate(&self, scale: &AnthroScale) -> Result<()> {
        if !(self.mass_kg > 0.0 && self.mass_kg <= scale.mass_max) {
            return contract(format!("mass {} kg outside (0, {}]", self.mass_kg, scale.mass_max));
        }
        if !(self.height_m > 0.0 && self.height_m <= scale.height_max) {
            return contract(format!("height {} m outside (0, {}]", self.height_m, scale.height_max));
        }
        if self.gender > 1 {
            return contract(format!("gender flag must be 0 or 1, got {}", self.gender));
        }
        Ok(())
    }

    /// Normalized inputs in token order (m, h, g).
    pub fn normalized(&self, scale: &AnthroScale) -> [f64; 3] {
        [self.mass_kg / scale.mass_max, self.height_m / scale.height_max, self.gender as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IlsConfig {
    /// Token / latent channel width `C_z`.
    pub channels: usize,
    pub heads: usize,
}

impl IlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return config(format!(
                "ILS width {} not divisible into {} heads",
                self.channels, self.heads
            ));
        }
        Ok(())
    }
}

pub const TOKEN_LAYERS: [&str; 3] = ["mlp_m", "mlp_h", "mlp_g"];

pub fn init_ils_params<R: Rng + ?Sized>(cfg: &IlsConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    for name in TOKEN_LAYERS {
        init_linear(&mut ps, name, 1, cfg.channels, rng)?;
    }
    init_attention(&mut ps, "self_attn", cfg.channels, rng)?;
    init_layer_norm(&mut ps, "self_norm", cfg.channels)?;
    init_attention(&mut ps, "cross_attn", cfg.channels, rng)?;
    init_layer_norm(&mut ps, "cross_norm", cfg.channels)?;
    Ok(ps)
}

/// Zeroes every affine and attention weight, leaving the layer norms at
/// identity. The block then reduces to `layernorm(z)`.
pub fn zero_ils_weights(ps: &mut ParamSet) {
    ps.zero_where(|name| !(name.ends_with(".scale") || name.ends_with(".offset")));
}

/// The three anthropometric tokens as a `[3, C_z]` tensor.
#[derive(Debug, Clone)]
pub struct AnthroTokens(pub Tensor);

impl AnthroTokens {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.shape()[0] != 3 {
            return dimension(format!("anthro tokens must be [3, C], got {:?}", t.shape()));
        }
        Ok(AnthroTokens(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Latent feature map `[C_z, H_z, W_z]` with its `[d_z, C_z]` sequence view.
#[derive(Debug, Clone)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 {
            return dimension(format!("latent must be [C, H, W], got {:?}", t.shape()));
        }
        Ok(LatentTensor(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    /// `[H·W, C]`: one row per spatial position.
    pub fn flatten(&self) -> Result<Tensor> {
        let (c, (h, w)) = (self.channels(), self.spatial());
        Ok(self.0.reshape(&[c, h * w])?.transpose()?)
    }

    pub fn unflatten(seq: &Tensor, h: usize, w: usize) -> Result<Self> {
        if seq.ndim() != 2 || seq.shape()[0] != h * w {
            return dimension(format!("sequence {:?} does not hold {h}×{w} positions", seq.shape()));
        }
        let c = seq.shape()[1];
        Ok(LatentTensor(seq.transpose()?.reshape(&[c, h, w])?))
    }
}

pub fn embed_anthro(
    ps: &ParamSet,
    rec: &AnthroRecord,
    scale: Option<&AnthroScale>,
) -> Result<AnthroTokens> {
    let Some(scale) = scale else {
        return config("anthropometric normalization divisors are not set");
    };
    if !(scale.mass_max > 0.0 && scale.height_max > 0.0) {
        return config(format!("invalid anthropometric divisors {scale:?}"));
    }
    rec.validate(scale)?;
    let inputs = rec.normalized(scale);
    let rows = TOKEN_LAYERS
        .iter()
        .zip(inputs)
        .map(|(name, x)| linear(ps, name, &Tensor::from_vec(&[1, 1], vec![x])?))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AnthroTokens::new(Tensor::concat(&rows, 0)?)
}

pub fn self_attend_anthro(ps: &ParamSet, tokens: &AnthroTokens, heads: usize) -> Result<AnthroTokens> {
    let e = &tokens.0;
    let attn = multi_head_attention(ps, "self_attn", e, e, e, heads)?;
    AnthroTokens::new(layer_norm(ps, "self_norm", &attn)?)
}

pub fn inform_latent(
    ps: &ParamSet,
    z: &LatentTensor,
    attn: &AnthroTokens,
    heads: usize,
) -> Result<LatentTensor> {
    if z.channels() != attn.channels() {
        return dimension(format!(
            "latent has {} channels, tokens have {}",
            z.channels(),
            attn.channels()
        ));
    }
    let (h, w) = z.spatial();
    let seq = z.flatten()?;
    let mixed = multi_head_attention(ps, "cross_attn", &seq, &attn.0, &attn.0, heads)?;
    let out = layer_norm(ps, "cross_norm", &seq.add(&mixed)?)?;
    LatentTensor::unflatten(&out, h, w)
}

/// Full block on one latent.
pub fn ils_block(
    ps: &ParamSet,
    z: &LatentTensor,
    rec: &AnthroRecord,
    scale: Option<&AnthroScale>,
    heads: usize,
) -> Result<LatentTensor> {
    let tokens = embed_anthro(ps, rec, scale)?;
    let attn = self_attend_anthro(ps, &tokens, heads)?;
    inform_latent(ps, z, &attn, heads)
}

/// Applies the block to each sample of a `[N, C, H, W]` batch.
pub fn ils_batch(
    ps: &ParamSet,
    z: &Tensor,
    recs: &[AnthroRecord],
    scale: Option<&AnthroScale>,
    heads: usize,
) -> Result<Tensor> {
    if z.ndim() != 4 || z.shape()[0] != recs.len() {
        return dimension(format!(
            "batch latent {:?} vs {} anthropometric records",
            z.shape(),
            recs.len()
        ));
    }
    let outs = recs
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let zi = LatentTensor::new(z.index0(i)?)?;
            Ok(ils_block(ps, &zi, rec, scale, heads)?.into_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&outs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SCALE: AnthroScale = AnthroScale { mass_max: 120.0, height_max: 2.0 };

    #[test]
    fn zero_embedding_gives_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = init_ils_params(&IlsConfig { channels: 4, heads: 2 }, &mut rng).unwrap();
        zero_ils_weights(&mut ps);
        let rec = AnthroRecord { mass_kg: 70.0, height_m: 1.7, gender: 1 };
        let e = embed_anthro(&ps, &rec, Some(&SCALE)).unwrap();
        assert_eq!(e.0.shape(), &[3, 4]);
        assert!(e.0.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps = init_ils_params(&IlsConfig { channels: 4, heads: 2 }, &mut rng).unwrap();
        let rec = AnthroRecord { mass_kg: 70.0, height_m: 1.7, gender: 0 };
        assert!(matches!(embed_anthro(&ps, &rec, None), Err(crate::Error::Configuration(_))));
        let heavy = AnthroRecord { mass_kg: 130.0, ..rec };
        assert!(matches!(embed_anthro(&ps, &heavy, Some(&SCALE)), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn mass_at_max_feeds_one() {
        let rec = AnthroRecord { mass_kg: 120.0, height_m: 1.0, gender: 0 };
        assert_eq!(rec.normalized(&SCALE), [1.0, 0.5, 0.0]);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(IlsConfig { channels: 6, heads: 4 }.validate().is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let t = Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let z = LatentTensor::new(t.clone()).unwrap();
        let seq = z.flatten().unwrap();
        assert_eq!(seq.shape(), &[6, 2]);
        // row = position, column = channel
        assert_eq!(seq.data()[2 * 2 + 1], t.data()[6 + 2]);
        let back = LatentTensor::unflatten(&seq, 2, 3).unwrap();
        assert_eq!(back.tensor().data(), t.data());
    }
}
