//! Linear maps, layer normalization and multi-head attention built on
//! [`ParamSet`] entries.
//!
//! Layout conventions: a linear map named `p` stores `p.w` as `[in, out]`
//! and `p.b` as `[out]`; a layer norm `p` stores `p.scale` and `p.offset`;
//! attention `p` holds the four linear maps `p.q`, `p.k`, `p.v`, `p.o`.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{he_uniform, ones_param, zeros_param, ParamSet};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    ps.insert(format!("{name}.w"), he_uniform(rng, &[fan_in, fan_out], fan_in))?;
    ps.insert(format!("{name}.b"), zeros_param(&[fan_out]))
}

/// `x · W + b` for `x` of shape `[rows, in]`.
pub fn linear(ps: &ParamSet, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.w"))?;
    let b = ps.get(&format!("{name}.b"))?;
    x.matmul(w)?.add_suffix(b)
}

pub fn init_layer_norm(ps: &mut ParamSet, name: &str, dim: usize) -> Result<()> {
    ps.insert(format!("{name}.scale"), ones_param(&[dim]))?;
    ps.insert(format!("{name}.offset"), zeros_param(&[dim]))
}

pub fn layer_norm(ps: &ParamSet, name: &str, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(
        ps.get(&format!("{name}.scale"))?,
        ps.get(&format!("{name}.offset"))?,
        LAYER_NORM_EPS,
    )
}

pub fn init_attention<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{name}.{proj}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[Lq, C]`, `k` and `v` are `[Lk, C]`. Each head attends over a
/// `C / heads` slice of the projected features with scale `1/√(C/heads)`;
/// heads are concatenated and passed through the output projection.
pub fn multi_head_attention(
    ps: &ParamSet,
    name: &str,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(TensorError::Dimension("attention inputs must be 2-d".into()));
    }
    let dim = q.shape()[1];
    if k.shape()[1] != dim || v.shape()[1] != dim || k.shape()[0] != v.shape()[0] {
        return Err(TensorError::Dimension(format!(
            "attention: q {:?}, k {:?}, v {:?} inconsistent",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(TensorError::Configuration(format!(
            "embedding dim {dim} not divisible into {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let qp = linear(ps, &format!("{name}.q"), q)?;
    let kp = linear(ps, &format!("{name}.k"), k)?;
    let vp = linear(ps, &format!("{name}.v"), v)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = qp.slice(1, h * head_dim, head_dim)?;
        let kh = kp.slice(1, h * head_dim, head_dim)?;
        let vh = vp.slice(1, h * head_dim, head_dim)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let weights = scores.softmax(1)?;
        outs.push(weights.matmul(&vh)?);
    }
    let merged = if heads == 1 { outs.pop().unwrap() } else { Tensor::concat(&outs, 1)? };
    linear(ps, &format!("{name}.o"), &merged)
}
