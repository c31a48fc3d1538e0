//! Central finite-difference verification of reverse-mode gradients.
//!
//! The error reported is norm-wise: the largest absolute deviation between
//! analytic and numeric partials, divided by the largest partial magnitude
//! over all inputs. Per-element ratios blow up on entries whose true
//! derivative is zero, so they are not used.

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub grad_scale: f64,
    pub rel_err: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Compares the backward pass of `f` at `inputs` with central differences
/// of step `h`. `f` must return a scalar.
pub fn gradcheck<F, E>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&[Tensor]) -> Result<Tensor, E>,
    E: From<TensorError>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::detach_param).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let _guard = no_grad();
    let mut consts: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let mut max_abs_err: f64 = 0.0;
    let mut grad_scale: f64 = 0.0;
    let mut evaluations = 0;
    for i in 0..inputs.len() {
        let base = inputs[i].to_vec();
        for j in 0..base.len() {
            let mut eval_at = |delta: f64, consts: &mut Vec<Tensor>| -> Result<f64, E> {
                let mut v = base.clone();
                v[j] += delta;
                consts[i] = Tensor::from_vec(inputs[i].shape(), v)?;
                evaluations += 1;
                Ok::<f64, E>(f(consts)?.item()?)
            };
            let fp = eval_at(h, &mut consts)?;
            let fm = eval_at(-h, &mut consts)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i][j];
            max_abs_err = max_abs_err.max((a - numeric).abs());
            grad_scale = grad_scale.max(a.abs()).max(numeric.abs());
        }
        consts[i] = inputs[i].detach();
    }
    let rel_err = if grad_scale == 0.0 { max_abs_err } else { max_abs_err / grad_scale };
    Ok(GradCheckReport { max_abs_err, grad_scale, rel_err, evaluations })
}

/// [`gradcheck`] over every entry of a [`ParamSet`] plus extra inputs.
/// `f` receives a parameter set whose tensors are the perturbed leaves.
pub fn gradcheck_params<F, E>(
    f: F,
    params: &ParamSet,
    extra: &[Tensor],
    h: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&ParamSet, &[Tensor]) -> Result<Tensor, E>,
    E: From<TensorError>,
{
    let names: Vec<String> = params.names().cloned().collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).map(Tensor::detach)).collect::<Result<_>>()?;
    inputs.extend(extra.iter().cloned());
    let np = names.len();
    gradcheck(
        |t| {
            let mut ps = ParamSet::new();
            for (n, v) in names.iter().zip(&t[..np]) {
                ps.insert(n.clone(), v.clone())?;
            }
            f(&ps, &t[np..])
        },
        &inputs,
        h,
    )
}
