//! Brownian-bridge diffusion between a target `x0` and a condition `y`.
//!
//! Forward marginal: `x_t = (1 − m_t)·x0 + m_t·y + √δ_t·ε` with
//! `m_t = t/T` and `δ_t = 2s·m_t(1 − m_t)`, so both endpoints are pinned
//! (`x_0 = x0`, `x_T = y`). The network predicts
//! `m_t(y − x0) + √δ_t·ε`, from which `x̂0 = x_t − ε̂`. Sampling walks an
//! evenly spaced sub-sequence of `[0, T]` from `T` down to `0`.

use bridgepress_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, contract, dimension, Error, Result};

/// Default number of sampler steps.
pub const DEFAULT_SAMPLE_STEPS: usize = 200;
/// Default number of diffusion steps.
pub const DEFAULT_T: usize = 1000;

const VARIANCE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    steps: usize,
    s_scale: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
    delta_post: Vec<f64>,
}

pub fn make_schedule(steps: usize, s_scale: f64) -> Result<BridgeSchedule> {
    if steps == 0 {
        return config("bridge needs T ≥ 1");
    }
    if !(s_scale.is_finite() && s_scale >= 0.0) {
        return config(format!("variance scale must be ≥ 0, got {s_scale}"));
    }
    let m: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
    let delta: Vec<f64> = m.iter().map(|&mt| 2.0 * s_scale * mt * (1.0 - mt)).collect();
    let mut sched = BridgeSchedule { steps, s_scale, m, delta, delta_post: vec![0.0; steps + 1] };
    for t in 1..=steps {
        sched.delta_post[t] = sched.posterior_variance(t - 1, t)?;
    }
    Ok(sched)
}

impl BridgeSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn s_scale(&self) -> f64 {
        self.s_scale
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    /// Posterior variance of the single step `t → t−1`.
    pub fn delta_post(&self, t: usize) -> f64 {
        self.delta_post[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Contract(format!("timestep {t} outside [0, {}]", self.steps)));
        }
        Ok(())
    }

    /// Posterior variance of jumping from `t` to `s < t`:
    /// `δ_{t|s}·δ_s / δ_t` with `δ_{t|s} = δ_t − δ_s·((1−m_t)/(1−m_s))²`.
    /// At `t = T` the ratio is 0/0; its limit is `δ_s`.
    pub fn posterior_variance(&self, s: usize, t: usize) -> Result<f64> {
        self.check_t(t)?;
        if s >= t {
            return contract(format!("posterior needs s < t, got s={s}, t={t}"));
        }
        let (ds, dt) = (self.delta[s], self.delta[t]);
        if ds == 0.0 {
            return Ok(0.0);
        }
        if dt == 0.0 {
            return Ok(ds);
        }
        let ratio = (1.0 - self.m[t]) / (1.0 - self.m[s]);
        let d_ts = dt - ds * ratio * ratio;
        Ok((d_ts * ds / dt).max(0.0))
    }

    /// Evenly spaced `[0, τ_1, …, τ_S = T]`.
    pub fn subsequence(&self, sample_steps: usize) -> Result<Vec<usize>> {
        if sample_steps == 0 {
            return config("sampling needs S ≥ 1");
        }
        if sample_steps > self.steps {
            return config(format!("S = {sample_steps} exceeds T = {}", self.steps));
        }
        Ok((0..=sample_steps).map(|i| i * self.steps / sample_steps).collect())
    }
}

fn same_shapes(parts: &[&Tensor]) -> Result<()> {
    let s = parts[0].shape();
    if parts.iter().any(|p| p.shape() != s) {
        let shapes: Vec<_> = parts.iter().map(|p| p.shape().to_vec()).collect();
        return dimension(format!("bridge tensors must share a shape, got {shapes:?}"));
    }
    Ok(())
}

/// `x_t = (1 − m_t)·x0 + m_t·y + √δ_t·ε`.
pub fn forward_diffuse(x0: &Tensor, y: &Tensor, t: usize, eps: &Tensor, sched: &BridgeSchedule) -> Result<Tensor> {
    same_shapes(&[x0, y, eps])?;
    sched.check_t(t)?;
    let (m, d) = (sched.m(t), sched.delta(t));
    Ok(x0.scale(1.0 - m).add(&y.scale(m))?.add(&eps.scale(d.sqrt()))?)
}

/// Regression target `m_t·(y − x0) + √δ_t·ε`.
pub fn training_target(x0: &Tensor, y: &Tensor, t: usize, eps: &Tensor, sched: &BridgeSchedule) -> Result<Tensor> {
    same_shapes(&[x0, y, eps])?;
    sched.check_t(t)?;
    let (m, d) = (sched.m(t), sched.delta(t));
    Ok(y.sub(x0)?.scale(m).add(&eps.scale(d.sqrt()))?)
}

/// `x̂0 = x_t − ε̂`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_shapes(&[x_t, eps_hat])?;
    Ok(x_t.sub(eps_hat)?)
}

/// One reverse step `ts → ts_prev`.
#[allow(clippy::too_many_arguments)]
pub fn sample_step(
    x_ts: &Tensor,
    x0_hat: &Tensor,
    y: &Tensor,
    ts: usize,
    ts_prev: usize,
    z: &Tensor,
    sched: &BridgeSchedule,
) -> Result<Tensor> {
    same_shapes(&[x_ts, x0_hat, y, z])?;
    sched.check_t(ts)?;
    if ts_prev >= ts {
        return contract(format!("sample_step needs ts_prev < ts, got {ts_prev} ≥ {ts}"));
    }
    let (m_t, m_p) = (sched.m(ts), sched.m(ts_prev));
    let (d_t, d_p) = (sched.delta(ts), sched.delta(ts_prev));
    let d_post = sched.posterior_variance(ts_prev, ts)?;
    let mut num = d_p - d_post;
    if num < 0.0 {
        if num < -VARIANCE_SLACK {
            return Err(Error::Schedule(format!(
                "negative drift variance {num} at step {ts} → {ts_prev}"
            )));
        }
        num = 0.0;
    }
    // deterministic geodesic limit when δ_ts = 0
    let drift = if d_t == 0.0 { 0.0 } else { (num / d_t).sqrt() };
    let noise = d_post.sqrt();
    let out: Vec<f64> = (0..x_ts.len())
        .map(|i| {
            let (xt, x0, yy, zz) = (x_ts.data()[i], x0_hat.data()[i], y.data()[i], z.data()[i]);
            (1.0 - m_p) * x0 + m_p * yy + drift * (xt - (1.0 - m_t) * x0 - m_t * yy) + noise * zz
        })
        .collect();
    Ok(Tensor::from_vec(x_ts.shape(), out)?)
}

#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub seed: u64,
    /// `[0, τ_1, …, τ_S]`.
    pub timesteps: Vec<usize>,
    /// State after each step, starting with `x_T = y`; empty unless requested.
    pub states: Vec<Tensor>,
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("normal draws are finite")
}

/// Accelerated sampler: starts at `x_T = y` and applies [`sample_step`]
/// down the sub-sequence. `predictor(x_t, y, t)` returns `ε̂`.
pub fn sample<F>(
    y: &Tensor,
    mut predictor: F,
    sched: &BridgeSchedule,
    sample_steps: usize,
    seed: u64,
    keep_states: bool,
) -> Result<(Tensor, SampleTrace)>
where
    F: FnMut(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    let timesteps = sched.subsequence(sample_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = y.clone();
    let mut states = Vec::new();
    if keep_states {
        states.push(x.clone());
    }
    for w in timesteps.windows(2).rev() {
        let (ts_prev, ts) = (w[0], w[1]);
        let eps_hat = predictor(&x, y, ts)?;
        if eps_hat.shape() != x.shape() {
            return contract(format!(
                "predictor returned {:?} for state {:?}",
                eps_hat.shape(),
                x.shape()
            ));
        }
        let x0_hat = predict_x0(&x, &eps_hat)?;
        let z = if ts_prev > 0 { standard_normal(x.shape(), &mut rng) } else { Tensor::zeros(x.shape()) };
        x = sample_step(&x, &x0_hat, y, ts, ts_prev, &z, sched)?;
        if keep_states {
            states.push(x.clone());
        }
    }
    Ok((x, SampleTrace { seed, timesteps, states }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_midpoint_and_variance() {
        let s = make_schedule(1000, 1.0).unwrap();
        assert_eq!(s.m(500), 0.5);
        assert_eq!(s.delta(500), 0.5);
        assert_eq!(s.m(0), 0.0);
        assert_eq!(s.m(1000), 1.0);
        assert_eq!(s.delta(0), 0.0);
        assert_eq!(s.delta(1000), 0.0);
    }

    #[test]
    fn zero_scale_is_deterministic() {
        let s = make_schedule(50, 0.0).unwrap();
        for t in 0..=50 {
            assert_eq!(s.delta(t), 0.0);
            assert_eq!(s.delta_post(t), 0.0);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(make_schedule(0, 1.0), Err(Error::Configuration(_))));
    }

    #[test]
    fn subsequence_spacing() {
        let s = make_schedule(1000, 1.0).unwrap();
        let ts = s.subsequence(200).unwrap();
        assert_eq!(ts.len(), 201);
        assert_eq!(ts[1], 5);
        assert_eq!(*ts.last().unwrap(), 1000);
        assert_eq!(s.subsequence(1).unwrap(), vec![0, 1000]);
        assert!(s.subsequence(0).is_err());
        assert!(s.subsequence(1001).is_err());
    }

    #[test]
    fn posterior_limit_is_continuous_at_t() {
        // For this schedule δ̃(s,t) = 2s·m_s(m_t − m_s)/m_t; the ratio form
        // approaches δ_s as t → T.
        let s = make_schedule(1000, 0.7).unwrap();
        for &(a, b) in &[(10, 20), (500, 999), (995, 1000), (0, 5), (200, 1000)] {
            let (ms, mt) = (s.m(a), s.m(b));
            let closed = 2.0 * 0.7 * ms * (mt - ms) / mt;
            assert!((s.posterior_variance(a, b).unwrap() - closed).abs() < 1e-12, "{a}->{b}");
        }
    }

    #[test]
    fn training_target_zero_at_start_and_for_identical_endpoints() {
        let sched = make_schedule(10, 1.0).unwrap();
        let x0 = Tensor::from_vec(&[3], vec![0.2, 0.4, 0.9]).unwrap();
        let y = Tensor::from_vec(&[3], vec![0.7, 0.1, 0.3]).unwrap();
        let eps = Tensor::from_vec(&[3], vec![1.3, -0.2, 0.5]).unwrap();
        assert!(training_target(&x0, &y, 0, &eps, &sched).unwrap().data().iter().all(|v| *v == 0.0));
        let det = make_schedule(10, 0.0).unwrap();
        for t in 0..=10 {
            let tgt = training_target(&x0, &x0, t, &eps, &det).unwrap();
            assert!(tgt.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn predict_x0_with_zero_noise_is_identity() {
        let x = Tensor::from_vec(&[2], vec![0.3, 0.6]).unwrap();
        assert_eq!(predict_x0(&x, &Tensor::zeros(&[2])).unwrap().data(), x.data());
    }

    #[test]
    fn step_rejects_bad_order() {
        let sched = make_schedule(4, 1.0).unwrap();
        let x = Tensor::zeros(&[1]);
        assert!(sample_step(&x, &x, &x, 2, 2, &x, &sched).is_err());
        assert!(forward_diffuse(&x, &x, 5, &x, &sched).is_err());
        assert!(matches!(
            forward_diffuse(&x, &Tensor::zeros(&[2]), 1, &x, &sched),
            Err(Error::Dimension(_))
        ));
    }
}
