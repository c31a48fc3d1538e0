use bridgepress::bridge::*;
use bridgepress::Error;
use bridgepress_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn endpoints_are_pinned() {
    let s = make_schedule(1000, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = standard_normal(&[2, 5], &mut rng);
    let y = standard_normal(&[2, 5], &mut rng);
    let eps = standard_normal(&[2, 5], &mut rng);
    assert!(max_abs_diff(&forward_diffuse(&x0, &y, 0, &eps, &s).unwrap(), &x0) <= 1e-12);
    assert!(max_abs_diff(&forward_diffuse(&x0, &y, 1000, &eps, &s).unwrap(), &y) <= 1e-12);
    let target0 = training_target(&x0, &y, 0, &eps, &s).unwrap();
    assert!(target0.data().iter().all(|v| *v == 0.0));
}

#[test]
fn midpoint_marginal_monte_carlo() {
    let s = make_schedule(1000, 1.0).unwrap();
    let (x0, y) = (t(&[0.2]), t(&[1.4]));
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws: Vec<f64> = (0..n)
        .map(|_| forward_diffuse(&x0, &y, 500, &standard_normal(&[1], &mut rng), &s).unwrap().data()[0])
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let delta = s.delta(500);
    assert!((mean - 0.8).abs() <= 4.0 * (delta / n as f64).sqrt(), "mean {mean}");
    assert!((var - delta).abs() <= 0.05 * delta, "var {var} vs {delta}");
}

#[test]
fn degenerate_bridge_has_zero_target() {
    let s = make_schedule(20, 0.0).unwrap();
    let x0 = t(&[0.3, -0.7, 2.0]);
    let eps = t(&[1.0, 1.0, 1.0]);
    for step in 0..=20 {
        let target = training_target(&x0, &x0, step, &eps, &s).unwrap();
        assert!(target.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn posterior_variance_never_exceeds_previous_marginal() {
    for scale in [0.0, 0.5, 1.0, 3.0] {
        let s = make_schedule(1000, scale).unwrap();
        for step in 1..=1000 {
            assert!(s.delta_post(step) <= s.delta(step - 1) + 1e-12, "t={step} s={scale}");
        }
        for sub in [1, 7, 10, 200] {
            let ts = s.subsequence(sub).unwrap();
            for w in ts.windows(2) {
                assert!(s.posterior_variance(w[0], w[1]).unwrap() <= s.delta(w[0]) + 1e-12);
            }
        }
    }
}

#[test]
fn subsequence_bounds() {
    let s = make_schedule(1000, 1.0).unwrap();
    assert_eq!(s.subsequence(1).unwrap(), vec![0, 1000]);
    assert_eq!(s.subsequence(4).unwrap(), vec![0, 250, 500, 750, 1000]);
    assert_eq!(s.subsequence(1000).unwrap().len(), 1001);
    assert!(matches!(s.subsequence(1001), Err(Error::Configuration(_))));
    assert!(matches!(s.subsequence(0), Err(Error::Configuration(_))));
}

#[test]
fn hand_evaluated_step() {
    // T = 4, s = 1, step 3 → 2
    let s = make_schedule(4, 1.0).unwrap();
    let (x_ts, x0_hat, y, z) = (t(&[0.3]), t(&[0.1]), t(&[0.8]), t(&[0.5]));
    let got = sample_step(&x_ts, &x0_hat, &y, 3, 2, &z, &s).unwrap().data()[0];
    // δ_3 = 0.375, δ_2 = 0.5, δ_{3|2} = 0.25, δ̃ = 1/3, drift = √((0.5 − 1/3)/0.375) = 2/3
    let want = 0.5 * 0.1 + 0.5 * 0.8 + (2.0 / 3.0) * (0.3 - 0.25 * 0.1 - 0.75 * 0.8) + (1.0f64 / 3.0).sqrt() * 0.5;
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");

    // the final step returns x̂0
    let last = sample_step(&x_ts, &x0_hat, &y, 1, 0, &t(&[0.0]), &s).unwrap();
    assert!((last.data()[0] - 0.1).abs() <= 1e-15);
}

#[test]
fn zero_scale_step_follows_geodesic() {
    let s = make_schedule(10, 0.0).unwrap();
    let (x0, y) = (t(&[1.0, -2.0]), t(&[0.5, 0.25]));
    let x7 = forward_diffuse(&x0, &y, 7, &t(&[9.0, 9.0]), &s).unwrap();
    let x4 = sample_step(&x7, &x0, &y, 7, 4, &t(&[3.0, -3.0]), &s).unwrap();
    for i in 0..2 {
        let want = 0.6 * x0.data()[i] + 0.4 * y.data()[i];
        assert!((x4.data()[i] - want).abs() <= 1e-15);
    }
}

#[test]
fn oracle_sampler_recovers_target_for_any_step_count() {
    let s = make_schedule(1000, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = standard_normal(&[1, 1, 4, 6], &mut rng);
    let y = standard_normal(&[1, 1, 4, 6], &mut rng);
    let mut outs = Vec::new();
    for steps in [1, 10, 200] {
        let (out, trace) = sample(&y, |x_t, _, _| Ok(x_t.sub(&x0)?), &s, steps, 9, false).unwrap();
        assert_eq!(trace.timesteps.len(), steps + 1);
        assert!(max_abs_diff(&out, &x0) <= 1e-10, "S={steps}");
        outs.push(out);
    }
    assert!(max_abs_diff(&outs[0], &outs[2]) <= 1e-10);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = make_schedule(100, 1.0).unwrap();
    let y = t(&[0.5, 0.1, -0.3]);
    let pred = |x: &Tensor, _: &Tensor, step: usize| Ok(x.scale(step as f64 / 200.0));
    let (a, ta) = sample(&y, pred, &s, 20, 42, true).unwrap();
    let (b, tb) = sample(&y, pred, &s, 20, 42, true).unwrap();
    let (c, _) = sample(&y, pred, &s, 20, 43, false).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(ta.states.len(), 21);
    for (p, q) in ta.states.iter().zip(&tb.states) {
        assert_eq!(p.data(), q.data());
    }
    assert_ne!(a.data(), c.data());
}

#[test]
fn predictor_shape_mismatch_is_a_contract_error() {
    let s = make_schedule(10, 1.0).unwrap();
    let y = t(&[0.5, 0.1]);
    let r = sample(&y, |_, _, _| Ok(t(&[0.0])), &s, 5, 0, false);
    assert!(matches!(r, Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn predict_x0_inverts_the_forward_process(seed in 0u64..1000, step in 0usize..=50, scale in 0.0f64..4.0) {
        let s = make_schedule(50, scale).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = standard_normal(&[3, 4], &mut rng);
        let y = standard_normal(&[3, 4], &mut rng);
        let eps = standard_normal(&[3, 4], &mut rng);
        let x_t = forward_diffuse(&x0, &y, step, &eps, &s).unwrap();
        let target = training_target(&x0, &y, step, &eps, &s).unwrap();
        let back = predict_x0(&x_t, &target).unwrap();
        prop_assert!(max_abs_diff(&back, &x0) <= 1e-12);
    }
}
