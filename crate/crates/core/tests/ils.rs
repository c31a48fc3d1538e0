use bridgepress::ils::*;
use bridgepress::Error;
use bridgepress_tensor::gradcheck::{gradcheck_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
use bridgepress_tensor::nn::LAYER_NORM_EPS;
use bridgepress_tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCALE: AnthroScale = AnthroScale { mass_max: 120.0, height_max: 2.0 };
const REC: AnthroRecord = AnthroRecord { mass_kg: 78.0, height_m: 1.74, gender: 1 };

fn params(c: usize, heads: usize, seed: u64) -> ParamSet {
    init_ils_params(&IlsConfig { channels: c, heads }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn layer_norm_row(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    v.iter().map(|x| (x - mu) / (var + LAYER_NORM_EPS).sqrt()).collect()
}

#[test]
fn embedding_matches_affine_recomputation() {
    let ps = params(4, 2, 21);
    let e = embed_anthro(&ps, &REC, Some(&SCALE)).unwrap();
    let inputs = [78.0 / 120.0, 1.74 / 2.0, 1.0];
    for (row, (name, x)) in TOKEN_LAYERS.iter().zip(inputs).enumerate() {
        let w = ps.get(&format!("{name}.w")).unwrap().data().to_vec();
        let b = ps.get(&format!("{name}.b")).unwrap().data().to_vec();
        for c in 0..4 {
            let want = x * w[c] + b[c];
            assert!((e.0.data()[row * 4 + c] - want).abs() <= 1e-15);
        }
    }
}

#[test]
fn identical_tokens_attend_to_identical_rows() {
    let ps = params(4, 2, 22);
    let row = [0.3, -1.1, 0.25, 0.8];
    let e = AnthroTokens::new(Tensor::from_vec(&[3, 4], row.repeat(3)).unwrap()).unwrap();
    let a = self_attend_anthro(&ps, &e, 2).unwrap();
    let d = a.0.data();
    for r in 1..3 {
        for c in 0..4 {
            assert!((d[r * 4 + c] - d[c]).abs() <= 1e-15);
        }
    }
}

fn identity_attention(ps: &mut ParamSet, name: &str, c: usize) {
    let mut eye = vec![0.0; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    for proj in ["q", "k", "v", "o"] {
        ps.set(&format!("{name}.{proj}.w"), Tensor::from_vec(&[c, c], eye.clone()).unwrap()).unwrap();
        ps.set(&format!("{name}.{proj}.b"), Tensor::zeros(&[c])).unwrap();
    }
}

#[test]
fn identity_projection_self_attention_matches_direct_evaluation() {
    let c = 4;
    let mut ps = params(c, 1, 23);
    identity_attention(&mut ps, "self_attn", c);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens: Vec<f64> = (0..3 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e = AnthroTokens::new(Tensor::from_vec(&[3, c], tokens.clone()).unwrap()).unwrap();
    let got = self_attend_anthro(&ps, &e, 1).unwrap();
    for i in 0..3 {
        let qi = &tokens[i * c..(i + 1) * c];
        let scores: Vec<f64> = (0..3)
            .map(|j| qi.iter().zip(&tokens[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        let mix: Vec<f64> = (0..c).map(|k| (0..3).map(|j| ex[j] / z * tokens[j * c + k]).sum()).collect();
        let want = layer_norm_row(&mix);
        for k in 0..c {
            assert!((got.0.data()[i * c + k] - want[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn zeroed_block_reduces_to_layer_norm_of_latent() {
    let mut ps = params(8, 2, 24);
    zero_ils_weights(&mut ps);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::from_vec(&[8, 3, 5], (0..120).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let lat = LatentTensor::new(z).unwrap();
    let out = ils_block(&ps, &lat, &REC, Some(&SCALE), 2).unwrap();
    let seq = lat.flatten().unwrap();
    let got = out.flatten().unwrap();
    for p in 0..15 {
        let want = layer_norm_row(&seq.data()[p * 8..(p + 1) * 8]);
        for c in 0..8 {
            assert!((got.data()[p * 8 + c] - want[c]).abs() <= 1e-12);
        }
    }
}

#[test]
fn mass_changes_informed_latent() {
    let ps = params(8, 2, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = LatentTensor::new(Tensor::from_vec(&[8, 2, 2], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
    let a = ils_block(&ps, &z, &REC, Some(&SCALE), 2).unwrap();
    let b = ils_block(&ps, &z, &AnthroRecord { mass_kg: 50.0, ..REC }, Some(&SCALE), 2).unwrap();
    assert_eq!(a.tensor().shape(), z.tensor().shape());
    assert!(a.tensor().data().iter().zip(b.tensor().data()).any(|(x, y)| x != y));
}

#[test]
fn channel_mismatch_is_a_dimension_error() {
    let ps = params(8, 2, 26);
    let tokens = AnthroTokens::new(Tensor::zeros(&[3, 8])).unwrap();
    let z = LatentTensor::new(Tensor::zeros(&[4, 2, 2])).unwrap();
    assert!(matches!(inform_latent(&ps, &z, &tokens, 2), Err(Error::Dimension(_))));
    let batch = Tensor::zeros(&[2, 8, 2, 2]);
    assert!(matches!(ils_batch(&ps, &batch, &[REC], Some(&SCALE), 2), Err(Error::Dimension(_))));
}

#[test]
fn gradcheck_through_block() {
    let ps = params(4, 2, 27);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = Tensor::from_vec(&[4, 2, 3], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::from_vec(&[4, 2, 3], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let r = gradcheck_params::<_, Error>(
        |ps, extra| {
            let out = ils_block(ps, &LatentTensor::new(extra[0].clone())?, &REC, Some(&SCALE), 2)?;
            Ok(out.into_tensor().mul(&w)?.sum())
        },
        &ps,
        &[z],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(r.rel_err < DEFAULT_TOLERANCE, "{r:?}");
}
