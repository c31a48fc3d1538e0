//! Finite-difference gradient suite behind `bridgepress gradcheck`.

use bridgepress::ils::{ils_block, init_ils_params, AnthroRecord, AnthroScale, IlsConfig, LatentTensor};
use bridgepress::models::*;
use bridgepress::{Error, Result};
use bridgepress_tensor::gradcheck::{gradcheck, gradcheck_params, GradCheckReport, DEFAULT_STEP};
use bridgepress_tensor::nn::{init_attention, multi_head_attention};
use bridgepress_tensor::{Conv2dSpec, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

pub const MODULES: [&str; 3] = ["tensorcore", "ils", "models"];

pub fn select(name: &str) -> Result<Vec<&'static str>> {
    if name == "all" {
        return Ok(MODULES.to_vec());
    }
    match MODULES.iter().find(|m| **m == name) {
        Some(m) => Ok(vec![*m]),
        None => Err(Error::Configuration(format!("unknown gradcheck module `{name}` (tensorcore, ils, models, all)"))),
    }
}

pub type Check = (&'static str, Result<GradCheckReport>);

pub fn run(module: &str) -> Vec<Check> {
    match module {
        "tensorcore" => tensorcore(),
        "ils" => ils(),
        "models" => models(),
        _ => Vec::new(),
    }
}

const SCALE: AnthroScale = AnthroScale { mass_max: 120.0, height_max: 2.0 };

fn recs() -> Vec<AnthroRecord> {
    vec![
        AnthroRecord { mass_kg: 62.0, height_m: 1.68, gender: 0 },
        AnthroRecord { mass_kg: 91.0, height_m: 1.83, gender: 1 },
    ]
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec_unchecked(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values in ±[0.2, 1] so kinked ops stay clear of their kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec_unchecked(shape, v).expect("valid shape")
}

fn unary(t: &[Tensor], w: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    Ok(f(&t[0])?.mul(w)?.sum())
}

fn tensorcore() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e);
    let h = DEFAULT_STEP;
    let x = off_zero(&[3, 4], &mut rng);
    let pos = uniform(&[3, 4], 0.5, 2.0, &mut rng);
    let w = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b = uniform(&[3, 4], 0.5, 2.0, &mut rng);
    let mut out: Vec<Check> = Vec::new();

    let mut elementwise = |name: &'static str, input: &Tensor, f: fn(&Tensor) -> Result<Tensor>| {
        out.push((name, gradcheck::<_, Error>(|t| unary(t, &w, f), std::slice::from_ref(input), h)));
    };
    elementwise("exp", &x, |t| Ok(t.exp()?));
    elementwise("ln", &pos, |t| Ok(t.ln()?));
    elementwise("sqrt", &pos, |t| Ok(t.sqrt()?));
    elementwise("sigmoid", &x, |t| Ok(t.sigmoid()));
    elementwise("tanh", &x, |t| Ok(t.tanh()));
    elementwise("relu", &x, |t| Ok(t.relu()));
    elementwise("leaky_relu", &x, |t| Ok(t.leaky_relu(0.2)));
    elementwise("silu", &x, |t| Ok(t.silu()));
    elementwise("abs", &x, |t| Ok(t.abs()));
    elementwise("square_scale_shift", &x, |t| Ok(t.square().scale(-0.7).add_scalar(0.3).neg()));
    elementwise("bce_with_logits", &x, |t| Ok(t.bce_with_logits(0.9)));
    elementwise("softmax", &x, |t| Ok(t.softmax(1)?));
    elementwise("softmax_axis0", &x, |t| Ok(t.softmax(0)?));
    elementwise("reshape_transpose", &x, |t| Ok(t.reshape(&[4, 3])?.transpose()?));
    elementwise("slice_concat", &x, |t| Ok(Tensor::concat(&[t.slice(1, 2, 2)?, t.slice(1, 0, 2)?], 1)?));
    elementwise("mean_last_broadcast", &x, |t| Ok(t.add_prefix(&t.mean_last()?)?.square()));

    out.push((
        "add_sub_mul_div",
        gradcheck::<_, Error>(|t| Ok(t[0].add(&t[1])?.mul(&t[0])?.div(&t[1])?.sub(&t[0])?.mul(&w)?.sum()), &[x.clone(), b.clone()], h),
    ));
    let row = uniform(&[4], -1.0, 1.0, &mut rng);
    out.push((
        "suffix_broadcast",
        gradcheck::<_, Error>(|t| Ok(t[0].add_suffix(&t[1])?.mul_suffix(&t[1])?.mul(&w)?.sum()), &[x.clone(), row], h),
    ));
    let m = uniform(&[4, 5], -1.0, 1.0, &mut rng);
    out.push(("matmul", gradcheck::<_, Error>(|t| Ok(t[0].matmul(&t[1])?.tanh().sum()), &[x.clone(), m], h)));
    let (scale, offset) = (uniform(&[4], 0.5, 1.5, &mut rng), uniform(&[4], -0.5, 0.5, &mut rng));
    out.push((
        "layer_norm",
        gradcheck::<_, Error>(|t| Ok(t[0].layer_norm(&t[1], &t[2], 1e-5)?.mul(&w)?.sum()), &[x.clone(), scale, offset], h),
    ));

    let img = uniform(&[2, 2, 6, 5], -1.0, 1.0, &mut rng);
    let k = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let kb = uniform(&[3], -0.5, 0.5, &mut rng);
    for (name, spec) in [("conv2d_s1p1", Conv2dSpec { stride: 1, pad: 1 }), ("conv2d_s2p0", Conv2dSpec { stride: 2, pad: 0 })] {
        out.push((
            name,
            gradcheck::<_, Error>(|t| Ok(t[0].conv2d(&t[1], Some(&t[2]), spec)?.square().sum()), &[img.clone(), k.clone(), kb.clone()], h),
        ));
    }
    let img4 = uniform(&[1, 2, 4, 6], -1.0, 1.0, &mut rng);
    out.push(("avg_pool2d", gradcheck::<_, Error>(|t| Ok(t[0].avg_pool2d(2)?.square().sum()), &[img4.clone()], h)));
    out.push(("resize_nearest", gradcheck::<_, Error>(|t| Ok(t[0].resize_nearest(7, 5)?.square().sum()), &[img4], h)));

    let mut ps = ParamSet::new();
    init_attention(&mut ps, "attn", 4, &mut rng).expect("attention init");
    let q = uniform(&[2, 4], -1.0, 1.0, &mut rng);
    let kv = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let aw = uniform(&[2, 4], -1.0, 1.0, &mut rng);
    out.push((
        "multi_head_attention",
        gradcheck_params::<_, Error>(
            |ps, t| Ok(multi_head_attention(ps, "attn", &t[0], &t[1], &t[1], 2)?.mul(&aw)?.sum()),
            &ps,
            &[q, kv],
            h,
        ),
    ));
    out
}

fn ils() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x115);
    let ps = init_ils_params(&IlsConfig { channels: 4, heads: 2 }, &mut rng).expect("ils init");
    let z = uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
    let w = uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
    let rec = recs()[1];
    vec![(
        "ils_block",
        gradcheck_params::<_, Error>(
            |ps, t| Ok(ils_block(ps, &LatentTensor::new(t[0].clone())?, &rec, Some(&SCALE), 2)?.into_tensor().mul(&w)?.sum()),
            &ps,
            &[z],
            DEFAULT_STEP,
        ),
    )]
}

fn models() -> Vec<Check> {
    let h = DEFAULT_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(0x30de1);
    let g_cfg = GeneratorConfig { in_shape: (8, 8), in_pool: 1, ..GeneratorConfig::toy() };
    let d_cfg = DiscriminatorConfig { cond_pool: 1, ..DiscriminatorConfig::toy_conditional() };
    let g = init_generator(&g_cfg, &mut rng).expect("generator init");
    let d = init_discriminator(&d_cfg, &mut rng).expect("discriminator init");
    let depth = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let p = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let w = LossWeights::default();
    let divisors = vec![0.05, 0.05];
    let r = recs();
    let mut out: Vec<Check> = Vec::new();

    out.push((
        "generator_loss",
        gradcheck_params(
            |g: &ParamSet, _: &[Tensor]| {
                let p_hat = generator_forward(g, &g_cfg, &depth, Some(&r), Some(&SCALE))?;
                Ok(loss_generator_cond(&d, &d_cfg, &depth, &p, &p_hat, &divisors, &w)?.total)
            },
            &g,
            &[],
            h,
        ),
    ));
    let p_hat = eval(|| generator_forward(&g, &g_cfg, &depth, Some(&r), Some(&SCALE))).expect("forward");
    out.push((
        "discriminator_loss",
        gradcheck_params(|d: &ParamSet, _: &[Tensor]| loss_discriminator_cond(d, &d_cfg, &depth, &p, &p_hat, &w), &d, &[], h),
    ));
    out.push((
        "weight_optimization_loss",
        gradcheck::<_, Error>(|t| wol_loss(&p, &t[0], &[3.0, 3.0]), &[p_hat.scale(1.3)], h),
    ));

    let ug_cfg = GeneratorConfig { in_shape: (8, 8), in_pool: 1, skips: vec![], second_bottleneck: Some(8), ..GeneratorConfig::toy() };
    let ud_cfg = DiscriminatorConfig { cond_pool: 1, ..DiscriminatorConfig::toy_unconditional() };
    let ug = init_generator(&ug_cfg, &mut rng).expect("generator init");
    let ud = init_discriminator(&ud_cfg, &mut rng).expect("discriminator init");
    let x = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    out.push((
        "unconditional_generator_loss",
        gradcheck_params(
            |g: &ParamSet, _: &[Tensor]| {
                let enc = encode(g, &ug_cfg, &x)?;
                let z = inform(g, &ug_cfg, &enc.latent, Some(&r), Some(&SCALE))?;
                let x_hat = decode(g, &ug_cfg, &z, None)?;
                Ok(loss_unconditional_pair(&ud, &ud_cfg, &x, &x_hat, &w)?.1.total)
            },
            &ug,
            &[],
            h,
        ),
    ));
    let x_hat = x.scale(0.8);
    out.push((
        "unconditional_discriminator_loss",
        gradcheck_params(|d: &ParamSet, _: &[Tensor]| Ok(loss_unconditional_pair(d, &ud_cfg, &x, &x_hat, &w)?.0), &ud, &[], h),
    ));

    let dn_cfg = DenoiserConfig { use_ils: true, ..DenoiserConfig::toy((8, 8), 1) };
    let dn = init_denoiser(&dn_cfg, &mut rng).expect("denoiser init");
    let xt = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    let y = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let target = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    out.push((
        "denoiser_mse",
        gradcheck_params(
            |ps: &ParamSet, t: &[Tensor]| {
                let eps = denoiser_forward(ps, &dn_cfg, &t[0], &y, &[37, 800], Some((&r, Some(&SCALE))))?;
                mse_loss(&target, &eps)
            },
            &dn,
            &[xt],
            h,
        ),
    ));
    out
}
