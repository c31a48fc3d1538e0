//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 3 7`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use bridgepress::bridge::{forward_diffuse, make_schedule, sample, standard_normal};
use bridgepress::data::{
    gen_toy_raw, make_splits, toy_dataset, Container, Dataset, Split, ToyDatasetSpec, CONTAINER_VERSION,
};
use bridgepress::ils::{AnthroRecord, AnthroScale};
use bridgepress::metrics::{bm_mae, frechet_distance, mse_kpa, posture_iou, ssim, MassReference, SsimParams};
use bridgepress::models::*;
use bridgepress::physics::{mass_from_pressure, resize_pressure, wol, wol_l1, PressureMap};
use bridgepress::pipeline::{infer_many, train, Checkpoint, Regime, TrainConfig};
use bridgepress::Error;
use bridgepress_tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn lib<T>(r: bridgepress::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// 1 ----------------------------------------------------------------------

fn gradient_verification() -> Outcome {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_bridgepress")).args(["gradcheck", "--module", "all"]).output().map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let checks = text.lines().filter(|l| l.starts_with("ok")).count();
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL") || l.starts_with("ERROR")).collect();
    ensure(out.status.success() && failed.is_empty(), format!("{} failing checks: {}", failed.len(), failed.join("; ")))?;
    for module in ["tensorcore/", "ils/", "models/"] {
        ensure(text.lines().any(|l| l.starts_with("ok") && l.contains(module)), format!("no checks for {module}"))?;
    }
    for loss in ["generator_loss", "discriminator_loss", "unconditional_generator_loss", "unconditional_discriminator_loss", "denoiser_mse"] {
        ensure(text.contains(&format!("models/{loss} ")), format!("missing {loss}"))?;
    }
    ensure(secs < 60.0, format!("suite took {secs:.1}s"))?;
    Ok(format!("{checks} checks below 1e-4 relative error in {secs:.1}s"))
}

// 2 ----------------------------------------------------------------------

fn bridge_endpoints() -> Outcome {
    let t0 = Instant::now();
    let s = lib(make_schedule(1000, 1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [2, 1, 4, 5];
    let (x0, y, eps) = (standard_normal(&shape, &mut rng), standard_normal(&shape, &mut rng), standard_normal(&shape, &mut rng));
    let at0 = max_abs_diff(lib(forward_diffuse(&x0, &y, 0, &eps, &s))?.data(), x0.data());
    let at_t = max_abs_diff(lib(forward_diffuse(&x0, &y, 1000, &eps, &s))?.data(), y.data());
    ensure(at0 <= 1e-12 && at_t <= 1e-12, format!("endpoint errors {at0:e}, {at_t:e}"))?;

    let n = 10_000;
    let (a, b) = (0.2, 1.4);
    let x0 = Tensor::from_vec(&[1], vec![a]).unwrap();
    let y = Tensor::from_vec(&[1], vec![b]).unwrap();
    let draws: Vec<f64> = (0..n)
        .map(|_| lib(forward_diffuse(&x0, &y, 500, &standard_normal(&[1], &mut rng), &s)).map(|t| t.data()[0]))
        .collect::<Result<_, _>>()?;
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let delta = s.delta(500);
    let want_mean = 0.5 * a + 0.5 * b;
    let sigma = (delta / n as f64).sqrt();
    ensure((mean - want_mean).abs() <= 3.0 * sigma, format!("mean {mean} vs {want_mean} (σ {sigma:e})"))?;
    ensure((var - delta).abs() <= 0.05 * delta, format!("variance {var} vs {delta}"))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "endpoints exact to {:.1e}; mean off by {:.2}σ, variance off by {:.2}%; {secs:.2}s",
        at0.max(at_t),
        (mean - want_mean).abs() / sigma,
        100.0 * (var - delta).abs() / delta
    ))
}

// 3 ----------------------------------------------------------------------

fn oracle_sampler() -> Outcome {
    let s = lib(make_schedule(1000, 0.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = standard_normal(&[2, 1, 6, 8], &mut rng);
    let y = standard_normal(&[2, 1, 6, 8], &mut rng);
    let mut outs = Vec::new();
    let mut worst: f64 = 0.0;
    for steps in [1, 10, 200] {
        let (out, _) = lib(sample(&y, |x_t, _, _| Ok(x_t.sub(&x0)?), &s, steps, 0, false))?;
        let err = max_abs_diff(out.data(), x0.data());
        ensure(err <= 1e-10, format!("S={steps}: {err:e}"))?;
        worst = worst.max(err);
        outs.push(out);
    }
    let spread = outs.iter().map(|o| max_abs_diff(o.data(), outs[0].data())).fold(0.0, f64::max);
    ensure(spread <= 1e-10, format!("results differ across S by {spread:e}"))?;
    Ok(format!("max recovery error {worst:.1e}, spread across S {spread:.1e}"))
}

// 4 ----------------------------------------------------------------------

const SCALE: AnthroScale = AnthroScale { mass_max: 120.0, height_max: 2.0 };

fn recs() -> Vec<AnthroRecord> {
    vec![AnthroRecord { mass_kg: 62.0, height_m: 1.68, gender: 0 }, AnthroRecord { mass_kg: 91.0, height_m: 1.83, gender: 1 }]
}

fn wol_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let area = rng.random_range(1e-4..1e-2);
        let mut draw = || (0..h * w).map(|_| rng.random_range(0.0..20.0)).collect::<Vec<f64>>();
        let (pv, qv) = (draw(), draw());
        let p = lib(PressureMap::new(h, w, pv, area))?;
        let q = lib(PressureMap::new(h, w, qv, area))?;
        if lib(wol(&p, &q))? > lib(wol_l1(&p, &q))? {
            violations += 1;
        }
    }
    ensure(violations == 0, format!("{violations} pairs with wol > wol_l1"))?;

    let p = lib(PressureMap::new(1, 4, vec![3.0, 0.0, 1.0, 2.0], 1e-3))?;
    let q = lib(PressureMap::new(1, 4, vec![0.0, 3.0, 2.0, 1.0], 1e-3))?;
    let (c, c1) = (lib(wol(&p, &q))?, lib(wol_l1(&p, &q))?);
    ensure(c == 0.0 && c1 > 0.0, format!("witness gave wol {c}, wol_l1 {c1}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let g_cfg = GeneratorConfig { in_shape: (8, 8), in_pool: 1, ..GeneratorConfig::toy() };
    let d_cfg = DiscriminatorConfig { cond_pool: 1, ..DiscriminatorConfig::toy_conditional() };
    let g = lib(init_generator(&g_cfg, &mut rng))?;
    let d = lib(init_discriminator(&d_cfg, &mut rng))?;
    let depth = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let p = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let divisors = [11.0, 11.0];
    let p_hat = lib(eval(|| generator_forward(&g, &g_cfg, &depth, Some(&recs()), Some(&SCALE))))?;
    let loss = |gamma: f64| {
        let w = LossWeights { gamma, ..LossWeights::default() };
        eval(|| loss_generator_cond(&d, &d_cfg, &depth, &p, &p_hat, &divisors, &w))
    };
    let base = lib(loss(0.0))?;
    let base_total = lib(base.total.item().map_err(Error::from))?;
    let lambda = LossWeights::default().lambda;
    let mut worst: f64 = 0.0;
    for gamma in [0.001, 0.0182, 0.1, 1.0] {
        let l = lib(loss(gamma))?;
        let slope = (lib(l.total.item().map_err(Error::from))? - base_total) / gamma;
        let err = (slope - lambda * l.wol).abs() / slope.abs().max(1.0);
        ensure(err <= 1e-9, format!("γ={gamma}: slope {slope} vs {}", lambda * l.wol))?;
        worst = worst.max(err);
    }
    Ok(format!("0 of 1000 violations; witness wol 0 vs wol_l1 {c1:.3}; slope error {worst:.1e}"))
}

// 5 ----------------------------------------------------------------------

fn mass_physics() -> Outcome {
    let raw = lib(gen_toy_raw(&ToyDatasetSpec::new(25, 8, 5)))?;
    let mut worst: f64 = 0.0;
    for (_, _, _, s) in &raw {
        let m = lib(mass_from_pressure(&s.pressure))?;
        worst = worst.max((m - s.anthro.mass_kg).abs());
    }
    ensure(worst <= 1e-9, format!("mass error {worst:e} kg"))?;
    let mut resize_worst: f64 = 0.0;
    for (_, _, _, s) in raw.iter().take(20) {
        // a 3× finer raw grid carrying the same load
        let (h, w) = s.pressure.shape();
        let fine: Vec<f64> = (0..9 * h * w).map(|k| s.pressure.get(k / (3 * w) / 3, k % (3 * w) / 3)).collect();
        let raw = lib(PressureMap::new(3 * h, 3 * w, fine, s.pressure.taxel_area_m2() / 9.0))?;
        let m = lib(mass_from_pressure(&raw))?;
        for target in [(27, 64), (20, 47), (13, 32), (3 * h, 3 * w)] {
            let r = lib(resize_pressure(&raw, target))?;
            resize_worst = resize_worst.max((lib(mass_from_pressure(&r))? - m).abs());
        }
    }
    ensure(resize_worst <= 1e-9, format!("resize mass error {resize_worst:e} kg"))?;
    Ok(format!("{} samples within {worst:.1e} kg; resize within {resize_worst:.1e} kg", raw.len()))
}

// 6 ----------------------------------------------------------------------

fn ils_reduction() -> Outcome {
    let cfg = GeneratorConfig { in_shape: (8, 8), in_pool: 1, ..GeneratorConfig::toy() };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ps = lib(init_generator(&cfg, &mut rng))?;
    let d = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let mut zeroed: ParamSet = ps.clone();
    zeroed.zero_where(|n| n.starts_with("ils.") && !(n.ends_with(".scale") || n.ends_with(".offset")));
    let with_ils = lib(eval(|| generator_forward(&zeroed, &cfg, &d, Some(&recs()), Some(&SCALE))))?;
    let plain = lib(eval(|| -> bridgepress::Result<Tensor> {
        let enc = encode(&zeroed, &cfg, &d)?;
        decode(&zeroed, &cfg, &latent_layer_norm(&enc.latent)?, Some(&enc))
    }))?;
    let err = max_abs_diff(with_ils.data(), plain.data());
    ensure(err <= 1e-12, format!("zeroed block differs by {err:e}"))?;

    let a = recs();
    let mut b = a.clone();
    b[0].mass_kg = 80.0;
    b[1].mass_kg = 70.0;
    let pa = lib(eval(|| generator_forward(&ps, &cfg, &d, Some(&a), Some(&SCALE))))?;
    let pb = lib(eval(|| generator_forward(&ps, &cfg, &d, Some(&b), Some(&SCALE))))?;
    let change = max_abs_diff(pa.data(), pb.data());
    ensure(change > 0.0, "mass change left the output unchanged")?;
    Ok(format!("zeroed block matches plain path to {err:.1e}; mass change moves output by {change:.2e}"))
}

// 7 ----------------------------------------------------------------------

fn metric_identities() -> Outcome {
    let ds = lib(toy_dataset(&ToyDatasetSpec::new(6, 2, 7)))?;
    let refs: Vec<PressureMap> = ds.samples.iter().map(|s| s.pressure.clone()).collect();
    for p in &refs {
        let (h, w) = p.shape();
        let v = p.values();
        let s = lib(ssim(v, v, h, w, &SsimParams::standard(h, w)))?;
        ensure(s == 1.0, format!("ssim(x,x) = {s}"))?;
        let iou = lib(posture_iou(v, v, 0.01 * p.max()))?;
        ensure(iou == 1.0, format!("posture_iou(x,x) = {iou}"))?;
        let m = lib(mse_kpa(p, p))?;
        ensure(m == 0.0, format!("mse_kpa(x,x) = {m}"))?;
    }
    let bm = lib(bm_mae(&refs, MassReference::Maps(&refs)))?;
    ensure(bm == 0.0, format!("bm_mae identity = {bm}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 6;
    let cloud: Vec<Vec<f64>> = (0..300).map(|_| standard_normal(&[dim], &mut rng).to_vec()).collect();
    let same = lib(frechet_distance(&cloud, &cloud))?.distance;
    ensure(same <= 1e-6, format!("frechet(A,A) = {same:e}"))?;
    let delta = 0.7;
    let shifted: Vec<Vec<f64>> = cloud.iter().map(|v| v.iter().map(|x| x + delta).collect()).collect();
    let d = lib(frechet_distance(&cloud, &shifted))?.distance;
    let want = delta * delta * dim as f64;
    ensure((d - want).abs() <= 1e-6, format!("shift gave {d}, want {want}"))?;
    Ok(format!("identities exact on {} maps; frechet(A,A) {same:.1e}; shift error {:.1e}", refs.len(), (d - want).abs()))
}

// 8 ----------------------------------------------------------------------

fn column(ck: &Checkpoint, name: &str) -> Vec<f64> {
    ck.manifest.history.iter().map(|r| r.values.iter().find(|(k, _)| k == name).map_or(f64::NAN, |(_, v)| *v)).collect()
}

fn toy_cgan_config(seed: u64, gamma: Option<f64>) -> TrainConfig {
    TrainConfig { regime: Regime::Cgan, epochs: 30, lr: 1e-3, seed, gamma, ..TrainConfig::default() }
}

fn toy_training() -> Outcome {
    let ds = lib(toy_dataset(&ToyDatasetSpec::new(25, 8, 8)))?;
    ensure(ds.samples.len() == 200, format!("{} samples", ds.samples.len()))?;
    let cfg = toy_cgan_config(0, None);
    let t0 = Instant::now();
    let a = lib(train(&ds, &cfg))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("run took {secs:.0}s"))?;
    let val = column(&a, "val_mse");
    let (first, last) = (val[0], *val.last().unwrap());
    ensure(last.is_finite() && last <= 0.5 * first, format!("val_mse {first:.4e} → {last:.4e}"))?;
    let b = lib(train(&ds, &cfg))?;
    ensure(a.manifest.history_csv() == b.manifest.history_csv(), "same-seed runs produced different metric CSVs")?;
    Ok(format!(
        "val_mse {first:.3e} → {last:.3e} ({:.0}% drop) over {} epochs in {secs:.0}s; repeat run identical",
        100.0 * (1.0 - last / first),
        cfg.epochs
    ))
}

// 9 ----------------------------------------------------------------------

fn test_bm_mae(ds: &Dataset, ck: &Checkpoint) -> Result<f64, String> {
    let idx = ds.indices(Split::Test);
    let inputs = idx.iter().map(|&i| Ok((ds.depth_batch(&[i])?, ds.samples[i].anthro))).collect::<bridgepress::Result<Vec<_>>>();
    let preds = lib(infer_many(ck, &lib(inputs)?, None, 0))?;
    let maps: Vec<PressureMap> = preds.into_iter().map(|p| p.pressure).collect();
    let measured: Vec<f64> = idx.iter().map(|&i| ds.samples[i].anthro.mass_kg).collect();
    lib(bm_mae(&maps, MassReference::Measured(&measured)))
}

fn wol_ablation() -> Outcome {
    let ds = lib(toy_dataset(&ToyDatasetSpec::new(25, 8, 8)))?;
    let seeds = 0..5u64;
    let mut means = Vec::new();
    for gamma in [1.0, 0.0] {
        let mut total = 0.0;
        for seed in seeds.clone() {
            let ck = lib(train(&ds, &toy_cgan_config(seed, Some(gamma))))?;
            total += test_bm_mae(&ds, &ck)?;
        }
        means.push(total / seeds.clone().count() as f64);
    }
    let (with, without) = (means[0], means[1]);
    ensure(with < without, format!("BM MAE γ=1 {with:.3} kg vs γ=0 {without:.3} kg"))?;
    Ok(format!("test BM MAE over 5 seeds: γ=1 {with:.3} kg < γ=0 {without:.3} kg"))
}

// 10 ---------------------------------------------------------------------

fn step_sweep() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let spec = dir.join("spec.txt");
    fs::write(&spec, "subjects=5\nsamples_per_subject=3\nseed=10\n").map_err(|e| e.to_string())?;
    let (data, ck, out) = (dir.join("data"), dir.join("ck"), dir.join("sweep"));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let recipe = Path::new(env!("CARGO_MANIFEST_DIR")).join("recipes/steps-sweep.txt");
    let runs: [Vec<String>; 3] = [
        vec!["gen-data".into(), "--spec".into(), s(&spec), "--out".into(), s(&data)],
        vec!["train".into(), "--regime".into(), "bbdm".into(), "--data".into(), s(&data), "--out".into(), s(&ck), "--epochs".into(), "1".into()],
        vec![
            "sweep".into(),
            "--recipe".into(),
            s(&recipe),
            "--values".into(),
            "10,200,1000".into(),
            "--data".into(),
            s(&data),
            "--ckpt".into(),
            s(&ck),
            "--out".into(),
            s(&out),
        ],
    ];
    let t0 = Instant::now();
    for args in &runs {
        let o = Command::new(env!("CARGO_BIN_EXE_bridgepress")).args(args).output().map_err(|e| e.to_string())?;
        ensure(o.status.success(), format!("`{}` failed: {}", args[0], String::from_utf8_lossy(&o.stderr).trim()))?;
    }
    let table = fs::read_to_string(out.join("comparison.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    ensure(rows.len() == 4, format!("{} lines in comparison report", rows.len()))?;
    let width = rows[0].len();
    ensure(rows[0][0] == "steps" && rows[0].contains(&"bm_mae_kg"), format!("bad header {:?}", rows[0]))?;
    for (row, want) in rows[1..].iter().zip(["10", "200", "1000"]) {
        ensure(row.len() == width && row[0] == want, format!("bad row {row:?}"))?;
        for (h, v) in rows[0].iter().zip(row).skip(1) {
            ensure(*v == "na" || v.parse::<f64>().is_ok_and(f64::is_finite), format!("{h}={v} is not a finite number"))?;
        }
    }
    Ok(format!("S ∈ {{10, 200, 1000}} on one checkpoint, {width}-column report in {:.0}s", t0.elapsed().as_secs_f64()))
}

// 11 ---------------------------------------------------------------------

fn format_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut data: Vec<f64> = (0..500).map(|_| f64::from_bits(rng.random::<u64>() & !(0x7ffu64 << 52) | ((rng.random_range(1..2046u64)) << 52))).collect();
    data.extend([0.0, -0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, -f64::MAX, 1.0 / 3.0]);
    let n = data.len();
    let c = lib(Container::new(&[n], data.clone()))?.with("role", "pressure").with("units", "kPa");
    let bytes = lib(c.to_bytes())?;
    let back = lib(Container::from_bytes(&bytes))?;
    ensure(back.data.iter().map(|v| v.to_bits()).eq(data.iter().map(|v| v.to_bits())), "payload bits changed")?;
    ensure(back == c && lib(back.to_bytes())? == bytes, "container did not round-trip")?;

    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0xff;
    ensure(matches!(Container::from_bytes(&bad_magic), Err(Error::Format(_))), "corrupted magic not a format error")?;
    for cut in [1, 7, bytes.len() / 2] {
        ensure(matches!(Container::from_bytes(&bytes[..bytes.len() - cut]), Err(Error::Length(_))), format!("truncation by {cut} not a length error"))?;
    }
    let mut ahead = bytes.clone();
    ahead[4..6].copy_from_slice(&(CONTAINER_VERSION + 1).to_le_bytes());
    ensure(matches!(Container::from_bytes(&ahead), Err(Error::UnsupportedVersion { .. })), "newer version accepted")?;

    let ids: Vec<u32> = (0..40).collect();
    for _ in 0..100 {
        let seed = rng.random::<u64>();
        let s = lib(make_splits(&ids, (0.6, 0.2, 0.2), seed))?;
        ensure(s.is_disjoint(), format!("splits overlap for seed {seed}"))?;
        let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        ensure(all == ids, format!("splits lose subjects for seed {seed}"))?;
    }
    Ok(format!("{n}-value payload bit-identical; magic, truncation and version faults rejected; 100 seeds disjoint"))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "gradient verification", gradient_verification),
        (2, "bridge endpoint pinning", bridge_endpoints),
        (3, "oracle sampler recovery", oracle_sampler),
        (4, "WOL algebra", wol_algebra),
        (5, "mass physics", mass_physics),
        (6, "ILS reduction and sensitivity", ils_reduction),
        (7, "metric identities", metric_identities),
        (8, "toy cGAN training", toy_training),
        (9, "WOL ablation direction", wol_ablation),
        (10, "sampling-step sweep machinery", step_sweep),
        (11, "format robustness", format_robustness),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failures += 1;
                println!("FAIL  criterion {id:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion(s) failed");
        ExitCode::FAILURE
    }
}
