use std::collections::BTreeMap;

use bridgepress::bridge::{make_schedule, sample};
use bridgepress::data::{toy_dataset, Dataset, Split, ToyDatasetSpec};
use bridgepress::pipeline::*;
use bridgepress::Error;

fn tiny() -> Dataset {
    toy_dataset(&ToyDatasetSpec::new(10, 3, 5)).unwrap()
}

fn quick(regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        diffusion_steps: 20,
        sample_steps: 5,
        ae_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn config_text_round_trip_and_unknown_keys() {
    let cfg = TrainConfig { regime: Regime::Lbbdm, seed: 9, s_scale: 0.5, denoiser_ils: true, ..TrainConfig::default() };
    assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    let err = TrainConfig::from_text("regime=cgan\nlearning_rate=0.1\n").unwrap_err();
    assert!(err.is_configuration());
    assert!(TrainConfig::from_text("epochs=many\n").unwrap_err().is_configuration());
}

#[test]
fn gamma_is_rejected_outside_the_cgan_regime() {
    for regime in [Regime::Bbdm, Regime::BbdmIls, Regime::Lbbdm] {
        let cfg = TrainConfig { regime, gamma: Some(1.0), ..TrainConfig::default() };
        assert!(cfg.validate().unwrap_err().is_configuration());
    }
    let cfg = TrainConfig { gamma: Some(1.0), ..TrainConfig::default() };
    cfg.validate().unwrap();
    let too_many = TrainConfig { regime: Regime::Bbdm, diffusion_steps: 10, sample_steps: 20, ..TrainConfig::default() };
    assert!(too_many.validate().unwrap_err().is_configuration());
}

#[test]
fn cgan_run_is_deterministic_and_checkpoints_round_trip() {
    let ds = tiny();
    let cfg = quick(Regime::Cgan);
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert_eq!(a.manifest.history_csv(), b.manifest.history_csv());
    assert_eq!(a.manifest.history.len(), 3);
    let csv = a.manifest.history_csv();
    assert!(csv.starts_with("epoch,loss_d,loss_g,adversarial,ssim_loss,l2,wol_kpa,val_mse,val_bm_mae_kg\n"));

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.manifest.to_text(), a.manifest.to_text());
    assert_eq!(back.manifest.run_id(), a.manifest.run_id());

    let i = ds.indices(Split::Test)[0];
    let depth = ds.depth_batch(&[i]).unwrap();
    let rec = ds.anthro(&[i])[0];
    let x = infer(&a, &depth, &rec, None, 0).unwrap();
    let y = infer(&back, &depth, &rec, None, 0).unwrap();
    assert_eq!(x.steps, 1);
    assert_eq!(x.pressure.values(), y.pressure.values());
    assert!(x.pressure.values().iter().all(|v| *v >= 0.0));
    assert!(matches!(infer(&a, &depth, &rec, Some(10), 0), Err(Error::Configuration(_))));
}

#[test]
fn tampered_manifest_is_rejected() {
    let ds = tiny();
    let ck = train(&ds, &TrainConfig { epochs: 1, ..quick(Regime::Cgan) }).unwrap();
    let text = ck.manifest.to_text().replace("seed=0", "seed=1");
    assert!(matches!(RunManifest::parse(&text), Err(Error::Manifest(_))));
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("discriminator.bprs")).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn params_container_round_trip() {
    let ds = tiny();
    let ck = train(&ds, &TrainConfig { epochs: 0, ..quick(Regime::Cgan) }).unwrap();
    let g = ck.net("generator").unwrap();
    let back = params_from_container(&params_to_container(g).unwrap()).unwrap();
    assert_eq!(checksum(&back), checksum(g));
}

#[test]
fn bbdm_sampling_is_seeded() {
    let ds = tiny();
    for regime in [Regime::Bbdm, Regime::BbdmIls] {
        let ck = train(&ds, &quick(regime)).unwrap();
        assert!(ck.manifest.history.iter().skip(1).all(|r| r.values[0].1.is_finite()));
        let i = ds.indices(Split::Val)[0];
        let depth = ds.depth_batch(&[i]).unwrap();
        let rec = ds.anthro(&[i])[0];
        let a = infer(&ck, &depth, &rec, None, 3).unwrap();
        let b = infer(&ck, &depth, &rec, None, 3).unwrap();
        let c = infer(&ck, &depth, &rec, Some(2), 3).unwrap();
        assert_eq!(a.steps, 5);
        assert_eq!(c.steps, 2);
        assert_eq!(a.pressure.values(), b.pressure.values());
        assert!(matches!(infer(&ck, &depth, &rec, Some(21), 3), Err(Error::Configuration(_))));
    }
}

#[test]
fn infer_many_matches_sequential_inference() {
    let ds = tiny();
    let ck = train(&ds, &TrainConfig { epochs: 1, ..quick(Regime::Bbdm) }).unwrap();
    let idx = ds.indices(Split::Test);
    let inputs: Vec<_> = idx.iter().map(|&i| (ds.depth_batch(&[i]).unwrap(), ds.anthro(&[i])[0])).collect();
    let many = infer_many(&ck, &inputs, None, 100).unwrap();
    for (k, (d, a)) in inputs.iter().enumerate() {
        let one = infer(&ck, d, a, None, 100 + k as u64).unwrap();
        assert_eq!(one.pressure.values(), many[k].pressure.values());
    }
}

#[test]
fn latent_bridge_keeps_the_autoencoder_frozen() {
    let ds = tiny();
    let cfg = quick(Regime::Lbbdm);
    let ae = pretrain_autoencoder(&ds, &cfg, &cfg.autoencoder()).unwrap();
    let before = checksum(&ae.params);
    assert_eq!(ae.checksum(), Some(before.as_str()));
    let ck = train_lbbdm(&ds, &ae, &cfg).unwrap();
    assert_eq!(checksum(&ae.params), before);
    assert_eq!(ck.manifest.ae_checksum.as_deref(), Some(before.as_str()));
    assert_eq!(checksum(ck.net("autoencoder").unwrap()), before);

    let unfrozen = Autoencoder::new(ae.cfg.clone(), ae.params.clone());
    assert!(matches!(train_lbbdm(&ds, &unfrozen, &cfg), Err(Error::Contract(_))));

    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let i = ds.indices(Split::Test)[0];
    let depth = ds.depth_batch(&[i]).unwrap();
    let rec = ds.anthro(&[i])[0];
    let a = infer(&ck, &depth, &rec, None, 1).unwrap();
    let b = infer(&back, &depth, &rec, None, 1).unwrap();
    assert_eq!(a.pressure.values(), b.pressure.values());
    assert_eq!(a.pressure.shape(), (27, 64));
}

#[test]
fn autoencoder_with_skips_is_a_configuration_error() {
    let ds = tiny();
    let cfg = quick(Regime::Lbbdm);
    let with_skips = bridgepress::models::GeneratorConfig { second_bottleneck: None, skips: vec![0], ..cfg.autoencoder() };
    assert!(pretrain_autoencoder(&ds, &cfg, &with_skips).unwrap_err().is_configuration());
}

#[test]
fn latent_oracle_sampler_recovers_pressure_latent() {
    let ds = tiny();
    let cfg = quick(Regime::Lbbdm);
    let ae = pretrain_autoencoder(&ds, &cfg, &cfg.autoencoder()).unwrap();
    let idx = ds.indices(Split::Val);
    let anthro = ds.anthro(&idx);
    let scale = ds.manifest.anthro_scale;
    let z_p = ae.encode(&ds.pressure_batch(&idx).unwrap().0, &anthro, &scale).unwrap();
    let pooled = ds.depth_batch(&idx).unwrap().avg_pool2d(2).unwrap();
    let z_d = ae.encode(&pooled, &anthro, &scale).unwrap();
    let sched = make_schedule(1000, 0.0).unwrap();
    for steps in [1, 10, 200] {
        let (z, _) = sample(&z_d, |x, _, _| Ok(x.sub(&z_p)?), &sched, steps, 0, false).unwrap();
        let err = z.data().iter().zip(z_p.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "S={steps}: {err}");
    }
}

#[test]
fn cgan_needs_global_normalization() {
    let spec = ToyDatasetSpec { norm_mode: bridgepress::physics::NormMode::Individual, ..ToyDatasetSpec::new(10, 3, 5) };
    let ds = toy_dataset(&spec).unwrap();
    assert!(train(&ds, &quick(Regime::Cgan)).unwrap_err().is_configuration());
    let mut kv = BTreeMap::new();
    kv.insert("regime".to_string(), "nope".to_string());
    assert!(TrainConfig::default().apply(&kv).unwrap_err().is_configuration());
}
