use bridgepress::data::*;
use bridgepress::physics::{mass_from_pressure, smooth_grid};
use bridgepress::Error;
use proptest::prelude::*;

fn spec() -> ToySpec {
    ToySpec::default()
}

#[test]
fn toy_mass_is_exact_for_every_pose_and_cover() {
    for id in 0..12 {
        let seed = subject_seed(7, id);
        for pose in Posture::ALL {
            for cover in Cover::ALL {
                let s = gen_toy_sample(&spec(), seed, pose, cover).unwrap();
                let m = mass_from_pressure(&s.pressure).unwrap();
                assert!((m - s.anthro.mass_kg).abs() <= 1e-9, "{m} vs {}", s.anthro.mass_kg);
            }
        }
    }
}

#[test]
fn toy_pressure_is_cover_independent_and_depth_blurs() {
    let seed = subject_seed(3, 4);
    let a = gen_toy_sample(&spec(), seed, Posture::Left, Cover::Uncovered).unwrap();
    let b = gen_toy_sample(&spec(), seed, Posture::Left, Cover::Cov3mm).unwrap();
    assert_eq!(a.pressure, b.pressure);
    assert_eq!(a.anthro, b.anthro);
    let (h, w) = (a.depth.height, a.depth.width);
    let blurred = smooth_grid(&a.depth.values, h, w, spec().cover_blur[2]).unwrap();
    assert_eq!(blurred, b.depth.values);
    assert_ne!(a.depth.values, b.depth.values);
}

#[test]
fn toy_generation_is_deterministic() {
    let seed = subject_seed(11, 2);
    let a = gen_toy_sample(&spec(), seed, Posture::Supine, Cover::Cov1mm).unwrap();
    let b = gen_toy_sample(&spec(), seed, Posture::Supine, Cover::Cov1mm).unwrap();
    assert_eq!(a, b);
    let c = gen_toy_sample(&spec(), subject_seed(11, 3), Posture::Supine, Cover::Cov1mm).unwrap();
    assert_ne!(a.pressure, c.pressure);
}

#[test]
fn toy_shapes_and_ranges() {
    let s = gen_toy_sample(&spec(), 5, Posture::Right, Cover::Uncovered).unwrap();
    assert_eq!((s.depth.height, s.depth.width), (54, 128));
    assert_eq!(s.pressure.shape(), (27, 64));
    let peak = s.pressure.max();
    assert!(peak > 1.0 && peak < 120.0, "peak {peak} kPa");
    let d = s.depth.normalized().unwrap();
    assert!(d.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn range_mismatch_sharpens_odd_subjects_only() {
    let mut sp = spec();
    let base = gen_toy_sample(&sp, 9, Posture::Supine, Cover::Uncovered).unwrap();
    let even = gen_toy_sample(&sp, 8, Posture::Supine, Cover::Uncovered).unwrap();
    sp.range_mismatch = true;
    let sharp = gen_toy_sample(&sp, 9, Posture::Supine, Cover::Uncovered).unwrap();
    assert!(sharp.pressure.max() > base.pressure.max());
    assert_eq!(gen_toy_sample(&sp, 8, Posture::Supine, Cover::Uncovered).unwrap(), even);
    assert!((mass_from_pressure(&sharp.pressure).unwrap() - sharp.anthro.mass_kg).abs() < 1e-9);
}

#[test]
fn ten_subjects_split_six_two_two() {
    let ids: Vec<u32> = (0..10).collect();
    let s = make_splits(&ids, (0.6, 0.2, 0.2), 1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    assert!(s.is_disjoint());
    assert_eq!(s, make_splits(&ids, (0.6, 0.2, 0.2), 1).unwrap());
}

#[test]
fn split_errors() {
    let ids: Vec<u32> = (0..10).collect();
    assert!(matches!(make_splits(&ids, (0.6, 0.2, 0.3), 0), Err(Error::Configuration(_))));
    assert!(make_splits(&ids[..4], (0.6, 0.2, 0.2), 0).is_err());
}

#[test]
fn synthetic_subjects_join_training_only() {
    let ids: Vec<u32> = (0..10).collect();
    let mut s = make_splits(&ids, (0.6, 0.2, 0.2), 2).unwrap();
    s.add_synthetic(&[100, 101]).unwrap();
    assert_eq!(s.split_of(100), Some(Split::Train));
    assert!(s.add_synthetic(&[ids[0]]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn splits_are_disjoint_and_cover_everyone(seed in any::<u64>(), n in 5u32..60) {
        let ids: Vec<u32> = (0..n).collect();
        let s = make_splits(&ids, (0.6, 0.2, 0.2), seed).unwrap();
        prop_assert!(s.is_disjoint());
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n as usize);
    }

    #[test]
    fn container_round_trip_is_bitwise(data in prop::collection::vec(-1e300f64..1e300, 0..200)) {
        let n = data.len();
        let c = Container::new(&[n], data).unwrap().with("role", "pressure");
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        c.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, c);
    }
}

#[test]
fn container_map_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen_toy_sample(&spec(), 1, Posture::Supine, Cover::Uncovered).unwrap();
    let c = Container::new(&[27, 64], s.pressure.values().to_vec()).unwrap().with("units", "kPa");
    let path = dir.path().join("p.bprs");
    write_container(&path, &c).unwrap();
    assert_eq!(read_container(&path).unwrap(), c);
}

#[test]
fn container_rejects_corruption() {
    let c = Container::new(&[2, 3], vec![1.0; 6]).unwrap();
    let good = c.to_bytes().unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Container::from_bytes(&bad_magic), Err(Error::Format(_))));

    let truncated = &good[..good.len() - 3];
    assert!(matches!(Container::from_bytes(truncated), Err(Error::Length(_))));

    let mut ahead = good.clone();
    ahead[4..6].copy_from_slice(&(CONTAINER_VERSION + 1).to_le_bytes());
    assert!(matches!(Container::from_bytes(&ahead), Err(Error::UnsupportedVersion { .. })));

    let mut extra = good.clone();
    extra.extend_from_slice(&[0; 8]);
    assert!(matches!(Container::from_bytes(&extra), Err(Error::Length(_))));

    assert!(Container::new(&[2, 2], vec![0.0; 3]).is_err());
    let nan = Container { shape: vec![1], data: vec![f64::NAN], header: Default::default() };
    assert!(nan.to_bytes().is_err());
}

#[test]
fn manifest_text_round_trip() {
    let ds = toy_dataset(&ToyDatasetSpec::new(10, 2, 4)).unwrap();
    let text = ds.manifest.to_text();
    assert_eq!(DatasetManifest::parse(&text).unwrap(), ds.manifest);
}

#[test]
fn toy_dataset_global_max_and_counts() {
    let ds = toy_dataset(&ToyDatasetSpec::new(10, 4, 4)).unwrap();
    assert_eq!(ds.samples.len(), 40);
    let observed = ds.samples.iter().map(|s| s.pressure.max()).fold(0.0, f64::max);
    assert_eq!(ds.manifest.normalization.global_max_kpa, Some(observed));
    assert_eq!(ds.manifest.counts_by_cover[&Cover::Uncovered], 30);
    assert_eq!(ds.manifest.counts_by_cover[&Cover::Cov1mm], 10);
    let (p, div) = ds.pressure_batch(&[0, 1]).unwrap();
    assert_eq!(p.shape(), &[2, 1, 27, 64]);
    assert!(p.data().iter().all(|v| *v <= 1.0));
    assert_eq!(div, vec![observed; 2]);
}

#[test]
fn ingest_preprocesses_raw_layout_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToyDatasetSpec::new(8, 2, 5);
    write_toy_layout(dir.path(), &spec).unwrap();
    let first = ingest_slp_like(dir.path(), &[]).unwrap().dataset;
    let mem = toy_dataset(&spec).unwrap();
    assert_eq!(first.samples.len(), mem.samples.len());
    for s in &first.samples {
        let m = mem.samples.iter().find(|x| x.id() == s.id()).unwrap();
        assert_eq!(s, m);
    }
    let again_dir = tempfile::tempdir().unwrap();
    export_dataset(again_dir.path(), &first).unwrap();
    let second = ingest_slp_like(again_dir.path(), &[]).unwrap().dataset;
    let mut a = first.samples.clone();
    let mut b = second.samples.clone();
    a.sort_by_key(|s| s.id());
    b.sort_by_key(|s| s.id());
    assert_eq!(a, b);
    assert_eq!(first.manifest, second.manifest);
}

#[test]
fn ingest_skips_excluded_subjects() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_layout(dir.path(), &ToyDatasetSpec::new(8, 1, 6)).unwrap();
    let out = ingest_slp_like(dir.path(), &[7]).unwrap();
    assert_eq!(out.skipped, vec![7]);
    assert!(out.dataset.samples.iter().all(|s| s.subject != 7));
    assert_eq!(out.dataset.manifest.excluded, vec![7]);
    assert!(out.dataset.manifest.splits.split_of(7).is_none());
}

#[test]
fn ingest_reports_missing_role_file() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_toy_layout(dir.path(), &ToyDatasetSpec::new(6, 1, 6)).unwrap();
    let subj = m.splits.train[0];
    let f = dir.path().join("train").join(format!("s{subj:03}")).join("supine_uncovered.anthro.bprs");
    std::fs::remove_file(f).unwrap();
    assert!(matches!(ingest_slp_like(dir.path(), &[]), Err(Error::Manifest(_))));
}
