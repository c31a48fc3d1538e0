//! `bridgepress` command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or format error,
//! 4 verification failure.

mod gradsuite;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bridgepress::data::{
    ingest_slp_like, parse_kv, read_container, write_container, write_toy_layout, Container, Dataset, Split,
    ToyDatasetSpec,
};
use bridgepress::metrics::{EvalPair, MetricReport, MetricSettings};
use bridgepress::physics::{NormMode, PressureMap};
use bridgepress::pipeline::{self, infer_many, Checkpoint, Regime, TrainConfig};
use bridgepress::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bridgepress", version, about = "Depth-to-pressure synthesis toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset in the on-disk layout.
    GenData {
        /// key=value dataset spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        subjects: Option<u32>,
        /// Replace an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one regime and write a checkpoint directory.
    Train {
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// key=value training config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long = "T")]
        diffusion_steps: Option<usize>,
        #[arg(long = "S")]
        sample_steps: Option<usize>,
        #[arg(long)]
        s_scale: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ae_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint whose frozen autoencoder an lbbdm run reuses.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Predict pressure for one split of a dataset.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Sampler steps for diffusion regimes; the checkpoint default
        /// otherwise.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// tensorcore, ils, models, or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run an ablation recipe (gamma or sampling-step sweep).
    Sweep {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint for step sweeps.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Comma-separated override of the recipe values.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    use bridgepress_tensor::TensorError;
    match e {
        Error::Configuration(_) | Error::Schedule(_) | Error::Contract(_) | Error::Unsupported(_) => 2,
        Error::Tensor(TensorError::Configuration(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::GenData { spec, out, seed, subjects, force } => gen_data(spec.as_deref(), &out, seed, subjects, force),
        Command::Train {
            regime,
            data,
            out,
            config,
            gamma,
            diffusion_steps,
            sample_steps,
            s_scale,
            epochs,
            ae_epochs,
            batch_size,
            lr,
            seed,
            pretrained,
        } => {
            let mut o = BTreeMap::new();
            let mut put = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    o.insert(k.to_string(), v);
                }
            };
            put("regime", regime);
            put("gamma", gamma.map(|g| format!("{g:?}")));
            put("T", diffusion_steps.map(|v| v.to_string()));
            put("S", sample_steps.map(|v| v.to_string()));
            put("s_scale", s_scale.map(|v| format!("{v:?}")));
            put("epochs", epochs.map(|v| v.to_string()));
            put("ae_epochs", ae_epochs.map(|v| v.to_string()));
            put("batch_size", batch_size.map(|v| v.to_string()));
            put("lr", lr.map(|v| format!("{v:?}")));
            put("seed", seed.map(|v| v.to_string()));
            train(&data, &out, config.as_deref(), &o, pretrained.as_deref())
        }
        Command::Sample { ckpt, data, split, steps, seed, out } => sample(&ckpt, &data, &split, steps, seed, &out).map(|_| ()),
        Command::Eval { pred, reference, report } => eval(&pred, &reference, &report).map(|_| ()),
        Command::Gradcheck { module, inject_fault } => gradcheck(&module, inject_fault.as_deref()),
        Command::Sweep { recipe, data, ckpt, values, seed, out } => sweep(&recipe, &data, ckpt.as_deref(), values.as_deref(), seed, &out),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(4)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write-then-rename so readers never see a partial file.
fn write_atomic(path: &Path, text: &str) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ------------------------------------------------------------------ gen-data

fn bad(k: &str, v: &str) -> Error {
    Error::Configuration(format!("bad value `{v}` for `{k}`"))
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, Error> {
    v.parse().map_err(|_| bad(k, v))
}

fn dataset_spec(text: Option<&str>) -> Result<ToyDatasetSpec, Error> {
    let mut spec = ToyDatasetSpec::new(25, 8, 0);
    let Some(text) = text else { return Ok(spec) };
    let kv = parse_kv(text).map_err(|e| Error::Configuration(e.to_string()))?;
    for (k, v) in &kv {
        match k.as_str() {
            "subjects" => spec.subjects = num(k, v)?,
            "samples_per_subject" => spec.samples_per_subject = num(k, v)?,
            "seed" => spec.seed = num(k, v)?,
            "norm" => {
                spec.norm_mode = match v.as_str() {
                    "global" => NormMode::Global,
                    "individual" => NormMode::Individual,
                    _ => return Err(bad(k, v)),
                }
            }
            "range_mismatch" => spec.toy.range_mismatch = num(k, v)?,
            "taxel_area_m2" => spec.toy.taxel_area_m2 = num(k, v)?,
            "mass_min" => spec.toy.mass_range.0 = num(k, v)?,
            "mass_max" => spec.toy.mass_range.1 = num(k, v)?,
            "height_min" => spec.toy.height_range.0 = num(k, v)?,
            "height_max" => spec.toy.height_range.1 = num(k, v)?,
            "cover_blur" => {
                let parts: Vec<f64> = v.split(',').map(|p| num(k, p.trim())).collect::<Result<_, _>>()?;
                spec.toy.cover_blur = parts.try_into().map_err(|_| bad(k, v))?;
            }
            _ => return Err(Error::Configuration(format!("unknown spec key `{k}`"))),
        }
    }
    Ok(spec)
}

fn spec_text(s: &ToyDatasetSpec) -> String {
    let t = &s.toy;
    let norm = match s.norm_mode {
        NormMode::Global => "global",
        NormMode::Individual => "individual",
    };
    format!(
        "subjects={}\nsamples_per_subject={}\nseed={}\nnorm={norm}\nrange_mismatch={}\ntaxel_area_m2={:?}\nmass_min={:?}\nmass_max={:?}\nheight_min={:?}\nheight_max={:?}\ncover_blur={:?},{:?},{:?}\n",
        s.subjects,
        s.samples_per_subject,
        s.seed,
        t.range_mismatch,
        t.taxel_area_m2,
        t.mass_range.0,
        t.mass_range.1,
        t.height_range.0,
        t.height_range.1,
        t.cover_blur[0],
        t.cover_blur[1],
        t.cover_blur[2]
    )
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: Option<u64>, subjects: Option<u32>, force: bool) -> CmdResult {
    let text = spec.map(read_text).transpose()?;
    let mut s = dataset_spec(text.as_deref())?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(n) = subjects {
        s.subjects = n;
    }
    s.toy.validate()?;
    let non_empty = out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Configuration(format!("{} is not empty; pass --force to replace it", out.display())).into());
        }
        // only ever wipe something that looks like one of our datasets
        if !out.join(bridgepress::data::MANIFEST_FILE).exists() {
            return Err(Error::Configuration(format!("{} does not hold a dataset; refusing to replace it", out.display())).into());
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    create_dir(out)?;
    write_atomic(&out.join("spec.txt"), &spec_text(&s))?;
    let m = write_toy_layout(out, &s)?;
    println!(
        "wrote {} subjects (train {}, val {}, test {}) to {}",
        s.subjects,
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len(),
        out.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- train

fn load_dataset(dir: &Path) -> Result<Dataset, Error> {
    Ok(ingest_slp_like(dir, &[])?.dataset)
}

fn train(data: &Path, out: &Path, config: Option<&Path>, flags: &BTreeMap<String, String>, pretrained: Option<&Path>) -> CmdResult {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_text(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.apply(flags)?;
    cfg.validate()?;
    if pretrained.is_some() && cfg.regime != Regime::Lbbdm {
        return Err(Error::Configuration("--pretrained only applies to the lbbdm regime".into()).into());
    }
    create_dir(out)?;
    write_atomic(&out.join("config.txt"), &cfg.to_text())?;
    let ds = load_dataset(data)?;
    let t0 = Instant::now();
    let ckpt = match (cfg.regime, pretrained) {
        (Regime::Lbbdm, Some(p)) => {
            let ae = Checkpoint::load(p)?.autoencoder()?;
            pipeline::run_lbbdm(&ds, &cfg, Some(ae))?
        }
        _ => pipeline::train(&ds, &cfg)?,
    };
    ckpt.save(out)?;
    println!(
        "trained {} for {} epochs in {:.1}s; run {} → {}",
        cfg.regime.name(),
        cfg.epochs,
        t0.elapsed().as_secs_f64(),
        ckpt.manifest.run_id(),
        out.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- sample

const PRED_SUFFIX: &str = ".pressure.bprs";

struct SampleSummary {
    seconds: f64,
}

fn sample(ckpt_dir: &Path, data: &Path, split: &str, steps: Option<usize>, seed: u64, out: &Path) -> Result<SampleSummary, Failure> {
    if steps == Some(0) {
        return Err(Error::Configuration("--steps must be ≥ 1".into()).into());
    }
    let split = Split::parse(split)?;
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let ds = load_dataset(data)?;
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::DegenerateInput(format!("{} split is empty", split.name())).into());
    }
    let regime = ckpt.manifest.config.regime;
    let steps = if regime.samples() { steps } else { steps.filter(|s| *s != 1) };
    create_dir(out)?;
    let used = if regime.samples() { steps.unwrap_or(ckpt.manifest.config.sample_steps) } else { 1 };
    write_atomic(
        &out.join("sample.txt"),
        &format!(
            "run_id={}\nregime={}\nsplit={}\nsteps={used}\nseed={seed}\nthreads={}\n",
            ckpt.manifest.run_id(),
            regime.name(),
            split.name(),
            pipeline::worker_threads()
        ),
    )?;
    let inputs = idx
        .iter()
        .map(|&i| Ok((ds.depth_batch(&[i])?, ds.samples[i].anthro)))
        .collect::<Result<Vec<_>, Error>>()?;
    let t0 = Instant::now();
    let preds = infer_many(&ckpt, &inputs, steps, seed)?;
    let seconds = t0.elapsed().as_secs_f64();
    let mut diag = String::from("id,cover,mass_pred_kg,mass_ref_kg,steps\n");
    for (&i, p) in idx.iter().zip(&preds) {
        let s = &ds.samples[i];
        let id = s.id();
        let (h, w) = p.pressure.shape();
        let c = Container::new(&[h, w], p.pressure.values().to_vec())?
            .with("role", "prediction")
            .with("units", "kPa")
            .with("id", &id)
            .with("cover", s.cover.name())
            .with("taxel_area_m2", format!("{:?}", p.pressure.taxel_area_m2()))
            .with("mass_kg", format!("{:?}", p.mass_kg))
            .with("steps", p.steps)
            .with("run_id", ckpt.manifest.run_id());
        write_container(&out.join(format!("{id}{PRED_SUFFIX}")), &c)?;
        let _ = writeln!(diag, "{id},{},{:?},{:?},{}", s.cover.name(), p.mass_kg, s.anthro.mass_kg, p.steps);
    }
    write_atomic(&out.join("diagnostics.csv"), &diag)?;
    println!("wrote {} predictions ({} steps each) to {} in {seconds:.1}s", preds.len(), used, out.display());
    Ok(SampleSummary { seconds })
}

// ---------------------------------------------------------------------- eval

fn eval(pred: &Path, reference: &Path, report: &Path) -> Result<MetricReport, Failure> {
    let ds = load_dataset(reference)?;
    let by_id: BTreeMap<String, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id(), i)).collect();
    let mut files: Vec<PathBuf> = fs::read_dir(pred)
        .map_err(|e| Error::io(pred, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(PRED_SUFFIX)))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DegenerateInput(format!("no predictions in {}", pred.display())).into());
    }
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for f in &files {
        let c = read_container(f)?;
        if c.get("role")? != "prediction" || c.shape.len() != 2 {
            return Err(Error::Format(format!("{} is not a prediction map", f.display())).into());
        }
        let id = c.get("id")?.to_string();
        let Some(&i) = by_id.get(&id) else {
            return Err(Error::Manifest(format!("prediction `{id}` has no reference sample")).into());
        };
        let area: f64 = c.get("taxel_area_m2")?.parse().map_err(|_| Error::Format("bad taxel area".into()))?;
        preds.push(PressureMap::new(c.shape[0], c.shape[1], c.data, area)?);
        refs.push(i);
    }
    // every reference in the predicted split must have a prediction
    let subjects: std::collections::BTreeSet<u32> = refs.iter().map(|&i| ds.samples[i].subject).collect();
    for s in &ds.samples {
        if subjects.contains(&s.subject) && !refs.iter().any(|&i| ds.samples[i].id() == s.id()) {
            return Err(Error::Manifest(format!("reference `{}` has no prediction", s.id())).into());
        }
    }
    let gmax = ds.manifest.normalization.global_max_kpa.ok_or_else(|| Error::Configuration("eval needs global normalization".into()))?;
    let pairs: Vec<EvalPair> = refs
        .iter()
        .zip(&preds)
        .map(|(&i, p)| {
            let s = &ds.samples[i];
            EvalPair { id: s.id(), cover: s.cover, pred: p, reference: &s.pressure, mass_kg: Some(s.anthro.mass_kg) }
        })
        .collect();
    let r = MetricReport::build(&pairs, MetricSettings::new(gmax))?;
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(report, &r.to_csv())?;
    let o = &r.overall;
    println!(
        "{} samples: ssim {:.4} psnr {:.2} dB mse {:.4} kPa² iou {:.4} bm_mae {:.3} kg → {}",
        o.count,
        o.ssim,
        o.psnr,
        o.mse_kpa,
        o.iou,
        o.bm_mae_kg,
        report.display()
    );
    Ok(r)
}

// ----------------------------------------------------------------- gradcheck

fn gradcheck(module: &str, fault: Option<&str>) -> CmdResult {
    let modules = gradsuite::select(module)?;
    match fault {
        None => {}
        Some("softmax-backward") => bridgepress_tensor::fault::set_softmax_backward_flipped(true),
        Some(f) => return Err(Error::Configuration(format!("unknown fault `{f}`")).into()),
    }
    let t0 = Instant::now();
    let mut failed = Vec::new();
    for m in modules {
        for (name, r) in gradsuite::run(m) {
            match r {
                Ok(rep) if rep.rel_err < gradsuite::TOLERANCE => println!("ok    {m}/{name}  rel_err {:.2e}", rep.rel_err),
                Ok(rep) => {
                    println!("FAIL  {m}/{name}  rel_err {:.2e}", rep.rel_err);
                    failed.push(format!("{m}/{name}"));
                }
                Err(e) => {
                    println!("ERROR {m}/{name}  {e}");
                    failed.push(format!("{m}/{name}"));
                }
            }
        }
    }
    println!("gradcheck finished in {:.1}s", t0.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

// --------------------------------------------------------------------- sweep

fn parse_values(s: &str) -> Result<Vec<String>, Error> {
    let v: Vec<String> = s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
    if v.is_empty() {
        return Err(Error::Configuration("sweep needs at least one value".into()));
    }
    Ok(v)
}

fn metric_row(label: &str, r: &MetricReport, seconds: f64) -> String {
    let o = &r.overall;
    let fid = r.frechet.map_or("na".to_string(), |f| format!("{:?}", f.distance));
    format!(
        "{label},{},{:?},{:?},{:?},{:?},{:?},{:?},{fid},{seconds:.3}\n",
        o.count, o.mppa, o.ssim, o.psnr, o.mse_kpa, o.iou, o.bm_mae_kg
    )
}

const SWEEP_HEADER: &str = "count,mppa,ssim,psnr_db,mse_kpa2,posture_iou,bm_mae_kg,frechet_random_conv,seconds";

fn sweep(recipe: &Path, data: &Path, ckpt: Option<&Path>, values: Option<&str>, seed: u64, out: &Path) -> CmdResult {
    let mut kv = parse_kv(&read_text(recipe)?).map_err(|e| Error::Configuration(e.to_string()))?;
    let kind = kv.remove("sweep").ok_or_else(|| Error::Configuration("recipe lacks `sweep`".into()))?;
    let listed = kv.remove("values").ok_or_else(|| Error::Configuration("recipe lacks `values`".into()))?;
    let vals = parse_values(values.unwrap_or(&listed))?;
    create_dir(out)?;
    let mut table = String::new();
    match kind.as_str() {
        "steps" => {
            if !kv.is_empty() {
                return Err(Error::Configuration("a steps recipe takes no training keys".into()).into());
            }
            let ckpt = ckpt.ok_or_else(|| Error::Configuration("a steps sweep needs --ckpt".into()))?;
            let steps: Vec<usize> = vals.iter().map(|v| num("values", v)).collect::<Result<_, _>>()?;
            let _ = writeln!(table, "steps,{SWEEP_HEADER}");
            for s in steps {
                let dir = out.join(format!("steps_{s}"));
                let summary = sample(ckpt, data, "test", Some(s), seed, &dir)?;
                let r = eval(&dir, data, &dir.join("report.csv"))?;
                table.push_str(&metric_row(&s.to_string(), &r, summary.seconds));
            }
        }
        "gamma" => {
            let mut base = TrainConfig::default();
            base.apply(&kv)?;
            if base.regime != Regime::Cgan {
                return Err(Error::Configuration("a gamma sweep trains the cgan regime".into()).into());
            }
            let _ = writeln!(table, "gamma,{SWEEP_HEADER}");
            for g in &vals {
                let gamma: f64 = num("values", g)?;
                let cfg = TrainConfig { gamma: Some(gamma), seed, ..base.clone() };
                let dir = out.join(format!("gamma_{g}"));
                let ck_dir = dir.join("ckpt");
                let flags = BTreeMap::new();
                let cfg_path = dir.join("recipe_config.txt");
                create_dir(&dir)?;
                write_atomic(&cfg_path, &cfg.to_text())?;
                train(data, &ck_dir, Some(&cfg_path), &flags, None)?;
                let pred = dir.join("pred");
                let summary = sample(&ck_dir, data, "test", None, seed, &pred)?;
                let r = eval(&pred, data, &dir.join("report.csv"))?;
                table.push_str(&metric_row(g, &r, summary.seconds));
            }
        }
        other => return Err(Error::Configuration(format!("unknown sweep kind `{other}`")).into()),
    }
    write_atomic(&out.join("comparison.csv"), &table)?;
    print!("{table}");
    Ok(())
}
