use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use fpcr::checks::run_suite;
use fpcr::data::{flow_to_color, read_flo, read_image, write_flo, write_frame, write_paired, write_rgb, SynthConfig};
use fpcr::eval::{compare, evaluate, stage_aee, EvalOptions, EvalReport, FlowModel, OracleModel, ZeroModel};
use fpcr::flowops::{correlate, Exec};
use fpcr::network::{Network, UpsampleVariant};
use fpcr::tensor::{Shape4, Tensor4};
use fpcr::train::{load_checkpoint, save_checkpoint, LossRecord, Trainer};
use serde::Serialize;

use crate::config::{apply_override, create_run_dir, RunConfig};
use crate::{ConfigArgs, Invalid};

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with the motion recipe (extents, motion ranges, patches).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one recipe key, e.g. `--set max_translation=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    count: usize,
    seed: u64,
    synth: &'a SynthConfig,
    ids: Vec<&'a str>,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut table = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &a.sets {
        apply_override(&mut table, s)?;
    }
    let cfg: SynthConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Invalid(format!("synth config: {}", e.message())))?;
    cfg.validate().map_err(|e| Invalid(e.to_string()))?;
    let samples = fpcr::data::synth_dataset(&cfg, a.count, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for s in &samples {
        write_paired(&a.out, s)?;
    }
    let manifest = SynthManifest {
        count: a.count,
        seed: a.seed,
        synth: &cfg,
        ids: samples.iter().map(|s| s.id.as_str()).collect(),
    };
    write_text(&a.out.join("manifest.json"), &to_json(&manifest))?;
    log::info!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Continue the run in this directory from its latest checkpoint.
    #[arg(long, conflicts_with_all = ["config", "sets", "run_dir"])]
    pub resume: Option<PathBuf>,
    /// Skip scoring the evaluation set after training.
    #[arg(long)]
    pub no_eval: bool,
    /// Log the running loss every this many steps.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_checkpoint: String,
    /// Mean AEE of each stage's upsampled flow on the training set,
    /// coarsest first.
    train_stage_aee: Vec<f64>,
    train_aee: f64,
    eval_aee: Option<f64>,
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".bin"))
        })
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Keeps the CSV rows of steps before `step`, so a resumed run does not
/// repeat records written after its checkpoint.
fn truncate_csv(path: &Path, step: usize) -> Result<()> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rd.headers()?.clone();
    let mut keep = Vec::new();
    for r in rd.records() {
        let r = r?;
        let s: usize = r.get(0).and_then(|v| v.parse().ok()).context("malformed loss CSV")?;
        if s < step {
            keep.push(r);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&headers)?;
    for r in keep {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains `cfg` into `dir`: `config.toml`, `loss.csv`, `checkpoints/`,
/// `model.bin`, `summary.json`, and `eval/` unless `with_eval` is off.
/// Returns the evaluation report.
pub fn train_into(cfg: &RunConfig, dir: &Path, resume: bool, with_eval: bool, log_every: usize) -> Result<Option<EvalReport>> {
    let start = Instant::now();
    let multiple = cfg.network.required_multiple();
    let train_data = cfg.data.train.load(multiple).context("loading training data")?;
    if train_data.is_empty() {
        bail!(Invalid("the training set is empty".into()));
    }
    let eval_data = if with_eval {
        Some(cfg.data.eval.load(1).context("loading evaluation data")?)
    } else {
        None
    };
    let ckpt_dir = dir.join("checkpoints");
    let csv_path = dir.join("loss.csv");
    let trainer = match resume.then(|| latest_checkpoint(&ckpt_dir)).transpose()?.flatten() {
        Some(path) => {
            let ck = load_checkpoint::<f32>(&path)?;
            let t = Trainer::resume(ck, cfg.train.clone(), &train_data)?;
            log::info!("resuming from {} at step {}", path.display(), t.progress.global_step);
            if csv_path.is_file() {
                truncate_csv(&csv_path, t.progress.global_step)?;
            }
            t
        }
        None => {
            let net = Network::<f32>::new(cfg.network.clone(), cfg.seed)?;
            write_text(&dir.join("config.toml"), &cfg.to_toml())?;
            Trainer::new(net, cfg.seed, cfg.train.clone(), &train_data)?
        }
    };
    std::fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let mut trainer = trainer.with_checkpoints(&ckpt_dir);
    let fresh_csv = !csv_path.is_file();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .with_context(|| format!("opening {}", csv_path.display()))?;
    let mut csv = csv::WriterBuilder::new().has_headers(fresh_csv).from_writer(file);
    let total = cfg.train.total_steps();
    let (mut acc, mut n) = (0.0, 0usize);
    let mut observe = |r: &LossRecord| -> fpcr::Result<()> {
        csv.serialize(r).and_then(|_| csv.flush().map_err(Into::into)).map_err(|e| fpcr::Error::Io {
            path: csv_path.clone(),
            source: std::io::Error::other(e),
        })?;
        acc += r.total;
        n += 1;
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            log::info!(
                "step {}/{} {} lr {:.2e} loss {:.4}",
                r.step + 1,
                total,
                r.phase.name(),
                r.lr,
                acc / n as f64
            );
            (acc, n) = (0.0, 0);
        }
        Ok(())
    };
    trainer.run(&mut observe)?;
    let net = trainer.net.clone();
    save_checkpoint(
        dir.join("model.bin"),
        &net,
        trainer.init_seed,
        Some(&trainer.optimizer),
        Some(&trainer.progress),
    )?;
    let train_report = evaluate(&net, &train_data, &EvalOptions::default())?;
    let eval = match &eval_data {
        Some(d) => {
            let opts = EvalOptions {
                dump_dir: cfg.eval.dump_predictions.then(|| dir.join("eval").join("predictions")),
                parallel: cfg.eval.parallel,
            };
            let r = evaluate(&net, d, &opts)?;
            r.write(dir.join("eval"))?;
            Some(r)
        }
        None => None,
    };
    let summary = TrainSummary {
        steps: trainer.progress.global_step,
        final_checkpoint: "model.bin".into(),
        train_stage_aee: stage_aee(&net, &train_data)?,
        train_aee: train_report.mean_aee,
        eval_aee: eval.as_ref().map(|r| r.mean_aee),
    };
    write_text(&dir.join("summary.json"), &to_json(&summary))?;
    write_text(
        &dir.join("runtime.json"),
        &to_json(&serde_json::json!({ "train_seconds": start.elapsed().as_secs_f64() })),
    )?;
    log::info!(
        "done: train AEE {:.4}{}",
        summary.train_aee,
        summary.eval_aee.map(|v| format!(", eval AEE {v:.4}")).unwrap_or_default()
    );
    Ok(eval)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if let Some(dir) = &a.resume {
        let path = dir.join("config.toml");
        let cfg = RunConfig::resolve(Some(&path), &[])?;
        train_into(&cfg, dir, true, !a.no_eval, a.log_every)?;
        println!("{}", dir.display());
        return Ok(());
    }
    let cfg = RunConfig::resolve(a.cfg.config.as_deref(), &a.cfg.sets)?;
    let dir = create_run_dir(&cfg.output_dir, a.cfg.run_dir.as_deref(), &cfg.to_toml())?;
    log::info!("run directory {}", dir.display());
    train_into(&cfg, &dir, false, !a.no_eval, a.log_every)?;
    println!("{}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Network checkpoint to score.
    #[arg(long, required_unless_present_any = ["oracle", "zero"])]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth itself (AEE 0); checks the harness.
    #[arg(long, conflicts_with_all = ["checkpoint", "zero"])]
    pub oracle: bool,
    /// Score an all-zero prediction.
    #[arg(long, conflicts_with = "checkpoint")]
    pub zero: bool,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::resolve(a.cfg.config.as_deref(), &a.cfg.sets)?;
    let model: Box<dyn FlowModel> = if a.oracle {
        Box::new(OracleModel)
    } else if a.zero {
        Box::new(ZeroModel)
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        if !path.is_file() {
            bail!(Invalid(format!("checkpoint {} does not exist", path.display())));
        }
        Box::new(load_checkpoint::<f32>(path)?.network)
    };
    let data = cfg.data.eval.load(1).context("loading evaluation data")?;
    let key = format!("{}\n{}", cfg.to_toml(), model.fingerprint());
    let dir = create_run_dir(&cfg.output_dir, a.cfg.run_dir.as_deref(), &key)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let opts = EvalOptions {
        dump_dir: cfg.eval.dump_predictions.then(|| dir.join("predictions")),
        parallel: cfg.eval.parallel,
    };
    let report = evaluate(model.as_ref(), &data, &opts)?;
    report.write(&dir)?;
    print!("{}", report.to_markdown());
    println!("{}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Only run checks whose name contains this.
    #[arg(long)]
    pub filter: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradRow {
    name: &'static str,
    class: String,
    passed: bool,
    max_rel_err: f64,
    tolerance: f64,
    checked: usize,
    failure: Option<String>,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let key = format!("gradcheck seed={} filter={:?}", a.seed, a.filter);
    let results = run_suite(a.seed, a.filter.as_deref());
    if results.is_empty() {
        bail!(Invalid(format!("no check matches {:?}", a.filter.as_deref().unwrap_or(""))));
    }
    let rows: Vec<GradRow> = results
        .iter()
        .map(|r| GradRow {
            name: r.name,
            class: format!("{:?}", r.class).to_lowercase(),
            passed: r.report.passed(),
            max_rel_err: r.report.max_rel_err(),
            tolerance: r.report.tolerance,
            checked: r.report.inputs.iter().map(|i| i.checked).sum(),
            failure: r.report.failure.clone(),
        })
        .collect();
    let mut table = String::from("| op | class | result | max rel. err | tolerance | entries |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        table += &format!(
            "| {} | {} | {} | {:.2e} | {:.0e} | {} |\n",
            r.name,
            r.class,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.tolerance,
            r.checked
        );
    }
    let dir = create_run_dir(&a.output_dir, a.run_dir.as_deref(), &key)?;
    write_text(&dir.join("gradcheck.md"), &table)?;
    write_text(&dir.join("gradcheck.json"), &to_json(&rows))?;
    print!("{table}");
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        bail!(Invalid(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct VizArgs {
    pub input: PathBuf,
    /// `.png`, or PPM for any other extension.
    pub output: PathBuf,
    /// Magnitude mapped to full saturation; the field's maximum by default.
    #[arg(long)]
    pub max_mag: Option<f64>,
}

pub fn viz(a: &VizArgs) -> Result<()> {
    if a.max_mag.is_some_and(|m| !(m.is_finite() && m > 0.0)) {
        bail!(Invalid("--max-mag must be positive".into()));
    }
    let flow = read_flo(&a.input)?;
    write_rgb(&a.output, &flow_to_color(&flow, a.max_mag))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
}

fn ext(p: &Path) -> String {
    p.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase()
}

/// `.flo` → `.flo` re-encodes; `.flo` → image renders the color wheel;
/// image → image changes the container.
pub fn convert(a: &ConvertArgs) -> Result<()> {
    let images = ["png", "ppm", "pgm"];
    let (i, o) = (ext(&a.input), ext(&a.output));
    match (i.as_str(), o.as_str()) {
        ("flo", "flo") => write_flo(&a.output, &read_flo(&a.input)?)?,
        ("flo", x) if images.contains(&x) => write_rgb(&a.output, &flow_to_color(&read_flo(&a.input)?, None))?,
        (x, y) if images.contains(&x) && images.contains(&y) => write_frame(&a.output, &read_image(&a.input)?)?,
        _ => bail!(Invalid(format!("cannot convert .{i} to .{o}"))),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// One variant per flag: `none` or toggles joined by `+` from
    /// no_pyramid, no_cwn_norm, no_residual, early, mid, late.
    #[arg(long = "variant", default_values_t = ["none".to_string(), "no_residual".into(), "no_pyramid+no_cwn_norm".into(), "late".into()])]
    pub variants: Vec<String>,
    /// Seeds for network init, sampling and augmentation.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
}

/// Applies `toggles` to `cfg`; `none` leaves it unchanged.
pub fn apply_toggles(cfg: &mut RunConfig, toggles: &str) -> Result<()> {
    if toggles == "none" {
        return Ok(());
    }
    for t in toggles.split('+') {
        let n = &mut cfg.network;
        match t {
            "no_pyramid" => n.ablation.no_pyramid_mapping = true,
            "no_cwn_norm" => n.ablation.no_cwn_normalization = true,
            "no_residual" => n.ablation.no_residual = true,
            "early" => n.upsample_variant = UpsampleVariant::Early,
            "mid" => n.upsample_variant = UpsampleVariant::Mid,
            "late" => n.upsample_variant = UpsampleVariant::Late,
            _ => bail!(Invalid(format!("unknown ablation toggle `{t}`"))),
        }
    }
    Ok(())
}

fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.train.seed = seed;
    c.train.augment.seed = seed;
    c
}

#[derive(Serialize)]
struct VariantResult {
    variant: String,
    seeds: Vec<u64>,
    eval_aee: Vec<f64>,
    mean: f64,
    std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Sample results of every seed concatenated, so the table's means pool
/// all seeds.
fn pool(reports: &[EvalReport]) -> EvalReport {
    let mut out = reports[0].clone();
    out.samples = reports.iter().flat_map(|r| r.samples.clone()).collect();
    let pixels: usize = out.samples.iter().map(|s| s.pixels).sum();
    out.mean_aee = out.samples.iter().map(|s| s.aee * s.pixels as f64).sum::<f64>() / pixels.max(1) as f64;
    for (k, b) in out.buckets.iter_mut().enumerate() {
        b.pixels = reports.iter().map(|r| r.buckets[k].pixels).sum();
        b.epe_sum = reports.iter().map(|r| r.buckets[k].epe_sum).sum();
    }
    out.model_fingerprint = "pooled".into();
    out
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = RunConfig::resolve(a.cfg.config.as_deref(), &a.cfg.sets)?;
    if a.seeds.is_empty() || a.variants.is_empty() {
        bail!(Invalid("need at least one seed and one variant".into()));
    }
    let mut variants = Vec::new();
    for v in &a.variants {
        let mut c = base.clone();
        apply_toggles(&mut c, v)?;
        c.validate()?;
        variants.push((v.clone(), c));
    }
    let key = format!("{}\n{:?}\n{:?}", base.to_toml(), a.variants, a.seeds);
    let dir = create_run_dir(&base.output_dir, a.cfg.run_dir.as_deref(), &key)?;
    write_text(&dir.join("config.toml"), &base.to_toml())?;
    let mut pooled = Vec::new();
    let mut results = Vec::new();
    for (label, cfg) in &variants {
        let mut reports = Vec::new();
        for &seed in &a.seeds {
            let run = dir.join(format!("{}-seed{seed}", label.replace('+', "_")));
            std::fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
            log::info!("ablation {label}, seed {seed}");
            let out = train_into(&seeded(cfg, seed), &run, false, true, 0)?;
            reports.push(out.expect("evaluation requested"));
        }
        let aees: Vec<f64> = reports.iter().map(|r| r.mean_aee).collect();
        let (mean, std) = mean_std(&aees);
        results.push(VariantResult {
            variant: label.clone(),
            seeds: a.seeds.clone(),
            eval_aee: aees,
            mean,
            std,
        });
        pooled.push((label.clone(), pool(&reports)));
    }
    let mut md = compare(&pooled)?;
    md += "\n| configuration | mean AEE | std over seeds | per seed |\n|---|---|---|---|\n";
    for r in &results {
        let per: Vec<String> = r.eval_aee.iter().map(|v| format!("{v:.4}")).collect();
        md += &format!("| {} | {:.4} | {:.4} | {} |\n", r.variant, r.mean, r.std, per.join(", "));
    }
    write_text(&dir.join("ablation.md"), &md)?;
    write_text(&dir.join("ablation.json"), &to_json(&results))?;
    print!("{md}");
    println!("{}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Timed repetitions per path; the fastest counts.
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub radius: usize,
}

#[derive(Serialize)]
pub struct BenchResult {
    pub shape: [usize; 4],
    pub radius: usize,
    pub serial_ms: f64,
    pub parallel_ms: f64,
    pub speedup: f64,
    pub threads: usize,
}

fn best_ms(iters: usize, mut f: impl FnMut()) -> f64 {
    f();
    (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.iters == 0 || a.channels == 0 || a.size == 0 {
        bail!(Invalid("iters, channels and size must be positive".into()));
    }
    let shape = Shape4::new(1, a.channels, a.size, a.size);
    let f1 = Tensor4::<f32>::from_fn(shape, |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 17.0 - 0.5);
    let f2 = Tensor4::<f32>::from_fn(shape, |_, c, y, x| ((c * 13 + y * 5 + x * 11) % 19) as f32 / 19.0 - 0.5);
    let run = |exec| {
        best_ms(a.iters, || {
            std::hint::black_box(correlate(&f1, &f2, a.radius, 0, exec).expect("shapes match"));
        })
    };
    let serial_ms = run(Exec::Serial);
    let parallel_ms = run(Exec::Parallel);
    let r = BenchResult {
        shape: [1, a.channels, a.size, a.size],
        radius: a.radius,
        serial_ms,
        parallel_ms,
        speedup: serial_ms / parallel_ms,
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}
