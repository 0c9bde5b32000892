//! `mscrack`: batch driver for synthesis, IR super-resolution, segmentation
//! training and evaluation, ablations, gradient checks and scan benchmarks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod run_config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mscrack_core::data::{
    self, fused_path, ir_sr_path, load_dataset, load_image, load_sample, save_dataset, save_image, synth_dataset,
    DatasetManifest, SynthConfig, Variant,
};
use mscrack_core::scale::ScaleFactor;
use mscrack_core::sr::{fuse_channels, sr_apply, sr_psnr_report, sr_train_selfsupervised, SrModel, SrTrainConfig};
use mscrack_core::train::ablation::{format_table, run_ablation};
use mscrack_core::train::{background_baseline, evaluate, TrainData, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use mscrack_core::{grad_suite, scan_bench, Error as CoreError};

use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "mscrack", version, about = "RGB+IR crack segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic RGB/IR/mask dataset.
    Synth(SynthArgs),
    /// Train the IR super-resolution model on the training split.
    SrTrain(SrTrainArgs),
    /// Super-resolve every IR image onto the RGB grid.
    SrApply(SrApplyArgs),
    /// Write six-channel RGB + super-resolved IR tensors.
    Fuse(DataArgs),
    /// Train the segmenter described by a run config.
    Train(TrainArgs),
    /// Evaluate a segmenter checkpoint and print the metrics report.
    Eval(EvalArgs),
    /// Train and compare the four input variants.
    Ablate(AblateArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Time sequential and parallel scans over doubling lengths.
    BenchScan(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// RGB size as HEIGHTxWIDTH.
    #[arg(long, default_value = "120x120", value_parser = parse_dims)]
    rgb_dims: (usize, usize),
    /// RGB-to-IR size ratio, e.g. `10/3`.
    #[arg(long, default_value = "10/3")]
    ir_factor: ScaleFactor,
    /// Probability that a crack is visible only in IR.
    #[arg(long)]
    ir_only_prob: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing dataset in `out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct SrTrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// JSON training settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Crop side at IR resolution; must be a multiple of the factor's
    /// numerator (10 for `10/3`).
    #[arg(long)]
    patch: Option<usize>,
    /// Where to write the PSNR report (also printed).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SrApplyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to `<out>/best.ckpt`.
    #[arg(long, conflicts_with = "untrained")]
    checkpoint: Option<PathBuf>,
    /// Evaluate freshly initialised weights.
    #[arg(long)]
    untrained: bool,
    #[arg(long, default_value = "val", value_parser = ["train", "val"])]
    split: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 12)]
    min_log2: u32,
    #[arg(long, default_value_t = 18)]
    max_log2: u32,
    #[arg(long, default_value_t = 11)]
    repeats: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let dims = (parse(h)?, parse(w)?);
    if dims.0 == 0 || dims.1 == 0 {
        return Err(format!("dimensions must be positive, got {s:?}"));
    }
    Ok(dims)
}

/// Failure split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        // configuration problems surfaced by the core count as usage errors
        match e.downcast_ref::<CoreError>() {
            Some(CoreError::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(root: &Path) -> Result<DatasetManifest, Failure> {
    DatasetManifest::load(root)
        .with_context(|| format!("no dataset manifest under {}", root.display()))
        .map_err(usage)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if a.count < 2 {
        return Err(usage(anyhow!("--count must be at least 2 (got {})", a.count)));
    }
    let mut cfg = SynthConfig {
        rgb_height: a.rgb_dims.0,
        rgb_width: a.rgb_dims.1,
        ir_factor: a.ir_factor,
        ..SynthConfig::default()
    };
    if let Some(p) = a.ir_only_prob {
        cfg.ir_only_prob = p;
    }
    cfg.validate().map_err(usage)?;
    let occupied = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !a.force {
            return Err(usage(anyhow!(
                "{} is not empty; pass --force to replace the dataset in it",
                a.out.display()
            )));
        }
        for sub in ["rgb", "ir", "mask", "ir_sr", "fused"] {
            let p = a.out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let samples = synth_dataset(a.seed, a.count, &cfg)?;
    let manifest = DatasetManifest::for_samples(&samples, a.seed, a.ir_factor)?;
    save_dataset(&a.out, &samples, &manifest)?;
    print_json(&json!({
        "out": a.out,
        "count": manifest.ids.len(),
        "train": manifest.split.train.len(),
        "val": manifest.split.val.len(),
        "rgb_dims": manifest.rgb_dims,
        "ir_dims": manifest.ir_dims,
        "ir_factor": manifest.ir_factor,
        "seed": manifest.seed,
    }))?;
    Ok(())
}

fn cmd_sr_train(a: SrTrainArgs) -> CmdResult {
    let manifest = load_manifest(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(usage)?;
            serde_json::from_str::<SrTrainConfig>(&text)
                .with_context(|| format!("invalid sr config {}", p.display()))
                .map_err(usage)?
        }
        None => SrTrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(p) = a.patch {
        cfg.patch = p;
    }
    let load = |ids: &[String]| -> anyhow::Result<Vec<(String, mscrack_core::Tensor)>> {
        ids.iter()
            .map(|id| Ok((id.clone(), load_sample(&a.data, id)?.ir)))
            .collect()
    };
    let train = load(&manifest.split.train)?;
    let val = load(&manifest.split.val)?;
    let irs: Vec<_> = train.iter().map(|(_, t)| t.clone()).collect();
    let model = sr_train_selfsupervised(&irs, manifest.ir_factor, &cfg)?;
    model.save(&a.out)?;
    let report = json!({
        "checkpoint": a.out,
        "initial_loss": model.initial_loss,
        "final_loss": model.final_loss,
        "train": sr_psnr_report(&model, &train)?,
        "val": sr_psnr_report(&model, &val)?,
    });
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    print_json(&report)?;
    Ok(())
}

fn load_sr(path: &Path) -> Result<SrModel, Failure> {
    if !path.exists() {
        return Err(usage(anyhow!(
            "super-resolution checkpoint {} not found",
            path.display()
        )));
    }
    Ok(SrModel::load(path)?)
}

fn cmd_sr_apply(a: SrApplyArgs) -> CmdResult {
    let manifest = load_manifest(&a.data)?;
    let model = load_sr(&a.model)?;
    fs::create_dir_all(a.data.join("ir_sr")).context("creating ir_sr/")?;
    for id in &manifest.ids {
        let s = load_sample(&a.data, id)?;
        let (_, h, w) = s.rgb.dims3()?;
        let sr = sr_apply(&model, &s.ir, (h, w))?;
        save_image(ir_sr_path(&a.data, id), &sr)?;
    }
    print_json(&json!({"written": manifest.ids.len(), "dims": manifest.rgb_dims}))?;
    Ok(())
}

fn cmd_fuse(a: DataArgs) -> CmdResult {
    let manifest = load_manifest(&a.data)?;
    fs::create_dir_all(a.data.join("fused")).context("creating fused/")?;
    for id in &manifest.ids {
        let rgb = load_image(data::rgb_path(&a.data, id))?;
        let sr_path = ir_sr_path(&a.data, id);
        if !sr_path.exists() {
            return Err(usage(anyhow!("{} missing; run sr-apply first", sr_path.display())));
        }
        let ir = load_image(&sr_path)?;
        let fused = fuse_channels(&rgb, &ir).with_context(|| format!("fusing {id}"))?;
        fused.save_mscm(fused_path(&a.data, id))?;
    }
    print_json(&json!({"written": manifest.ids.len()}))?;
    Ok(())
}

/// Loads the dataset and builds the run's variant inputs.
fn prepare(cfg: &RunConfig) -> Result<(DatasetManifest, Vec<data::SamplePair>, Option<SrModel>), Failure> {
    load_manifest(&cfg.data)?;
    let (manifest, samples) = load_dataset(&cfg.data)?;
    let sr = match (&cfg.sr_model, cfg.variant.needs_sr()) {
        (Some(p), _) => Some(load_sr(p)?),
        (None, true) => {
            return Err(usage(anyhow!(
                "variant {} needs \"sr_model\" in the run config",
                cfg.variant
            )))
        }
        (None, false) => None,
    };
    Ok((manifest, samples, sr))
}

/// Drops log records at or past `iteration` so a resumed run appends a
/// continuous curve.
fn truncate_log(path: &Path, iteration: usize) -> anyhow::Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("corrupt log {}", path.display()))?;
        let iter = v["iter"].as_u64().unwrap_or(u64::MAX) as usize;
        let is_eval = v.get("miou").is_some();
        if (is_eval && iter <= iteration) || (!is_eval && iter < iteration) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).with_context(|| format!("rewriting {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config).map_err(usage)?;
    let (manifest, samples, sr) = prepare(&cfg)?;
    let data = TrainData::from_samples(&samples, &manifest.split, cfg.variant, sr.as_ref())?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let log_path = cfg.out.join("metrics.jsonl");
    let train_cfg = cfg.train_config();
    let mut trainer = if a.resume {
        let ckpt = cfg.out.join(LAST_CHECKPOINT);
        if !ckpt.exists() {
            return Err(usage(anyhow!("nothing to resume: {} not found", ckpt.display())));
        }
        let t = Trainer::load(&ckpt)?;
        if t.config != train_cfg || t.model.config != cfg.model {
            return Err(usage(anyhow!(
                "{} was written by a different run config",
                ckpt.display()
            )));
        }
        truncate_log(&log_path, t.iteration)?;
        t
    } else {
        let _ = fs::remove_file(&log_path);
        Trainer::from_scratch(cfg.model.clone(), train_cfg)?
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let summary = trainer.run(&data, usize::MAX, &mut log)?;
    print_json(&json!({
        "iterations": trainer.iteration,
        "best": summary.best,
        "last_eval": summary.evals.last(),
        "log": log_path,
        "checkpoints": [cfg.out.join(BEST_CHECKPOINT), cfg.out.join(LAST_CHECKPOINT)],
    }))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config).map_err(usage)?;
    let (manifest, samples, sr) = prepare(&cfg)?;
    let data = TrainData::from_samples(&samples, &manifest.split, cfg.variant, sr.as_ref())?;
    let model = if a.untrained {
        mscrack_core::model::Model::init(cfg.model.clone(), cfg.train.seed)?
    } else {
        let path = a.checkpoint.clone().unwrap_or_else(|| cfg.out.join(BEST_CHECKPOINT));
        if !path.exists() {
            return Err(usage(anyhow!("checkpoint {} not found", path.display())));
        }
        Trainer::load(&path)?.model
    };
    if model.config.in_channels != cfg.variant.channels() {
        return Err(usage(anyhow!(
            "checkpoint expects {} channels, variant {} has {}",
            model.config.in_channels,
            cfg.variant,
            cfg.variant.channels()
        )));
    }
    let items = if a.split == "train" { &data.train } else { &data.val };
    let report = evaluate(&model, items)?;
    let baseline = background_baseline(items, model.config.input_multiple(), model.config.num_classes)?;
    print_json(&json!({
        "split": a.split,
        "variant": cfg.variant,
        "report": report,
        "background_baseline_miou": baseline.miou,
    }))?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config).map_err(usage)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    load_manifest(&cfg.data)?;
    let (manifest, samples) = load_dataset(&cfg.data)?;
    let sr = match &cfg.sr_model {
        Some(p) => load_sr(p)?,
        None => {
            let irs: Vec<_> = samples
                .iter()
                .filter(|s| manifest.split.train.contains(&s.id))
                .map(|s| s.ir.clone())
                .collect();
            let sr_cfg = SrTrainConfig {
                seed: cfg.train.seed,
                ..SrTrainConfig::default()
            };
            sr_train_selfsupervised(&irs, manifest.ir_factor, &sr_cfg)?
        }
    };
    let out = cfg.out.join("ablation");
    let rows = run_ablation(
        &samples,
        &manifest.split,
        Some(&sr),
        &cfg.model,
        &cfg.train_config(),
        &Variant::ALL,
        Some(&out),
    )?;
    write_json(&out.join("ablation.json"), &rows)?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    if !(a.tol > 0.0) {
        return Err(usage(anyhow!("--tol must be positive")));
    }
    let reports = grad_suite::run(a.tol, a.seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if !failed.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

fn cmd_bench_scan(a: BenchArgs) -> CmdResult {
    let cfg = scan_bench::ScanBenchConfig {
        min_log2: a.min_log2,
        max_log2: a.max_log2,
        repeats: a.repeats,
        ..Default::default()
    };
    if cfg.min_log2 >= cfg.max_log2 || cfg.repeats == 0 || cfg.max_log2 > 30 {
        return Err(usage(anyhow!("need --min-log2 < --max-log2 <= 30 and --repeats > 0")));
    }
    let report = scan_bench::run(&cfg)?;
    println!("{report}");
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::SrTrain(a) => cmd_sr_train(a),
        Command::SrApply(a) => cmd_sr_apply(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::BenchScan(a) => cmd_bench_scan(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
