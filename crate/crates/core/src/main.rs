use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hdc::checkpoint::load_checkpoint;
use hdc::config::RunConfig;
use hdc::dataset::{Video, generate_synthetic, generate_videos, load_dataset};
use hdc::evaluator::{
    LabelMode, default_grid, evaluate_retrieval, extract_embeddings, linear_probe,
    run_ablation_grid, split_records,
};
use hdc::report::{METRICS_FILE, emit_report, read_metrics, truncate_metrics};
use hdc::trainer::{TrainOutputs, pretrain};
use hdc::verify::{gradcheck_suite, selfcheck_suite};
use hdc::{HdcError, Result};

const DATASET_FILE: &str = "dataset.bin";
const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Parser)]
#[command(name = "hdc", version, about = "Hierarchical decoupled contrastive pretraining on toy video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into <out>/dataset.bin.
    GenData(Common),
    /// Pretrain an encoder, logging metrics and checkpoints under <out>.
    Pretrain(PretrainArgs),
    /// Nearest-neighbor retrieval with a trained (or untrained) encoder.
    EvalRetrieval(EvalArgs),
    /// Linear probe on frozen features.
    Probe(EvalArgs),
    /// Pretrain and evaluate every grid row for every grid seed.
    Ablate(Common),
    /// Finite-difference gradient checks for every op and the full objective.
    Gradcheck,
    /// Oracle checks for the loss, pooling, retrieval and determinism.
    Selfcheck,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; missing fields take the toy defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Loss weights as `a3=0.25,b5=1` (alpha/beta per scale) or `5=1` for
    /// both. Naming a scale enables it.
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file from gen-data; generated from the seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained weights; the seed's initialization is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn apply_weights(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let bad = |m: String| HdcError::InvalidArgument(format!("--weights: {m}"));
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {item:?}")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| bad(format!("bad weight {value:?}")))?;
        let (spatial, temporal, scale) = match key.as_bytes().first() {
            Some(b'a') => (true, false, &key[1..]),
            Some(b'b') => (false, true, &key[1..]),
            _ => (true, true, key),
        };
        let scale: usize = scale
            .parse()
            .map_err(|_| bad(format!("bad scale in {key:?}")))?;
        let loss = &mut cfg.loss;
        if spatial {
            loss.alphas.insert(scale, value);
            if !loss.spatial_scales.contains(&scale) {
                loss.spatial_scales.push(scale);
                loss.spatial_scales.sort_unstable();
            }
        }
        if temporal {
            loss.betas.insert(scale, value);
            if !loss.temporal_scales.contains(&scale) {
                loss.temporal_scales.push(scale);
                loss.temporal_scales.sort_unstable();
            }
        }
    }
    Ok(())
}

/// Loads the config, applies overrides, validates, and records the result
/// as `<out>/resolved_config.json`.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| {
                HdcError::InvalidArgument(format!("cannot read config {}", p.display()))
            })?;
            serde_json::from_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.trainer.steps = s;
    }
    if let Some(b) = common.batch {
        cfg.trainer.batch = b;
    }
    if let Some(t) = common.tau {
        cfg.loss.tau = t;
    }
    if let Some(w) = &common.weights {
        apply_weights(&mut cfg, w)?;
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out).map_err(|e| HdcError::io(&common.out, e))?;
    cfg.save(&common.out.join(RESOLVED_CONFIG))?;
    Ok(cfg)
}

fn videos_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Video>> {
    match data {
        Some(p) => load_dataset(p),
        None => generate_videos(&cfg.dataset, cfg.seed),
    }
}

fn params_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<hdc::encoder::Params<f32>> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint::<f32>(p)?.params),
        None => hdc::encoder::init_params(
            &cfg.encoder,
            hdc::seeding::derive_seed(&[cfg.seed, hdc::seeding::stream::INIT]),
        ),
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData(common) => {
            let cfg = resolve(&common)?;
            let path = common.out.join(DATASET_FILE);
            let videos = generate_synthetic(&cfg.dataset, cfg.seed, &path)?;
            println!("wrote {} videos to {}", videos.len(), path.display());
        }
        Command::Pretrain(args) => {
            let cfg = resolve(&args.common)?;
            let videos = videos_for(&cfg, args.data.as_deref())?;
            let metrics = args.common.out.join(METRICS_FILE);
            let resume = match &args.resume {
                Some(p) => {
                    let ckpt = load_checkpoint::<f32>(p)?;
                    truncate_metrics(&metrics, ckpt.state.step)?;
                    Some(ckpt)
                }
                None => {
                    if metrics.exists() {
                        fs::remove_file(&metrics).map_err(|e| HdcError::io(&metrics, e))?;
                    }
                    None
                }
            };
            let ckpt_dir = args.common.out.join("checkpoints");
            fs::create_dir_all(&ckpt_dir).map_err(|e| HdcError::io(&ckpt_dir, e))?;
            let outputs = TrainOutputs {
                metrics: Some(metrics),
                checkpoint_dir: Some(ckpt_dir),
            };
            let result = pretrain(&cfg, &videos, &outputs, resume)?;
            if let Some(last) = result.log.last() {
                println!("step {} L_total {:.6}", last.step, last.losses.total);
            }
        }
        Command::EvalRetrieval(args) => {
            let cfg = resolve(&args.common)?;
            let videos = videos_for(&cfg, args.data.as_deref())?;
            let params = params_for(&cfg, args.checkpoint.as_deref())?;
            let reports = evaluate_retrieval(&cfg, &params, &videos)?;
            let metrics = args.common.out.join(METRICS_FILE);
            let log = if metrics.exists() {
                read_metrics(&metrics)?
            } else {
                Vec::new()
            };
            let summary = emit_report(&args.common.out, cfg.seed, &log, &reports)?;
            for (mode, r) in &reports {
                let cells: Vec<String> = r
                    .ks
                    .iter()
                    .zip(&r.accuracy)
                    .map(|(k, a)| format!("top{k} {:.1}", 100.0 * a))
                    .collect();
                println!("{mode:<11} {}", cells.join("  "));
            }
            println!("composite top1 {:.3}", summary.top1);
        }
        Command::Probe(args) => {
            let cfg = resolve(&args.common)?;
            let videos = videos_for(&cfg, args.data.as_deref())?;
            let params = params_for(&cfg, args.checkpoint.as_deref())?;
            let mut results = BTreeMap::new();
            for mode in LabelMode::ALL {
                let records = extract_embeddings(
                    &cfg.encoder,
                    &params,
                    &videos,
                    cfg.trainer.clip_len,
                    cfg.augmentation.original.crop_output,
                    |v| mode.label(v, &cfg.dataset),
                )?;
                let (test, train) = split_records(records, cfg.evaluator.query_fraction);
                let r = linear_probe(
                    &train,
                    &test,
                    cfg.evaluator.probe_epochs,
                    cfg.evaluator.probe_lr,
                    cfg.seed,
                )?;
                println!(
                    "{:<11} train {:.3} test {:.3}",
                    mode.name(),
                    r.train_accuracy,
                    r.test_accuracy
                );
                results.insert(mode.name(), r);
            }
            let path = args.common.out.join("probe.json");
            let json = serde_json::to_string_pretty(&results)? + "\n";
            fs::write(&path, json).map_err(|e| HdcError::io(&path, e))?;
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common)?;
            let rows = if cfg.evaluator.grid.is_empty() {
                default_grid()
            } else {
                cfg.evaluator.grid.clone()
            };
            let seeds = match common.seed {
                Some(s) => vec![s],
                None => cfg.evaluator.grid_seeds.clone(),
            };
            let report = run_ablation_grid(&cfg, &rows, &seeds, |_, _| TrainOutputs::default())?;
            report.write(&common.out)?;
            print!("{}", report.to_table());
        }
        Command::Gradcheck => {
            let reports = gradcheck_suite()?;
            println!(
                "{:<28} {:<24} {:>6} {:>12} {:>12} {:>10}",
                "check", "input", "n", "max_rel", "max_abs", "tol"
            );
            for r in &reports {
                print!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed", reports.len());
            return Ok(failed == 0);
        }
        Command::Selfcheck => {
            let outcomes = selfcheck_suite()?;
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<46} {}", o.name, o.detail);
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HDC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| HdcError::InvalidArgument(format!("HDC_THREADS={v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HdcError::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
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
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
