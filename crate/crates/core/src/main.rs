#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vnt_core::checkpoint;
use vnt_core::config::RunConfig;
use vnt_core::data::{farthest_point_sample, load_cloud, normalize, CloudFormat, DataSource, SyntheticSpec};
use vnt_core::model::{count_params, init_model, one_hot, ModelConfig, Task};
use vnt_core::rng::seeded;
use vnt_core::training::{evaluate, fmt_sig9, train, write_eval_outputs, EvalOptions, Metrics, RunInfo, TrainOptions};
use vnt_core::verify::{run_verify, VerifyOptions};
use vnt_core::{Error, Protocol, Tensor};

const EXIT_VERIFY: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Reference total for the VNT+N classification network as published.
const REFERENCE_TOTAL: &str = "1.37M";

#[derive(Parser)]
#[command(
    name = "vnt",
    version,
    about = "Vector Neuron Transformer for rotation-equivariant point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivariance, identity and gradient self-checks.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint under a rotation protocol.
    Eval(EvalArgs),
    /// Print per-module and total parameter counts.
    CountParams {
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in configuration instead of a file.
        #[arg(long, value_parser = parse_task)]
        preset: Option<Task>,
    },
    /// Write one block/head attention matrix for a single cloud as CSV.
    ExportAttention(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Dataset directory, or `synthetic`.
    #[arg(long)]
    data: String,
    #[arg(long)]
    train_rot: Protocol,
    #[arg(long)]
    test_rot: Protocol,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory or `synthetic`; defaults to the one recorded at training time.
    #[arg(long)]
    data: Option<String>,
    /// Defaults to the training run's test protocol.
    #[arg(long)]
    rot: Option<Protocol>,
    /// Directory for metrics.json and predictions.csv; defaults to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sample_n: Option<usize>,
    /// Seed of the per-sample test rotations.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    block: usize,
    #[arg(long)]
    head: usize,
    #[arg(long)]
    out: PathBuf,
    /// Object category, required by segmentation models.
    #[arg(long)]
    category: Option<usize>,
    /// Subsample the cloud to this many points first.
    #[arg(long)]
    sample_n: Option<usize>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Verify(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Verify { trials, tol, seed } => cmd_verify(trials, tol, seed),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CountParams { config, preset } => cmd_count_params(config.as_deref(), preset),
        Command::ExportAttention(a) => cmd_export_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Checkpoint { .. } => EXIT_CHECKPOINT,
                Error::Data { .. } | Error::Parse { .. } | Error::Degenerate(_) => EXIT_DATA,
                Error::Config(_) => EXIT_USAGE,
                _ => 1,
            })
        }
    }
}

fn cmd_verify(trials: usize, tol: f64, seed: u64) -> CliResult {
    if trials == 0 || !(tol >= 0.0) {
        return Err(Failure::Usage("--trials must be positive and --tol nonnegative".into()));
    }
    let report = run_verify(&VerifyOptions { trials, tol, seed })?;
    println!("{report}");
    let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(failed.join(", ")))
    }
}

fn data_source(data: &str, rc: &RunConfig) -> DataSource {
    if data == "synthetic" {
        DataSource::Synthetic(rc.synthetic())
    } else {
        DataSource::Directory(PathBuf::from(data))
    }
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if a.seed.is_some() {
        rc.seed = a.seed;
    }
    if a.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let seg = a.task == Task::Segmentation;
    let train_cfg = rc.train()?;
    let augment = rc.augment(a.train_rot)?;
    let source = data_source(&a.data, &rc);
    if let DataSource::Directory(p) = &source {
        if !p.is_dir() {
            return Err(Error::Data {
                path: p.display().to_string(),
                msg: "dataset directory not found".into(),
            }
            .into());
        }
    }
    let ds = source.load(seg)?;
    let (classes, categories) = if seg {
        (ds.num_parts, ds.names.len())
    } else {
        (ds.names.len(), 0)
    };
    let model_cfg = rc.model(a.task, classes, categories)?;
    let mut model = init_model(&model_cfg, &mut seeded(train_cfg.seed))?;
    if !a.quiet {
        eprintln!(
            "{} train / {} test clouds, {} parameters, protocol {}/{}",
            ds.train.len(),
            ds.test.len(),
            model.num_params(),
            a.train_rot,
            a.test_rot
        );
    }
    let opts = TrainOptions {
        train: train_cfg.clone(),
        augment,
        split: vnt_core::data::make_protocol_split(a.train_rot, a.test_rot, train_cfg.seed),
        jobs: a.jobs,
        out_dir: Some(a.out.clone()),
        data: Some(source),
        verbose: !a.quiet,
    };
    let outcome = train(&mut model, &ds.train, &ds.test, &opts)?;
    write_eval_outputs(&a.out, &outcome.final_eval)?;
    print_metrics(&outcome.final_eval.metrics)?;
    if !a.quiet {
        eprintln!("best epoch {}; outputs in {}", outcome.best_epoch, a.out.display());
    }
    Ok(())
}

fn print_metrics(m: &Metrics) -> CliResult {
    println!("{}", serde_json::to_string_pretty(m).map_err(Error::from)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let loaded = checkpoint::load(&a.ckpt)?;
    let run: Option<RunInfo> = match &loaded.run {
        Some(v) => Some(RunInfo::deserialize(v).map_err(|e| Error::checkpoint("run.json", e.to_string()))?),
        None => None,
    };
    let model = loaded.model;
    let recorded = run.as_ref().and_then(|r| r.data.clone());
    let source = match (a.data.as_deref(), recorded) {
        (Some("synthetic"), Some(DataSource::Synthetic(spec))) => DataSource::Synthetic(spec),
        (Some("synthetic"), _) => DataSource::Synthetic(SyntheticSpec::default()),
        (Some(dir), _) => DataSource::Directory(PathBuf::from(dir)),
        (None, Some(src)) => src,
        (None, None) => {
            return Err(Failure::Usage(
                "--data is required: the checkpoint records no dataset".into(),
            ))
        }
    };
    let ds = source.load(model.config.task == Task::Segmentation)?;
    let opts = EvalOptions {
        protocol: a.rot.or(run.as_ref().map(|r| r.split.test)).unwrap_or(Protocol::None),
        seed: a.seed.or(run.as_ref().map(|r| r.split.test_seed)).unwrap_or(0),
        sample_n: a.sample_n.or(run.as_ref().map(|r| r.sample_n)).unwrap_or(1024),
        jobs: a.jobs.max(1),
    };
    let eval = evaluate(&model, &ds.test, &opts)?;
    let out = a.out.unwrap_or(a.ckpt);
    write_eval_outputs(&out, &eval)?;
    print_metrics(&eval.metrics)
}

fn cmd_count_params(config: Option<&Path>, preset: Option<Task>) -> CliResult {
    let cfg = match (config, preset) {
        (Some(p), _) => RunConfig::from_file(p)?.standalone_model()?,
        (None, Some(Task::Segmentation)) => ModelConfig::segmentation(50, 16),
        (None, _) => ModelConfig::classification(40),
    };
    let counts = count_params(&cfg)?;
    println!(
        "linear_dim {}  heads {}  head_size {}  blocks {}  task {:?}",
        cfg.linear_dim, cfg.heads, cfg.head_size, cfg.blocks, cfg.task
    );
    println!("{counts}");
    println!(
        "{:<12} {:>10}  (published VNT+N count, for comparison)",
        "reference", REFERENCE_TOTAL
    );
    Ok(())
}

fn cmd_export_attention(a: ExportArgs) -> CliResult {
    let model = checkpoint::load(&a.ckpt)?.model;
    let cfg = &model.config;
    if a.block >= cfg.blocks || a.head >= cfg.heads {
        return Err(Failure::Usage(format!(
            "--block {} --head {} out of range: model has {} blocks and {} heads",
            a.block, a.head, cfg.blocks, cfg.heads
        )));
    }
    let category = match (cfg.task, a.category) {
        (Task::Segmentation, Some(c)) if c < cfg.num_categories => Some(one_hot(c, cfg.num_categories)?),
        (Task::Segmentation, Some(c)) => {
            return Err(Failure::Usage(format!(
                "--category {c} out of range ({} categories)",
                cfg.num_categories
            )))
        }
        (Task::Segmentation, None) => return Err(Failure::Usage("segmentation models need --category".into())),
        (Task::Classification, _) => None,
    };
    let format = CloudFormat::from_path(&a.input).ok_or_else(|| Error::Data {
        path: a.input.display().to_string(),
        msg: "unsupported extension (expected .off or .csv)".into(),
    })?;
    let mut points = load_cloud(&a.input, format)?;
    if let Some(n) = a.sample_n {
        let idx = farthest_point_sample(&points, n, 0)?;
        points = points.select_rows(&idx)?;
    }
    let points = normalize(&points)?;
    let w = model.attention_weights(&points, category.as_ref(), a.block, a.head)?;
    fs::write(&a.out, matrix_csv(&w)).map_err(Error::from)?;
    Ok(())
}

fn matrix_csv(w: &Tensor) -> String {
    let cols = w.shape()[1];
    let mut s = String::with_capacity(w.numel() * 12);
    for row in w.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|&x| fmt_sig9(x)).collect();
        s += &cells.join(",");
        s.push('\n');
    }
    s
}
