use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use noisyrefine::config::{RunConfig, DATA_DIR_ENV};
use noisyrefine::datasets::{noise_statistics, FlipLedger, Split};
use noisyrefine::eval::{accuracy, emit_report, label_quality, MetricsReport};
use noisyrefine::model::load_checkpoint;
use noisyrefine::refinery::{run_pipeline, PipelinePayload, RefinementState, Resume};

const LEDGER_FILE: &str = "noise_ledger.tsv";

/// Contrastive pretraining plus stage-scheduled pseudo-label refinement
/// under instance-dependent label noise.
#[derive(Parser)]
#[command(name = "noisyrefine", version, after_help = format!("Dataset cache directory: ${DATA_DIR_ENV}"))]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the commands that read a run config.
#[derive(clap::Args)]
struct Overrides {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, replacing the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, replacing the config's.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset, inject label noise and write the flip ledger.
    Prepare {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Pretrain, warm up and refine; writes checkpoints, logs and metrics.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Number of refinement iterations, replacing the config's.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue after the phase stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report test accuracy and label quality for a checkpoint.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path (default: `<output>/eval_<phase>.csv`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the toy 30%-noise pipeline over several seeds and summarize.
    ReproduceDeskSuite {
        #[arg(long, default_value = "desk-suite")]
        output: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
}

/// A problem with how the tool was invoked rather than with the run itself.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<Usage>()
            || e
                .downcast_ref::<noisyrefine::Error>()
                .is_some_and(|e| matches!(e.root(), noisyrefine::Error::Config { .. }))
    });
    if usage {
        1
    } else {
        2
    }
}

struct Loaded {
    config: RunConfig,
    text: String,
}

fn load_config(o: &Overrides) -> Result<Loaded> {
    let text = fs::read_to_string(&o.config).map_err(|e| Usage(format!("cannot read config {}: {e}", o.config.display())))?;
    let mut config = RunConfig::from_toml(&text).with_context(|| format!("invalid config {}", o.config.display()))?;
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(out) = &o.output {
        config.output_dir = out.clone();
    }
    Ok(Loaded { config, text })
}

/// Archives the config verbatim plus the effective settings after overrides.
fn archive_config(loaded: &Loaded) -> Result<()> {
    let dir = &loaded.config.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), &loaded.text)?;
    fs::write(dir.join("effective.toml"), loaded.config.to_toml())?;
    Ok(())
}

fn prepare(loaded: &Loaded) -> Result<FlipLedger> {
    let cfg = &loaded.config;
    archive_config(loaded)?;
    let data = cfg.prepare()?;
    let path = cfg.output_dir.join(LEDGER_FILE);
    data.ledger.write_tsv(&path)?;
    let stats = noise_statistics(&data.train, &data.ledger)?;
    let mut table = String::from("clean_class,flip_rate");
    for c in 0..stats.confusion.len() {
        table.push_str(&format!(",to_{c}"));
    }
    table.push('\n');
    for (c, row) in stats.confusion.iter().enumerate() {
        table.push_str(&format!("{c},{:.6}", stats.per_class_rate[c]));
        for n in row {
            table.push_str(&format!(",{n}"));
        }
        table.push('\n');
    }
    fs::write(cfg.output_dir.join("noise_report.csv"), table)?;
    info!(
        "{} of {} labels flipped ({:.4}); ledger at {}",
        data.ledger.flip_count(),
        data.ledger.len(),
        stats.overall_rate,
        path.display()
    );
    Ok(data.ledger)
}

fn read_ledger(cfg: &RunConfig) -> Result<FlipLedger> {
    let path = cfg.output_dir.join(LEDGER_FILE);
    if !path.exists() {
        anyhow::bail!(
            "no noise ledger at {}; run `noisyrefine prepare` with the same config and --output first",
            path.display()
        );
    }
    Ok(FlipLedger::read_tsv(&path)?)
}

fn dataset_name(cfg: &RunConfig) -> Result<String> {
    Ok(cfg.variant()?.family().to_string())
}

fn run(loaded: &Loaded, resume: Option<PathBuf>) -> Result<MetricsReport> {
    let cfg = &loaded.config;
    let ledger = read_ledger(cfg)?;
    archive_config(loaded)?;
    let mut data = cfg.prepare_from_ledger(ledger)?;
    let pipeline = cfg.pipeline_config(&data.train)?;
    let resume = match resume {
        Some(p) => Resume::From(p),
        None => Resume::Fresh,
    };
    let outcome = run_pipeline(&pipeline, &mut data.train, &data.test, Some(&cfg.output_dir), resume)?;
    let report = outcome.report(&dataset_name(cfg)?, cfg.noise.target_rate, cfg.seed);
    emit_report(std::slice::from_ref(&report), &cfg.output_dir.join("metrics.csv"))?;
    println!(
        "warmup test accuracy {:.2}%, final test accuracy {:.2}%",
        100.0 * outcome.warmup_test_accuracy,
        100.0 * outcome.test_accuracy
    );
    Ok(report)
}

fn evaluate(loaded: &Loaded, checkpoint: &Path, report_path: Option<PathBuf>) -> Result<()> {
    let cfg = &loaded.config;
    let ckpt = load_checkpoint(checkpoint)?;
    let test = cfg.load_split(Split::Test)?;
    let train = match read_ledger(cfg) {
        Ok(ledger) => Some(cfg.prepare_from_ledger(ledger)?.train),
        Err(_) => None,
    };
    let expected = cfg.pipeline_config(train.as_ref().unwrap_or(&test))?.model;
    if ckpt.model.spec() != &expected {
        return Err(noisyrefine::Error::Version(format!(
            "{} holds a model of a different shape than the config describes",
            checkpoint.display()
        ))
        .into());
    }
    let acc = accuracy(&ckpt.model, &test, cfg.train.eval_batch)?;
    let quality = match (&train, serde_json::from_value::<PipelinePayload>(ckpt.payload.clone())) {
        (Some(train), Ok(payload)) => {
            let state = payload
                .refinement
                .unwrap_or_else(|| RefinementState::new(train.len(), cfg.train.loss_threshold));
            label_quality(&state, train.noisy_labels(), Some(&train.oracle()))?
        }
        _ => Vec::new(),
    };
    let report = MetricsReport {
        dataset: dataset_name(cfg)?,
        noise_rate: cfg.noise.target_rate,
        method: format!("refine@{}", ckpt.phase),
        seed: cfg.seed,
        test_accuracy: acc,
        warmup_test_accuracy: None,
        quality,
    };
    let path = report_path.unwrap_or_else(|| cfg.output_dir.join(format!("eval_{}.csv", ckpt.phase)));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    emit_report(&[report], &path)?;
    println!("{}: test accuracy {:.2}% ({})", ckpt.phase, 100.0 * acc, path.display());
    Ok(())
}

fn desk_suite(output: &Path, seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Usage("--seeds needs at least one seed".into()).into());
    }
    let mut reports = Vec::new();
    for &seed in seeds {
        let config = RunConfig::toy(seed, output.join(format!("seed-{seed}")));
        let loaded = Loaded {
            text: config.to_toml(),
            config,
        };
        prepare(&loaded)?;
        reports.push(run(&loaded, None)?);
    }
    emit_report(&reports, &output.join("desk_suite.csv"))?;

    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v[v.len() / 2]
    };
    let selective = reports
        .iter()
        .filter(|r| {
            r.quality.iter().skip(1).all(|q| match (q.consensus_clean_fraction, q.selection_base_clean_fraction) {
                (Some(c), Some(b)) => c >= b,
                _ => true,
            })
        })
        .count();
    let label_gain = median(
        reports
            .iter()
            .map(|r| {
                let first = r.quality.first().and_then(|q| q.working_label_accuracy).unwrap_or(f64::NAN);
                let last = r.quality.last().and_then(|q| q.working_label_accuracy).unwrap_or(f64::NAN);
                last - first
            })
            .collect(),
    );
    let acc_gain = median(
        reports
            .iter()
            .map(|r| r.test_accuracy - r.warmup_test_accuracy.unwrap_or(f64::NAN))
            .collect(),
    );
    println!("seeds: {seeds:?}");
    println!("consensus at least as clean as the full set: {selective}/{} seeds", reports.len());
    println!("median working-label accuracy gain: {label_gain:+.4}");
    println!("median test accuracy gain over warmup: {acc_gain:+.4}");
    println!("table: {}", output.join("desk_suite.csv").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { overrides } => {
            prepare(&load_config(&overrides)?)?;
        }
        Command::Run {
            overrides,
            iterations,
            resume,
        } => {
            let mut loaded = load_config(&overrides)?;
            if let Some(k) = iterations {
                loaded.config.iterations = k;
            }
            run(&loaded, resume)?;
        }
        Command::Evaluate {
            overrides,
            checkpoint,
            report,
        } => evaluate(&load_config(&overrides)?, &checkpoint, report)?,
        Command::ReproduceDeskSuite { output, seeds } => desk_suite(&output, &seeds)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
