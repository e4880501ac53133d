//! Command-line harness: dataset generation, training, evaluation,
//! gradient checking and the experiment protocols, all driven by one
//! TOML config file.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure,
//! 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fess_core::config::{ConfigError, RunConfig};
use fess_core::data::{self, DataError};
use fess_core::experiments::{self, ExperimentError};
use fess_core::grad::GradError;
use fess_core::losses::LossError;
use fess_core::metrics::METRIC_NAMES;
use fess_core::model::{self, ModelError};
use fess_core::plot;
use fess_core::gradcheck;
use fess_core::trainer::{self, TrainError};

#[derive(Parser)]
#[command(name = "fess", about = "Segmentation loss experiments on synthetic volumes")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed; echoed in all output headers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker thread count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset (sample_NNNN.vol / .msk pairs).
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Sample count; defaults to the config's experiment.dataset_size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Trains on a generated dataset; writes logs and a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluates a checkpoint on a dataset and prints the metric table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Runs the full gradient-check suite; exits 0 iff all checks pass.
    Gradcheck,
    /// Runs the loss comparison and data ablation; writes CSVs and plot.
    Experiment {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_)
            | DataError::BadMagic { .. }
            | DataError::Truncated
            | DataError::TrailingBytes
            | DataError::BadHeader(_) => CliError::Io(e.to_string()),
            DataError::Volume(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) | ModelError::Checkpoint(_) => CliError::Io(e.to_string()),
            ModelError::Grad(ref g) => grad_error(g, e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Loss(LossError::NonFiniteTerm { .. }) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Loss(LossError::Grad(ref g)) => grad_error(g, e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Data(d) => d.into(),
            ExperimentError::Io(io) => CliError::Io(io.to_string()),
            ExperimentError::Plot(p) => CliError::Io(p.to_string()),
            ExperimentError::Invalid(_) => CliError::Validation(e.to_string()),
        }
    }
}

fn grad_error(g: &GradError, message: String) -> CliError {
    match g {
        GradError::NumericalFailure { .. } => CliError::Numerical(message),
        _ => CliError::Validation(message),
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.override_seed(seed);
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Generate { out, count } => cmd_generate(&config, &out, count),
        Command::Train { data, out } => cmd_train(&config, &data, &out),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Gradcheck => cmd_gradcheck(&config),
        Command::Experiment { out } => cmd_experiment(&config, &out),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err("creating output directory", e))
}

fn cmd_generate(config: &RunConfig, out: &Path, count: Option<usize>) -> Result<(), CliError> {
    ensure_dir(out)?;
    let spec = config.synthetic_spec();
    let count = count.unwrap_or(config.experiment.dataset_size);
    let samples = data::generate(&spec, count)?;
    for (i, s) in samples.iter().enumerate() {
        data::save_volume(&out.join(format!("sample_{i:04}.vol")), &s.image)?;
        data::save_mask(&out.join(format!("sample_{i:04}.msk")), &s.mask)?;
    }
    println!(
        "wrote {count} samples ({}^3 voxels) to {} [{}]",
        spec.extent,
        out.display(),
        config.provenance()
    );
    Ok(())
}

/// Loads `sample_*.vol` with matching `.msk` files, sorted by name.
fn load_dataset(dir: &Path) -> Result<Vec<data::Sample>, CliError> {
    let mut volumes: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err("reading data directory", e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vol"))
        .collect();
    volumes.sort();
    if volumes.is_empty() {
        return Err(CliError::Validation(format!(
            "no sample_*.vol files in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(volumes.len());
    for vol_path in volumes {
        let msk_path = vol_path.with_extension("msk");
        let image = data::load_volume(&vol_path)?;
        let mask = data::load_mask(&msk_path)?;
        samples.push(data::Sample { image, mask });
    }
    Ok(samples)
}

fn cmd_train(config: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let samples = load_dataset(data_dir)?;
    let (train_set, test_set) = data::split(samples, 0.8, config.seed)?;
    let cfg = config.trainer_config();
    println!(
        "training {} steps on {} volumes ({} held out) [{}]",
        cfg.steps,
        train_set.len(),
        test_set.len(),
        config.provenance()
    );
    let (params, log) = trainer::train(&cfg, &train_set, &test_set)?;
    let meta = config.provenance();
    std::fs::write(out.join("train_log.csv"), log.steps_csv(&meta))
        .map_err(|e| io_err("writing train_log.csv", e))?;
    std::fs::write(out.join("eval_log.csv"), log.evals_csv(&meta))
        .map_err(|e| io_err("writing eval_log.csv", e))?;
    model::save_checkpoint(&params, &out.join("model.ckpt"))?;
    if let Some(report) = log.final_eval() {
        println!("final held-out dice {:.4}", report.dice);
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path) -> Result<(), CliError> {
    let params = model::load_checkpoint(checkpoint)?;
    let samples = load_dataset(data_dir)?;
    let pooled = trainer::evaluate(&params, &samples, fess_core::metrics::DEFAULT_THRESHOLD)?;
    let per_volume =
        trainer::evaluate_per_volume(&params, &samples, fess_core::metrics::DEFAULT_THRESHOLD)?;
    println!("metric       pooled    per-volume mean");
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let mean =
            per_volume.iter().map(|r| r.values()[i]).sum::<f64>() / per_volume.len() as f64;
        println!("{name:<12} {:>8.4}  {mean:>8.4}", pooled.values()[i]);
    }
    println!(
        "counts: tp={} fp={} tn={} fn={} over {} volumes",
        pooled.counts.tp,
        pooled.counts.fp,
        pooled.counts.tn,
        pooled.counts.fn_,
        per_volume.len()
    );
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig) -> Result<(), CliError> {
    let _ = config;
    let checks = gradcheck::run_suite();
    let mut all_passed = true;
    for c in &checks {
        println!(
            "{:<4} {:<38} max rel err {:>10.3e} (tol {:.0e})",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.tol
        );
        all_passed &= c.passed;
    }
    if all_passed {
        println!("all {} gradient checks passed", checks.len());
        Ok(())
    } else {
        Err(CliError::Numerical(
            "gradient checks failed; see report above".to_string(),
        ))
    }
}

fn cmd_experiment(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let spec = config.experiment_spec();
    let meta = config.provenance();

    println!("running loss comparison [{meta}]");
    let comparison = experiments::run_loss_comparison(&spec)?;
    std::fs::write(
        out.join("comparison.csv"),
        experiments::comparison_csv(&comparison, &meta),
    )
    .map_err(|e| io_err("writing comparison.csv", e))?;
    std::fs::write(
        out.join("comparison_runs.csv"),
        experiments::comparison_runs_csv(&comparison, &meta),
    )
    .map_err(|e| io_err("writing comparison_runs.csv", e))?;
    std::fs::write(
        out.join("comparison_per_volume.csv"),
        experiments::comparison_per_volume_csv(&comparison, &meta),
    )
    .map_err(|e| io_err("writing comparison_per_volume.csv", e))?;

    println!("running data ablation");
    let ablation = experiments::run_data_ablation(&spec)?;
    std::fs::write(
        out.join("ablation.csv"),
        experiments::ablation_raw_csv(&ablation, &meta),
    )
    .map_err(|e| io_err("writing ablation.csv", e))?;
    std::fs::write(
        out.join("ablation_agg.csv"),
        experiments::ablation_agg_csv(&ablation, &meta),
    )
    .map_err(|e| io_err("writing ablation_agg.csv", e))?;
    let curves = experiments::ablation_curves(&spec, &ablation);
    plot::emit_plot(
        &curves,
        "training samples",
        "Dice coefficient",
        &meta,
        &out.join("ablation.svg"),
    )
    .map_err(|e| CliError::Io(e.to_string()))?;

    for row in &comparison.rows {
        println!(
            "{:<10} dice {:.4} +/- {:.4}",
            row.variant.name(),
            row.mean[0],
            row.std[0]
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

// Referenced by integration tests to build well-formed volumes.
#[allow(dead_code)]
fn _type_anchor(v: Volume) -> usize {
    v.len()
}
