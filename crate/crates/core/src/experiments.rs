//! Desk-scale experiment protocols: the multi-loss comparison table and
//! the varied-training-size ablation, with CSV and SVG outputs.
//!
//! Comparisons are controlled: within a repeat, every variant sees the
//! same generated dataset, the same 80:20 split and the same model
//! initialization, so the loss is the only changed factor. Independent
//! (variant, size, repeat) cells run in parallel and are merged in a
//! fixed order, keeping all outputs byte-deterministic.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{self, DataError, Sample, SyntheticSpec};
use crate::losses::LossVariant;
use crate::metrics::{MetricReport, METRIC_NAMES};
use crate::plot::{Curve, PlotError};
use crate::rng;
use crate::trainer::{self, TrainError, TrainerConfig};

/// Train fraction of the generated pool.
const SPLIT_RATIO: f64 = 0.8;
/// Stream offset separating subsample draws from per-sample generation.
const SUBSAMPLE_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("invalid experiment spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full description of both experiment protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub variants: Vec<LossVariant>,
    /// Ablation subset sizes, drawn from the train side of the split.
    pub train_sizes: Vec<usize>,
    /// Seeds per cell.
    pub repeats: usize,
    /// Generated pool size per repeat, split 80:20 into train/test.
    pub dataset_size: usize,
    pub trainer: TrainerConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            variants: vec![
                LossVariant::Fess,
                LossVariant::DiceOnly,
                LossVariant::Ntxent,
                LossVariant::Infonce,
            ],
            train_sizes: vec![10, 20, 30],
            repeats: 3,
            dataset_size: 50,
            trainer: TrainerConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.variants.is_empty() {
            return Err(ExperimentError::Invalid("no loss variants".to_string()));
        }
        if self.train_sizes.is_empty() {
            return Err(ExperimentError::Invalid("no training sizes".to_string()));
        }
        if self.repeats < 1 {
            return Err(ExperimentError::Invalid(
                "repeats must be at least 1".to_string(),
            ));
        }
        if self.dataset_size < 2 {
            return Err(ExperimentError::Invalid(
                "dataset_size must be at least 2".to_string(),
            ));
        }
        let pool = self.train_pool_size();
        if pool == 0 || pool >= self.dataset_size {
            return Err(ExperimentError::Invalid(format!(
                "dataset_size {} leaves no test split",
                self.dataset_size
            )));
        }
        for &size in &self.train_sizes {
            if size == 0 || size > pool {
                return Err(ExperimentError::Invalid(format!(
                    "train size {size} exceeds the {pool}-sample training pool"
                )));
            }
        }
        self.trainer.validate()?;
        self.synthetic.validate()?;
        Ok(())
    }

    /// Train-side size after the 80:20 split.
    pub fn train_pool_size(&self) -> usize {
        ((SPLIT_RATIO * self.dataset_size as f64).round() as usize).min(self.dataset_size)
    }

    fn repeat_data(&self, repeat: usize) -> Result<(Vec<Sample>, Vec<Sample>), ExperimentError> {
        let synth = SyntheticSpec {
            seed: self.synthetic.seed + repeat as u64,
            ..self.synthetic.clone()
        };
        let samples = data::generate(&synth, self.dataset_size)?;
        Ok(data::split(samples, SPLIT_RATIO, synth.seed)?)
    }

    fn trainer_for(&self, variant: LossVariant, repeat: usize) -> TrainerConfig {
        let mut cfg = self.trainer.clone();
        cfg.loss.variant = variant;
        cfg.seed = self.trainer.seed + repeat as u64;
        cfg
    }
}

/// One training run's final held-out metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRun {
    pub variant: LossVariant,
    pub repeat: usize,
    pub seed: u64,
    /// Pooled-confusion metric values in `METRIC_NAMES` order.
    pub metrics: [f64; 5],
}

/// Mean and sample standard deviation across repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: LossVariant,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

/// Within-run spread across test volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PerVolumeRow {
    pub variant: LossVariant,
    pub repeat: usize,
    pub mean: [f64; 5],
    pub stderr: [f64; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonResult {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<ComparisonRun>,
    pub per_volume: Vec<PerVolumeRow>,
}

/// Trains every variant with shared per-repeat data and initialization,
/// evaluates on the shared test split and aggregates across repeats.
pub fn run_loss_comparison(spec: &ExperimentSpec) -> Result<ComparisonResult, ExperimentError> {
    spec.validate()?;
    let cells: Vec<(LossVariant, usize)> = spec
        .variants
        .iter()
        .flat_map(|&v| (0..spec.repeats).map(move |r| (v, r)))
        .collect();
    let outcomes: Vec<Result<(ComparisonRun, PerVolumeRow), ExperimentError>> = cells
        .par_iter()
        .map(|&(variant, repeat)| {
            let (train_set, test_set) = spec.repeat_data(repeat)?;
            let cfg = spec.trainer_for(variant, repeat);
            let (params, log) = trainer::train(&cfg, &train_set, &test_set)?;
            let pooled = log
                .final_eval()
                .expect("completed run has a final eval")
                .values();
            let per_volume = trainer::evaluate_per_volume(
                &params,
                &test_set,
                crate::metrics::DEFAULT_THRESHOLD,
            )?;
            let (mean, stderr) = per_volume_stats(&per_volume);
            Ok((
                ComparisonRun {
                    variant,
                    repeat,
                    seed: cfg.seed,
                    metrics: pooled,
                },
                PerVolumeRow {
                    variant,
                    repeat,
                    mean,
                    stderr,
                },
            ))
        })
        .collect();
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut per_volume = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (run, pv) = o?;
        runs.push(run);
        per_volume.push(pv);
    }
    let rows = spec
        .variants
        .iter()
        .map(|&variant| {
            let mut mean = [0.0; 5];
            let mut std = [0.0; 5];
            for m in 0..5 {
                let values: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.variant == variant)
                    .map(|r| r.metrics[m])
                    .collect();
                let (mu, sigma) = mean_std(&values);
                mean[m] = mu;
                std[m] = sigma;
            }
            ComparisonRow { variant, mean, std }
        })
        .collect();
    Ok(ComparisonResult {
        rows,
        runs,
        per_volume,
    })
}

/// Raw ablation cell: one trained run's final held-out dice.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub variant: LossVariant,
    pub train_size: usize,
    pub seed: u64,
    pub dice: f64,
}

/// Mean and standard error (`std / sqrt(repeats)`) per (variant, size).
#[derive(Debug, Clone, PartialEq)]
pub struct AblationAggregate {
    pub variant: LossVariant,
    pub train_size: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub raw: Vec<AblationPoint>,
    pub agg: Vec<AblationAggregate>,
}

/// For each (variant, size, seed): fresh subsample of the training pool,
/// full training run, final held-out dice. The subsample depends on
/// (size, seed) only, so variants compete on identical data.
pub fn run_data_ablation(spec: &ExperimentSpec) -> Result<AblationResult, ExperimentError> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &variant in &spec.variants {
        for &size in &spec.train_sizes {
            for repeat in 0..spec.repeats {
                cells.push((variant, size, repeat));
            }
        }
    }
    let raw: Vec<AblationPoint> = cells
        .par_iter()
        .map(|&(variant, size, repeat)| -> Result<AblationPoint, ExperimentError> {
            let (pool, test_set) = spec.repeat_data(repeat)?;
            let subset = subsample(&pool, size, spec.synthetic.seed + repeat as u64);
            let cfg = spec.trainer_for(variant, repeat);
            let (_params, log) = trainer::train(&cfg, &subset, &test_set)?;
            let dice = log.final_eval().expect("completed run has a final eval").dice;
            Ok(AblationPoint {
                variant,
                train_size: size,
                seed: cfg.seed,
                dice,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut agg = Vec::new();
    for &variant in &spec.variants {
        for &size in &spec.train_sizes {
            let values: Vec<f64> = raw
                .iter()
                .filter(|p| p.variant == variant && p.train_size == size)
                .map(|p| p.dice)
                .collect();
            let (mean, std) = mean_std(&values);
            agg.push(AblationAggregate {
                variant,
                train_size: size,
                mean,
                stderr: std / (values.len() as f64).sqrt(),
            });
        }
    }
    Ok(AblationResult { raw, agg })
}

/// First `size` elements of a seeded shuffle of the pool.
fn subsample(pool: &[Sample], size: usize, seed: u64) -> Vec<Sample> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = rng::seeded_stream(seed, SUBSAMPLE_STREAM_BASE + size as u64);
    rng::shuffle(&mut rng, &mut order);
    order[..size].iter().map(|&i| pool[i].clone()).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn per_volume_stats(reports: &[MetricReport]) -> ([f64; 5], [f64; 5]) {
    let mut mean = [0.0; 5];
    let mut stderr = [0.0; 5];
    for m in 0..5 {
        let values: Vec<f64> = reports.iter().map(|r| r.values()[m]).collect();
        let (mu, sigma) = mean_std(&values);
        mean[m] = mu;
        stderr[m] = sigma / (values.len() as f64).sqrt();
    }
    (mean, stderr)
}

/// `variant,<metric>_mean,<metric>_std` table, one row per variant.
pub fn comparison_csv(result: &ComparisonResult, meta: &str) -> String {
    let mut out = String::new();
    if !meta.is_empty() {
        let _ = writeln!(out, "# {meta}");
    }
    out.push_str("variant");
    for name in METRIC_NAMES {
        let _ = write!(out, ",{name}_mean,{name}_std");
    }
    out.push('\n');
    for row in &result.rows {
        let _ = write!(out, "{}", row.variant.name());
        for m in 0..5 {
            let _ = write!(out, ",{},{}", row.mean[m], row.std[m]);
        }
        out.push('\n');
    }
    out
}

/// Raw per-run metrics behind the comparison table.
pub fn comparison_runs_csv(result: &ComparisonResult, meta: &str) -> String {
    let mut out = String::new();
    if !meta.is_empty() {
        let _ = writeln!(out, "# {meta}");
    }
    out.push_str("variant,repeat,seed");
    for name in METRIC_NAMES {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for run in &result.runs {
        let _ = write!(out, "{},{},{}", run.variant.name(), run.repeat, run.seed);
        for m in 0..5 {
            let _ = write!(out, ",{}", run.metrics[m]);
        }
        out.push('\n');
    }
    out
}

/// Within-run mean and standard error across test volumes.
pub fn comparison_per_volume_csv(result: &ComparisonResult, meta: &str) -> String {
    let mut out = String::new();
    if !meta.is_empty() {
        let _ = writeln!(out, "# {meta}");
    }
    out.push_str("variant,repeat");
    for name in METRIC_NAMES {
        let _ = write!(out, ",{name}_mean,{name}_stderr");
    }
    out.push('\n');
    for row in &result.per_volume {
        let _ = write!(out, "{},{}", row.variant.name(), row.repeat);
        for m in 0..5 {
            let _ = write!(out, ",{},{}", row.mean[m], row.stderr[m]);
        }
        out.push('\n');
    }
    out
}

/// Raw ablation cells: `variant,train_size,seed,dice`.
pub fn ablation_raw_csv(result: &AblationResult, meta: &str) -> String {
    let mut out = String::new();
    if !meta.is_empty() {
        let _ = writeln!(out, "# {meta}");
    }
    out.push_str("variant,train_size,seed,dice\n");
    for p in &result.raw {
        let _ = writeln!(out, "{},{},{},{}", p.variant.name(), p.train_size, p.seed, p.dice);
    }
    out
}

/// Aggregated ablation curves: `variant,train_size,dice_mean,dice_stderr`.
pub fn ablation_agg_csv(result: &AblationResult, meta: &str) -> String {
    let mut out = String::new();
    if !meta.is_empty() {
        let _ = writeln!(out, "# {meta}");
    }
    out.push_str("variant,train_size,dice_mean,dice_stderr\n");
    for a in &result.agg {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            a.variant.name(),
            a.train_size,
            a.mean,
            a.stderr
        );
    }
    out
}

/// One plot curve per variant, in spec order.
pub fn ablation_curves(spec: &ExperimentSpec, result: &AblationResult) -> Vec<Curve> {
    spec.variants
        .iter()
        .map(|&variant| Curve {
            label: variant.name().to_string(),
            points: result
                .agg
                .iter()
                .filter(|a| a.variant == variant)
                .map(|a| (a.train_size as f64, a.mean, a.stderr))
                .collect(),
        })
        .collect()
}
