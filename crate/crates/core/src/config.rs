//! Run configuration: one TOML file driving every command.
//!
//! Unknown keys are rejected with the offending key and line named by
//! the parser. Missing keys take defaults (batch size 5, learning rate
//! 1e-5, epsilon 1e-5, temperature 0.5, eta 1e-5). `canonical()` echoes
//! the parsed, validated configuration back in a normalized form whose
//! FNV-1a hash stamps every output file.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SyntheticSpec;
use crate::experiments::ExperimentSpec;
use crate::losses::{LossConfig, LossVariant};
use crate::trainer::TrainerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub eval_every: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            batch_size: 5,
            learning_rate: 1e-5,
            steps: 200,
            eval_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub extent: usize,
    pub min_ellipsoids: usize,
    pub max_ellipsoids: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SyntheticSection {
            extent: s.extent,
            min_ellipsoids: s.min_ellipsoids,
            max_ellipsoids: s.max_ellipsoids,
            min_radius: s.min_radius,
            max_radius: s.max_radius,
            foreground_mean: s.foreground_mean,
            background_mean: s.background_mean,
            noise_sigma: s.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub variants: Vec<LossVariant>,
    pub train_sizes: Vec<usize>,
    pub repeats: usize,
    pub dataset_size: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            variants: vec![
                LossVariant::Fess,
                LossVariant::DiceOnly,
                LossVariant::Ntxent,
                LossVariant::Infonce,
            ],
            train_sizes: vec![10, 20, 30],
            repeats: 3,
            dataset_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub loss: LossConfig,
    pub trainer: TrainerSection,
    pub synthetic: SyntheticSection,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    /// Parses TOML; parse errors carry the offending key and line.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.loss_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.trainer_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.synthetic_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.experiment_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Normalized round-trippable echo of the configuration.
    pub fn canonical(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the canonical form.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Header stamped onto every output file.
    pub fn provenance(&self) -> String {
        format!("config={:016x} seed={}", self.hash(), self.seed)
    }

    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(seed) = seed {
            self.seed = seed;
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss.clone()
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.trainer.batch_size,
            learning_rate: self.trainer.learning_rate,
            steps: self.trainer.steps,
            eval_every: self.trainer.eval_every,
            loss: self.loss.clone(),
            seed: self.seed,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            extent: self.synthetic.extent,
            min_ellipsoids: self.synthetic.min_ellipsoids,
            max_ellipsoids: self.synthetic.max_ellipsoids,
            min_radius: self.synthetic.min_radius,
            max_radius: self.synthetic.max_radius,
            foreground_mean: self.synthetic.foreground_mean,
            background_mean: self.synthetic.background_mean,
            noise_sigma: self.synthetic.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        ExperimentSpec {
            variants: self.experiment.variants.clone(),
            train_sizes: self.experiment.train_sizes.clone(),
            repeats: self.experiment.repeats,
            dataset_size: self.experiment.dataset_size,
            trainer: self.trainer_config(),
            synthetic: self.synthetic_spec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_parameters() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.trainer.batch_size, 5);
        assert_eq!(cfg.trainer.learning_rate, 1e-5);
        assert_eq!(cfg.loss.epsilon, 1e-5);
        assert_eq!(cfg.loss.delta, 0.5);
        assert_eq!(cfg.loss.eta, 1e-5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_key_and_line() {
        let err = RunConfig::parse("[loss]\nlambda = 0.5\nbogus_key = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn lambda_out_of_range_names_the_constraint() {
        let cfg = RunConfig::parse("[loss]\nlambda = 1.5\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("lambda must lie in [0,1]"), "{err}");
    }

    #[test]
    fn canonical_echo_round_trips() {
        let cfg = RunConfig::parse("seed = 7\n[trainer]\nsteps = 12\n").unwrap();
        let echoed = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, echoed);
        assert_eq!(cfg.canonical(), echoed.canonical());
        assert_eq!(cfg.hash(), echoed.hash());
    }

    #[test]
    fn seed_override_flows_into_specs() {
        let mut cfg = RunConfig::parse("seed = 1\n").unwrap();
        cfg.override_seed(Some(99));
        assert_eq!(cfg.trainer_config().seed, 99);
        assert_eq!(cfg.synthetic_spec().seed, 99);
        assert!(cfg.provenance().contains("seed=99"));
        cfg.override_seed(None);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn different_configs_hash_differently() {
        let a = RunConfig::parse("[loss]\nlambda = 0.5\n").unwrap();
        let b = RunConfig::parse("[loss]\nlambda = 0.6\n").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
