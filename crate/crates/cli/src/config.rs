//! Experiment configuration: one JSON file drives every subcommand, with CLI
//! flags overriding file fields (precedence flag > file > default; the
//! `SMOOTHCACHE_SEED` environment variable is the seed fallback).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use smoothcache::{CalibrationConfig, ModelConfig, SamplerConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub t_total: usize,
    pub beta_start: f32,
    pub beta_end: f32,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_total: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub diffusion: DiffusionConfig,
    pub calib: CalibrationConfig,
    /// Master seed; when set it overrides the model, sampler and calibration
    /// seeds together.
    pub seed: Option<u64>,
    pub alphas: Vec<f32>,
    pub baselines: Vec<usize>,
    /// Generation seeds for `run`; defaults to the sampler seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            diffusion: DiffusionConfig::default(),
            calib: CalibrationConfig::default(),
            seed: None,
            alphas: vec![0.08, 0.18, 0.22],
            baselines: vec![2, 3],
            seeds: vec![],
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Flag-level overrides shared across subcommands.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub cfg_scale: Option<f32>,
    pub samples: Option<usize>,
    pub k_max: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&PathBuf>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("reading {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, ov: &Overrides) {
        let env_seed = std::env::var("SMOOTHCACHE_SEED")
            .ok()
            .and_then(|v| v.parse::<u64>().ok());
        if let Some(seed) = ov.seed.or(self.seed).or(env_seed) {
            self.model.seed = seed;
            self.sampler.seed = seed;
            self.calib.seed = seed;
            self.seed = Some(seed);
        }
        if let Some(steps) = ov.steps {
            self.sampler.steps = steps;
        }
        if let Some(w) = ov.cfg_scale {
            self.sampler.cfg_scale = w;
        }
        if let Some(n) = ov.samples {
            self.calib.n_samples = n;
        }
        if let Some(k) = ov.k_max {
            self.calib.k_max = k;
        }
        if let Some(dir) = &ov.out_dir {
            self.output_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.calib
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if self.sampler.steps == 0 || self.sampler.steps > self.diffusion.t_total {
            return Err(CliError::Validation(format!(
                "sampler.steps must be in [1, {}], got {}",
                self.diffusion.t_total, self.sampler.steps
            )));
        }
        if self.sampler.cfg_scale < 0.0 {
            return Err(CliError::Validation(
                "sampler.cfg_scale must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.sampler.seed]
        } else {
            self.seeds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_paper_shaped() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.calib.n_samples, 10);
        assert_eq!(cfg.calib.k_max, 3);
        assert_eq!(cfg.sampler.steps, 50);
        assert!((cfg.sampler.cfg_scale - 1.5).abs() < 1e-6);
        assert_eq!(cfg.alphas, vec![0.08, 0.18, 0.22]);
    }

    #[test]
    fn master_seed_overrides_sections() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(99),
            ..Default::default()
        });
        assert_eq!(cfg.model.seed, 99);
        assert_eq!(cfg.sampler.seed, 99);
        assert_eq!(cfg.calib.seed, 99);
    }

    #[test]
    fn invalid_steps_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.sampler.steps = 5000;
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
    }
}
