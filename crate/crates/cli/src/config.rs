//! Run configuration file.

use std::path::{Path, PathBuf};

use prqa_core::data::IngestConfig;
use prqa_core::model::ModelConfig;
use prqa_core::seed::derive_seed;
use prqa_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "PRQA_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run. Required.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// GloVe-format vectors; random vectors when absent.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// Training tokens seen fewer times map to UNK.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_min_count() -> usize {
    1
}

/// Training options; the batching seed is derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub qa_share: usize,
    pub qr_share: usize,
    pub learning_rate: f64,
    pub adaptation: bool,
    pub lambda_scale: f64,
    pub fixed_lambda: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            qa_share: t.qa_share,
            qr_share: t.qr_share,
            learning_rate: t.learning_rate,
            adaptation: t.adaptation,
            lambda_scale: t.lambda_scale,
            fixed_lambda: t.fixed_lambda,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`. Relative paths inside the file resolve
    /// against the file's directory; `PRQA_OUTPUT_DIR` wins over
    /// `output_dir`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(path, e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::config(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate().map_err(|e| match e {
            CliError::Core(prqa_core::Error::Config(msg)) => CliError::config(path, msg),
            other => other,
        })?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(e) = self.embeddings.as_mut() {
            fix(e);
        }
        if let Some(g) = self.ingest.gold.as_mut() {
            fix(g);
        }
        for c in &mut self.ingest.categories {
            fix(&mut c.qa);
            fix(&mut c.reviews);
        }
    }

    /// Checks shared by every command.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.min_count == 0 {
            return Err(prqa_core::Error::Config("min_count must be >= 1".into()).into());
        }
        if let Some(e) = &self.embeddings {
            if !e.is_file() {
                return Err(prqa_core::Error::Config(format!("embedding file {} does not exist", e.display())).into());
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            qa_share: t.qa_share,
            qr_share: t.qr_share,
            learning_rate: t.learning_rate,
            seed: self.sub_seed("batching"),
            adaptation: t.adaptation,
            fixed_lambda: t.fixed_lambda,
            lambda_scale: t.lambda_scale,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn sub_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn output(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, toml::de::Error> {
        toml::from_str(text)
    }

    #[test]
    fn seed_is_required() {
        assert!(parse("output_dir = \"x\"").is_err());
        let c = parse("seed = 3").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("seed = 1\nsed = 2").is_err());
        assert!(parse("seed = 1\n[train]\nepoch = 2").is_err());
        assert!(parse("seed = 1\n[model]\nhiden = 2").is_err());
    }

    #[test]
    fn sub_seeds_differ_by_stage() {
        let c = parse("seed = 1").unwrap();
        assert_ne!(c.sub_seed("init"), c.sub_seed("batching"));
        assert_eq!(c.train_config().seed, c.sub_seed("batching"));
    }
}
