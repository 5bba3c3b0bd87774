//! Run configuration: a TOML file whose keys can be overridden by flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use depht::features::FeatureSet;
use depht::model::{ModelConfig, Optimizer};
use depht::optim::LbfgsConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lbfgs,
    Sgd,
}

/// Keys accepted in the config file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training corpus.
    #[arg(long)]
    pub train: Option<PathBuf>,

    /// Held-out corpus evaluated after training.
    #[arg(long)]
    pub test: Option<PathBuf>,

    /// Function signature table.
    #[arg(long)]
    pub signatures: Option<PathBuf>,

    /// Word embedding file (`word v1 ... vd` per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,

    /// Depth cap on meaning representations.
    #[arg(long)]
    pub c: Option<usize>,

    /// L2 regularization coefficient.
    #[arg(long)]
    pub l2: Option<f64>,

    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,

    /// SGD learning rate.
    #[arg(long)]
    pub lr: Option<f64>,

    /// SGD epochs.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// basic, basic+hm, basic+bow or full.
    #[arg(long)]
    pub features: Option<String>,

    /// Add the bilinear arc scorer.
    #[arg(long)]
    pub neural: Option<bool>,

    /// Add averaged embeddings as features.
    #[arg(long)]
    pub embedding_features: Option<bool>,

    #[arg(long)]
    pub lowercase: Option<bool>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub threads: Option<usize>,

    /// Directory receiving the model and loss trace.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,

    /// Language tag stored on loaded instances.
    #[arg(long)]
    pub language: Option<String>,
}

macro_rules! overlay {
    ($base:ident, $over:ident, $($field:ident),*) => {
        $( if $over.$field.is_some() { $base.$field = $over.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `flags` win over the file.
    pub fn merge(mut self, flags: &RunConfig) -> Self {
        overlay!(
            self,
            flags,
            train,
            test,
            signatures,
            embeddings,
            c,
            l2,
            optimizer,
            lr,
            epochs,
            features,
            neural,
            embedding_features,
            lowercase,
            seed,
            threads,
            output_dir,
            language
        );
        self
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let defaults = ModelConfig::default();
        let mut features = match &self.features {
            Some(name) => FeatureSet::parse(name).map_err(|e| CliError::Config(e.to_string()))?,
            None => defaults.features,
        };
        features.lowercase = self.lowercase.unwrap_or(false);
        features.embedding = self.embedding_features.unwrap_or(false);
        let config = ModelConfig {
            cap: self.c.unwrap_or(defaults.cap),
            l2: self.l2.unwrap_or(defaults.l2),
            features,
            neural: self.neural.unwrap_or(false),
            threads: self.threads.unwrap_or(1),
            seed: self.seed.unwrap_or(defaults.seed),
        };
        if config.cap < 1 {
            return Err(CliError::Config("c must be at least 1".into()));
        }
        if !(config.l2 >= 0.0 && config.l2.is_finite()) {
            return Err(CliError::Config("l2 must be a non-negative number".into()));
        }
        if config.threads < 1 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if (config.neural || features.embedding) && self.embeddings.is_none() {
            return Err(CliError::Config("the neural scorer and embedding features need `embeddings`".into()));
        }
        Ok(config)
    }

    pub fn optimizer(&self) -> Result<Optimizer, CliError> {
        match self.optimizer.unwrap_or(OptimizerKind::Lbfgs) {
            OptimizerKind::Lbfgs => Ok(Optimizer::Lbfgs(LbfgsConfig::default())),
            OptimizerKind::Sgd => {
                let lr = self.lr.unwrap_or(0.05);
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(CliError::Config("lr must be positive for sgd".into()));
                }
                Ok(Optimizer::Sgd {
                    lr,
                    epochs: self.epochs.unwrap_or(30),
                })
            }
        }
    }

    pub fn language(&self) -> &str {
        self.language.as_deref().unwrap_or("en")
    }

    /// Fails unless every configured input path can be opened.
    pub fn check_paths(&self) -> Result<(), CliError> {
        for path in [&self.train, &self.test, &self.signatures, &self.embeddings].into_iter().flatten() {
            std::fs::File::open(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        }
        Ok(())
    }
}
