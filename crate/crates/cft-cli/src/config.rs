//! Run configuration: one flat TOML file with `[gen]`, `[model]`, `[train]`,
//! `[cft]`, `[decode]`, and `[eval]` sections, every field defaulted, command
//! line flags layered on top. The resolved configuration is echoed into each
//! output directory as `run_manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cft_core::corpus::GenConfig;
use cft_core::fsutil;
use cft_core::model::ModelConfig;
use cft_core::objective::CftConfig;
use cft_core::trainer::TrainConfig;

use crate::AppError;

/// Transformer shape; the vocabulary size is always taken from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 48,
            dropout: 0.05,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience_epochs: d.patience_epochs,
            weight_decay: d.weight_decay,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            seed: d.seed,
        }
    }
}

/// Objective settings. `beta` and `beta_prime` are two spellings of the same
/// knob (`beta = 1 - 1/beta_prime`); setting both is a configuration error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CftSection {
    pub lambda: f64,
    pub beta: Option<f64>,
    pub beta_prime: Option<f64>,
    pub weight_normal: bool,
    pub stop_counterfactual_grad: bool,
}

impl Default for CftSection {
    fn default() -> Self {
        let d = CftConfig::default();
        CftSection {
            lambda: d.lambda,
            beta: None,
            beta_prime: None,
            weight_normal: d.weight_normal,
            stop_counterfactual_grad: d.stop_counterfactual_grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub width: usize,
    pub length_norm: bool,
    pub top_k: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { width: 10, length_norm: true, top_k: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Metric cutoffs for the metrics table columns.
    pub k: Vec<usize>,
    pub n_groups: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: vec![5, 10], n_groups: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub cft: CftSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses the TOML file, or returns pure defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, AppError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves the objective settings, rejecting contradictory beta
    /// spellings.
    pub fn cft_config(&self) -> Result<CftConfig, AppError> {
        let mut cft = match (self.cft.beta, self.cft.beta_prime) {
            (Some(_), Some(_)) => {
                return Err(AppError::Config(
                    "set either cft.beta or cft.beta_prime, not both".into(),
                ));
            }
            (Some(beta), None) => CftConfig::with_beta(self.cft.lambda, beta),
            (None, Some(bp)) => CftConfig::with_beta_prime(self.cft.lambda, bp),
            (None, None) => CftConfig::with_beta(self.cft.lambda, CftConfig::default().beta()),
        }
        .map_err(|e| AppError::Config(e.to_string()))?;
        cft.weight_normal = self.cft.weight_normal;
        cft.stop_counterfactual_grad = self.cft.stop_counterfactual_grad;
        Ok(cft)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_seq_len: self.model.max_seq_len,
            vocab_size,
            dropout: self.model.dropout,
            init_seed: self.model.init_seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, AppError> {
        let cfg = TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience_epochs: self.train.patience_epochs,
            weight_decay: self.train.weight_decay,
            adam_beta1: self.train.adam_beta1,
            adam_beta2: self.train.adam_beta2,
            adam_eps: self.train.adam_eps,
            seed: self.train.seed,
            cft: self.cft_config()?,
        };
        cfg.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Two sorted metric cutoffs for the metrics table.
    pub fn cutoffs(&self) -> Result<Vec<usize>, AppError> {
        let ks = &self.eval.k;
        if ks.is_empty() || ks.iter().any(|&k| k == 0) {
            return Err(AppError::Config(format!(
                "eval.k must list positive cutoffs, got {ks:?}"
            )));
        }
        let mut sorted = ks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ks.len() {
            return Err(AppError::Config(format!("eval.k repeats a cutoff: {ks:?}")));
        }
        Ok(sorted)
    }

    /// Echoes the resolved configuration into `dir/run_manifest.json`.
    pub fn write_manifest(&self, dir: &Path) -> Result<(), AppError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| AppError::Data(format!("creating {}: {e}", dir.display())))?;
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| AppError::Data(format!("serializing manifest: {e}")))?;
        text.push('\n');
        let path = dir.join("run_manifest.json");
        fsutil::write_atomic(&path, text.as_bytes())
            .map_err(|e| AppError::Data(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }
}
