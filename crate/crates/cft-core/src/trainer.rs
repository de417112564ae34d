//! Training loop for the dual-branch objective: shuffled minibatches, AdamW
//! updates, patience-based early stopping, and a versioned binary checkpoint
//! format with bit-exact round trips.
//!
//! Every source of randomness (epoch shuffles, per-branch dropout masks) is
//! re-derived from the seed plus position counters instead of mutable RNG
//! state, so training can be checkpointed at any optimizer step and resumed
//! bit-exactly.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamSet, Tape};
use crate::corpus::{render_instruction, Catalog, CorpusError, InteractionSample};
use crate::fsutil;
use crate::model::{Batch, DropoutMode, Model, ModelConfig, ModelError};
use crate::objective::{build_dual_batch, cft_loss, CftConfig, DualBatch, ObjectiveError};
use crate::stream;
use crate::tensor::{Tensor, TensorError};
use crate::textenc::Vocab;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptyDataset(&'static str),
    #[error(
        "non-finite training loss {value} at epoch {epoch}, step {step} with lambda = {lambda}; \
         lower lambda or the learning rate"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        lambda: f64,
        value: f64,
    },
    #[error(
        "non-finite validation loss {value} after epoch {epoch} with lambda = {lambda}; \
         lower lambda or the learning rate"
    )]
    NonFiniteValidation { epoch: usize, lambda: f64, value: f64 },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimizer and loop hyperparameters. `seed` drives the epoch shuffles and
/// the dropout masks; the model's own initialization seed lives in
/// [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once validation loss has failed to improve this many epochs.
    pub patience_epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub cft: CftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 30,
            patience_epochs: 1,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            cft: CftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.cft.lambda.is_finite() && self.cft.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.cft.lambda));
        }
        if !(0.0..=1.0).contains(&self.cft.beta()) {
            return bad(format!("beta must lie in [0, 1], got {}", self.cft.beta()));
        }
        Ok(())
    }
}

/// First and second gradient moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Optimizer steps taken so far; exponent of the bias correction.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step(params: &mut ParamSet, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = p.value.data_mut();
        for j in 0..value.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            value[j] -= cfg.learning_rate
                * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * value[j]);
        }
    }
}

/// Patience rule on validation loss; strictly lower is an improvement.
#[derive(Debug, Clone)]
struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    since_improvement: usize,
}

#[derive(Debug, PartialEq, Eq)]
enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    fn observe(&mut self, valid_loss: f64) -> StopDecision {
        match self.best {
            Some(best) if valid_loss >= best => {
                self.since_improvement += 1;
                if self.since_improvement >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(valid_loss);
                self.since_improvement = 0;
                StopDecision::Improved
            }
        }
    }
}

/// One row of the epoch log. `train_lc` is NaN when lambda is 0, since the
/// causal branch never runs.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ln: f64,
    pub train_lc: f64,
    pub train_l: f64,
    pub valid_l: f64,
    pub seconds: f64,
}

/// Writes the epoch log in its CSV layout.
pub fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = String::from("epoch,train_Ln,train_Lc,train_L,valid_L,seconds\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_ln, r.train_lc, r.train_l, r.valid_l, r.seconds
        );
    }
    fsutil::write_atomic(path, out.as_bytes())
}

/// Instrumentation for the one-step/one-forward-per-branch invariant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardCounters {
    pub train_factual: u64,
    pub train_counterfactual: u64,
    pub optimizer_steps: u64,
    pub valid_factual: u64,
    pub valid_counterfactual: u64,
}

/// Loop position plus early-stopping state; everything needed (beyond the
/// tensors) to resume a run bit-exactly, because shuffles and dropout masks
/// are pure functions of `(seed, epoch, step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// 0-based index of the epoch currently in progress (or next to run).
    pub epoch: usize,
    /// Optimizer steps already taken inside that epoch.
    pub step_in_epoch: usize,
    pub adam_step: u64,
    pub best_valid_loss: Option<f64>,
    /// 1-based epoch that produced the best validation loss.
    pub best_epoch: Option<usize>,
    pub best_adam_step: u64,
    pub epochs_since_improvement: usize,
}

/// Tensors of the best-validation snapshot carried by mid-training
/// checkpoints; same order as the live tensors.
#[derive(Debug, Clone)]
pub struct BestTensors {
    pub params: Vec<Tensor>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Serializable training state. `params` / `adam_m` / `adam_v` run in the
/// model's canonical parameter order; `best` is present only on mid-training
/// checkpoints taken after at least one validation improvement.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub progress: Progress,
    /// (name, value) pairs; names follow the model layout.
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub best: Option<BestTensors>,
}

/// Overwrites a freshly built parameter set with stored tensors, insisting
/// on matching names and shapes.
fn apply_params(params: &mut ParamSet, stored: &[(String, Tensor)]) -> Result<(), TrainError> {
    if stored.len() != params.len() {
        return Err(TrainError::BadCheckpoint(format!(
            "checkpoint has {} parameter tensors, model expects {}",
            stored.len(),
            params.len()
        )));
    }
    for (i, (name, value)) in stored.iter().enumerate() {
        let param = params.get_mut(i);
        if param.name != *name {
            return Err(TrainError::BadCheckpoint(format!(
                "parameter {i} is named {name:?}, model expects {:?}",
                param.name
            )));
        }
        if param.value.shape() != value.shape() {
            return Err(TrainError::BadCheckpoint(format!(
                "parameter {name:?} has shape {:?}, model expects {:?}",
                value.shape(),
                param.value.shape()
            )));
        }
        param.value = value.clone();
    }
    Ok(())
}

impl Checkpoint {
    /// Instantiates the stored model: fresh layout, stored weights.
    pub fn build_model(&self) -> Result<Model, TrainError> {
        let mut model = Model::new(self.model_config.clone())?;
        apply_params(&mut model.params, &self.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
struct Snapshot {
    valid_loss: f64,
    /// 1-based epoch number.
    epoch: usize,
    adam_step: u64,
    params: Vec<Tensor>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

struct StepStats {
    ln: f64,
    wn: f64,
    lc: f64,
    wc: f64,
}

/// Owns the model and optimizer state for one training run over borrowed
/// data. Use [`train`] for the plain end-to-end call.
pub struct Trainer<'a> {
    model: Model,
    adam: AdamState,
    cfg: TrainConfig,
    catalog: &'a Catalog,
    vocab: &'a Vocab,
    train_set: &'a [InteractionSample],
    valid_set: &'a [InteractionSample],
    epoch: usize,
    step_in_epoch: usize,
    stopper: EarlyStopper,
    best: Option<Snapshot>,
    pub counters: ForwardCounters,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_config: &ModelConfig,
        catalog: &'a Catalog,
        vocab: &'a Vocab,
        train_set: &'a [InteractionSample],
        valid_set: &'a [InteractionSample],
        cfg: TrainConfig,
    ) -> Result<Trainer<'a>, TrainError> {
        cfg.validate()?;
        if train_set.is_empty() {
            return Err(TrainError::EmptyDataset("train"));
        }
        if valid_set.is_empty() {
            return Err(TrainError::EmptyDataset("valid"));
        }
        if vocab.len() != model_config.vocab_size {
            return Err(TrainError::InvalidConfig(format!(
                "model vocab_size {} does not match vocabulary size {}",
                model_config.vocab_size,
                vocab.len()
            )));
        }
        let model = Model::new(model_config.clone())?;
        let adam = AdamState::new(&model.params);
        let stopper = EarlyStopper {
            patience: cfg.patience_epochs,
            best: None,
            since_improvement: 0,
        };
        Ok(Trainer {
            model,
            adam,
            cfg,
            catalog,
            vocab,
            train_set,
            valid_set,
            epoch: 0,
            step_in_epoch: 0,
            stopper,
            best: None,
            counters: ForwardCounters::default(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn shuffled_indices(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        let mut rng = stream::stream(self.cfg.seed, "shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    fn batch_for(&self, chunk: &[usize]) -> Result<DualBatch, TrainError> {
        let samples: Vec<InteractionSample> =
            chunk.iter().map(|&i| self.train_set[i].clone()).collect();
        Ok(build_dual_batch(&samples, self.catalog, self.vocab, self.cfg.cft.beta())?)
    }

    fn execute_step(&mut self, step: usize, chunk: &[usize]) -> Result<StepStats, TrainError> {
        let dual = self.batch_for(chunk)?;
        let factual = DropoutMode::Train {
            seed: stream::derive_seed(
                self.cfg.seed,
                "dropout",
                &[self.epoch as u64, step as u64, 0],
            ),
        };
        let counterfactual = DropoutMode::Train {
            seed: stream::derive_seed(
                self.cfg.seed,
                "dropout",
                &[self.epoch as u64, step as u64, 1],
            ),
        };
        let mut tape = Tape::new();
        let nodes = cft_loss(&mut tape, &self.model, &dual, &self.cfg.cft, factual, counterfactual)?;
        self.counters.train_factual += 1;
        if nodes.causal.is_some() {
            self.counters.train_counterfactual += 1;
        }
        let combined = tape.scalar_value(nodes.combined)?;
        if !combined.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: self.epoch + 1,
                step: step + 1,
                lambda: self.cfg.cft.lambda,
                value: combined,
            });
        }
        let ln = tape.scalar_value(nodes.normal)?;
        let wn = if self.cfg.cft.weight_normal {
            dual.weights.iter().sum()
        } else {
            dual.targets.len() as f64
        };
        let (lc, wc) = match nodes.causal {
            Some(node) => (tape.scalar_value(node)?, dual.weights.iter().sum()),
            None => (f64::NAN, 0.0),
        };
        self.model.params.zero_grad();
        tape.backward(nodes.combined, &mut self.model.params)?;
        adamw_step(&mut self.model.params, &mut self.adam, &self.cfg);
        self.counters.optimizer_steps += 1;
        self.step_in_epoch = step + 1;
        Ok(StepStats { ln, wn, lc, wc })
    }

    /// Runs up to `max_steps` optimizer steps inside the current epoch and
    /// returns how many actually ran (fewer at the epoch boundary). Exposed
    /// for step-level resume checks; [`run`](Trainer::run) is the normal
    /// driver.
    pub fn run_steps(&mut self, max_steps: usize) -> Result<usize, TrainError> {
        if self.epoch >= self.cfg.max_epochs {
            return Ok(0);
        }
        let order = self.shuffled_indices(self.epoch);
        let chunks: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let first = self.step_in_epoch;
        let last = (first + max_steps).min(chunks.len());
        for step in first..last {
            self.execute_step(step, chunks[step])?;
        }
        Ok(last - first)
    }

    /// Finishes the current epoch (honoring a mid-epoch resume point) and
    /// returns the aggregated `(L_n, L_c)` over the steps it ran.
    fn train_epoch_remainder(&mut self) -> Result<(f64, f64), TrainError> {
        let order = self.shuffled_indices(self.epoch);
        let chunks: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let mut ln_num = 0.0;
        let mut wn_sum = 0.0;
        let mut lc_num = 0.0;
        let mut wc_sum = 0.0;
        for step in self.step_in_epoch..chunks.len() {
            let stats = self.execute_step(step, chunks[step])?;
            ln_num += stats.ln * stats.wn;
            wn_sum += stats.wn;
            if stats.wc > 0.0 {
                lc_num += stats.lc * stats.wc;
                wc_sum += stats.wc;
            }
        }
        let ln = ln_num / wn_sum;
        let lc = if wc_sum > 0.0 { lc_num / wc_sum } else { f64::NAN };
        Ok((ln, lc))
    }

    /// Combined validation loss under eval-mode forwards, aggregated over
    /// the whole split (per-position numerators and weight sums accumulate
    /// across batches; one division at the end). Mutates nothing but the
    /// forward counters.
    pub fn validate(&mut self) -> Result<f64, TrainError> {
        let lambda = self.cfg.cft.lambda;
        let mut ln_num = 0.0;
        let mut wn_sum = 0.0;
        let mut lc_num = 0.0;
        let mut wc_sum = 0.0;
        for chunk in self.valid_set.chunks(self.cfg.batch_size) {
            let dual = build_dual_batch(chunk, self.catalog, self.vocab, self.cfg.cft.beta())?;
            let mut tape = Tape::new();
            let nodes = cft_loss(
                &mut tape,
                &self.model,
                &dual,
                &self.cfg.cft,
                DropoutMode::Eval,
                DropoutMode::Eval,
            )?;
            self.counters.valid_factual += 1;
            let wn = if self.cfg.cft.weight_normal {
                dual.weights.iter().sum()
            } else {
                dual.targets.len() as f64
            };
            ln_num += tape.scalar_value(nodes.normal)? * wn;
            wn_sum += wn;
            if let Some(node) = nodes.causal {
                self.counters.valid_counterfactual += 1;
                let wc: f64 = dual.weights.iter().sum();
                lc_num += tape.scalar_value(node)? * wc;
                wc_sum += wc;
            }
        }
        let ln = ln_num / wn_sum;
        Ok(if lambda > 0.0 { ln + lambda * (lc_num / wc_sum) } else { ln })
    }

    fn snapshot_best(&mut self, valid_loss: f64, epoch_1based: usize) {
        self.best = Some(Snapshot {
            valid_loss,
            epoch: epoch_1based,
            adam_step: self.adam.step,
            params: self.model.params.iter().map(|p| p.value.clone()).collect(),
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        });
    }

    /// Trains until early stopping or `max_epochs`, returning one record per
    /// completed epoch (numbered from 1).
    pub fn run(&mut self) -> Result<Vec<EpochRecord>, TrainError> {
        let mut records = Vec::new();
        while self.epoch < self.cfg.max_epochs {
            let started = Instant::now();
            let (ln, lc) = self.train_epoch_remainder()?;
            let lambda = self.cfg.cft.lambda;
            let train_l = if lambda > 0.0 { ln + lambda * lc } else { ln };
            let valid_l = self.validate()?;
            if !valid_l.is_finite() {
                return Err(TrainError::NonFiniteValidation {
                    epoch: self.epoch + 1,
                    lambda,
                    value: valid_l,
                });
            }
            let epoch_1based = self.epoch + 1;
            records.push(EpochRecord {
                epoch: epoch_1based,
                train_ln: ln,
                train_lc: lc,
                train_l,
                valid_l,
                seconds: started.elapsed().as_secs_f64(),
            });
            let decision = self.stopper.observe(valid_l);
            self.epoch += 1;
            self.step_in_epoch = 0;
            match decision {
                StopDecision::Improved => self.snapshot_best(valid_l, epoch_1based),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
        Ok(records)
    }

    fn progress(&self) -> Progress {
        Progress {
            epoch: self.epoch,
            step_in_epoch: self.step_in_epoch,
            adam_step: self.adam.step,
            best_valid_loss: self.best.as_ref().map(|b| b.valid_loss),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_adam_step: self.best.as_ref().map(|b| b.adam_step).unwrap_or(0),
            epochs_since_improvement: self.stopper.since_improvement,
        }
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        self.model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Captures the live state (plus the best snapshot, if any) for a
    /// mid-training save.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.cfg.clone(),
            progress: self.progress(),
            params: self.named_params(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            best: self.best.as_ref().map(|b| BestTensors {
                params: b.params.clone(),
                m: b.m.clone(),
                v: b.v.clone(),
            }),
        }
    }

    /// Consumes the trainer and returns the checkpoint of the
    /// best-validation state (the training artifact).
    pub fn into_best_checkpoint(self) -> Result<Checkpoint, TrainError> {
        let names: Vec<String> = self.model.params.iter().map(|p| p.name.clone()).collect();
        let best = self.best.ok_or_else(|| {
            TrainError::InvalidConfig("no epoch completed; nothing to checkpoint".into())
        })?;
        Ok(Checkpoint {
            model_config: self.model.config.clone(),
            train_config: self.cfg,
            progress: Progress {
                epoch: best.epoch,
                step_in_epoch: 0,
                adam_step: best.adam_step,
                best_valid_loss: Some(best.valid_loss),
                best_epoch: Some(best.epoch),
                best_adam_step: best.adam_step,
                epochs_since_improvement: 0,
            },
            params: names.into_iter().zip(best.params).collect(),
            adam_m: best.m,
            adam_v: best.v,
            best: None,
        })
    }

    /// Rebuilds a trainer from a checkpoint; shuffles and dropout masks for
    /// the remaining steps re-derive from the stored counters, so resuming
    /// reproduces an uninterrupted run bit-for-bit. Forward counters restart
    /// at zero (they are per-session diagnostics).
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        catalog: &'a Catalog,
        vocab: &'a Vocab,
        train_set: &'a [InteractionSample],
        valid_set: &'a [InteractionSample],
    ) -> Result<Trainer<'a>, TrainError> {
        let mut trainer = Trainer::new(
            &ckpt.model_config,
            catalog,
            vocab,
            train_set,
            valid_set,
            ckpt.train_config.clone(),
        )?;
        apply_params(&mut trainer.model.params, &ckpt.params)?;
        trainer.adam = AdamState {
            m: ckpt.adam_m.clone(),
            v: ckpt.adam_v.clone(),
            step: ckpt.progress.adam_step,
        };
        trainer.epoch = ckpt.progress.epoch;
        trainer.step_in_epoch = ckpt.progress.step_in_epoch;
        trainer.stopper.best = ckpt.progress.best_valid_loss;
        trainer.stopper.since_improvement = ckpt.progress.epochs_since_improvement;
        trainer.best = match (&ckpt.best, ckpt.progress.best_valid_loss) {
            (Some(tensors), Some(valid_loss)) => Some(Snapshot {
                valid_loss,
                epoch: ckpt.progress.best_epoch.unwrap_or(0),
                adam_step: ckpt.progress.best_adam_step,
                params: tensors.params.clone(),
                m: tensors.m.clone(),
                v: tensors.v.clone(),
            }),
            (None, _) => None,
            (Some(_), None) => {
                return Err(TrainError::BadCheckpoint(
                    "best tensors present but no best validation loss recorded".into(),
                ))
            }
        };
        Ok(trainer)
    }
}

/// Trains a model on the split dataset and returns the best-validation
/// checkpoint plus the epoch log.
pub fn train(
    model_config: &ModelConfig,
    catalog: &Catalog,
    vocab: &Vocab,
    train_set: &[InteractionSample],
    valid_set: &[InteractionSample],
    cfg: TrainConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>), TrainError> {
    let mut trainer = Trainer::new(model_config, catalog, vocab, train_set, valid_set, cfg)?;
    let records = trainer.run()?;
    Ok((trainer.into_best_checkpoint()?, records))
}

/// Reference single-branch trainer: plain mean-cross-entropy fine-tuning
/// with the same shuffling, dropout derivation, optimizer, and early
/// stopping as [`Trainer`], but none of the dual-branch machinery. Kept as
/// an independent implementation for equivalence checks against the ablated
/// objective (lambda = 0, beta = 1, weight_normal = false); returns the
/// per-epoch validation losses.
pub fn train_plain(
    model_config: &ModelConfig,
    catalog: &Catalog,
    vocab: &Vocab,
    train_set: &[InteractionSample],
    valid_set: &[InteractionSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptyDataset("valid"));
    }
    let mut model = Model::new(model_config.clone())?;
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopper {
        patience: cfg.patience_epochs,
        best: None,
        since_improvement: 0,
    };

    // Factual rows only: x_h followed by the target name, supervised at the
    // |y| name positions.
    let render = |samples: &[InteractionSample]| -> Result<(Batch, Vec<usize>, Vec<usize>), TrainError> {
        let mut seqs = Vec::with_capacity(samples.len());
        let mut spans = Vec::with_capacity(samples.len());
        for sample in samples {
            let pair = render_instruction(sample, catalog, vocab)?;
            let mut row = pair.x_h.clone();
            row.extend_from_slice(&pair.y);
            spans.push((pair.x_h.len(), pair.y));
            seqs.push(row);
        }
        let batch = Batch::from_sequences(&seqs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (r, (prompt, y)) in spans.into_iter().enumerate() {
            for (j, &tok) in y.iter().enumerate() {
                rows.push(r * batch.s + prompt - 1 + j);
                targets.push(tok);
            }
        }
        Ok((batch, rows, targets))
    };

    let mut valid_losses = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = stream::stream(cfg.seed, "shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<InteractionSample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (batch, rows, targets) = render(&samples)?;
            let mut tape = Tape::new();
            let dropout = DropoutMode::Train {
                seed: stream::derive_seed(cfg.seed, "dropout", &[epoch as u64, step as u64, 0]),
            };
            let fwd = model.forward(&mut tape, &batch, dropout)?;
            let logits = model.logits_at(&mut tape, &fwd, &rows)?;
            let ones = vec![1.0; targets.len()];
            let (total, weight_sum) = tape.cross_entropy(logits, &targets, &ones)?;
            let loss = tape.scale(total, 1.0 / weight_sum)?;
            let value = tape.scalar_value(loss)?;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: step + 1,
                    lambda: 0.0,
                    value,
                });
            }
            model.params.zero_grad();
            tape.backward(loss, &mut model.params)?;
            adamw_step(&mut model.params, &mut adam, cfg);
        }

        let mut num = 0.0;
        let mut den = 0.0;
        for chunk in valid_set.chunks(cfg.batch_size) {
            let (batch, rows, targets) = render(chunk)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch, DropoutMode::Eval)?;
            let logits = model.logits_at(&mut tape, &fwd, &rows)?;
            let ones = vec![1.0; targets.len()];
            let (total, weight_sum) = tape.cross_entropy(logits, &targets, &ones)?;
            let loss = tape.scale(total, 1.0 / weight_sum)?;
            num += tape.scalar_value(loss)? * targets.len() as f64;
            den += targets.len() as f64;
        }
        let valid_l = num / den;
        valid_losses.push(valid_l);
        if stopper.observe(valid_l) == StopDecision::Stop {
            break;
        }
    }
    Ok(valid_losses)
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CFTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    progress: Progress,
    tensors: Vec<TensorEntry>,
}

fn directory<'t>(ckpt: &'t Checkpoint) -> Vec<(String, &'t Tensor)> {
    let mut dir: Vec<(String, &Tensor)> = Vec::new();
    for (name, tensor) in &ckpt.params {
        dir.push((format!("param.{name}"), tensor));
    }
    for ((name, _), tensor) in ckpt.params.iter().zip(&ckpt.adam_m) {
        dir.push((format!("adam_m.{name}"), tensor));
    }
    for ((name, _), tensor) in ckpt.params.iter().zip(&ckpt.adam_v) {
        dir.push((format!("adam_v.{name}"), tensor));
    }
    if let Some(best) = &ckpt.best {
        for ((name, _), tensor) in ckpt.params.iter().zip(&best.params) {
            dir.push((format!("best.param.{name}"), tensor));
        }
        for ((name, _), tensor) in ckpt.params.iter().zip(&best.m) {
            dir.push((format!("best.adam_m.{name}"), tensor));
        }
        for ((name, _), tensor) in ckpt.params.iter().zip(&best.v) {
            dir.push((format!("best.adam_v.{name}"), tensor));
        }
    }
    dir
}

/// Binary layout: magic `CFTCKPT1` | format version u32 LE | JSON header
/// (configs, progress, tensor directory with payload byte offsets) |
/// little-endian f64 tensor payloads | CRC32 of the payload region, u32 LE.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let dir = directory(ckpt);
    let mut entries = Vec::with_capacity(dir.len());
    let mut offset = 0u64;
    for (name, tensor) in &dir {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += (tensor.numel() * 8) as u64;
    }
    let header = CheckpointHeader {
        model: ckpt.model_config.clone(),
        train: ckpt.train_config.clone(),
        progress: ckpt.progress.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| TrainError::BadCheckpoint(format!("header serialization: {e}")))?;

    let mut payload = Vec::with_capacity(offset as usize);
    for (_, tensor) in &dir {
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut bytes =
        Vec::with_capacity(12 + header_bytes.len() + payload.len() + 4);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    fsutil::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: String| Err(TrainError::BadCheckpoint(msg));
    if bytes.len() < 12 {
        return bad(format!("file is {} bytes, shorter than the fixed prelude", bytes.len()));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return bad("magic bytes do not match CFTCKPT1".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut de = serde_json::Deserializer::from_slice(&bytes[12..]).into_iter::<CheckpointHeader>();
    let header = match de.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return bad(format!("header parse: {e}")),
        None => return bad("missing JSON header".into()),
    };
    let payload_start = 12 + de.byte_offset();
    if bytes.len() < payload_start + 4 {
        return bad("truncated after header".into());
    }
    let payload = &bytes[payload_start..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored_crc {
        return bad("payload checksum mismatch; file is corrupt or truncated".into());
    }

    header.train.validate()?;
    header.model.validate().map_err(TrainError::Model)?;

    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return bad(format!("tensor {:?} has dtype {:?}, expected f64", entry.name, entry.dtype));
        }
        if entry.offset != expected_offset {
            return bad(format!(
                "tensor {:?} at offset {}, expected {} (directory must be contiguous)",
                entry.name, entry.offset, expected_offset
            ));
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel * 8;
        let start = entry.offset as usize;
        if start + nbytes > payload.len() {
            return bad(format!("tensor {:?} overruns the payload", entry.name));
        }
        let data: Vec<f64> = payload[start..start + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(TrainError::Tensor)?;
        tensors.push((entry.name.clone(), tensor));
        expected_offset += nbytes as u64;
    }
    if expected_offset as usize != payload.len() {
        return bad(format!(
            "payload is {} bytes but the directory describes {}",
            payload.len(),
            expected_offset
        ));
    }

    // Split the flat directory back into its blocks.
    let take_block = |tensors: &mut std::vec::IntoIter<(String, Tensor)>,
                      prefix: &str,
                      count: usize|
     -> Result<Vec<(String, Tensor)>, TrainError> {
        let mut block = Vec::with_capacity(count);
        for _ in 0..count {
            match tensors.next() {
                Some((name, tensor)) => match name.strip_prefix(prefix) {
                    Some(rest) => block.push((rest.to_string(), tensor)),
                    None => {
                        return Err(TrainError::BadCheckpoint(format!(
                            "tensor {name:?} where a {prefix}* entry was expected"
                        )))
                    }
                },
                None => {
                    return Err(TrainError::BadCheckpoint(format!(
                        "directory ended early inside the {prefix}* block"
                    )))
                }
            }
        }
        Ok(block)
    };

    let n = tensors.len();
    // The live state always holds 3 blocks; a best snapshot doubles that.
    let with_best = tensors.iter().any(|(name, _)| name.starts_with("best."));
    let blocks = if with_best { 6 } else { 3 };
    if n == 0 || n % blocks != 0 {
        return bad(format!("directory holds {n} tensors, not divisible into {blocks} blocks"));
    }
    let block = n / blocks;
    let mut it = tensors.into_iter();
    let params = take_block(&mut it, "param.", block)?;
    let adam_m = take_block(&mut it, "adam_m.", block)?.into_iter().map(|(_, t)| t).collect();
    let adam_v = take_block(&mut it, "adam_v.", block)?.into_iter().map(|(_, t)| t).collect();
    let best = if with_best {
        let p = take_block(&mut it, "best.param.", block)?;
        let m = take_block(&mut it, "best.adam_m.", block)?;
        let v = take_block(&mut it, "best.adam_v.", block)?;
        Some(BestTensors {
            params: p.into_iter().map(|(_, t)| t).collect(),
            m: m.into_iter().map(|(_, t)| t).collect(),
            v: v.into_iter().map(|(_, t)| t).collect(),
        })
    } else {
        None
    };
    if best.is_some() && header.progress.best_valid_loss.is_none() {
        return bad("best tensors present but no best validation loss recorded".into());
    }
    Ok(Checkpoint {
        model_config: header.model,
        train_config: header.train,
        progress: header.progress,
        params,
        adam_m,
        adam_v,
        best,
    })
}
