//! Training objectives for counterfactual fine-tuning.
//!
//! Three pieces combine into the training loss `L = L_n + lambda * L_c`:
//!
//! - `L_n`, the factual loss: weighted teacher-forced cross-entropy of the
//!   with-history prompt against the target item tokens.
//! - `L_c`, the causal loss: the same cross-entropy applied to the softmax of
//!   the *logit difference* between the with-history and without-history
//!   prompts. Only the part of the prediction that actually changes when the
//!   history is removed can lower this term, so it rewards history reliance.
//!   The difference is taken in logit space: a probability difference would
//!   be signed and unnormalized, and could not feed a cross-entropy.
//! - Token-position weights: a linear decay from 1 on the first target token
//!   down to `beta` on the last, implementing the observation that later
//!   name tokens are mostly determined by earlier ones rather than by the
//!   history.
//!
//! Both losses normalize by the sum of the weights actually used in the
//! batch, so `lambda` keeps its meaning across batch sizes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{render_instruction, Catalog, CorpusError, InteractionSample};
use crate::model::{Batch, DropoutMode, Model, ModelError};
use crate::tensor::TensorError;
use crate::textenc::{TokenId, Vocab};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("no supervised positions in batch")]
    EmptyTargets,
    #[error("token weights sum to {0}, need a positive total")]
    ZeroWeightSum(f64),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters of the counterfactual objective.
///
/// `beta` is only constructible through [`CftConfig::with_beta`] or
/// [`CftConfig::with_beta_prime`] (`beta = 1 - 1/beta_prime`), which keeps
/// the two parameterizations mutually exclusive and validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CftConfig {
    /// Weight of the causal loss; 0 disables it.
    pub lambda: f64,
    beta: f64,
    /// Apply the token-position weights to the factual loss too.
    pub weight_normal: bool,
    /// Treat the counterfactual logits as constants in the causal loss.
    /// Default false: gradients flow through both branches, since stopping
    /// one side would change the optimization problem.
    pub stop_counterfactual_grad: bool,
}

impl Default for CftConfig {
    fn default() -> Self {
        CftConfig {
            lambda: 0.05,
            beta: 0.5,
            weight_normal: true,
            stop_counterfactual_grad: false,
        }
    }
}

impl CftConfig {
    pub fn with_beta(lambda: f64, beta: f64) -> Result<Self, ObjectiveError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(ObjectiveError::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if !beta.is_finite() || !(0.0..=1.0).contains(&beta) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "beta must lie in [0, 1], got {beta}"
            )));
        }
        Ok(CftConfig {
            lambda,
            beta,
            ..CftConfig::default()
        })
    }

    /// The decay floor is often quoted as `beta_prime > 1` with
    /// `beta = 1 - 1/beta_prime`; `beta_prime = 2` gives `beta = 0.5`.
    pub fn with_beta_prime(lambda: f64, beta_prime: f64) -> Result<Self, ObjectiveError> {
        if !beta_prime.is_finite() || beta_prime < 1.0 {
            return Err(ObjectiveError::InvalidConfig(format!(
                "beta_prime must be finite and >= 1, got {beta_prime}"
            )));
        }
        Self::with_beta(lambda, 1.0 - 1.0 / beta_prime)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Correctly rounded `num / den` for positive integers. The quotient is
/// computed to 54 bits plus a sticky bit, then rounded to nearest-even, so
/// the result is the f64 closest to the true rational value.
fn round_ratio(num: u128, den: u128) -> f64 {
    debug_assert!(den > 0);
    if num == 0 {
        return 0.0;
    }
    // Scale so the integer quotient holds 54 or 55 bits, enough to decide
    // the rounding of a 53-bit significand.
    let shift: i32 = 54 + num.leading_zeros() as i32 - den.leading_zeros() as i32;
    let (n, d) = if shift >= 0 {
        (num << shift, den)
    } else {
        (num, den << (-shift))
    };
    let mut q = n / d;
    let r = n % d;
    let mut exp = -shift;
    // Truncate down to exactly 54 significant bits, folding every dropped
    // bit into the sticky flag; rounding happens once, at the end.
    let mut sticky = r != 0;
    while q >= (1 << 54) {
        sticky |= q & 1 == 1;
        q >>= 1;
        exp += 1;
    }
    // Final halving with round-to-nearest-even on the last bit.
    let round_bit = q & 1 == 1;
    q >>= 1;
    exp += 1;
    if round_bit && (sticky || q & 1 == 1) {
        q += 1;
    }
    (q as f64) * (2f64).powi(exp)
}

/// Linear-decay weights for `y_len` target-token positions: position `t`
/// (1-based) gets `1 - (1 - beta) * (t - 1) / (y_len - 1)`, so the first
/// token weighs 1 and the last weighs `beta`. A single-token target gets
/// weight 1.
///
/// Each weight is the f64 nearest to the exact rational value (computed in
/// integer arithmetic with one final rounding), so the endpoints are `1.0`
/// and `beta` bit-for-bit.
pub fn token_weights(y_len: usize, beta: f64) -> Result<Vec<f64>, ObjectiveError> {
    if y_len == 0 {
        return Err(ObjectiveError::InvalidConfig(
            "y_len must be at least 1".into(),
        ));
    }
    if !beta.is_finite() || !(0.0..=1.0).contains(&beta) {
        return Err(ObjectiveError::InvalidConfig(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    if y_len == 1 {
        return Ok(vec![1.0]);
    }
    let n1 = (y_len - 1) as u128;

    // beta = mantissa / 2^scale, exactly.
    let bits = beta.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mantissa, mut scale): (u128, i64) = if beta == 0.0 {
        (0, 0)
    } else if raw_exp == 0 {
        (frac as u128, 1074)
    } else {
        (((1u64 << 52) | frac) as u128, 1075 - raw_exp)
    };
    while scale > 0 && mantissa != 0 && mantissa & 1 == 0 {
        mantissa >>= 1;
        scale -= 1;
    }

    // weight(k) = ((n1 - k) + k*beta) / n1 as an exact integer ratio. The
    // intermediate `num << 54` inside round_ratio needs the denominator to
    // stay under 74 bits, which holds for any beta >= 2^-60 and names up to
    // 2^13 tokens (far beyond practical values). Outside that range fall
    // back to the direct formula with forced endpoints.
    if scale <= 60 && n1 <= 1 << 13 {
        let den = n1 << scale;
        Ok((0..=n1)
            .map(|k| round_ratio(((n1 - k) << scale) + k * mantissa, den))
            .collect())
    } else {
        let mut out: Vec<f64> = (0..y_len)
            .map(|k| 1.0 - (1.0 - beta) * k as f64 / n1 as f64)
            .collect();
        out[0] = 1.0;
        out[y_len - 1] = beta;
        Ok(out)
    }
}

/// Aligned factual and counterfactual rows for one batch of samples.
///
/// Rows pair up one-to-one: row `i` of `factual` is `x_h || y` for sample
/// `i`, row `i` of `counterfactual` is `x_0 || y` with the same teacher-
/// forced target prefix. `factual_rows` / `counterfactual_rows` hold, for
/// each supervised position, the flat index into the respective hidden-state
/// matrix (the position *preceding* each target token); `targets` and
/// `weights` run parallel to them.
#[derive(Debug, Clone)]
pub struct DualBatch {
    pub factual: Batch,
    pub counterfactual: Batch,
    pub targets: Vec<TokenId>,
    pub factual_rows: Vec<usize>,
    pub counterfactual_rows: Vec<usize>,
    pub weights: Vec<f64>,
}

impl DualBatch {
    /// Number of supervised token positions.
    pub fn positions(&self) -> usize {
        self.targets.len()
    }
}

/// Renders each sample into its two prompts and assembles the padded
/// batches plus the supervised-position bookkeeping.
pub fn build_dual_batch(
    samples: &[InteractionSample],
    catalog: &Catalog,
    vocab: &Vocab,
    beta: f64,
) -> Result<DualBatch, ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyTargets);
    }
    let mut factual_seqs = Vec::with_capacity(samples.len());
    let mut counterfactual_seqs = Vec::with_capacity(samples.len());
    let mut spans = Vec::with_capacity(samples.len());
    for sample in samples {
        let pair = render_instruction(sample, catalog, vocab)?;
        let mut fact = pair.x_h.clone();
        fact.extend_from_slice(&pair.y);
        let mut cf = pair.x_0.clone();
        cf.extend_from_slice(&pair.y);
        spans.push((pair.x_h.len(), pair.x_0.len(), pair.y));
        factual_seqs.push(fact);
        counterfactual_seqs.push(cf);
    }
    let factual = Batch::from_sequences(&factual_seqs)?;
    let counterfactual = Batch::from_sequences(&counterfactual_seqs)?;

    let mut targets = Vec::new();
    let mut factual_rows = Vec::new();
    let mut counterfactual_rows = Vec::new();
    let mut weights = Vec::new();
    for (row, (prompt_h, prompt_0, y)) in spans.into_iter().enumerate() {
        let omega = token_weights(y.len(), beta)?;
        for (j, (&tok, w)) in y.iter().zip(omega).enumerate() {
            targets.push(tok);
            // The hidden state at position p predicts the token at p + 1.
            factual_rows.push(row * factual.s + prompt_h - 1 + j);
            counterfactual_rows.push(row * counterfactual.s + prompt_0 - 1 + j);
            weights.push(w);
        }
    }
    Ok(DualBatch {
        factual,
        counterfactual,
        targets,
        factual_rows,
        counterfactual_rows,
        weights,
    })
}

fn weighted_ce(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[TokenId],
    weights: &[f64],
) -> Result<NodeId, ObjectiveError> {
    if targets.is_empty() {
        return Err(ObjectiveError::EmptyTargets);
    }
    let (total, weight_sum) = tape.cross_entropy(logits, targets, weights)?;
    if !(weight_sum > 0.0) {
        return Err(ObjectiveError::ZeroWeightSum(weight_sum));
    }
    Ok(tape.scale(total, 1.0 / weight_sum)?)
}

/// Factual loss: weighted cross-entropy of the supervised logits,
/// normalized by the batch weight sum. With uniform weights this is the
/// plain mean token cross-entropy.
pub fn normal_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[TokenId],
    weights: &[f64],
) -> Result<NodeId, ObjectiveError> {
    weighted_ce(tape, logits, targets, weights)
}

/// Causal loss: cross-entropy of `softmax(factual - counterfactual)`
/// against the same targets, weight-normalized like the factual loss.
///
/// With `stop_counterfactual_grad` the counterfactual branch is frozen to
/// its current values, otherwise gradients flow through both forwards.
pub fn causal_loss(
    tape: &mut Tape,
    factual_logits: NodeId,
    counterfactual_logits: NodeId,
    targets: &[TokenId],
    weights: &[f64],
    stop_counterfactual_grad: bool,
) -> Result<NodeId, ObjectiveError> {
    let counterfactual = if stop_counterfactual_grad {
        let frozen = tape.value(counterfactual_logits).clone();
        tape.constant(frozen)?
    } else {
        counterfactual_logits
    };
    let effect = tape.sub(factual_logits, counterfactual)?;
    weighted_ce(tape, effect, targets, weights)
}

/// `L = L_n + lambda * L_c`.
pub fn combined_loss(
    tape: &mut Tape,
    normal: NodeId,
    causal: NodeId,
    lambda: f64,
) -> Result<NodeId, ObjectiveError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(ObjectiveError::InvalidConfig(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let scaled = tape.scale(causal, lambda)?;
    Ok(tape.add(normal, scaled)?)
}

/// All loss nodes produced for one training step.
pub struct LossNodes {
    pub normal: NodeId,
    /// Present only when `lambda > 0`; the counterfactual forward is skipped
    /// entirely otherwise.
    pub causal: Option<NodeId>,
    pub combined: NodeId,
}

/// Builds the full loss graph for one batch: factual forward always, plus
/// the counterfactual forward and causal term when `lambda > 0`.
///
/// The two branches draw dropout masks from independent seeds, so the
/// factual branch consumes exactly the same randomness whether or not the
/// counterfactual branch runs.
pub fn cft_loss(
    tape: &mut Tape,
    model: &Model,
    dual: &DualBatch,
    cft: &CftConfig,
    factual_dropout: DropoutMode,
    counterfactual_dropout: DropoutMode,
) -> Result<LossNodes, ObjectiveError> {
    cft_loss_with(
        tape,
        model,
        &model.params,
        dual,
        cft,
        factual_dropout,
        counterfactual_dropout,
    )
}

/// [`cft_loss`] with parameter values taken from an external set sharing the
/// model's layout; used by gradient checks that perturb a cloned set.
pub fn cft_loss_with(
    tape: &mut Tape,
    model: &Model,
    params: &crate::autodiff::ParamSet,
    dual: &DualBatch,
    cft: &CftConfig,
    factual_dropout: DropoutMode,
    counterfactual_dropout: DropoutMode,
) -> Result<LossNodes, ObjectiveError> {
    let fwd = model.forward_with(tape, params, &dual.factual, factual_dropout)?;
    let factual_logits = model.logits_at(tape, &fwd, &dual.factual_rows)?;
    let uniform;
    let normal_weights: &[f64] = if cft.weight_normal {
        &dual.weights
    } else {
        uniform = vec![1.0; dual.targets.len()];
        &uniform
    };
    let normal = normal_loss(tape, factual_logits, &dual.targets, normal_weights)?;

    if cft.lambda == 0.0 {
        return Ok(LossNodes {
            normal,
            causal: None,
            combined: normal,
        });
    }

    let cf_fwd = model.forward_with(tape, params, &dual.counterfactual, counterfactual_dropout)?;
    let counterfactual_logits = model.logits_at(tape, &cf_fwd, &dual.counterfactual_rows)?;
    let causal = causal_loss(
        tape,
        factual_logits,
        counterfactual_logits,
        &dual.targets,
        &dual.weights,
        cft.stop_counterfactual_grad,
    )?;
    let combined = combined_loss(tape, normal, causal, cft.lambda)?;
    Ok(LossNodes {
        normal,
        causal: Some(causal),
        combined,
    })
}
