//! Beam-search generation of candidate item token sequences and grounding of
//! those candidates to real catalog items by Euclidean distance between
//! encoder representations.
//!
//! The search runs in lockstep: every live hypothesis has the same output
//! length, so one batched forward per step scores all of them. Hypotheses
//! finish when they reach the requested output length; a continuation into
//! the end-of-sequence token is a dead end (name positions are the only
//! supervised ones, so nothing meaningful follows them). Pruning during the
//! search always uses the raw cumulative log-probability; the length
//! normalization toggle only affects how the finished pool is scored.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::corpus::{Catalog, CorpusError};
use crate::fsutil;
use crate::model::{Batch, DropoutMode, Model, ModelError};
use crate::tensor::TensorError;
use crate::textenc::{TokenId, Vocab, VocabError, EOS};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    ZeroWidth,
    #[error("max_out_len must be at least 1")]
    ZeroOutputLength,
    #[error(
        "beam width {width} finished only {finished} hypotheses; need 5, try a larger width"
    )]
    NotEnoughFinished { width: usize, finished: usize },
    #[error(
        "prompt of {prompt} tokens plus {max_out_len} generated tokens exceeds max_seq_len {max_seq_len}"
    )]
    PromptTooLong {
        prompt: usize,
        max_out_len: usize,
        max_seq_len: usize,
    },
    #[error("grounding expects exactly 5 hypotheses, got {0}")]
    WrongHypothesisCount(usize),
    #[error("batched decoding needs equal prompt lengths, saw {0} and {1}")]
    RaggedPrompts(usize, usize),
    #[error("no prompts to decode")]
    NoPrompts,
    #[error("catalog holds {have} representations, grounding needs at least {need}")]
    CatalogTooSmall { have: usize, need: usize },
    #[error("representation dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("recommendations file, line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One generated candidate: the output span only (the prompt is not
/// repeated) and the summed token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Ranking score: mean per-token log-probability under length
    /// normalization, raw sum otherwise. Higher is better in both modes.
    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.logprob / self.tokens.len() as f64
        } else {
            self.logprob
        }
    }
}

struct Beam {
    tokens: Vec<TokenId>,
    logprob: f64,
    /// Global creation sequence number; the final tie-breaker.
    created: u64,
}

/// Log-softmax over one logits row; max-subtracted for stability.
fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - log_z).collect()
}

/// Lockstep beam state for every prompt in a batch; all prompts must share
/// one length so the rows never need padding.
fn run_beams(
    model: &Model,
    prompts: &[&[TokenId]],
    width: usize,
    max_out_len: usize,
    length_norm: bool,
) -> Result<Vec<Vec<BeamHypothesis>>, DecodeError> {
    if width == 0 {
        return Err(DecodeError::ZeroWidth);
    }
    if max_out_len == 0 {
        return Err(DecodeError::ZeroOutputLength);
    }
    let first = prompts.first().ok_or(DecodeError::NoPrompts)?;
    if let Some(other) = prompts.iter().find(|p| p.len() != first.len()) {
        return Err(DecodeError::RaggedPrompts(first.len(), other.len()));
    }
    let max_seq_len = model.config.max_seq_len;
    if first.len() + max_out_len > max_seq_len {
        return Err(DecodeError::PromptTooLong {
            prompt: first.len(),
            max_out_len,
            max_seq_len,
        });
    }

    // Creation counters run per prompt; they are the final tie-breaker.
    let mut counters = vec![0u64; prompts.len()];
    let fresh = |p: usize, counters: &mut [u64]| {
        let c = counters[p];
        counters[p] += 1;
        c
    };
    let mut live: Vec<Vec<Beam>> = (0..prompts.len())
        .map(|p| vec![Beam { tokens: Vec::new(), logprob: 0.0, created: fresh(p, &mut counters) }])
        .collect();

    for _ in 0..max_out_len {
        let mut seqs = Vec::with_capacity(live.iter().map(Vec::len).sum());
        for (prompt, beams) in prompts.iter().zip(&live) {
            for beam in beams {
                let mut row = Vec::with_capacity(prompt.len() + beam.tokens.len());
                row.extend_from_slice(prompt);
                row.extend_from_slice(&beam.tokens);
                seqs.push(row);
            }
        }
        let batch = Batch::from_sequences(&seqs)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, DropoutMode::Eval)?;
        let logits = model.logits_at(&mut tape, &fwd, &batch.last_positions())?;
        let value = tape.value(logits);
        let vocab = value.shape()[1];
        let rows = value.data();

        let mut row_base = 0;
        for (p, beams) in live.iter_mut().enumerate() {
            // Candidates are generated beam-major then token-major, and
            // the sort below is stable, so equal log-probabilities keep
            // that generation order, which is exactly creation order.
            let mut candidates: Vec<(f64, usize, TokenId)> =
                Vec::with_capacity(beams.len() * vocab);
            for (i, beam) in beams.iter().enumerate() {
                let row = &rows[(row_base + i) * vocab..(row_base + i + 1) * vocab];
                let lp = log_softmax(row);
                for (t, &token_lp) in lp.iter().enumerate() {
                    if t == EOS {
                        continue;
                    }
                    candidates.push((beam.logprob + token_lp, i, t));
                }
            }
            candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite log-probabilities"));
            candidates.truncate(width);
            row_base += beams.len();
            *beams = candidates
                .into_iter()
                .map(|(logprob, parent, token)| {
                    let mut tokens = beams[parent].tokens.clone();
                    tokens.push(token);
                    Beam { tokens, logprob, created: fresh(p, &mut counters) }
                })
                .collect();
        }
    }

    Ok(live
        .into_iter()
        .map(|beams| {
            let mut finished: Vec<(BeamHypothesis, u64)> = beams
                .into_iter()
                .map(|b| {
                    debug_assert!(b.logprob <= 0.0);
                    (
                        BeamHypothesis { tokens: b.tokens, logprob: b.logprob, finished: true },
                        b.created,
                    )
                })
                .collect();
            finished.sort_by(|(a, ca), (b, cb)| {
                b.score(length_norm)
                    .partial_cmp(&a.score(length_norm))
                    .expect("finite scores")
                    .then(ca.cmp(cb))
            });
            finished.into_iter().map(|(h, _)| h).collect()
        })
        .collect())
}

/// Runs the beam to completion and returns every finished hypothesis,
/// best score first (ties broken by earlier creation). `beam_search` wraps
/// this with the top-5 contract; width 1 degenerates to greedy decoding.
pub fn beam_search_all(
    model: &Model,
    prompt: &[TokenId],
    width: usize,
    max_out_len: usize,
    length_norm: bool,
) -> Result<Vec<BeamHypothesis>, DecodeError> {
    let mut per_prompt = run_beams(model, &[prompt], width, max_out_len, length_norm)?;
    Ok(per_prompt.pop().expect("one prompt in, one pool out"))
}

/// Batched `beam_search` over many prompts of one shared length: each step
/// scores every prompt's live beams in a single forward pass. Results match
/// prompt-by-prompt `beam_search` exactly.
pub fn beam_search_many(
    model: &Model,
    prompts: &[&[TokenId]],
    width: usize,
    max_out_len: usize,
    length_norm: bool,
) -> Result<Vec<Vec<BeamHypothesis>>, DecodeError> {
    let pools = run_beams(model, prompts, width, max_out_len, length_norm)?;
    pools
        .into_iter()
        .map(|mut all| {
            if all.len() < 5 {
                return Err(DecodeError::NotEnoughFinished { width, finished: all.len() });
            }
            all.truncate(5);
            Ok(all)
        })
        .collect()
}

/// Standard beam search over output tokens, returning the 5 best distinct
/// finished hypotheses. Scores are raw summed log-probabilities, or
/// per-token means when `length_norm` is set; ties prefer the hypothesis
/// created earlier.
pub fn beam_search(
    model: &Model,
    prompt: &[TokenId],
    width: usize,
    max_out_len: usize,
    length_norm: bool,
) -> Result<Vec<BeamHypothesis>, DecodeError> {
    let mut all = beam_search_all(model, prompt, width, max_out_len, length_norm)?;
    if all.len() < 5 {
        return Err(DecodeError::NotEnoughFinished { width, finished: all.len() });
    }
    all.truncate(5);
    Ok(all)
}

/// One grounded slot: which catalog item, how far its representation sits
/// from the generating hypothesis, which hypothesis (1-based best-first),
/// and which pass over the hypotheses produced it (1 = nearest, 2 = next
/// nearest, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedEntry {
    pub item_id: usize,
    pub distance: f64,
    pub source_rank: usize,
    pub neighbor_rank: usize,
}

/// The grounded recommendation list: neighbor-rank-1 entries in hypothesis
/// order, then neighbor-rank-2 entries, with duplicates resolved by moving
/// the later claimant to its next-nearest unused item.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedList {
    pub entries: Vec<GroundedEntry>,
}

fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64, DecodeError> {
    if a.len() != b.len() {
        return Err(DecodeError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Orders the whole catalog by repeatedly sweeping the hypotheses: pass 1
/// takes each hypothesis's nearest unused item in hypothesis order, pass 2
/// the next-nearest unused, and so on until every item is placed. Works on
/// raw representation vectors; `rank_all` is the model-flavored wrapper.
pub fn rank_all_reps(
    hyp_reps: &[Vec<f64>],
    catalog_reps: &[Vec<f64>],
) -> Result<Vec<GroundedEntry>, DecodeError> {
    if hyp_reps.len() != 5 {
        return Err(DecodeError::WrongHypothesisCount(hyp_reps.len()));
    }
    let n = catalog_reps.len();
    // Each hypothesis's view of the catalog, nearest first; ties and
    // distances are settled by item id so the ordering is total.
    let mut sorted: Vec<Vec<(f64, usize)>> = Vec::with_capacity(hyp_reps.len());
    for rep in hyp_reps {
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
        for (id, cat) in catalog_reps.iter().enumerate() {
            dist.push((l2_distance(rep, cat)?, id));
        }
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        sorted.push(dist);
    }

    let mut used = vec![false; n];
    let mut cursors = vec![0usize; hyp_reps.len()];
    let mut entries = Vec::with_capacity(n);
    let mut neighbor_rank = 1;
    while entries.len() < n {
        for (h, cursor) in cursors.iter_mut().enumerate() {
            while *cursor < n && used[sorted[h][*cursor].1] {
                *cursor += 1;
            }
            if *cursor == n {
                continue;
            }
            let (distance, item_id) = sorted[h][*cursor];
            used[item_id] = true;
            entries.push(GroundedEntry {
                item_id,
                distance,
                source_rank: h + 1,
                neighbor_rank,
            });
            if entries.len() == n {
                break;
            }
        }
        neighbor_rank += 1;
    }
    Ok(entries)
}

/// Grounds 5 hypothesis representations to the 10-item recommendation list:
/// everyone's nearest item, then everyone's second-nearest, deduplicated by
/// advancing later claimants.
pub fn ground_reps(
    hyp_reps: &[Vec<f64>],
    catalog_reps: &[Vec<f64>],
) -> Result<GroundedList, DecodeError> {
    if catalog_reps.len() < 10 {
        return Err(DecodeError::CatalogTooSmall { have: catalog_reps.len(), need: 10 });
    }
    let mut entries = rank_all_reps(hyp_reps, catalog_reps)?;
    entries.truncate(10);
    Ok(GroundedList { entries })
}

fn encode_hypotheses(
    model: &Model,
    hypotheses: &[BeamHypothesis],
) -> Result<Vec<Vec<f64>>, DecodeError> {
    if hypotheses.len() != 5 {
        return Err(DecodeError::WrongHypothesisCount(hypotheses.len()));
    }
    let names: Vec<Vec<TokenId>> = hypotheses.iter().map(|h| h.tokens.clone()).collect();
    Ok(model.encode_items(&names)?)
}

/// Grounds generated hypotheses to catalog items: each hypothesis's token
/// sequence is encoded exactly like an item name, then matched to the
/// precomputed catalog representations by Euclidean distance.
pub fn ground(
    model: &Model,
    hypotheses: &[BeamHypothesis],
    catalog_reps: &[Vec<f64>],
) -> Result<GroundedList, DecodeError> {
    ground_reps(&encode_hypotheses(model, hypotheses)?, catalog_reps)
}

/// Extends the grounding interleave over the entire catalog, yielding a
/// total order (a permutation of all item ids) for rank-based metrics and
/// top-20 analysis.
pub fn rank_all(
    model: &Model,
    hypotheses: &[BeamHypothesis],
    catalog_reps: &[Vec<f64>],
) -> Result<Vec<GroundedEntry>, DecodeError> {
    rank_all_reps(&encode_hypotheses(model, hypotheses)?, catalog_reps)
}

/// Encodes every catalog item name once; the rows feed `ground` and
/// `rank_all` for all users.
pub fn catalog_representations(
    model: &Model,
    catalog: &Catalog,
    vocab: &Vocab,
) -> Result<Vec<Vec<f64>>, DecodeError> {
    let mut names = Vec::with_capacity(catalog.len());
    for id in 0..catalog.len() {
        names.push(vocab.encode(&catalog.item(id)?.name)?);
    }
    Ok(model.encode_items(&names)?)
}

/// Full per-user decoding pipeline: beam search on the prompt, ground the
/// winners, and keep the `top_k` head of the catalog-wide ranking.
pub fn recommend_top_k(
    model: &Model,
    prompt: &[TokenId],
    catalog_reps: &[Vec<f64>],
    width: usize,
    max_out_len: usize,
    length_norm: bool,
    top_k: usize,
) -> Result<Vec<GroundedEntry>, DecodeError> {
    if catalog_reps.len() < top_k {
        return Err(DecodeError::CatalogTooSmall { have: catalog_reps.len(), need: top_k });
    }
    let hypotheses = beam_search(model, prompt, width, max_out_len, length_norm)?;
    let mut entries = rank_all(model, &hypotheses, catalog_reps)?;
    entries.truncate(top_k);
    Ok(entries)
}

/// One output line of the recommendations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub user: usize,
    pub with_history: bool,
    pub items: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Recommendation {
    pub fn from_entries(user: usize, with_history: bool, entries: &[GroundedEntry]) -> Self {
        Recommendation {
            user,
            with_history,
            items: entries.iter().map(|e| e.item_id).collect(),
            distances: entries.iter().map(|e| e.distance).collect(),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_recommendations(path: &Path, recs: &[Recommendation]) -> Result<(), DecodeError> {
    let mut out = String::new();
    for rec in recs {
        let line = serde_json::to_string(rec)
            .map_err(|e| DecodeError::BadRecord { line: 0, msg: e.to_string() })?;
        let _ = writeln!(out, "{line}");
    }
    fsutil::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_recommendations(path: &Path) -> Result<Vec<Recommendation>, DecodeError> {
    let text = std::fs::read_to_string(path)?;
    let mut recs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| DecodeError::BadRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        recs.push(rec);
    }
    Ok(recs)
}
