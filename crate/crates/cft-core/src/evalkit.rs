//! Ranking metrics (HR@K, NDCG@K), popularity-group share analysis of
//! recommendation lists, and the prompt pairs used at test time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{render_instruction, Catalog, CorpusError, InteractionSample};
use crate::fsutil;
use crate::textenc::{TokenId, Vocab};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("{lists} recommendation lists against {targets} targets")]
    CountMismatch { lists: usize, targets: usize },
    #[error("no test samples to evaluate")]
    EmptyInput,
    #[error("recommendation list {index} holds {len} items; need at least {need}")]
    ListTooShort { index: usize, len: usize, need: usize },
    #[error("recommended item {item} has no popularity group")]
    UngroupedItem { item: usize },
    #[error("group index {group} for item {item} is outside 0..{n_groups}")]
    GroupOutOfRange { item: usize, group: usize, n_groups: usize },
    #[error("distributions span {0} and {1} groups")]
    GroupCountMismatch(usize, usize),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn check_lists(recs: &[Vec<usize>], targets: &[usize], k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if recs.len() != targets.len() {
        return Err(EvalError::CountMismatch { lists: recs.len(), targets: targets.len() });
    }
    if recs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some((index, list)) = recs.iter().enumerate().find(|(_, l)| l.len() < k) {
        return Err(EvalError::ListTooShort { index, len: list.len(), need: k });
    }
    Ok(())
}

/// Fraction of samples whose target item appears in the top K of its list.
pub fn hit_rate(recs: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64, EvalError> {
    check_lists(recs, targets, k)?;
    let mut hits = 0.0;
    for (list, &target) in recs.iter().zip(targets) {
        if list[..k].contains(&target) {
            hits += 1.0;
        }
    }
    Ok(hits / recs.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over samples whose target ranks within the
/// top K, 0 otherwise. With a single relevant item per sample the ideal DCG
/// is 1, so each term is already normalized.
pub fn ndcg(recs: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64, EvalError> {
    check_lists(recs, targets, k)?;
    let mut total = 0.0;
    for (list, &target) in recs.iter().zip(targets) {
        if let Some(pos) = list[..k].iter().position(|&item| item == target) {
            let rank = pos + 1;
            total += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    Ok(total / recs.len() as f64)
}

/// HR@K and NDCG@K at each requested cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_test: usize,
}

impl MetricsReport {
    pub fn compute(
        recs: &[Vec<usize>],
        targets: &[usize],
        cutoffs: &[usize],
    ) -> Result<MetricsReport, EvalError> {
        let mut hr = BTreeMap::new();
        let mut nd = BTreeMap::new();
        for &k in cutoffs {
            hr.insert(k, hit_rate(recs, targets, k)?);
            nd.insert(k, ndcg(recs, targets, k)?);
        }
        Ok(MetricsReport { hr, ndcg: nd, n_test: recs.len() })
    }
}

/// How the recommended slots spread over the popularity groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDistribution {
    /// Per-group share of all recommended slots; sums to 1.
    pub shares: Vec<f64>,
    pub list_len: usize,
    pub with_history: bool,
}

/// Counts every recommended slot into its item's popularity group and
/// normalizes by the slot total (`list_len * n_users`). All lists must have
/// the same length.
pub fn group_distribution(
    recs: &[Vec<usize>],
    groups: &[usize],
    n_groups: usize,
    with_history: bool,
) -> Result<GroupDistribution, EvalError> {
    if recs.is_empty() || recs[0].is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let list_len = recs[0].len();
    if let Some((index, list)) = recs.iter().enumerate().find(|(_, l)| l.len() != list_len) {
        return Err(EvalError::ListTooShort { index, len: list.len(), need: list_len });
    }
    let mut counts = vec![0usize; n_groups];
    for list in recs {
        for &item in list {
            let &group = groups.get(item).ok_or(EvalError::UngroupedItem { item })?;
            if group >= n_groups {
                return Err(EvalError::GroupOutOfRange { item, group, n_groups });
            }
            counts[group] += 1;
        }
    }
    let slots = (list_len * recs.len()) as f64;
    Ok(GroupDistribution {
        shares: counts.into_iter().map(|c| c as f64 / slots).collect(),
        list_len,
        with_history,
    })
}

/// Jensen-Shannon divergence between two group distributions, in nats:
/// the mean of each distribution's KL divergence from their midpoint.
/// Symmetric, zero exactly when the distributions agree, at most ln 2.
pub fn distribution_divergence(
    p: &GroupDistribution,
    q: &GroupDistribution,
) -> Result<f64, EvalError> {
    if p.shares.len() != q.shares.len() {
        return Err(EvalError::GroupCountMismatch(p.shares.len(), q.shares.len()));
    }
    let kl_to_mid = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let mid = 0.5 * (x + y);
                if x > 0.0 {
                    x * (x / mid).ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    };
    Ok(0.5 * kl_to_mid(&p.shares, &q.shares) + 0.5 * kl_to_mid(&q.shares, &p.shares))
}

/// Both prompt variants for one test sample: the real history and the
/// history replaced by the empty marker.
#[derive(Debug, Clone, PartialEq)]
pub struct TestInput {
    pub user: usize,
    pub target: usize,
    pub with_history: Vec<TokenId>,
    pub without_history: Vec<TokenId>,
}

/// Renders every test sample into its with-history and no-history prompts.
pub fn build_test_inputs(
    test: &[InteractionSample],
    catalog: &Catalog,
    vocab: &Vocab,
) -> Result<Vec<TestInput>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut inputs = Vec::with_capacity(test.len());
    for sample in test {
        let pair = render_instruction(sample, catalog, vocab)?;
        inputs.push(TestInput {
            user: sample.user,
            target: sample.target,
            with_history: pair.x_h,
            without_history: pair.x_0,
        });
    }
    Ok(inputs)
}

/// One line of the metrics table: a method variant with its ranking metrics
/// (one HR and one NDCG per cutoff, in cutoff order) and its divergence
/// from the with-history run of the same method.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub with_history: bool,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub js_vs_with_history: f64,
}

pub fn write_metrics_csv(
    path: &Path,
    cutoffs: &[usize],
    rows: &[MetricsRow],
) -> Result<(), EvalError> {
    if cutoffs.is_empty() {
        return Err(EvalError::ZeroK);
    }
    let mut out = String::from("method,variant");
    for k in cutoffs {
        let _ = write!(out, ",HR@{k}");
    }
    for k in cutoffs {
        let _ = write!(out, ",NDCG@{k}");
    }
    out.push_str(",JS_vs_with_history\n");
    for row in rows {
        if row.hr.len() != cutoffs.len() || row.ndcg.len() != cutoffs.len() {
            return Err(EvalError::CountMismatch {
                lists: row.hr.len().min(row.ndcg.len()),
                targets: cutoffs.len(),
            });
        }
        let variant = if row.with_history { "with history" } else { "without history" };
        let _ = write!(out, "{},{}", row.method, variant);
        for v in row.hr.iter().chain(&row.ndcg) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", row.js_vs_with_history);
    }
    fsutil::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn write_groups_csv(
    path: &Path,
    with: &GroupDistribution,
    without: &GroupDistribution,
) -> Result<(), EvalError> {
    if with.shares.len() != without.shares.len() {
        return Err(EvalError::GroupCountMismatch(with.shares.len(), without.shares.len()));
    }
    let mut out = String::from("group,share_with,share_without\n");
    for (g, (a, b)) in with.shares.iter().zip(&without.shares).enumerate() {
        let _ = writeln!(out, "{g},{a},{b}");
    }
    fsutil::write_atomic(path, out.as_bytes())?;
    Ok(())
}
