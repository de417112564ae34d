//! Synthetic interaction corpus.
//!
//! This module fabricates a small recommendation world with a known generative
//! law so that downstream training claims can be checked against ground truth.
//! Items live in categories; a user's next pick either follows a Markov chain
//! over categories (history signal) or falls back to a global popularity prior
//! (history-free signal). The mixing weight `eta` controls how much the
//! history actually matters.
//!
//! Every artifact here is a pure function of [`GenConfig`], including the
//! seed, so regenerating a dataset is always byte-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{standard_normal, stream, uniform01};
use crate::textenc::{TokenId, Vocab, VocabError, BOS, NONE};

pub mod io;

/// Fixed instruction text placed before the interaction history.
pub const TEMPLATE_PREFIX: &str = "recent items :";
/// Fixed instruction text placed after the history, asking for the next item.
pub const TEMPLATE_SUFFIX: &str = "recommend the next item :";

/// Softmax temperature for the random category-transition matrix.
const TRANSITION_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("item id {id} out of range for catalog of {n_items} items")]
    UnknownItem { id: usize, n_items: usize },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file {file}: {detail}")]
    BadData { file: String, detail: String },
}

/// Full description of a synthetic world. Two equal configs always produce
/// byte-identical datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Number of whitespace-separated words in every item name.
    pub tokens_per_item: usize,
    /// Number of previous items shown in each prompt.
    pub history_len: usize,
    /// Total interactions recorded per user.
    pub stream_len: usize,
    /// Probability that a step follows the category Markov chain instead of
    /// the global popularity prior.
    pub eta: f64,
    /// Exponent of the within-category rank in the popularity prior; larger
    /// values concentrate mass on a few head items.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 500,
            n_items: 300,
            n_categories: 10,
            tokens_per_item: 2,
            history_len: 3,
            stream_len: 8,
            eta: 0.9,
            popularity_skew: 1.0,
            seed: 42,
        }
    }
}

impl GenConfig {
    /// Checks all cross-field constraints, returning the first violation.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::InvalidConfig(msg));
        if self.n_users == 0 {
            return bad("n_users must be at least 1".into());
        }
        if self.n_items == 0 {
            return bad("n_items must be at least 1".into());
        }
        if self.n_categories == 0 {
            return bad("n_categories must be at least 1".into());
        }
        if self.n_categories > self.n_items {
            return bad(format!(
                "n_categories ({}) cannot exceed n_items ({})",
                self.n_categories, self.n_items
            ));
        }
        if self.tokens_per_item == 0 {
            return bad("tokens_per_item must be at least 1".into());
        }
        if self.history_len == 0 {
            return bad("history_len must be at least 1".into());
        }
        if self.stream_len <= self.history_len {
            return bad(format!(
                "stream_len ({}) must exceed history_len ({})",
                self.stream_len, self.history_len
            ));
        }
        let windows = self.stream_len - self.history_len;
        if windows < 3 {
            return bad(format!(
                "stream_len - history_len = {windows}, but at least 3 windows per user \
                 are needed for a train/valid/test split"
            ));
        }
        if !self.eta.is_finite() || !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !self.popularity_skew.is_finite() || self.popularity_skew < 0.0 {
            return bad(format!(
                "popularity_skew must be finite and non-negative, got {}",
                self.popularity_skew
            ));
        }
        Ok(())
    }

    /// Prompt windows carved out of one user's stream.
    pub fn windows_per_user(&self) -> usize {
        self.stream_len - self.history_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: usize,
    pub name: String,
    pub category: usize,
}

/// All items of one synthetic world, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub items: Vec<ItemRecord>,
    pub n_categories: usize,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: usize) -> Result<&ItemRecord, CorpusError> {
        self.items.get(id).ok_or(CorpusError::UnknownItem {
            id,
            n_items: self.items.len(),
        })
    }

    /// Item ids grouped by category, ascending within each group.
    pub fn by_category(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_categories];
        for item in &self.items {
            groups[item.category].push(item.id);
        }
        groups
    }

    /// Builds the shared vocabulary over the instruction template, the
    /// separator, and every item name.
    pub fn vocab(&self) -> Vocab {
        let template = format!("{TEMPLATE_PREFIX} {TEMPLATE_SUFFIX}");
        Vocab::build(&template, self.items.iter().map(|i| i.name.as_str()))
    }
}

/// One supervised example: `history` are the `history_len` items preceding
/// `target` in the user's stream; `order_index` is the target's position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSample {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
    pub order_index: usize,
}

/// Chronological per-user split: for each user the latest window goes to
/// test, the one before to valid, the rest to train.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitDataset {
    pub train: Vec<InteractionSample>,
    pub valid: Vec<InteractionSample>,
    pub test: Vec<InteractionSample>,
}

impl SplitDataset {
    pub fn total(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

/// Builds the item name for one catalog slot. `serial` is the item's rank
/// within its category (0 = head item).
fn item_name(tokens_per_item: usize, id: usize, category: usize, serial: usize) -> String {
    let mut words: Vec<String> = match tokens_per_item {
        1 => vec![format!("i{id}")],
        2 => vec![format!("c{category}"), format!("s{serial}")],
        _ => vec![
            "itm".to_string(),
            format!("c{category}"),
            format!("s{serial}"),
        ],
    };
    while words.len() < tokens_per_item {
        words.push(format!("f{}", words.len() - 3));
    }
    words.join(" ")
}

/// Draws the catalog for a config: category assignments and item names.
///
/// The first `n_categories` items are pinned to distinct categories so every
/// category is guaranteed to be populated; the rest draw uniformly.
pub fn generate_catalog(config: &GenConfig) -> Result<Catalog, CorpusError> {
    config.validate()?;
    let mut rng = stream(config.seed, "catalog", &[]);
    let mut serial_within = vec![0usize; config.n_categories];
    let mut items = Vec::with_capacity(config.n_items);
    for id in 0..config.n_items {
        let category = if id < config.n_categories {
            id
        } else {
            let u = uniform01(&mut rng);
            ((u * config.n_categories as f64) as usize).min(config.n_categories - 1)
        };
        let serial = serial_within[category];
        serial_within[category] += 1;
        items.push(ItemRecord {
            id,
            name: item_name(config.tokens_per_item, id, category, serial),
            category,
        });
    }
    Ok(Catalog {
        items,
        n_categories: config.n_categories,
    })
}

/// Draws the category transition matrix: each row is a softmax (at
/// temperature 0.5) of independent standard normals, so rows are strictly
/// positive and sum to one.
pub fn markov_matrix(config: &GenConfig) -> Vec<Vec<f64>> {
    let n = config.n_categories;
    let mut rng = stream(config.seed, "markov", &[]);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|_| standard_normal(&mut rng) / TRANSITION_TEMPERATURE)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        rows.push(exps.iter().map(|&e| e / total).collect());
    }
    rows
}

/// Cumulative distribution prepared for inverse-CDF sampling. The final
/// entry is forced to exactly 1 so a uniform draw can never fall off the end.
struct Cdf(Vec<f64>);

impl Cdf {
    fn from_weights(weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let mut cum: Vec<f64> = weights
            .iter()
            .map(|&w| {
                acc += w / total;
                acc
            })
            .collect();
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        Cdf(cum)
    }

    fn sample(&self, rng: &mut rand_chacha::ChaCha12Rng) -> usize {
        let u = uniform01(rng);
        self.0.partition_point(|&c| c <= u)
    }
}

/// Generates interaction streams under the transition matrix drawn from the
/// config's seed. See [`generate_interactions_with_matrix`] for the law.
pub fn generate_interactions(
    config: &GenConfig,
    catalog: &Catalog,
) -> Result<SplitDataset, CorpusError> {
    generate_interactions_with_matrix(config, catalog, &markov_matrix(config))
}

/// Generates interaction streams under an explicit category transition
/// matrix (useful for tests that need a known chain).
///
/// Law, per user and per step `t`:
/// - `t = 0`: draw from the global popularity prior, which weights item
///   `i` by `(serial_i + 1)^-popularity_skew` (serial = rank within its
///   category) normalized over the whole catalog.
/// - `t > 0`: with probability `eta`, draw the next category from the
///   matrix row of the previous item's category (restricted to categories
///   that actually contain items) and then an item uniformly inside it;
///   otherwise draw from the popularity prior again.
///
/// Windows of `history_len` consecutive items plus the following item become
/// samples; per user the last window is test, the second to last is valid,
/// and the rest are train. Streams shorter than ten windows still reserve
/// one window each for valid and test.
pub fn generate_interactions_with_matrix(
    config: &GenConfig,
    catalog: &Catalog,
    matrix: &[Vec<f64>],
) -> Result<SplitDataset, CorpusError> {
    config.validate()?;
    let n_cat = config.n_categories;
    if catalog.n_categories != n_cat || catalog.len() != config.n_items {
        return Err(CorpusError::InvalidConfig(format!(
            "catalog shape ({} items, {} categories) does not match config ({}, {})",
            catalog.len(),
            catalog.n_categories,
            config.n_items,
            n_cat
        )));
    }
    if matrix.len() != n_cat || matrix.iter().any(|row| row.len() != n_cat) {
        return Err(CorpusError::InvalidConfig(format!(
            "transition matrix must be {n_cat}x{n_cat}"
        )));
    }
    for (i, row) in matrix.iter().enumerate() {
        if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(CorpusError::InvalidConfig(format!(
                "transition row {i} has a negative or non-finite entry"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidConfig(format!(
                "transition row {i} sums to {sum}, expected 1"
            )));
        }
    }

    let groups = catalog.by_category();
    let prior_weights: Vec<f64> = {
        let mut serials = vec![0usize; catalog.len()];
        for members in &groups {
            for (serial, &id) in members.iter().enumerate() {
                serials[id] = serial;
            }
        }
        serials
            .iter()
            .map(|&s| ((s + 1) as f64).powf(-config.popularity_skew))
            .collect()
    };
    let prior = Cdf::from_weights(&prior_weights);

    // Restrict each transition row to populated categories so the item draw
    // inside the chosen category is always possible.
    let row_cdfs: Vec<Cdf> = matrix
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let masked: Vec<f64> = row
                .iter()
                .zip(&groups)
                .map(|(&p, members)| if members.is_empty() { 0.0 } else { p })
                .collect();
            if masked.iter().sum::<f64>() <= 0.0 {
                return Err(CorpusError::InvalidConfig(format!(
                    "transition row {i} puts no mass on populated categories"
                )));
            }
            Ok(Cdf::from_weights(&masked))
        })
        .collect::<Result<_, _>>()?;

    let windows = config.windows_per_user();
    let n_side = ((windows + 5) / 10).max(1);
    let mut dataset = SplitDataset::default();
    for user in 0..config.n_users {
        let mut rng = stream(config.seed, "user", &[user as u64]);
        let mut items: Vec<usize> = Vec::with_capacity(config.stream_len);
        for t in 0..config.stream_len {
            let item = if t > 0 && uniform01(&mut rng) < config.eta {
                let last_cat = catalog.items[items[t - 1]].category;
                let cat = row_cdfs[last_cat].sample(&mut rng);
                let members = &groups[cat];
                let pick = ((uniform01(&mut rng) * members.len() as f64) as usize)
                    .min(members.len() - 1);
                members[pick]
            } else {
                prior.sample(&mut rng)
            };
            items.push(item);
        }
        for (w, t) in (config.history_len..config.stream_len).enumerate() {
            let sample = InteractionSample {
                user,
                history: items[t - config.history_len..t].to_vec(),
                target: items[t],
                order_index: t,
            };
            if w >= windows - n_side {
                dataset.test.push(sample);
            } else if w >= windows - 2 * n_side {
                dataset.valid.push(sample);
            } else {
                dataset.train.push(sample);
            }
        }
    }
    Ok(dataset)
}

/// One prompt pair ready for tokenized training: `x_h` sees the history,
/// `x_0` replaces the whole history span with the single word "None", and
/// both share the template tokens around it.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionPair {
    pub x_h: Vec<TokenId>,
    pub x_0: Vec<TokenId>,
    /// Target item name tokens (no end-of-sequence marker).
    pub y: Vec<TokenId>,
    /// Index in `x_h` where the history span begins.
    pub history_start: usize,
}

impl InstructionPair {
    /// Span of `x_h` occupied by item names and separators.
    pub fn history_span(&self) -> std::ops::Range<usize> {
        self.history_start..self.history_start + self.x_h.len() - self.x_0.len() + 1
    }

    /// Number of prompt tokens before generation starts, with history.
    pub fn boundary_with_history(&self) -> usize {
        self.x_h.len()
    }

    /// Number of prompt tokens before generation starts, without history.
    pub fn boundary_without_history(&self) -> usize {
        self.x_0.len()
    }
}

/// Renders one sample into the two tokenized prompts and the target tokens.
pub fn render_instruction(
    sample: &InteractionSample,
    catalog: &Catalog,
    vocab: &Vocab,
) -> Result<InstructionPair, CorpusError> {
    let mut names = Vec::with_capacity(sample.history.len());
    for &id in &sample.history {
        names.push(catalog.item(id)?.name.as_str());
    }
    let history_text = names.join(" , ");
    let target_name = &catalog.item(sample.target)?.name;

    let prefix = vocab.encode(TEMPLATE_PREFIX)?;
    let suffix = vocab.encode(TEMPLATE_SUFFIX)?;
    let history = vocab.encode(&history_text)?;
    let y = vocab.encode(target_name)?;

    let history_start = 1 + prefix.len();
    let mut x_h = Vec::with_capacity(1 + prefix.len() + history.len() + suffix.len());
    x_h.push(BOS);
    x_h.extend_from_slice(&prefix);
    x_h.extend_from_slice(&history);
    x_h.extend_from_slice(&suffix);

    let mut x_0 = Vec::with_capacity(1 + prefix.len() + 1 + suffix.len());
    x_0.push(BOS);
    x_0.extend_from_slice(&prefix);
    x_0.push(NONE);
    x_0.extend_from_slice(&suffix);

    Ok(InstructionPair {
        x_h,
        x_0,
        y,
        history_start,
    })
}

/// Assigns every item to one of `n_groups` popularity buckets based on how
/// often it appears as a training target. Items are ranked ascending by
/// (count, id) and the ranking is cut into equal slices, so a higher group
/// index always means more popular.
pub fn popularity_groups(
    catalog: &Catalog,
    train: &[InteractionSample],
    n_groups: usize,
) -> Result<Vec<usize>, CorpusError> {
    let n_items = catalog.len();
    if n_groups == 0 || n_groups > n_items {
        return Err(CorpusError::InvalidConfig(format!(
            "n_groups must lie in 1..={n_items}, got {n_groups}"
        )));
    }
    let mut counts = vec![0usize; n_items];
    for sample in train {
        if sample.target >= n_items {
            return Err(CorpusError::UnknownItem {
                id: sample.target,
                n_items,
            });
        }
        counts[sample.target] += 1;
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.sort_by_key(|&id| (counts[id], id));
    let mut groups = vec![0usize; n_items];
    for (pos, &id) in order.iter().enumerate() {
        groups[id] = pos * n_groups / n_items;
    }
    Ok(groups)
}
