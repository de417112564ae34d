//! Shared plumbing between the subcommands: dataset loading, batched
//! decoding over all test users, and joining recommendation files back to
//! test targets.

use std::collections::BTreeMap;
use std::path::Path;

use cft_core::corpus::io::StoredDataset;
use cft_core::corpus::{self, Catalog};
use cft_core::decode::{self, Recommendation};
use cft_core::evalkit::{self, TestInput};
use cft_core::model::Model;
use cft_core::textenc::Vocab;

use crate::AppError;

/// How many users share one lockstep beam-search call. All prompts of one
/// variant have the same token length, so batching is exact, not padded.
const DECODE_BATCH: usize = 25;

/// How many name rows go into one grounding encode call.
const ENCODE_BATCH: usize = 250;

/// A dataset directory read back plus its derived vocabulary.
pub struct LoadedData {
    pub stored: StoredDataset,
    pub vocab: Vocab,
}

pub fn load_data(dir: &Path) -> Result<LoadedData, AppError> {
    let stored = corpus::io::read_dataset(dir)
        .map_err(|e| AppError::Data(format!("{}: {e}", dir.display())))?;
    let vocab = stored.catalog.vocab();
    Ok(LoadedData { stored, vocab })
}

/// Longest prompt the model must fit: the with-history prompt plus the full
/// generated name. Returns (prompt_len, total_len).
pub fn required_seq_len(data: &LoadedData) -> Result<(usize, usize), AppError> {
    let splits = [
        &data.stored.dataset.train,
        &data.stored.dataset.valid,
        &data.stored.dataset.test,
    ];
    let sample = splits
        .iter()
        .find_map(|s| s.first())
        .ok_or_else(|| AppError::Data("dataset has no samples".into()))?;
    let pair = corpus::render_instruction(sample, &data.stored.catalog, &data.vocab)
        .map_err(|e| AppError::Data(e.to_string()))?;
    let prompt = pair.x_h.len();
    Ok((prompt, prompt + data.stored.config.tokens_per_item))
}

pub struct DecodeSettings {
    pub width: usize,
    pub length_norm: bool,
    pub top_k: usize,
}

/// Decodes one prompt variant for every test user: batched beam search,
/// batched hypothesis encoding, then per-user catalog ranking truncated to
/// `top_k`. Output is ordered like `inputs`.
pub fn recommend_records(
    model: &Model,
    inputs: &[TestInput],
    catalog_reps: &[Vec<f64>],
    with_history: bool,
    max_out_len: usize,
    settings: &DecodeSettings,
) -> Result<Vec<Recommendation>, AppError> {
    if catalog_reps.len() < settings.top_k {
        return Err(AppError::Config(format!(
            "top_k = {} exceeds the catalog size {}",
            settings.top_k,
            catalog_reps.len()
        )));
    }
    let mut recs = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(DECODE_BATCH) {
        let prompts: Vec<&[_]> = chunk
            .iter()
            .map(|t| {
                if with_history { t.with_history.as_slice() } else { t.without_history.as_slice() }
            })
            .collect();
        let pools = decode::beam_search_many(
            model,
            &prompts,
            settings.width,
            max_out_len,
            settings.length_norm,
        )
        .map_err(decode_err)?;

        // Encode all 5 hypotheses of every user in this chunk in a few
        // batched calls, then slice the rows back out per user.
        let names: Vec<Vec<_>> = pools
            .iter()
            .flat_map(|pool| pool.iter().map(|h| h.tokens.clone()))
            .collect();
        let mut reps = Vec::with_capacity(names.len());
        for block in names.chunks(ENCODE_BATCH) {
            reps.extend(model.encode_items(block).map_err(|e| AppError::Data(e.to_string()))?);
        }

        for (i, input) in chunk.iter().enumerate() {
            let hyp_reps = &reps[i * 5..(i + 1) * 5];
            let mut entries =
                decode::rank_all_reps(hyp_reps, catalog_reps).map_err(decode_err)?;
            entries.truncate(settings.top_k);
            recs.push(Recommendation::from_entries(input.user, with_history, &entries));
        }
    }
    Ok(recs)
}

fn decode_err(e: cft_core::decode::DecodeError) -> AppError {
    use cft_core::decode::DecodeError as E;
    match e {
        E::ZeroWidth | E::ZeroOutputLength | E::NotEnoughFinished { .. } | E::PromptTooLong { .. } => {
            AppError::Config(e.to_string())
        }
        other => AppError::Data(other.to_string()),
    }
}

/// A recommendations file joined against the test targets, user by user.
pub struct JoinedRecs {
    pub lists: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub with_history: bool,
}

/// Matches each user's recommendation line to their test target. Every test
/// user must appear exactly once and all lines must agree on the
/// history/no-history variant.
pub fn join_to_targets(
    recs: &[Recommendation],
    test: &[corpus::InteractionSample],
) -> Result<JoinedRecs, AppError> {
    if recs.is_empty() {
        return Err(AppError::Data("recommendations file is empty".into()));
    }
    let with_history = recs[0].with_history;
    let mut by_user: BTreeMap<usize, &Recommendation> = BTreeMap::new();
    for rec in recs {
        if rec.with_history != with_history {
            return Err(AppError::Data(format!(
                "user {}: mixed with/without-history lines in one file",
                rec.user
            )));
        }
        if by_user.insert(rec.user, rec).is_some() {
            return Err(AppError::Data(format!("user {} appears twice", rec.user)));
        }
    }
    let mut lists = Vec::with_capacity(test.len());
    let mut targets = Vec::with_capacity(test.len());
    for sample in test {
        let rec = by_user.get(&sample.user).ok_or_else(|| {
            AppError::Data(format!("no recommendations for test user {}", sample.user))
        })?;
        lists.push(rec.items.clone());
        targets.push(sample.target);
    }
    Ok(JoinedRecs { lists, targets, with_history })
}

/// Popularity-group exposure shares for one joined file.
pub fn group_shares(
    joined: &JoinedRecs,
    catalog: &Catalog,
    train: &[corpus::InteractionSample],
    n_groups: usize,
) -> Result<evalkit::GroupDistribution, AppError> {
    let groups = corpus::popularity_groups(catalog, train, n_groups)
        .map_err(|e| AppError::Config(e.to_string()))?;
    evalkit::group_distribution(&joined.lists, &groups, n_groups, joined.with_history)
        .map_err(|e| AppError::Data(e.to_string()))
}
