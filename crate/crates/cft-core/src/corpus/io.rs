//! On-disk dataset layout: two JSON Lines files plus a manifest.
//!
//! - `catalog.jsonl`: one item per line with `id`, `name`, `category`.
//! - `interactions.jsonl`: one sample per line with `user`, `history`,
//!   `target`, `order_index`, `split`.
//! - `manifest.json`: the generation config and the category transition
//!   matrix, enough to regenerate or audit the dataset.
//!
//! Writes go through a temp file and rename, so a crash never leaves a
//! half-written dataset behind.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, CorpusError, GenConfig, InteractionSample, ItemRecord, SplitDataset};
use crate::fsutil::write_atomic;

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct InteractionRow {
    user: usize,
    history: Vec<usize>,
    target: usize,
    order_index: usize,
    split: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: GenConfig,
    transition: Vec<Vec<f64>>,
}

/// Everything read back from a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub config: GenConfig,
    pub catalog: Catalog,
    pub dataset: SplitDataset,
    pub transition: Vec<Vec<f64>>,
}

fn bad(file: &str, detail: impl Into<String>) -> CorpusError {
    CorpusError::BadData {
        file: file.to_string(),
        detail: detail.into(),
    }
}

/// Writes the three dataset files into `dir`, creating it if needed.
pub fn write_dataset(
    dir: &Path,
    config: &GenConfig,
    catalog: &Catalog,
    dataset: &SplitDataset,
    transition: &[Vec<f64>],
) -> Result<(), CorpusError> {
    fs::create_dir_all(dir)?;

    let mut catalog_text = String::new();
    for item in &catalog.items {
        catalog_text.push_str(&serde_json::to_string(item).map_err(|e| {
            bad(CATALOG_FILE, e.to_string())
        })?);
        catalog_text.push('\n');
    }
    write_atomic(&dir.join(CATALOG_FILE), catalog_text.as_bytes())?;

    let mut rows_text = String::new();
    let tagged = [
        ("train", &dataset.train),
        ("valid", &dataset.valid),
        ("test", &dataset.test),
    ];
    for (split, samples) in tagged {
        for sample in samples.iter() {
            let row = InteractionRow {
                user: sample.user,
                history: sample.history.clone(),
                target: sample.target,
                order_index: sample.order_index,
                split: split.to_string(),
            };
            rows_text.push_str(&serde_json::to_string(&row).map_err(|e| {
                bad(INTERACTIONS_FILE, e.to_string())
            })?);
            rows_text.push('\n');
        }
    }
    write_atomic(&dir.join(INTERACTIONS_FILE), rows_text.as_bytes())?;

    let manifest = Manifest {
        config: config.clone(),
        transition: transition.to_vec(),
    };
    let mut manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| bad(MANIFEST_FILE, e.to_string()))?;
    manifest_text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), manifest_text.as_bytes())?;
    Ok(())
}

/// Reads a dataset directory back, validating ids, splits, and shapes
/// against the stored config.
pub fn read_dataset(dir: &Path) -> Result<StoredDataset, CorpusError> {
    let manifest_text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| bad(MANIFEST_FILE, e.to_string()))?;
    let config = manifest.config;
    config.validate()?;
    let n_cat = config.n_categories;
    if manifest.transition.len() != n_cat
        || manifest.transition.iter().any(|row| row.len() != n_cat)
    {
        return Err(bad(
            MANIFEST_FILE,
            format!("transition matrix is not {n_cat}x{n_cat}"),
        ));
    }

    let catalog_text = fs::read_to_string(dir.join(CATALOG_FILE))?;
    let mut items = Vec::new();
    for (lineno, line) in catalog_text.lines().enumerate() {
        let item: ItemRecord = serde_json::from_str(line)
            .map_err(|e| bad(CATALOG_FILE, format!("line {}: {e}", lineno + 1)))?;
        if item.id != lineno {
            return Err(bad(
                CATALOG_FILE,
                format!("line {}: id {} out of order", lineno + 1, item.id),
            ));
        }
        if item.category >= n_cat {
            return Err(bad(
                CATALOG_FILE,
                format!("line {}: category {} out of range", lineno + 1, item.category),
            ));
        }
        if item.name.split_whitespace().count() != config.tokens_per_item {
            return Err(bad(
                CATALOG_FILE,
                format!("line {}: name {:?} has wrong word count", lineno + 1, item.name),
            ));
        }
        items.push(item);
    }
    if items.len() != config.n_items {
        return Err(bad(
            CATALOG_FILE,
            format!("expected {} items, found {}", config.n_items, items.len()),
        ));
    }
    let catalog = Catalog {
        items,
        n_categories: n_cat,
    };

    let rows_text = fs::read_to_string(dir.join(INTERACTIONS_FILE))?;
    let mut dataset = SplitDataset::default();
    for (lineno, line) in rows_text.lines().enumerate() {
        let row: InteractionRow = serde_json::from_str(line)
            .map_err(|e| bad(INTERACTIONS_FILE, format!("line {}: {e}", lineno + 1)))?;
        if row.history.len() != config.history_len {
            return Err(bad(
                INTERACTIONS_FILE,
                format!("line {}: history length {}", lineno + 1, row.history.len()),
            ));
        }
        for &id in row.history.iter().chain([&row.target]) {
            if id >= catalog.len() {
                return Err(bad(
                    INTERACTIONS_FILE,
                    format!("line {}: item id {id} out of range", lineno + 1),
                ));
            }
        }
        let sample = InteractionSample {
            user: row.user,
            history: row.history,
            target: row.target,
            order_index: row.order_index,
        };
        match row.split.as_str() {
            "train" => dataset.train.push(sample),
            "valid" => dataset.valid.push(sample),
            "test" => dataset.test.push(sample),
            other => {
                return Err(bad(
                    INTERACTIONS_FILE,
                    format!("line {}: unknown split {other:?}", lineno + 1),
                ));
            }
        }
    }

    Ok(StoredDataset {
        config,
        catalog,
        dataset,
        transition: manifest.transition,
    })
}
