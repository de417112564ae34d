//! The `cft` subcommands. Argument structs double as the public API: the
//! binary parses them with clap, tests construct them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use cft_core::corpus::{self, Catalog, SplitDataset};
use cft_core::decode;
use cft_core::evalkit::{self, GroupDistribution, MetricsReport, MetricsRow};
use cft_core::fsutil;
use cft_core::textenc::Vocab;
use cft_core::trainer;

use crate::config::RunConfig;
use crate::pipeline::{self, DecodeSettings, LoadedData};
use crate::AppError;

#[derive(Debug, Parser)]
#[command(
    name = "cft",
    version,
    about = "Counterfactual fine-tuning lab for next-item recommenders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic interaction dataset directory.
    Gen(GenArgs),
    /// Fine-tune a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Decode recommendation lists for every test user.
    Recommend(RecommendArgs),
    /// Score recommendation files against the test targets.
    Eval(EvalArgs),
    /// Compare popularity-group exposure with and without history.
    Analyze(AnalyzeArgs),
    /// Train and evaluate across a grid of one hyperparameter and seeds.
    Sweep(SweepArgs),
}

pub fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Recommend(args) => cmd_recommend(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    }
}

// ---------------------------------------------------------------- gen ----

#[derive(Debug, Args)]
pub struct GenArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the generation seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_gen(args: &GenArgs) -> Result<(), AppError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.gen.seed = seed;
    }
    let catalog = corpus::generate_catalog(&cfg.gen).map_err(config_corpus)?;
    let matrix = corpus::markov_matrix(&cfg.gen);
    let dataset = corpus::generate_interactions_with_matrix(&cfg.gen, &catalog, &matrix)
        .map_err(config_corpus)?;
    corpus::io::write_dataset(&args.out, &cfg.gen, &catalog, &dataset, &matrix)
        .map_err(|e| AppError::Data(e.to_string()))?;
    cfg.write_manifest(&args.out)?;
    println!(
        "wrote {}: {} items in {} categories, {} users, train/valid/test = {}/{}/{}",
        args.out.display(),
        catalog.len(),
        catalog.n_categories,
        cfg.gen.n_users,
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
    );
    Ok(())
}

// -------------------------------------------------------------- train ----

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory produced by `cft gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.ckpt and epochs.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the causal loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Override the token-weight decay as beta' (beta = 1 - 1/beta').
    #[arg(long)]
    pub beta_prime: Option<f64>,
    /// Ablation: drop the causal loss term entirely (lambda = 0).
    #[arg(long)]
    pub no_causal_loss: bool,
    /// Ablation: uniform unnormalized token weights (beta = 1).
    #[arg(long)]
    pub no_token_weights: bool,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Layers the command-line ablation flags and overrides onto a parsed
/// configuration.
pub fn apply_train_overrides(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(lambda) = args.lambda {
        cfg.cft.lambda = lambda;
    }
    if let Some(bp) = args.beta_prime {
        cfg.cft.beta_prime = Some(bp);
        cfg.cft.beta = None;
    }
    if args.no_causal_loss {
        cfg.cft.lambda = 0.0;
    }
    if args.no_token_weights {
        cfg.cft.beta = Some(1.0);
        cfg.cft.beta_prime = None;
        cfg.cft.weight_normal = false;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), AppError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    apply_train_overrides(&mut cfg, args);
    // Settings problems must surface before any data is touched.
    let train_config = cfg.train_config()?;
    let data = pipeline::load_data(&args.data)?;
    check_seq_len(&cfg, &data)?;

    let model_config = cfg.model_config(data.vocab.len());
    let lambda = train_config.cft.lambda;
    let (ckpt, records) = trainer::train(
        &model_config,
        &data.stored.catalog,
        &data.vocab,
        &data.stored.dataset.train,
        &data.stored.dataset.valid,
        train_config,
    )?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| AppError::Data(format!("creating {}: {e}", args.out.display())))?;
    let ckpt_path = args.out.join("checkpoint.ckpt");
    trainer::save_checkpoint(&ckpt, &ckpt_path)?;
    trainer::write_epoch_log(&args.out.join("epochs.csv"), &records)
        .map_err(|e| AppError::Data(e.to_string()))?;
    cfg.write_manifest(&args.out)?;

    let best_epoch = ckpt.progress.best_epoch.unwrap_or(0);
    let best_loss = ckpt.progress.best_valid_loss.unwrap_or(f64::NAN);
    println!(
        "trained {} epochs (lambda = {lambda}); best epoch {best_epoch} with validation loss {best_loss}",
        records.len(),
    );
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn check_seq_len(cfg: &RunConfig, data: &LoadedData) -> Result<(), AppError> {
    let (prompt, total) = pipeline::required_seq_len(data)?;
    if total > cfg.model.max_seq_len {
        return Err(AppError::Config(format!(
            "model.max_seq_len = {} but prompts need {prompt} tokens plus {} generated; raise it to at least {total}",
            cfg.model.max_seq_len, data.stored.config.tokens_per_item
        )));
    }
    Ok(())
}

// ---------------------------------------------------------- recommend ----

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("variant").required(true).args(["with_history", "no_history"]))]
pub struct RecommendArgs {
    /// Checkpoint written by `cft train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory the checkpoint was trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSONL file, one recommendation list per test user.
    #[arg(long)]
    pub out: PathBuf,
    /// Prompt with the user's real interaction history.
    #[arg(long)]
    pub with_history: bool,
    /// Prompt with the history replaced by the empty marker.
    #[arg(long)]
    pub no_history: bool,
    /// Score finished beams by mean (on) or summed (off) log-probability.
    #[arg(long, default_value = "on", value_parser = ["on", "off"])]
    pub length_norm: String,
    /// Beam width.
    #[arg(long, default_value_t = 10)]
    pub width: usize,
    /// Recommendation list length.
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
}

pub fn cmd_recommend(args: &RecommendArgs) -> Result<(), AppError> {
    let ckpt = trainer::load_checkpoint(&args.ckpt)?;
    let data = pipeline::load_data(&args.data)?;
    if ckpt.model_config.vocab_size != data.vocab.len() {
        return Err(AppError::Data(format!(
            "checkpoint vocabulary size {} does not match the dataset's {}",
            ckpt.model_config.vocab_size,
            data.vocab.len()
        )));
    }
    let model = ckpt.build_model()?;
    let inputs = evalkit::build_test_inputs(
        &data.stored.dataset.test,
        &data.stored.catalog,
        &data.vocab,
    )
    .map_err(|e| AppError::Data(e.to_string()))?;
    let catalog_reps = decode::catalog_representations(&model, &data.stored.catalog, &data.vocab)
        .map_err(|e| AppError::Data(e.to_string()))?;

    let settings = DecodeSettings {
        width: args.width,
        length_norm: args.length_norm == "on",
        top_k: args.top_k,
    };
    let recs = pipeline::recommend_records(
        &model,
        &inputs,
        &catalog_reps,
        args.with_history,
        data.stored.config.tokens_per_item,
        &settings,
    )?;
    decode::write_recommendations(&args.out, &recs)
        .map_err(|e| AppError::Data(e.to_string()))?;
    println!(
        "wrote {} {} recommendation lists to {}",
        recs.len(),
        if args.with_history { "with-history" } else { "no-history" },
        args.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- eval ----

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Recommendation JSONL file; repeat for the no-history variant.
    #[arg(long, required = true)]
    pub recs: Vec<PathBuf>,
    /// Dataset directory with the test targets.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated metric cutoffs.
    #[arg(long, default_value = "5,10")]
    pub k: String,
    /// Method label for the metrics table.
    #[arg(long, default_value = "cft")]
    pub method: String,
    /// Number of popularity groups for the divergence column.
    #[arg(long, default_value_t = 5)]
    pub n_groups: usize,
    /// Output metrics CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), AppError> {
    let cutoffs = parse_cutoffs(&args.k)?;
    let data = pipeline::load_data(&args.data)?;
    let test = &data.stored.dataset.test;
    let train = &data.stored.dataset.train;

    // Read every file, join to targets, and index by variant; the
    // with-history file anchors the divergence column.
    let mut by_variant: BTreeMap<bool, (MetricsReport, GroupDistribution)> = BTreeMap::new();
    for path in &args.recs {
        let recs = decode::read_recommendations(path)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        let joined = pipeline::join_to_targets(&recs, test)?;
        if let Some(&k) = cutoffs.iter().find(|&&k| joined.lists[0].len() < k) {
            return Err(AppError::Config(format!(
                "{}: lists hold {} items, too short for k = {k}",
                path.display(),
                joined.lists[0].len()
            )));
        }
        let report = MetricsReport::compute(&joined.lists, &joined.targets, &cutoffs)
            .map_err(|e| AppError::Data(e.to_string()))?;
        let shares = pipeline::group_shares(&joined, &data.stored.catalog, train, args.n_groups)?;
        if by_variant.insert(joined.with_history, (report, shares)).is_some() {
            return Err(AppError::Data(format!(
                "{}: duplicate {} file",
                path.display(),
                variant_name(joined.with_history)
            )));
        }
    }

    let reference = by_variant.get(&true).map(|(_, shares)| shares.clone());
    let mut rows = Vec::new();
    // With-history row first, matching the documented table layout.
    for &with_history in &[true, false] {
        let Some((report, shares)) = by_variant.get(&with_history) else {
            continue;
        };
        let js = match &reference {
            Some(anchor) => evalkit::distribution_divergence(shares, anchor)
                .map_err(|e| AppError::Data(e.to_string()))?,
            None => f64::NAN,
        };
        rows.push(MetricsRow {
            method: args.method.clone(),
            with_history,
            hr: cutoffs.iter().map(|k| report.hr[k]).collect(),
            ndcg: cutoffs.iter().map(|k| report.ndcg[k]).collect(),
            js_vs_with_history: js,
        });
    }
    evalkit::write_metrics_csv(&args.out, &cutoffs, &rows)
        .map_err(|e| AppError::Data(e.to_string()))?;
    println!("wrote {} metric rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn variant_name(with_history: bool) -> &'static str {
    if with_history { "with-history" } else { "no-history" }
}

// ------------------------------------------------------------ analyze ----

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Recommendations decoded from with-history prompts.
    #[arg(long)]
    pub recs_with: PathBuf,
    /// Recommendations decoded from no-history prompts.
    #[arg(long)]
    pub recs_without: PathBuf,
    /// Dataset directory with the training targets (for popularity groups).
    #[arg(long)]
    pub data: PathBuf,
    /// Number of popularity groups.
    #[arg(long, default_value_t = 5)]
    pub n_groups: usize,
    /// Output directory for groups.csv, groups.svg, divergence.json.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), AppError> {
    let data = pipeline::load_data(&args.data)?;
    let test = &data.stored.dataset.test;
    let train = &data.stored.dataset.train;

    let load = |path: &Path, want_history: bool| -> Result<GroupDistribution, AppError> {
        let recs = decode::read_recommendations(path)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        let joined = pipeline::join_to_targets(&recs, test)?;
        if joined.with_history != want_history {
            return Err(AppError::Data(format!(
                "{}: expected a {} file, found {}",
                path.display(),
                variant_name(want_history),
                variant_name(joined.with_history)
            )));
        }
        pipeline::group_shares(&joined, &data.stored.catalog, train, args.n_groups)
    };
    let with = load(&args.recs_with, true)?;
    let without = load(&args.recs_without, false)?;
    let js = evalkit::distribution_divergence(&with, &without)
        .map_err(|e| AppError::Data(e.to_string()))?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| AppError::Data(format!("creating {}: {e}", args.out.display())))?;
    evalkit::write_groups_csv(&args.out.join("groups.csv"), &with, &without)
        .map_err(|e| AppError::Data(e.to_string()))?;
    let chart = crate::svg::group_share_chart(
        &with.shares,
        &without.shares,
        "recommendation share by popularity group",
    );
    fsutil::write_atomic(&args.out.join("groups.svg"), chart.as_bytes())
        .map_err(|e| AppError::Data(e.to_string()))?;
    let divergence = serde_json::json!({
        "n_groups": args.n_groups,
        "js_divergence_nats": js,
    });
    let mut text = serde_json::to_string_pretty(&divergence)
        .map_err(|e| AppError::Data(e.to_string()))?;
    text.push('\n');
    fsutil::write_atomic(&args.out.join("divergence.json"), text.as_bytes())
        .map_err(|e| AppError::Data(e.to_string()))?;

    println!("group shares (with history):    {}", share_line(&with.shares));
    println!("group shares (without history): {}", share_line(&without.shares));
    println!("JS divergence: {js} nats");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn share_line(shares: &[f64]) -> String {
    shares.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(" ")
}

// -------------------------------------------------------------- sweep ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Lambda,
    BetaPrime,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::BetaPrime => "beta_prime",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML run configuration shared by every grid point.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which objective knob to sweep.
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values for the swept knob.
    #[arg(long)]
    pub values: String,
    /// Comma-separated seeds; each seeds the data, the init, and training.
    #[arg(long)]
    pub seeds: String,
    /// Output directory for sweep.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// One grid point's result. Metric cells are NaN when that run failed.
struct SweepRow {
    value: f64,
    seed: u64,
    hr5: f64,
    hr10: f64,
    ndcg5: f64,
    ndcg10: f64,
    valid_loss: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), AppError> {
    let base = RunConfig::load(args.config.as_deref())?;
    let values = parse_f64_list(&args.values)
        .map_err(|e| AppError::Config(format!("--values: {e}")))?;
    let seeds = parse_u64_list(&args.seeds)
        .map_err(|e| AppError::Config(format!("--seeds: {e}")))?;
    if values.is_empty() || seeds.is_empty() {
        return Err(AppError::Config("--values and --seeds must be non-empty".into()));
    }

    let mut rows = Vec::with_capacity(seeds.len() * values.len());
    for &seed in &seeds {
        // One world per seed, shared by every value of the swept knob.
        let mut gen = base.gen.clone();
        gen.seed = seed;
        let catalog = corpus::generate_catalog(&gen).map_err(config_corpus)?;
        let dataset = corpus::generate_interactions(&gen, &catalog).map_err(config_corpus)?;
        let vocab = catalog.vocab();

        for &value in &values {
            let mut cfg = base.clone();
            cfg.gen = gen.clone();
            cfg.train.seed = seed;
            cfg.model.init_seed = seed;
            match args.param {
                SweepParam::Lambda => cfg.cft.lambda = value,
                SweepParam::BetaPrime => {
                    cfg.cft.beta_prime = Some(value);
                    cfg.cft.beta = None;
                }
            }
            let row = match sweep_point(&cfg, &catalog, &dataset, &vocab) {
                Ok(mut row) => {
                    row.value = value;
                    row.seed = seed;
                    row
                }
                Err(e) => {
                    eprintln!(
                        "warning: {} = {value}, seed {seed} failed: {e}",
                        args.param.key()
                    );
                    SweepRow {
                        value,
                        seed,
                        hr5: f64::NAN,
                        hr10: f64::NAN,
                        ndcg5: f64::NAN,
                        ndcg10: f64::NAN,
                        valid_loss: f64::NAN,
                    }
                }
            };
            rows.push(row);
        }
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| AppError::Data(format!("creating {}: {e}", args.out.display())))?;
    let mut text = String::from("param,value,seed,HR@5,HR@10,NDCG@5,NDCG@10,valid_L\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            args.param.key(),
            r.value,
            r.seed,
            r.hr5,
            r.hr10,
            r.ndcg5,
            r.ndcg10,
            r.valid_loss
        ));
    }
    let csv_path = args.out.join("sweep.csv");
    fsutil::write_atomic(&csv_path, text.as_bytes())
        .map_err(|e| AppError::Data(e.to_string()))?;
    base.write_manifest(&args.out)?;
    println!("wrote {} sweep rows to {}", rows.len(), csv_path.display());
    Ok(())
}

/// Trains and scores one grid point fully in memory.
fn sweep_point(
    cfg: &RunConfig,
    catalog: &Catalog,
    dataset: &SplitDataset,
    vocab: &Vocab,
) -> Result<SweepRow, AppError> {
    let model_config = cfg.model_config(vocab.len());
    let train_config = cfg.train_config()?;
    let (ckpt, _records) =
        trainer::train(&model_config, catalog, vocab, &dataset.train, &dataset.valid, train_config)?;
    let valid_loss = ckpt.progress.best_valid_loss.unwrap_or(f64::NAN);
    let model = ckpt.build_model()?;

    let inputs = evalkit::build_test_inputs(&dataset.test, catalog, vocab)
        .map_err(|e| AppError::Data(e.to_string()))?;
    let catalog_reps = decode::catalog_representations(&model, catalog, vocab)
        .map_err(|e| AppError::Data(e.to_string()))?;
    let settings = DecodeSettings {
        width: cfg.decode.width,
        length_norm: cfg.decode.length_norm,
        top_k: 10,
    };
    let recs = pipeline::recommend_records(
        &model,
        &inputs,
        &catalog_reps,
        true,
        cfg.gen.tokens_per_item,
        &settings,
    )?;
    let joined = pipeline::join_to_targets(&recs, &dataset.test)?;
    let report = MetricsReport::compute(&joined.lists, &joined.targets, &[5, 10])
        .map_err(|e| AppError::Data(e.to_string()))?;
    Ok(SweepRow {
        value: 0.0, // overwritten by the caller
        seed: 0,
        hr5: report.hr[&5],
        hr10: report.hr[&10],
        ndcg5: report.ndcg[&5],
        ndcg10: report.ndcg[&10],
        valid_loss,
    })
}

// ------------------------------------------------------------ helpers ----

fn config_corpus(e: corpus::CorpusError) -> AppError {
    match e {
        corpus::CorpusError::InvalidConfig(_) => AppError::Config(e.to_string()),
        other => AppError::Data(other.to_string()),
    }
}

fn parse_cutoffs(text: &str) -> Result<Vec<usize>, AppError> {
    let mut ks = Vec::new();
    for part in text.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| AppError::Config(format!("--k: bad cutoff {part:?}")))?;
        if k == 0 {
            return Err(AppError::Config("--k: cutoffs must be positive".into()));
        }
        ks.push(k);
    }
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(AppError::Config("--k: no cutoffs given".into()));
    }
    Ok(ks)
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?}")))
        .collect()
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>, String> {
    text.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad seed {p:?}")))
        .collect()
}
