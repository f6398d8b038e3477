//! One function per pipeline stage. Each reads its inputs from files and
//! writes its outputs to files; inputs are never modified.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use instyle_core::embed::{iemb, EmbeddingSet};
use instyle_core::evaluator::{self, RetrievalReport};
use instyle_core::matcher::{match_exclusive, MatchConfig, PseudoPairSet};
use instyle_core::styler::{self, GeneratedPairSet, RetentionRow, StyleFit};
use instyle_core::synth::{self, SynthConfig};
use instyle_core::trainer::{self, AdapterModel, LossRecord, StyleData, TrainConfig};

use crate::config::require_file;
use crate::{log, CliError};

pub fn load_set(path: &Path, stage: &'static str) -> Result<EmbeddingSet, CliError> {
    require_file(path)?;
    iemb::load_embeddings(path).map_err(|e| CliError::stage(stage, e))
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

pub fn synth(config: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let data = synth::generate(config).map_err(|e| CliError::stage("synth", e))?;
    let files = data
        .write_to(out_dir)
        .map_err(|e| CliError::stage("synth", e))?;
    log(
        "synth",
        &[
            ("styles", config.n_styles.to_string()),
            ("pool", data.pool.len().to_string()),
            ("test_pairs", data.truth.len().to_string()),
            ("seed", config.seed.to_string()),
        ],
    );
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct MatchArgs {
    pub queries: PathBuf,
    pub pool: PathBuf,
    pub out: PathBuf,
    pub config: MatchConfig,
}

pub fn match_pairs(args: &MatchArgs) -> Result<PseudoPairSet, CliError> {
    let queries = load_set(&args.queries, "match")?;
    let pool = load_set(&args.pool, "match")?;
    let pairs = match_exclusive(&queries, &pool, &args.config)
        .map_err(|e| CliError::stage("match", e))?
        .tagged(file_label(&args.queries), file_label(&args.pool));
    pairs
        .write_jsonl(&args.out)
        .map_err(|e| CliError::stage("match", e))?;
    let mean_sim = pairs.pairs.iter().map(|p| p.sim).sum::<f64>() / pairs.len().max(1) as f64;
    log(
        "match",
        &[
            ("queries", queries.len().to_string()),
            ("pairs", pairs.len().to_string()),
            ("rescans", pairs.rescans.to_string()),
            ("mean_sim", format!("{mean_sim:.4}")),
        ],
    );
    Ok(pairs)
}

#[derive(Debug, Clone)]
pub struct StylizeArgs {
    pub pairs: PathBuf,
    pub queries: PathBuf,
    pub pool: PathBuf,
    pub style_out: PathBuf,
    pub styled_out: PathBuf,
    pub tag: String,
    pub ridge_lambda: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Fits the style transform on pseudo pairs and renders a styled caption
/// for every pool clip.
pub fn stylize(args: &StylizeArgs) -> Result<StyleFit, CliError> {
    require_file(&args.pairs)?;
    let pseudo =
        PseudoPairSet::read_jsonl(&args.pairs).map_err(|e| CliError::stage("stylize", e))?;
    let queries = load_set(&args.queries, "stylize")?;
    let pool = load_set(&args.pool, "stylize")?;
    let mut fit = styler::fit_style(&pseudo, &queries, &pool, args.ridge_lambda)
        .map_err(|e| CliError::stage("stylize", e))?;
    fit.transform = fit
        .transform
        .with_noise(args.noise_sigma)
        .with_tag(args.tag.clone());
    fit.transform
        .save(&args.style_out)
        .map_err(|e| CliError::stage("stylize", e))?;
    let styled = styler::generate_styled(&pool, &fit.transform, args.seed)
        .map_err(|e| CliError::stage("stylize", e))?;
    iemb::save_embeddings(&args.styled_out, &styled).map_err(|e| CliError::stage("stylize", e))?;
    log(
        "stylize",
        &[
            ("tag", args.tag.clone()),
            ("pairs", fit.pair_count.to_string()),
            ("residual_rms", format!("{:.4}", fit.residual_rms)),
            (
                "weight_norm",
                format!("{:.4}", fit.transform.frobenius_norm()),
            ),
        ],
    );
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct FilterArgs {
    pub styled: PathBuf,
    pub pool: PathBuf,
    pub out: PathBuf,
    pub threshold: f64,
    pub tag: String,
}

/// Keeps styled pairs above the threshold. An empty result is written and
/// reported as a warning, not an error.
pub fn filter(args: &FilterArgs) -> Result<GeneratedPairSet, CliError> {
    let styled = load_set(&args.styled, "filter")?;
    let pool = load_set(&args.pool, "filter")?;
    let kept = styler::filter_pairs(&styled, &pool, args.threshold, &args.tag)
        .map_err(|e| CliError::stage("filter", e))?;
    kept.write_jsonl(&args.out)
        .map_err(|e| CliError::stage("filter", e))?;
    log(
        "filter",
        &[
            ("tag", args.tag.clone()),
            ("threshold", args.threshold.to_string()),
            ("retained", kept.len().to_string()),
            ("rate", format!("{:.4}", kept.retention_rate())),
        ],
    );
    if kept.is_empty() {
        log(
            "filter",
            &[
                ("warning", "empty_generated_pair_set".into()),
                ("tag", args.tag.clone()),
            ],
        );
    }
    Ok(kept)
}

#[derive(Debug, Clone)]
pub struct TrainInput {
    pub pairs: PathBuf,
    pub styled: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub inputs: Vec<TrainInput>,
    pub pool: PathBuf,
    pub out: PathBuf,
    pub loss_log: Option<PathBuf>,
    pub temperature: f64,
    pub config: TrainConfig,
}

/// Trains identity-initialised heads on the generated pairs of every input.
pub fn train(args: &TrainArgs) -> Result<(AdapterModel, Vec<LossRecord>), CliError> {
    if args.inputs.is_empty() {
        return Err(CliError::Usage(
            "train needs at least one generated pair set".into(),
        ));
    }
    let pool = load_set(&args.pool, "train")?;
    let mut sets = Vec::with_capacity(args.inputs.len());
    let mut texts = Vec::with_capacity(args.inputs.len());
    for input in &args.inputs {
        require_file(&input.pairs)?;
        sets.push(
            GeneratedPairSet::read_jsonl(&input.pairs).map_err(|e| CliError::stage("train", e))?,
        );
        texts.push(load_set(&input.styled, "train")?);
    }
    if texts.iter().any(|t| t.dim() != pool.dim()) {
        return Err(CliError::Usage(
            "styled captions and clips must share a dimension".into(),
        ));
    }
    let data: Vec<StyleData<'_>> = sets
        .iter()
        .zip(&texts)
        .map(|(pairs, texts)| StyleData {
            pairs,
            texts,
            videos: &pool,
        })
        .collect();
    let model = AdapterModel::identity(pool.dim(), args.temperature);
    let (model, losses) =
        trainer::fit(model, &data, &args.config).map_err(|e| CliError::stage("train", e))?;
    model
        .save(&args.out)
        .map_err(|e| CliError::stage("train", e))?;
    if let Some(path) = &args.loss_log {
        trainer::write_loss_log(path, &losses).map_err(|e| CliError::stage("train", e))?;
    }
    let epoch_len = losses.len() / args.config.epochs.max(1);
    let mean = |slice: &[LossRecord]| {
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len().max(1) as f64
    };
    log(
        "train",
        &[
            ("mode", args.config.mode.to_string()),
            ("steps", losses.len().to_string()),
            (
                "first_epoch_loss",
                format!("{:.4}", mean(&losses[..epoch_len.min(losses.len())])),
            ),
            (
                "last_epoch_loss",
                format!(
                    "{:.4}",
                    mean(&losses[losses.len().saturating_sub(epoch_len)..])
                ),
            ),
        ],
    );
    // evaluate what was written, not the unrounded in-memory weights
    Ok((model.rounded(), losses))
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub queries: PathBuf,
    pub gallery: PathBuf,
    pub truth: PathBuf,
    /// `None` evaluates zero-shot.
    pub adapter: Option<PathBuf>,
    /// Rank only against the clips that are ground truth for these queries.
    pub restrict_to_truth: bool,
    pub ranks_out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<RetrievalReport, CliError> {
    let queries = load_set(&args.queries, "eval")?;
    let gallery = load_set(&args.gallery, "eval")?;
    require_file(&args.truth)?;
    let (_, records) = synth::read_truth(&args.truth).map_err(|e| CliError::stage("eval", e))?;
    let wanted: BTreeSet<u64> = queries.ids().iter().copied().collect();
    let truth: BTreeMap<u64, u64> = records
        .iter()
        .filter(|r| wanted.contains(&r.text_id))
        .map(|r| (r.text_id, r.clip_id))
        .collect();
    let gallery = if args.restrict_to_truth {
        let ids: Vec<u64> = truth.values().copied().collect();
        gallery
            .select(&ids)
            .map_err(|e| CliError::stage("eval", e))?
    } else {
        gallery
    };
    let model = match &args.adapter {
        Some(path) => {
            require_file(path)?;
            Some(AdapterModel::load(path).map_err(|e| CliError::stage("eval", e))?)
        }
        None => None,
    };
    let ranks = evaluator::rank_queries(model.as_ref(), &queries, &gallery, &truth)
        .map_err(|e| CliError::stage("eval", e))?;
    if let Some(path) = &args.ranks_out {
        evaluator::write_ranks_csv(path, queries.ids(), &ranks)
            .map_err(|e| CliError::stage("eval", e))?;
    }
    let report = evaluator::report(&ranks).map_err(|e| CliError::stage("eval", e))?;
    log(
        "eval",
        &[
            ("queries", file_label(&args.queries)),
            (
                "adapter",
                args.adapter
                    .as_deref()
                    .map_or_else(|| "zero-shot".into(), file_label),
            ),
            ("gallery", gallery.len().to_string()),
            ("r1", format!("{:.2}", report.r1)),
            ("median_rank", report.median_rank.to_string()),
        ],
    );
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub styled: PathBuf,
    pub pool: PathBuf,
    pub thresholds: Vec<f64>,
}

pub fn sweep(args: &SweepArgs) -> Result<Vec<RetentionRow>, CliError> {
    let styled = load_set(&args.styled, "sweep")?;
    let pool = load_set(&args.pool, "sweep")?;
    let mut thresholds = args.thresholds.clone();
    thresholds.sort_by(f64::total_cmp);
    styler::threshold_sweep(&styled, &pool, &thresholds).map_err(|e| CliError::stage("sweep", e))
}
