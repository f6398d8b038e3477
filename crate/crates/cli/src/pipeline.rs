//! synth-or-load → match → stylize → filter → train → eval, with a
//! side-by-side report of the zero-shot baseline and each training schedule.

use std::collections::BTreeMap;
use std::path::Path;

use instyle_core::evaluator::RetrievalReport;
use instyle_core::trainer::{LossRecord, ScheduleMode};
use serde::{Deserialize, Serialize};

use crate::commands::{self, EvalArgs, FilterArgs, MatchArgs, StylizeArgs, TrainArgs, TrainInput};
use crate::config::{style_seed, DataPaths, PipelineConfig};
use crate::{log, CliError};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub pseudo: usize,
    pub generated: usize,
    pub pool: usize,
    pub retention_rate: f64,
    pub style_residual_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub query_count: usize,
}

impl From<&RetrievalReport> for Summary {
    fn from(r: &RetrievalReport) -> Self {
        Self {
            r1: r.r1,
            r5: r.r5,
            r10: r.r10,
            median_rank: r.median_rank,
            query_count: r.query_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// Retrieval results for one model. `per_style` ranks each style's test
/// captions against that style's own test clips; `shared_gallery` ranks them
/// against the test clips of every style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub per_style: BTreeMap<String, Summary>,
    pub mean_r1: f64,
    pub mean_r5: f64,
    pub mean_r10: f64,
    pub mean_median_rank: f64,
    pub shared_gallery: BTreeMap<String, Summary>,
    pub shared_gallery_mean_r1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub n_styles: usize,
    pub threshold: f64,
    pub pairs: BTreeMap<String, PairCounts>,
    pub zero_shot: Section,
    pub in_style: Section,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed: Option<Section>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

fn evaluate_section(
    data: &DataPaths,
    adapter: Option<&Path>,
    out_dir: &Path,
    label: &str,
) -> Result<Section, CliError> {
    let mut per_style = BTreeMap::new();
    let mut shared_gallery = BTreeMap::new();
    for style in &data.styles {
        let args = EvalArgs {
            queries: style.test_texts.clone(),
            gallery: data.test_clips.clone(),
            truth: data.truth.clone(),
            adapter: adapter.map(Path::to_path_buf),
            restrict_to_truth: true,
            ranks_out: Some(out_dir.join(format!("ranks_{label}_{}.csv", style.tag))),
        };
        per_style.insert(style.tag.clone(), Summary::from(&commands::eval(&args)?));
        let shared = EvalArgs {
            restrict_to_truth: false,
            ranks_out: None,
            ..args
        };
        shared_gallery.insert(style.tag.clone(), Summary::from(&commands::eval(&shared)?));
    }
    Ok(Section {
        mean_r1: mean(per_style.values().map(|s| s.r1)),
        mean_r5: mean(per_style.values().map(|s| s.r5)),
        mean_r10: mean(per_style.values().map(|s| s.r10)),
        mean_median_rank: mean(per_style.values().map(|s| s.median_rank)),
        shared_gallery_mean_r1: mean(shared_gallery.values().map(|s| s.r1)),
        per_style,
        shared_gallery,
        training: None,
    })
}

fn training_summary(losses: &[LossRecord], epochs: usize) -> TrainingSummary {
    let epoch_len = (losses.len() / epochs.max(1)).max(1).min(losses.len());
    TrainingSummary {
        steps: losses.len(),
        first_epoch_loss: mean(losses[..epoch_len].iter().map(|r| r.loss)),
        last_epoch_loss: mean(losses[losses.len() - epoch_len..].iter().map(|r| r.loss)),
    }
}

fn mode_label(mode: ScheduleMode) -> &'static str {
    match mode {
        ScheduleMode::InStyle => "in_style",
        ScheduleMode::Mixed => "mixed",
    }
}

/// Runs every stage into `cfg.out_dir` and writes `report.json` there.
pub fn run(cfg: &PipelineConfig) -> Result<PipelineReport, CliError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
    let data = match &cfg.data {
        Some(paths) => {
            paths.check_exist()?;
            paths.clone()
        }
        None => {
            let dir = out.join("data");
            commands::synth(&cfg.synth_config(), &dir)?;
            DataPaths::from_dir(&dir)?
        }
    };
    if data.styles.is_empty() {
        return Err(CliError::Usage("data set has no styles".into()));
    }

    let mut pairs = BTreeMap::new();
    let mut train_inputs = Vec::new();
    for (index, style) in data.styles.iter().enumerate() {
        let tag = &style.tag;
        let pseudo_path = out.join(format!("{tag}_pseudo_pairs.jsonl"));
        let styled_path = out.join(format!("{tag}_styled.iemb"));
        let generated_path = out.join(format!("{tag}_generated_pairs.jsonl"));
        let pseudo = commands::match_pairs(&MatchArgs {
            queries: style.queries.clone(),
            pool: data.pool.clone(),
            out: pseudo_path.clone(),
            config: cfg.match_config(),
        })?;
        let fit = commands::stylize(&StylizeArgs {
            pairs: pseudo_path,
            queries: style.queries.clone(),
            pool: data.pool.clone(),
            style_out: out.join(format!("{tag}_style.iemb")),
            styled_out: styled_path.clone(),
            tag: tag.clone(),
            ridge_lambda: cfg.ridge_lambda,
            noise_sigma: cfg.noise_sigma,
            seed: style_seed(cfg.seed, index),
        })?;
        let generated = commands::filter(&FilterArgs {
            styled: styled_path.clone(),
            pool: data.pool.clone(),
            out: generated_path.clone(),
            threshold: cfg.threshold,
            tag: tag.clone(),
        })?;
        pairs.insert(
            tag.clone(),
            PairCounts {
                pseudo: pseudo.len(),
                generated: generated.len(),
                pool: generated.pool_count,
                retention_rate: generated.retention_rate(),
                style_residual_rms: fit.residual_rms,
            },
        );
        train_inputs.push(TrainInput {
            pairs: generated_path,
            styled: styled_path,
        });
    }

    let zero_shot = evaluate_section(&data, None, &out, "zero_shot")?;
    let mut modes = vec![ScheduleMode::InStyle];
    if data.styles.len() > 1 {
        modes.push(ScheduleMode::Mixed);
    }
    let mut trained = BTreeMap::new();
    for mode in modes {
        let label = mode_label(mode);
        let adapter = out.join(format!("adapter_{label}.iemb"));
        let (_, losses) = commands::train(&TrainArgs {
            inputs: train_inputs.clone(),
            pool: data.pool.clone(),
            out: adapter.clone(),
            loss_log: Some(out.join(format!("loss_{label}.csv"))),
            temperature: cfg.temperature,
            config: cfg.train_config(mode),
        })?;
        let mut section = evaluate_section(&data, Some(&adapter), &out, label)?;
        section.training = Some(training_summary(&losses, cfg.epochs));
        trained.insert(label, section);
    }

    let report = PipelineReport {
        seed: cfg.seed,
        n_styles: data.styles.len(),
        threshold: cfg.threshold,
        pairs,
        zero_shot,
        in_style: trained
            .remove("in_style")
            .expect("in-style run always happens"),
        mixed: trained.remove("mixed"),
    };
    write_report(&out.join(REPORT_FILE), &report)?;
    let mut fields = vec![
        ("zero_shot_r1", format!("{:.2}", report.zero_shot.mean_r1)),
        ("in_style_r1", format!("{:.2}", report.in_style.mean_r1)),
    ];
    if let Some(mixed) = &report.mixed {
        fields.push(("mixed_r1", format!("{:.2}", mixed.mean_r1)));
    }
    log("pipeline", &fields);
    Ok(report)
}

pub fn write_report(path: &Path, report: &PipelineReport) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::stage("pipeline", e))
}
