//! Text-to-video retrieval metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingSet};
use crate::trainer::AdapterModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("MissingTruth: query {0} has no ground-truth candidate")]
    MissingTruth(u64),
    #[error("UnknownCandidate: ground-truth candidate {0} is not in the gallery")]
    UnknownCandidate(u64),
    #[error("EmptyRanks")]
    EmptyRanks,
    #[error("DimMismatch: {0}")]
    DimMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub query_count: usize,
    pub per_query_ranks: Vec<usize>,
}

fn unit_f64(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    if norm > 0.0 {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        v
    }
}

fn embed_all(set: &EmbeddingSet, project: impl Fn(&[f32]) -> Vec<f64> + Sync) -> Vec<Vec<f64>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| unit_f64(project(set.row(i))))
        .collect()
}

/// Rank of each query's ground-truth candidate, in query storage order.
///
/// With a model, both sides go through their heads and are renormalized;
/// without one, the raw embeddings are renormalized and compared directly.
/// Rank is `1 + #{strictly more similar} + #{equally similar with smaller id}`.
pub fn rank_queries(
    model: Option<&AdapterModel>,
    queries: &EmbeddingSet,
    candidates: &EmbeddingSet,
    truth: &BTreeMap<u64, u64>,
) -> Result<Vec<usize>, EvalError> {
    let targets: Vec<usize> = queries
        .ids()
        .iter()
        .map(|&q| {
            let c = *truth.get(&q).ok_or(EvalError::MissingTruth(q))?;
            candidates.index_of(c).ok_or(EvalError::UnknownCandidate(c))
        })
        .collect::<Result<_, _>>()?;
    let (q, c) = match model {
        Some(m) => {
            if m.text_dim != queries.dim() || m.video_dim != candidates.dim() {
                return Err(EvalError::DimMismatch(format!(
                    "adapter expects ({}, {}), inputs are ({}, {})",
                    m.text_dim,
                    m.video_dim,
                    queries.dim(),
                    candidates.dim()
                )));
            }
            (
                embed_all(queries, |x| m.project_text(x)),
                embed_all(candidates, |x| m.project_video(x)),
            )
        }
        None => {
            if queries.dim() != candidates.dim() {
                return Err(EmbedError::DimMismatch {
                    left: queries.dim(),
                    right: candidates.dim(),
                }
                .into());
            }
            let widen = |x: &[f32]| x.iter().map(|&v| f64::from(v)).collect();
            (embed_all(queries, widen), embed_all(candidates, widen))
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y);
    let ids = candidates.ids();
    Ok(q.par_iter()
        .zip(targets.par_iter())
        .map(|(query, &t)| {
            let s_true = dot(query, &c[t]);
            let ahead = c
                .iter()
                .enumerate()
                .filter(|&(j, cand)| {
                    let s = dot(query, cand);
                    s > s_true || (s == s_true && ids[j] < ids[t])
                })
                .count();
            1 + ahead
        })
        .collect())
}

/// Recall at 1/5/10 (percent) and median rank, averaging the two middle
/// ranks for an even count.
pub fn report(ranks: &[usize]) -> Result<RetrievalReport, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    let n = ranks.len();
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let median_rank = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Ok(RetrievalReport {
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        median_rank,
        query_count: n,
        per_query_ranks: ranks.to_vec(),
    })
}

pub fn evaluate(
    model: Option<&AdapterModel>,
    queries: &EmbeddingSet,
    candidates: &EmbeddingSet,
    truth: &BTreeMap<u64, u64>,
) -> Result<RetrievalReport, EvalError> {
    report(&rank_queries(model, queries, candidates, truth)?)
}

/// `query_id,rank` per line.
pub fn write_ranks_csv(
    path: impl AsRef<Path>,
    query_ids: &[u64],
    ranks: &[usize],
) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "query_id,rank")?;
    for (id, rank) in query_ids.iter().zip(ranks) {
        writeln!(out, "{id},{rank}")?;
    }
    out.flush()?;
    Ok(())
}
