//! Caption-style transfer in embedding space.
//!
//! A captioner adapted on pseudo pairs is stood in for by an affine map from
//! clip embeddings to caption embeddings, fitted by ridge regression. The map
//! renders one styled caption embedding per pool clip; a judge-space
//! similarity threshold then decides which (caption, clip) pairs are kept.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::iemb::{self, Chunk, ChunkReader, ChunkWriter};
use crate::embed::{self, dot, EmbedError, EmbeddingSet};
use crate::jsonl::{self, JsonlError};
use crate::matcher::PseudoPairSet;

/// Default judge-space filtering threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.28;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-2;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
pub const STYLE_CHUNK: [u8; 4] = *b"STYL";

/// Smallest Cholesky pivot, relative to the largest Gram diagonal entry,
/// accepted before the system is declared singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StyleError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("SingularSystem: normal equations are rank deficient (lambda = {0})")]
    SingularSystem(f64),
    #[error("DimMismatch: {0}")]
    DimMismatch(String),
    #[error("CountMismatch: {styled} styled rows vs {clips} clips")]
    CountMismatch { styled: usize, clips: usize },
    #[error("IdMismatch: styled row {index} has id {styled}, clip row has {clip}")]
    IdMismatch {
        index: usize,
        styled: u64,
        clip: u64,
    },
    #[error("EmptyPairs: no pseudo pairs to fit")]
    EmptyPairs,
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
    #[error("ThresholdsUnsorted")]
    ThresholdsUnsorted,
}

/// Affine map `t ≈ W·v + b` from clip space (`dim_in`) to caption space
/// (`dim_out`). `noise_sigma` is the std of the isotropic Gaussian added when
/// rendering captions.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransform {
    pub dim_in: usize,
    pub dim_out: usize,
    /// `dim_out × dim_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub ridge_lambda: f64,
    pub noise_sigma: f64,
    pub style_tag: String,
}

impl StyleTransform {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            dim_in: dim,
            dim_out: dim,
            weights,
            bias: vec![0.0; dim],
            ridge_lambda: 0.0,
            noise_sigma: 0.0,
            style_tag: String::new(),
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.style_tag = tag.into();
        self
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// `W·v + b` in `f64`.
    pub fn apply(&self, v: &[f32]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim_in)
            .zip(&self.bias)
            .map(|(row, b)| {
                row.iter()
                    .zip(v)
                    .fold(0.0, |acc, (w, x)| acc + w * f64::from(*x))
                    + b
            })
            .collect()
    }

    fn check(&self) -> Result<(), StyleError> {
        if self.weights.len() != self.dim_in * self.dim_out || self.bias.len() != self.dim_out {
            return Err(StyleError::DimMismatch(
                "weight or bias shape does not match dims".into(),
            ));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(StyleError::InvalidParameter("non-finite weights".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.ridge_lambda >= 0.0) {
            return Err(StyleError::InvalidParameter(
                "lambda and sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn to_chunk(&self) -> Chunk {
        let mut w = ChunkWriter::default();
        w.u32(self.dim_out as u32)
            .u32(self.dim_in as u32)
            .f64(self.ridge_lambda)
            .f64(self.noise_sigma)
            .string(&self.style_tag)
            .f64s(&self.weights)
            .f64s(&self.bias);
        w.into_chunk(STYLE_CHUNK)
    }

    pub fn from_chunk(chunk: &Chunk) -> Result<Self, StyleError> {
        let mut r = ChunkReader::new(&chunk.payload);
        let dim_out = r.u32()? as usize;
        let dim_in = r.u32()? as usize;
        let ridge_lambda = r.f64()?;
        let noise_sigma = r.f64()?;
        let style_tag = r.string()?;
        let weights = r.f64s(dim_out * dim_in)?;
        let bias = r.f64s(dim_out)?;
        r.finish()?;
        let style = Self {
            dim_in,
            dim_out,
            weights,
            bias,
            ridge_lambda,
            noise_sigma,
            style_tag,
        };
        style.check()?;
        Ok(style)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StyleError> {
        let empty = EmbeddingSet::new(Vec::new(), self.dim_out.max(1), Vec::new())?;
        iemb::save_container(path, &empty, &[self.to_chunk()])?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StyleError> {
        let (_, chunks) = iemb::load_container(path)?;
        Self::from_chunk(iemb::find_chunk(&chunks, &STYLE_CHUNK)?)
    }
}

/// A fitted transform plus its training residual.
#[derive(Debug, Clone)]
pub struct StyleFit {
    pub transform: StyleTransform,
    /// Root mean squared residual norm `‖W·v + b − t‖` over the pairs.
    pub residual_rms: f64,
    pub pair_count: usize,
}

/// Fits `(W, b)` minimising `Σ‖W·v + b − t‖² + λ‖W‖²_F` over the pseudo pairs
/// (the bias is not penalised).
///
/// The normal equations of the augmented design `[v, 1]` are solved by
/// Cholesky in `f64`.
pub fn fit_style(
    pseudo: &PseudoPairSet,
    queries: &EmbeddingSet,
    clips: &EmbeddingSet,
    ridge_lambda: f64,
) -> Result<StyleFit, StyleError> {
    if !(ridge_lambda >= 0.0) || !ridge_lambda.is_finite() {
        return Err(StyleError::InvalidParameter(format!(
            "ridge_lambda must be >= 0, got {ridge_lambda}"
        )));
    }
    if pseudo.pairs.is_empty() {
        return Err(StyleError::EmptyPairs);
    }
    let (dim_in, dim_out) = (clips.dim(), queries.dim());
    let aug = dim_in + 1;
    let mut gram = DMatrix::<f64>::zeros(aug, aug);
    let mut cross = DMatrix::<f64>::zeros(aug, dim_out);
    let mut x = DVector::<f64>::zeros(aug);
    let mut rows = Vec::with_capacity(pseudo.pairs.len());
    for pair in &pseudo.pairs {
        let qi = queries
            .index_of(pair.query_id)
            .ok_or(EmbedError::UnknownId(pair.query_id))?;
        let ci = clips
            .index_of(pair.clip_id)
            .ok_or(EmbedError::UnknownId(pair.clip_id))?;
        rows.push((qi, ci));
        for (slot, v) in x.iter_mut().zip(clips.row(ci)) {
            *slot = f64::from(*v);
        }
        x[dim_in] = 1.0;
        gram.ger(1.0, &x, &x, 1.0);
        let t = DVector::from_iterator(dim_out, queries.row(qi).iter().map(|&v| f64::from(v)));
        cross.ger(1.0, &x, &t, 1.0);
    }
    for i in 0..dim_in {
        gram[(i, i)] += ridge_lambda;
    }
    let max_diag = gram.diagonal().max();
    let chol = gram
        .cholesky()
        .ok_or(StyleError::SingularSystem(ridge_lambda))?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= PIVOT_TOLERANCE * max_diag {
        return Err(StyleError::SingularSystem(ridge_lambda));
    }
    let theta = chol.solve(&cross);

    let mut weights = vec![0.0; dim_out * dim_in];
    for o in 0..dim_out {
        for i in 0..dim_in {
            weights[o * dim_in + i] = theta[(i, o)];
        }
    }
    let bias: Vec<f64> = (0..dim_out).map(|o| theta[(dim_in, o)]).collect();
    let transform = StyleTransform {
        dim_in,
        dim_out,
        weights,
        bias,
        ridge_lambda,
        noise_sigma: 0.0,
        style_tag: pseudo.query_source.clone(),
    };
    transform.check()?;

    let sq: f64 = rows
        .iter()
        .map(|&(qi, ci)| {
            let pred = transform.apply(clips.row(ci));
            pred.iter()
                .zip(queries.row(qi))
                .map(|(p, t)| (p - f64::from(*t)).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(StyleFit {
        transform,
        residual_rms: (sq / rows.len() as f64).sqrt(),
        pair_count: rows.len(),
    })
}

/// Per-row generator: the stream is keyed by the clip id, so rows can be
/// produced in any order or in parallel with identical results.
fn row_rng(seed: u64, clip_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clip_id);
    rng
}

/// Renders `normalize(W·v + b + ε)` for every clip, `ε ~ N(0, σ²I)`.
pub fn generate_styled(
    clips: &EmbeddingSet,
    style: &StyleTransform,
    seed: u64,
) -> Result<EmbeddingSet, StyleError> {
    style.check()?;
    if style.dim_in != clips.dim() {
        return Err(StyleError::DimMismatch(format!(
            "style expects dim {}, clips have {}",
            style.dim_in,
            clips.dim()
        )));
    }
    let dim = style.dim_out;
    let mut data = vec![0.0f32; clips.len() * dim];
    let failures: Vec<u64> = data
        .par_chunks_mut(dim)
        .zip(clips.ids().par_iter())
        .enumerate()
        .filter_map(|(i, (out, &id))| {
            let mut row = style.apply(clips.row(i));
            if style.noise_sigma > 0.0 {
                let mut rng = row_rng(seed, id);
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += style.noise_sigma * z;
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Some(id);
            }
            for (o, v) in out.iter_mut().zip(&row) {
                *o = (v / norm) as f32;
            }
            None
        })
        .collect();
    if let Some(&id) = failures.first() {
        return Err(EmbedError::ZeroVectorRow(id).into());
    }
    Ok(EmbeddingSet::with_flag(
        clips.ids().to_vec(),
        dim,
        data,
        true,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPair {
    pub clip_id: u64,
    /// Row index shared by the styled set and the clip set.
    pub row: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPairHeader {
    pub style_tag: String,
    pub threshold: f64,
    pub pool_count: usize,
    pub retained: usize,
}

/// Styled-caption/clip pairs that passed the judge threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPairSet {
    pub style_tag: String,
    pub threshold: f64,
    pub pool_count: usize,
    pub pairs: Vec<GeneratedPair>,
}

impl GeneratedPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn retention_rate(&self) -> f64 {
        if self.pool_count == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / self.pool_count as f64
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), StyleError> {
        let header = GeneratedPairHeader {
            style_tag: self.style_tag.clone(),
            threshold: self.threshold,
            pool_count: self.pool_count,
            retained: self.pairs.len(),
        };
        jsonl::write(path, &header, &self.pairs)?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, StyleError> {
        let (header, pairs): (GeneratedPairHeader, Vec<GeneratedPair>) = jsonl::read(path)?;
        Ok(Self {
            style_tag: header.style_tag,
            threshold: header.threshold,
            pool_count: header.pool_count,
            pairs,
        })
    }
}

fn pair_sims(styled: &EmbeddingSet, clips: &EmbeddingSet) -> Result<Vec<f64>, StyleError> {
    embed::check_pair(styled, clips)?;
    if styled.len() != clips.len() {
        return Err(StyleError::CountMismatch {
            styled: styled.len(),
            clips: clips.len(),
        });
    }
    if let Some(index) = styled
        .ids()
        .iter()
        .zip(clips.ids())
        .position(|(a, b)| a != b)
    {
        return Err(StyleError::IdMismatch {
            index,
            styled: styled.ids()[index],
            clip: clips.ids()[index],
        });
    }
    Ok((0..styled.len())
        .into_par_iter()
        .map(|i| dot(styled.row(i), clips.row(i)))
        .collect())
}

/// Keeps pair `i` iff `sim(styled_i, clip_i) > threshold` (strict).
pub fn filter_pairs(
    styled: &EmbeddingSet,
    clips: &EmbeddingSet,
    threshold: f64,
    style_tag: &str,
) -> Result<GeneratedPairSet, StyleError> {
    let sims = pair_sims(styled, clips)?;
    let pairs = sims
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(row, &sim)| GeneratedPair {
            clip_id: clips.ids()[row],
            row,
            sim,
        })
        .collect();
    Ok(GeneratedPairSet {
        style_tag: style_tag.to_string(),
        threshold,
        pool_count: clips.len(),
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub threshold: f64,
    pub retained: usize,
    pub rate: f64,
}

/// Retained-pair counts for each threshold (ascending).
pub fn threshold_sweep(
    styled: &EmbeddingSet,
    clips: &EmbeddingSet,
    thresholds: &[f64],
) -> Result<Vec<RetentionRow>, StyleError> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(StyleError::ThresholdsUnsorted);
    }
    let mut sims = pair_sims(styled, clips)?;
    sims.sort_unstable_by(f64::total_cmp);
    let total = sims.len();
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            // count of sims strictly above the threshold
            let at_or_below = sims.partition_point(|&s| s <= threshold);
            let retained = total - at_or_below;
            let rate = if total == 0 {
                0.0
            } else {
                retained as f64 / total as f64
            };
            RetentionRow {
                threshold,
                retained,
                rate,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::normalize;
    use crate::matcher::{MatchOrder, PseudoPair};
    use rand::Rng;

    fn unit(ids: Vec<u64>, rows: &[Vec<f32>]) -> EmbeddingSet {
        normalize(&EmbeddingSet::from_rows(ids, rows).unwrap()).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn identity_pairs(n: usize) -> PseudoPairSet {
        PseudoPairSet {
            query_source: "q".into(),
            clip_source: "c".into(),
            order: MatchOrder::IdOrder,
            pairs: (0..n as u64)
                .map(|i| PseudoPair {
                    query_id: i,
                    clip_id: i,
                    sim: 0.0,
                })
                .collect(),
            rescans: 0,
        }
    }

    /// Independent route: centre both sides, then solve
    /// `(VcᵀVc + λI) Wᵀ = VcᵀTc` by Gauss-Jordan elimination with partial
    /// pivoting, and recover `b = t̄ − W v̄`.
    fn centered_ridge(v: &[Vec<f64>], t: &[Vec<f64>], lambda: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = v.len() as f64;
        let (di, d_out) = (v[0].len(), t[0].len());
        let vbar: Vec<f64> = (0..di)
            .map(|k| v.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        let tbar: Vec<f64> = (0..d_out)
            .map(|k| t.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        let mut a = vec![vec![0.0; di + d_out]; di];
        for (vr, tr) in v.iter().zip(t) {
            for i in 0..di {
                for j in 0..di {
                    a[i][j] += (vr[i] - vbar[i]) * (vr[j] - vbar[j]);
                }
                for o in 0..d_out {
                    a[i][di + o] += (vr[i] - vbar[i]) * (tr[o] - tbar[o]);
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        for col in 0..di {
            let pivot = (col..di)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for k in 0..di + d_out {
                a[col][k] /= p;
            }
            for r in 0..di {
                if r != col {
                    let f = a[r][col];
                    for k in 0..di + d_out {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let w: Vec<Vec<f64>> = (0..d_out)
            .map(|o| (0..di).map(|i| a[i][di + o]).collect())
            .collect();
        let b = (0..d_out)
            .map(|o| tbar[o] - (0..di).map(|i| w[o][i] * vbar[i]).sum::<f64>())
            .collect();
        (w, b)
    }

    #[test]
    fn recovers_identity_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = random_rows(&mut rng, 12, 4);
        let clips = unit((0..12).collect(), &rows);
        let neg: Vec<Vec<f32>> = clips
            .rows()
            .map(|r| r.iter().map(|v| -v).collect())
            .collect();
        let negated = EmbeddingSet::with_flag((0..12).collect(), 4, neg.concat(), true).unwrap();

        for (targets, sign) in [(&clips, 1.0), (&negated, -1.0)] {
            let fit = fit_style(&identity_pairs(12), targets, &clips, 0.0).unwrap();
            let w = &fit.transform.weights;
            for o in 0..4 {
                for i in 0..4 {
                    let expected = if o == i { sign } else { 0.0 };
                    assert!(
                        (w[o * 4 + i] - expected).abs() < 1e-6,
                        "W[{o},{i}] = {}",
                        w[o * 4 + i]
                    );
                }
                assert!(fit.transform.bias[o].abs() < 1e-6);
            }
            assert!(fit.residual_rms < 1e-6);
        }
    }

    #[test]
    fn matches_centered_oracle_with_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clips = unit((0..40).collect(), &random_rows(&mut rng, 40, 5));
        let queries = unit((0..40).collect(), &random_rows(&mut rng, 40, 3));
        let fit = fit_style(&identity_pairs(40), &queries, &clips, 0.1).unwrap();
        let v: Vec<Vec<f64>> = clips
            .rows()
            .map(|r| r.iter().map(|&x| f64::from(x)).collect())
            .collect();
        let t: Vec<Vec<f64>> = queries
            .rows()
            .map(|r| r.iter().map(|&x| f64::from(x)).collect())
            .collect();
        let (w, b) = centered_ridge(&v, &t, 0.1);
        assert_eq!((fit.transform.dim_out, fit.transform.dim_in), (3, 5));
        for o in 0..3 {
            for i in 0..5 {
                assert!((fit.transform.weights[o * 5 + i] - w[o][i]).abs() < 1e-5);
            }
            assert!((fit.transform.bias[o] - b[o]).abs() < 1e-5);
        }
    }

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 3 pairs in 6 dims cannot determine W
        let clips = unit((0..3).collect(), &random_rows(&mut rng, 3, 6));
        let queries = unit((0..3).collect(), &random_rows(&mut rng, 3, 6));
        assert!(matches!(
            fit_style(&identity_pairs(3), &queries, &clips, 0.0),
            Err(StyleError::SingularSystem(_))
        ));
        assert!(fit_style(&identity_pairs(3), &queries, &clips, 0.5).is_ok());
    }

    #[test]
    fn larger_ridge_shrinks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clips = unit((0..30).collect(), &random_rows(&mut rng, 30, 4));
        let queries = unit((0..30).collect(), &random_rows(&mut rng, 30, 4));
        let norms: Vec<f64> = [0.1, 10.0, 1000.0]
            .iter()
            .map(|&l| {
                fit_style(&identity_pairs(30), &queries, &clips, l)
                    .unwrap()
                    .transform
                    .frobenius_norm()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
        assert!(norms[2] < 0.05);
    }

    #[test]
    fn generate_identity_without_noise_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clips = unit((0..6).collect(), &random_rows(&mut rng, 6, 3));
        let out = generate_styled(&clips, &StyleTransform::identity(3), 9).unwrap();
        for (a, b) in out.rows().zip(clips.rows()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-7);
            }
        }
        assert_eq!(out.ids(), clips.ids());
    }

    #[test]
    fn generate_is_deterministic_and_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clips = unit((0..50).collect(), &random_rows(&mut rng, 50, 4));
        let style = StyleTransform::identity(4).with_noise(0.3);
        let a = generate_styled(&clips, &style, 17).unwrap();
        let b = generate_styled(&clips, &style, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_styled(&clips, &style, 18).unwrap());
        for row in a.rows() {
            assert!((crate::embed::l2_norm(row) - 1.0).abs() < 1e-5);
        }
        // rows depend only on their own clip id, not on what else is in the set
        let sub = clips.select(&[3, 40]).unwrap();
        let c = generate_styled(&sub, &style, 17).unwrap();
        assert_eq!(c.row(1), a.row(40));
    }

    #[test]
    fn generate_random_affine_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clips = unit((0..10).collect(), &random_rows(&mut rng, 10, 4));
        let style = StyleTransform {
            dim_in: 4,
            dim_out: 3,
            weights: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
            ridge_lambda: 0.0,
            noise_sigma: 0.0,
            style_tag: "s".into(),
        };
        let out = generate_styled(&clips, &style, 0).unwrap();
        for (i, v) in clips.rows().enumerate() {
            let mut t = [0.0f64; 3];
            for o in 0..3 {
                t[o] = style.bias[o];
                for k in 0..4 {
                    t[o] += style.weights[o * 4 + k] * f64::from(v[k]);
                }
            }
            let n = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            for o in 0..3 {
                assert!((f64::from(out.row(i)[o]) - t[o] / n).abs() < 1e-6);
            }
        }
        let wrong = StyleTransform::identity(5);
        assert!(matches!(
            generate_styled(&clips, &wrong, 0),
            Err(StyleError::DimMismatch(_))
        ));
    }

    /// Styled rows whose similarity with clip `[1, 0]` is exactly `sims[i]`.
    fn fixture(sims: &[f64]) -> (EmbeddingSet, EmbeddingSet) {
        let n = sims.len();
        let clips =
            EmbeddingSet::with_flag((0..n as u64).collect(), 2, [1.0f32, 0.0].repeat(n), true)
                .unwrap();
        let styled: Vec<f32> = sims
            .iter()
            .flat_map(|&s| [s as f32, (1.0 - s * s).sqrt() as f32])
            .collect();
        (
            EmbeddingSet::with_flag((0..n as u64).collect(), 2, styled, true).unwrap(),
            clips,
        )
    }

    #[test]
    fn filter_is_strict() {
        let (styled, clips) = fixture(&[0.1, 0.30, 0.28]);
        // the stored 0.28 rounds to f32 slightly above 0.28; compare against that
        let boundary = f64::from(0.28f32);
        let kept = filter_pairs(&styled, &clips, boundary, "s").unwrap();
        assert_eq!(
            kept.pairs.iter().map(|p| p.clip_id).collect::<Vec<_>>(),
            vec![1]
        );
        assert!(kept.pairs.iter().all(|p| p.sim > boundary));
        assert_eq!(filter_pairs(&styled, &clips, -1.0, "s").unwrap().len(), 3);
        assert_eq!(kept.pool_count, 3);
    }

    #[test]
    fn filter_count_and_id_checks() {
        let (styled, clips) = fixture(&[0.5, 0.6]);
        let short = clips.select(&[0]).unwrap();
        assert!(matches!(
            filter_pairs(&styled, &short, 0.2, "s"),
            Err(StyleError::CountMismatch { .. })
        ));
        let shifted = EmbeddingSet::with_flag(vec![0, 5], 2, clips.data().to_vec(), true).unwrap();
        assert!(matches!(
            filter_pairs(&styled, &shifted, 0.2, "s"),
            Err(StyleError::IdMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn sweep_is_monotone_and_consistent_with_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sims: Vec<f64> = (0..400).map(|_| rng.random_range(0.15..0.45)).collect();
        let (styled, clips) = fixture(&sims);
        let grid = [0.26, 0.27, 0.28, 0.29, 0.30];
        let rows = threshold_sweep(&styled, &clips, &grid).unwrap();
        assert!(rows.windows(2).all(|w| w[0].retained >= w[1].retained));
        for row in &rows {
            let loop_count = (0..400)
                .filter(|&i| dot(styled.row(i), clips.row(i)) > row.threshold)
                .count();
            assert_eq!(row.retained, loop_count);
            assert_eq!(
                row.retained,
                filter_pairs(&styled, &clips, row.threshold, "s")
                    .unwrap()
                    .len()
            );
        }
        let low = threshold_sweep(&styled, &clips, &[-0.5]).unwrap();
        assert_eq!(low[0].retained, 400);
        assert!(matches!(
            threshold_sweep(&styled, &clips, &[0.3, 0.2]),
            Err(StyleError::ThresholdsUnsorted)
        ));
    }

    #[test]
    fn transform_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let style = StyleTransform {
            dim_in: 3,
            dim_out: 2,
            weights: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: vec![0.25, -0.5],
            ridge_lambda: 0.01,
            noise_sigma: 0.05,
            style_tag: "style0".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.iemb");
        style.save(&path).unwrap();
        assert_eq!(StyleTransform::load(&path).unwrap(), style);
    }

    #[test]
    fn generated_pairs_jsonl_round_trip() {
        let (styled, clips) = fixture(&[0.5, 0.1, 0.9]);
        let set = filter_pairs(&styled, &clips, 0.28, "style1").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.jsonl");
        set.write_jsonl(&path).unwrap();
        assert_eq!(GeneratedPairSet::read_jsonl(&path).unwrap(), set);
    }
}
