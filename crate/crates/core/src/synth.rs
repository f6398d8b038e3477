//! Seeded synthetic multi-style retrieval benchmark.
//!
//! Every item has a latent content vector drawn from a mixture of shared
//! clusters. A clip embeds the content plus video-channel noise; a caption of
//! style `s` embeds `A_s c + b_s` plus noise. Query contents favour a few
//! clusters per style while the clip pool draws from all clusters uniformly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{save_embeddings, EmbedError, EmbeddingSet};
use crate::jsonl::{self, JsonlError};

pub const QUERY_ID_BASE: u64 = 1_000_000;
pub const TEST_TEXT_ID_BASE: u64 = 2_000_000;
pub const TEST_CLIP_ID_BASE: u64 = 3_000_000;
/// Id stride between styles inside each id range.
pub const STYLE_ID_STRIDE: u64 = 100_000;

pub const POOL_FILE: &str = "pool.iemb";
pub const TEST_CLIPS_FILE: &str = "test_clips.iemb";
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_styles: usize,
    pub queries_per_style: usize,
    pub pool_size: usize,
    pub dim: usize,
    pub content_dim: usize,
    /// 0 leaves captions in the clip frame; 1 replaces it by a random one.
    pub style_strength: f64,
    pub cross_modal_noise: f64,
    pub seed: u64,
    /// Share of each style's items held out as test pairs.
    pub held_out_fraction: f64,
    pub n_clusters: usize,
    /// Spread of contents around their cluster center.
    pub cluster_spread: f64,
    /// How sharply each style's queries concentrate on a few clusters.
    pub query_concentration: f64,
    /// Noise vectors have RMS norm `noise_gain * cross_modal_noise`.
    pub noise_gain: f64,
    /// Norm of the style offset before scaling by `style_strength`.
    pub offset_norm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_styles: 2,
            queries_per_style: 512,
            pool_size: 8192,
            dim: 64,
            content_dim: 16,
            style_strength: 0.8,
            cross_modal_noise: 0.1,
            seed: 7,
            held_out_fraction: 0.25,
            n_clusters: 32,
            cluster_spread: 0.6,
            query_concentration: 3.0,
            noise_gain: 3.0,
            offset_norm: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn test_count(&self) -> usize {
        (self.held_out_fraction * self.queries_per_style as f64).round() as usize
    }

    pub fn style_tag(&self, style: usize) -> String {
        format!("style{style}")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::ConfigInvalid(msg));
        if self.n_styles == 0
            || self.queries_per_style == 0
            || self.dim == 0
            || self.content_dim == 0
        {
            return fail("styles, queries, dim and content_dim must be positive".into());
        }
        if self.content_dim > self.dim {
            return fail(format!(
                "content_dim {} exceeds dim {}",
                self.content_dim, self.dim
            ));
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return fail(format!(
                "held_out_fraction {} must be in (0, 1)",
                self.held_out_fraction
            ));
        }
        let test = self.test_count();
        if test == 0 || test >= self.queries_per_style {
            return fail(format!(
                "held_out_fraction {} leaves no test or no training queries",
                self.held_out_fraction
            ));
        }
        if self.pool_size < self.n_styles * self.queries_per_style {
            return fail(format!(
                "pool_size {} is below the total query count",
                self.pool_size
            ));
        }
        if !(0.0..=1.0).contains(&self.style_strength) {
            return fail(format!(
                "style_strength {} must be in [0, 1]",
                self.style_strength
            ));
        }
        if self.n_styles as u64 * STYLE_ID_STRIDE > QUERY_ID_BASE
            || self.queries_per_style as u64 > STYLE_ID_STRIDE
        {
            return fail("too many styles or queries for the id layout".into());
        }
        if self.n_clusters == 0 {
            return fail("n_clusters must be positive".into());
        }
        for (name, v) in [
            ("cross_modal_noise", self.cross_modal_noise),
            ("cluster_spread", self.cluster_spread),
            ("query_concentration", self.query_concentration),
            ("noise_gain", self.noise_gain),
            ("offset_norm", self.offset_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// One held-out pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub style: String,
    pub text_id: u64,
    pub clip_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthHeader {
    pub styles: Vec<String>,
    /// Present when the data set was generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SynthConfig>,
}

#[derive(Debug, Clone)]
pub struct SynthStyle {
    pub tag: String,
    /// Training queries (text only).
    pub queries: EmbeddingSet,
    pub test_texts: EmbeddingSet,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub styles: Vec<SynthStyle>,
    pub pool: EmbeddingSet,
    /// Held-out clips of every style, one shared gallery.
    pub test_clips: EmbeddingSet,
    pub truth: Vec<TruthRecord>,
}

impl SynthDataset {
    /// `text_id → clip_id` for one style's held-out pairs.
    pub fn truth_for(&self, tag: &str) -> BTreeMap<u64, u64> {
        truth_map(&self.truth, tag)
    }

    /// Writes `pool.iemb`, `test_clips.iemb`, `{tag}_queries.iemb`,
    /// `{tag}_test_texts.iemb` per style, and `truth.jsonl`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>, SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(EmbedError::from)?;
        let mut written = Vec::new();
        let mut save = |name: String, set: &EmbeddingSet| -> Result<(), SynthError> {
            let path = dir.join(name);
            save_embeddings(&path, set)?;
            written.push(path);
            Ok(())
        };
        save(POOL_FILE.into(), &self.pool)?;
        save(TEST_CLIPS_FILE.into(), &self.test_clips)?;
        for style in &self.styles {
            save(queries_file(&style.tag), &style.queries)?;
            save(test_texts_file(&style.tag), &style.test_texts)?;
        }
        let header = TruthHeader {
            styles: self.styles.iter().map(|s| s.tag.clone()).collect(),
            config: Some(self.config.clone()),
        };
        let truth_path = dir.join(TRUTH_FILE);
        jsonl::write(&truth_path, &header, &self.truth)?;
        written.push(truth_path);
        Ok(written)
    }
}

pub fn queries_file(tag: &str) -> String {
    format!("{tag}_queries.iemb")
}

pub fn test_texts_file(tag: &str) -> String {
    format!("{tag}_test_texts.iemb")
}

pub fn truth_map(truth: &[TruthRecord], tag: &str) -> BTreeMap<u64, u64> {
    truth
        .iter()
        .filter(|r| r.style == tag)
        .map(|r| (r.text_id, r.clip_id))
        .collect()
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<(TruthHeader, Vec<TruthRecord>), SynthError> {
    Ok(jsonl::read(path)?)
}

struct Style {
    /// `dim × content_dim`, row-major.
    map: Vec<f64>,
    offset: Vec<f64>,
    cluster_weights: WeightedIndex<f64>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    centers: Vec<Vec<f64>>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl Generator<'_> {
    fn gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn style(&mut self) -> Style {
        let (dim, cd) = (self.cfg.dim, self.cfg.content_dim);
        // random orthonormal columns by Gram-Schmidt
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cd);
        while columns.len() < cd {
            let mut v = self.gaussian(dim);
            for c in &columns {
                let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                columns.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let alpha = self.cfg.style_strength;
        let keep = (1.0 - alpha * alpha).sqrt();
        let mut map = vec![0.0; dim * cd];
        for r in 0..dim {
            for (k, col) in columns.iter().enumerate() {
                let identity = if r == k { keep } else { 0.0 };
                map[r * cd + k] = identity + alpha * col[r];
            }
        }
        let direction = unit(self.gaussian(dim));
        let offset = direction
            .iter()
            .map(|x| alpha * self.cfg.offset_norm * x)
            .collect();
        let logits = self.gaussian(self.cfg.n_clusters);
        let weights: Vec<f64> = logits
            .iter()
            .map(|g| (self.cfg.query_concentration * g).exp())
            .collect();
        let cluster_weights = WeightedIndex::new(weights).expect("positive finite weights");
        Style {
            map,
            offset,
            cluster_weights,
        }
    }

    fn content(&mut self, cluster: usize) -> Vec<f64> {
        let cd = self.cfg.content_dim;
        let scale = self.cfg.cluster_spread / (cd as f64).sqrt();
        let noise = self.gaussian(cd);
        unit(
            self.centers[cluster]
                .iter()
                .zip(noise)
                .map(|(m, z)| m + scale * z)
                .collect(),
        )
    }

    fn noise(&mut self) -> Vec<f64> {
        let scale = self.cfg.noise_gain * self.cfg.cross_modal_noise / (self.cfg.dim as f64).sqrt();
        self.gaussian(self.cfg.dim)
            .into_iter()
            .map(|z| scale * z)
            .collect()
    }

    fn clip(&mut self, content: &[f64]) -> Vec<f32> {
        let noise = self.noise();
        let mut v = noise;
        v.iter_mut().zip(content).for_each(|(x, c)| *x += c);
        to_f32(unit(v))
    }

    fn caption(&mut self, style: &Style, content: &[f64]) -> Vec<f32> {
        let cd = self.cfg.content_dim;
        let noise = self.noise();
        let v = (0..self.cfg.dim)
            .map(|r| {
                let mapped: f64 = style.map[r * cd..(r + 1) * cd]
                    .iter()
                    .zip(content)
                    .map(|(a, c)| a * c)
                    .sum();
                mapped + style.offset[r] + noise[r]
            })
            .collect();
        to_f32(unit(v))
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn set(ids: Vec<u64>, rows: Vec<Vec<f32>>, dim: usize) -> Result<EmbeddingSet, SynthError> {
    Ok(EmbeddingSet::with_flag(ids, dim, rows.concat(), true)?)
}

/// Builds the whole benchmark from `cfg.seed` on one generator stream.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let mut g = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        centers: Vec::new(),
    };
    g.centers = (0..cfg.n_clusters)
        .map(|_| unit(g.gaussian(cfg.content_dim)))
        .collect();
    let styles: Vec<Style> = (0..cfg.n_styles).map(|_| g.style()).collect();

    let mut pool_rows = Vec::with_capacity(cfg.pool_size);
    for _ in 0..cfg.pool_size {
        let cluster = g.rng.random_range(0..cfg.n_clusters);
        let content = g.content(cluster);
        pool_rows.push(g.clip(&content));
    }
    let pool = set((0..cfg.pool_size as u64).collect(), pool_rows, cfg.dim)?;

    let n_test = cfg.test_count();
    let mut out_styles = Vec::with_capacity(cfg.n_styles);
    let mut test_clip_ids = Vec::new();
    let mut test_clip_rows = Vec::new();
    let mut truth = Vec::new();
    for (s, style) in styles.iter().enumerate() {
        let tag = cfg.style_tag(s);
        let contents: Vec<Vec<f64>> = (0..cfg.queries_per_style)
            .map(|_| {
                let cluster = style.cluster_weights.sample(&mut g.rng);
                g.content(cluster)
            })
            .collect();
        let stride = s as u64 * STYLE_ID_STRIDE;
        let query_rows: Vec<Vec<f32>> = contents[n_test..]
            .iter()
            .map(|c| g.caption(style, c))
            .collect();
        let test_text_rows: Vec<Vec<f32>> = contents[..n_test]
            .iter()
            .map(|c| g.caption(style, c))
            .collect();
        for c in &contents[..n_test] {
            test_clip_rows.push(g.clip(c));
        }
        for i in 0..n_test as u64 {
            let clip_id = TEST_CLIP_ID_BASE + stride + i;
            test_clip_ids.push(clip_id);
            truth.push(TruthRecord {
                style: tag.clone(),
                text_id: TEST_TEXT_ID_BASE + stride + i,
                clip_id,
            });
        }
        let query_ids = (0..query_rows.len() as u64)
            .map(|i| QUERY_ID_BASE + stride + i)
            .collect();
        let test_ids = (0..n_test as u64)
            .map(|i| TEST_TEXT_ID_BASE + stride + i)
            .collect();
        out_styles.push(SynthStyle {
            tag,
            queries: set(query_ids, query_rows, cfg.dim)?,
            test_texts: set(test_ids, test_text_rows, cfg.dim)?,
        });
    }
    let test_clips = set(test_clip_ids, test_clip_rows, cfg.dim)?;
    Ok(SynthDataset {
        config: cfg.clone(),
        styles: out_styles,
        pool,
        test_clips,
        truth,
    })
}
