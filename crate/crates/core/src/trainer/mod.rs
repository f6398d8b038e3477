//! Linear adapter heads trained with a symmetric contrastive loss.
//!
//! The base embeddings stay frozen; only the text head `W_t` and the video
//! head `W_v` are learned. Projections are renormalized before similarity.

mod gradcheck;
mod loss;
mod schedule;

pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{info_nce_loss, Batch, LossOutput};
pub use schedule::{plan_epoch, Minibatch, PairRef, ScheduleMode, StyleBatchPlan, MIXED_TAG};

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::iemb::{self, Chunk, ChunkReader, ChunkWriter};
use crate::embed::{EmbedError, EmbeddingSet};
use crate::styler::GeneratedPairSet;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPOCHS: usize = 10;
pub const ADAPTER_CHUNK: [u8; 4] = *b"ADPT";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("CountMismatch: {texts} texts vs {videos} videos")]
    CountMismatch { texts: usize, videos: usize },
    #[error("NonFiniteLoss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("EmptyStyleSet: {0:?} has no pairs")]
    EmptyStyleSet(String),
    #[error("BatchTooLarge: batch size {batch_size} exceeds {available} available pairs")]
    BatchTooLarge { batch_size: usize, available: usize },
    #[error("InvalidBatchSize: {0}")]
    InvalidBatchSize(usize),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

/// Text and video projection heads, both `proj_dim × input_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    pub proj_dim: usize,
    pub text_dim: usize,
    pub video_dim: usize,
    pub text_head: Vec<f64>,
    pub video_head: Vec<f64>,
    pub temperature: f64,
    pub step_count: u64,
}

impl AdapterModel {
    /// Identity heads: before any update the adapter reproduces zero-shot
    /// similarities exactly.
    pub fn identity(dim: usize, temperature: f64) -> Self {
        let mut head = vec![0.0; dim * dim];
        for i in 0..dim {
            head[i * dim + i] = 1.0;
        }
        Self {
            proj_dim: dim,
            text_dim: dim,
            video_dim: dim,
            text_head: head.clone(),
            video_head: head,
            temperature,
            step_count: 0,
        }
    }

    /// Gaussian heads with entries `N(0, 1/input_dim)`.
    pub fn random(
        proj_dim: usize,
        text_dim: usize,
        video_dim: usize,
        temperature: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let scale = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        };
        let text_head = draw(proj_dim * text_dim, text_dim);
        let video_head = draw(proj_dim * video_dim, video_dim);
        Self {
            proj_dim,
            text_dim,
            video_dim,
            text_head,
            video_head,
            temperature,
            step_count: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.proj_dim == 0 || self.text_dim == 0 || self.video_dim == 0 {
            return Err(TrainError::InvalidConfig(
                "adapter dimensions must be positive".into(),
            ));
        }
        if self.text_head.len() != self.proj_dim * self.text_dim
            || self.video_head.len() != self.proj_dim * self.video_dim
        {
            return Err(TrainError::InvalidConfig(
                "head sizes do not match dimensions".into(),
            ));
        }
        if self
            .text_head
            .iter()
            .chain(&self.video_head)
            .any(|w| !w.is_finite())
        {
            return Err(TrainError::NonFiniteLoss {
                step: self.step_count,
            });
        }
        Ok(())
    }

    /// `W_t x`, not normalized.
    pub fn project_text(&self, x: &[f32]) -> Vec<f64> {
        project_f32(&self.text_head, x)
    }

    /// `W_v x`, not normalized.
    pub fn project_video(&self, x: &[f32]) -> Vec<f64> {
        project_f32(&self.video_head, x)
    }

    /// Weights rounded to `f32`, as they are stored on disk.
    pub fn rounded(&self) -> Self {
        let round = |w: &[f64]| w.iter().map(|&x| f64::from(x as f32)).collect();
        Self {
            text_head: round(&self.text_head),
            video_head: round(&self.video_head),
            ..self.clone()
        }
    }

    pub fn to_chunk(&self) -> Chunk {
        let mut w = ChunkWriter::default();
        w.u32(self.proj_dim as u32)
            .u32(self.text_dim as u32)
            .u32(self.video_dim as u32)
            .f64(self.temperature)
            .u64(self.step_count)
            .f32s(self.text_head.iter().map(|&x| x as f32))
            .f32s(self.video_head.iter().map(|&x| x as f32));
        w.into_chunk(ADAPTER_CHUNK)
    }

    pub fn from_chunk(chunk: &Chunk) -> Result<Self, TrainError> {
        let mut r = ChunkReader::new(&chunk.payload);
        let proj_dim = r.u32()? as usize;
        let text_dim = r.u32()? as usize;
        let video_dim = r.u32()? as usize;
        let temperature = r.f64()?;
        let step_count = r.u64()?;
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
        let text_head = widen(r.f32s(proj_dim * text_dim)?);
        let video_head = widen(r.f32s(proj_dim * video_dim)?);
        r.finish()?;
        let model = Self {
            proj_dim,
            text_dim,
            video_dim,
            text_head,
            video_head,
            temperature,
            step_count,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let empty = EmbeddingSet::new(Vec::new(), self.proj_dim.max(1), Vec::new())?;
        iemb::save_container(path, &empty, &[self.to_chunk()])?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let (_, chunks) = iemb::load_container(path)?;
        Self::from_chunk(iemb::find_chunk(&chunks, &ADAPTER_CHUNK)?)
    }
}

fn project_f32(head: &[f64], x: &[f32]) -> Vec<f64> {
    head.chunks_exact(x.len())
        .map(|row| {
            row.iter()
                .zip(x)
                .fold(0.0, |acc, (w, v)| acc + w * f64::from(*v))
        })
        .collect()
}

/// FIFO of detached, normalized projections for one style.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    pub style_tag: String,
    pub capacity: usize,
    pub texts: VecDeque<Vec<f64>>,
    pub videos: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(style_tag: impl Into<String>, capacity: usize) -> Self {
        Self {
            style_tag: style_tag.into(),
            capacity,
            texts: VecDeque::new(),
            videos: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Appends a batch's projections, evicting the oldest entries beyond
    /// capacity.
    pub fn push(&mut self, texts: &[Vec<f64>], videos: &[Vec<f64>]) {
        self.texts.extend(texts.iter().cloned());
        self.videos.extend(videos.iter().cloned());
        while self.texts.len() > self.capacity {
            self.texts.pop_front();
        }
        while self.videos.len() > self.capacity {
            self.videos.pop_front();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Per-style queue length; 0 disables the queue.
    pub queue_capacity: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One style's training pairs: `texts.row(pair.row)` is the caption,
/// `videos` is looked up by `pair.clip_id`.
#[derive(Debug, Clone, Copy)]
pub struct StyleData<'a> {
    pub pairs: &'a GeneratedPairSet,
    pub texts: &'a EmbeddingSet,
    pub videos: &'a EmbeddingSet,
}

impl StyleData<'_> {
    fn check(&self) -> Result<(), TrainError> {
        for pair in &self.pairs.pairs {
            if pair.row >= self.texts.len() {
                return Err(TrainError::InvalidConfig(format!(
                    "pair row {} outside caption set of {}",
                    pair.row,
                    self.texts.len()
                )));
            }
            if self.videos.index_of(pair.clip_id).is_none() {
                return Err(EmbedError::UnknownId(pair.clip_id).into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub style_tag: String,
    pub loss: f64,
}

pub fn write_loss_log(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<(), TrainError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,style_tag,loss")?;
    for r in records {
        writeln!(out, "{},{},{:e}", r.step, r.style_tag, r.loss)?;
    }
    out.flush()?;
    Ok(())
}

/// Optimizer state that persists across epochs: momentum buffers and one
/// negative queue per batch tag.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: AdapterModel,
    config: SgdConfig,
    text_velocity: Vec<f64>,
    video_velocity: Vec<f64>,
    queues: BTreeMap<String, NegativeQueue>,
}

impl Trainer {
    pub fn new(model: AdapterModel, config: SgdConfig) -> Result<Self, TrainError> {
        model.validate()?;
        config.validate()?;
        Ok(Self {
            text_velocity: vec![0.0; model.text_head.len()],
            video_velocity: vec![0.0; model.video_head.len()],
            model,
            config,
            queues: BTreeMap::new(),
        })
    }

    pub fn model(&self) -> &AdapterModel {
        &self.model
    }

    pub fn into_model(self) -> AdapterModel {
        self.model
    }

    pub fn queue(&self, tag: &str) -> Option<&NegativeQueue> {
        self.queues.get(tag)
    }

    /// One optimizer step on one batch. The queue for `tag` supplies extra
    /// negatives and then receives this batch's projections.
    pub fn step(&mut self, tag: &str, batch: &Batch) -> Result<f64, TrainError> {
        let capacity = self.config.queue_capacity;
        let queue = (capacity > 0).then(|| self.queues.get(tag)).flatten();
        let out = info_nce_loss(&self.model, batch, queue)?;
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        sgd_update(
            &mut self.model.text_head,
            &mut self.text_velocity,
            &out.grad_text,
            lr,
            mu,
        );
        sgd_update(
            &mut self.model.video_head,
            &mut self.video_velocity,
            &out.grad_video,
            lr,
            mu,
        );
        self.model.step_count += 1;
        if self
            .model
            .text_head
            .iter()
            .chain(&self.model.video_head)
            .any(|w| !w.is_finite())
        {
            return Err(TrainError::NonFiniteLoss {
                step: self.model.step_count,
            });
        }
        if capacity > 0 {
            self.queues
                .entry(tag.to_string())
                .or_insert_with(|| NegativeQueue::new(tag, capacity))
                .push(&out.text_proj, &out.video_proj);
        }
        Ok(out.loss)
    }

    /// Executes a plan in order; one loss record per batch.
    pub fn run_plan(
        &mut self,
        plan: &StyleBatchPlan,
        data: &[StyleData<'_>],
    ) -> Result<Vec<LossRecord>, TrainError> {
        for d in data {
            d.check()?;
        }
        let mut log = Vec::with_capacity(plan.len());
        for minibatch in &plan.batches {
            let batch = gather(minibatch, data)?;
            let step = self.model.step_count;
            let loss = self.step(&minibatch.tag, &batch)?;
            log.push(LossRecord {
                step,
                style_tag: minibatch.tag.clone(),
                loss,
            });
        }
        Ok(log)
    }
}

fn sgd_update(weights: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

fn gather(minibatch: &Minibatch, data: &[StyleData<'_>]) -> Result<Batch, TrainError> {
    let mut texts = Vec::with_capacity(minibatch.entries.len());
    let mut videos = Vec::with_capacity(minibatch.entries.len());
    for entry in &minibatch.entries {
        let style = data.get(entry.set).ok_or_else(|| {
            TrainError::InvalidConfig(format!("plan refers to missing style set {}", entry.set))
        })?;
        let pair = style.pairs.pairs.get(entry.pair).ok_or_else(|| {
            TrainError::InvalidConfig(format!("plan refers to missing pair {}", entry.pair))
        })?;
        texts.push(style.texts.row(pair.row));
        let video_row = style
            .videos
            .index_of(pair.clip_id)
            .ok_or(EmbedError::UnknownId(pair.clip_id))?;
        videos.push(style.videos.row(video_row));
    }
    Batch::from_rows(texts, videos)
}

/// Runs one plan from fresh optimizer state.
pub fn train(
    model: AdapterModel,
    plan: &StyleBatchPlan,
    data: &[StyleData<'_>],
    config: &SgdConfig,
) -> Result<(AdapterModel, Vec<LossRecord>), TrainError> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let log = trainer.run_plan(plan, data)?;
    Ok((trainer.into_model(), log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: ScheduleMode,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            mode: ScheduleMode::InStyle,
            seed: 0,
            sgd: SgdConfig::default(),
        }
    }
}

/// Seed of the plan for `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains for `config.epochs` epochs, planning each epoch afresh. Optimizer
/// state and queues carry over between epochs.
pub fn fit(
    model: AdapterModel,
    data: &[StyleData<'_>],
    config: &TrainConfig,
) -> Result<(AdapterModel, Vec<LossRecord>), TrainError> {
    if config.batch_size < 2 {
        return Err(TrainError::InvalidBatchSize(config.batch_size));
    }
    let sets: Vec<GeneratedPairSet> = data.iter().map(|d| d.pairs.clone()).collect();
    let mut trainer = Trainer::new(model, config.sgd.clone())?;
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        let plan = plan_epoch(
            &sets,
            config.batch_size,
            config.mode,
            epoch_seed(config.seed, epoch),
        )?;
        log.extend(trainer.run_plan(&plan, data)?);
    }
    Ok((trainer.into_model(), log))
}
