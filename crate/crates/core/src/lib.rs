//! Embedding-space pipeline for text-video retrieval when only target-style
//! text queries and an unpaired, uncurated clip pool are available.
//!
//! Stages, in pipeline order:
//!
//! 1. [`matcher`] pairs every query with its most similar still-unassigned clip.
//! 2. [`styler`] fits an affine caption model on those pseudo pairs, renders a
//!    styled caption embedding for every clip in the pool and keeps the pairs the
//!    judge space scores above a threshold.
//! 3. [`trainer`] fits linear adapter heads with a symmetric contrastive loss,
//!    batching pairs of one style at a time or mixing styles.
//! 4. [`evaluator`] ranks held-out clips for held-out queries and reports R@k
//!    and median rank.
//!
//! [`synth`] generates seeded multi-style datasets with known ground truth.

pub mod embed;
pub mod evaluator;
pub mod jsonl;
pub mod matcher;
pub mod styler;
pub mod synth;
pub mod trainer;

pub use embed::{cosine_sim, normalize, sim_matrix, EmbedError, EmbeddingSet};
