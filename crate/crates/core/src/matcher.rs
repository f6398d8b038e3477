//! Exclusive nearest-neighbour assignment of text queries to clips.
//!
//! Each query takes the most similar clip that no earlier query has taken;
//! the taken clip leaves the pool. Ties go to the smallest clip id.
//!
//! Full similarity matrices are not materialised. Every query first gets a
//! shortlist of its `shortlist` best clips (computed in parallel); the
//! sequential assignment pass walks that list and only rescans the whole pool
//! when every shortlisted clip has already been taken. Because the shortlist is
//! sorted by (similarity desc, clip id asc), the first free entry is exactly the
//! masked argmax, so the result matches a brute-force pass bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, dot, EmbedError, EmbeddingSet};
use crate::jsonl::{self, JsonlError};

pub const DEFAULT_SHORTLIST: usize = 32;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("PoolExhausted: {queries} queries but only {clips} clips")]
    PoolExhausted { queries: usize, clips: usize },
    #[error("KTooLarge: k={k} with {clips} clips")]
    KTooLarge { k: usize, clips: usize },
    #[error("InvalidShortlist: shortlist size must be positive")]
    InvalidShortlist,
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Order in which queries claim clips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchOrder {
    /// Queries in ascending id order, each taking its best free clip.
    #[default]
    IdOrder,
    /// Repeatedly commit the globally most similar free (query, clip) pair.
    GlobalGreedy,
}

impl std::str::FromStr for MatchOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "id-order" => Ok(Self::IdOrder),
            "global-greedy" => Ok(Self::GlobalGreedy),
            other => Err(format!(
                "unknown match order {other:?} (expected id-order or global-greedy)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatchConfig {
    pub order: MatchOrder,
    pub shortlist: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            order: MatchOrder::IdOrder,
            shortlist: DEFAULT_SHORTLIST,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub query_id: u64,
    pub clip_id: u64,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoPairHeader {
    pub query_source: String,
    pub clip_source: String,
    pub order: MatchOrder,
    pub count: usize,
}

/// Query → clip assignments in the order they were committed.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPairSet {
    pub query_source: String,
    pub clip_source: String,
    pub order: MatchOrder,
    pub pairs: Vec<PseudoPair>,
    /// How many assignments needed a full-pool rescan.
    pub rescans: usize,
}

impl PseudoPairSet {
    pub fn tagged(
        mut self,
        query_source: impl Into<String>,
        clip_source: impl Into<String>,
    ) -> Self {
        self.query_source = query_source.into();
        self.clip_source = clip_source.into();
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), MatchError> {
        let header = PseudoPairHeader {
            query_source: self.query_source.clone(),
            clip_source: self.clip_source.clone(),
            order: self.order,
            count: self.pairs.len(),
        };
        jsonl::write(path, &header, &self.pairs)?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, MatchError> {
        let (header, pairs): (PseudoPairHeader, Vec<PseudoPair>) = jsonl::read(path)?;
        Ok(Self {
            query_source: header.query_source,
            clip_source: header.clip_source,
            order: header.order,
            pairs,
            rescans: 0,
        })
    }
}

/// `a` ranks ahead of `b`: higher similarity, then smaller index.
#[inline]
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn top_k(query: &[f32], clips: &EmbeddingSet, k: usize) -> Vec<(f64, usize)> {
    let mut scored: Vec<(f64, usize)> = clips
        .rows()
        .enumerate()
        .map(|(j, c)| (dot(query, c), j))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

fn best_free(query: &[f32], clips: &EmbeddingSet, taken: &[bool]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (j, clip) in clips.rows().enumerate() {
        if taken[j] {
            continue;
        }
        let cand = (dot(query, clip), j);
        if best.is_none_or(|b| rank_order(&cand, &b) == Ordering::Less) {
            best = Some(cand);
        }
    }
    best
}

struct Shortlists<'a> {
    queries: &'a EmbeddingSet,
    clips: &'a EmbeddingSet,
    lists: Vec<Vec<(f64, usize)>>,
    cursor: Vec<usize>,
    rescans: usize,
}

impl<'a> Shortlists<'a> {
    fn build(queries: &'a EmbeddingSet, clips: &'a EmbeddingSet, k: usize) -> Self {
        let lists: Vec<_> = (0..queries.len())
            .into_par_iter()
            .map(|i| top_k(queries.row(i), clips, k))
            .collect();
        Self {
            queries,
            clips,
            cursor: vec![0; lists.len()],
            lists,
            rescans: 0,
        }
    }

    /// Best clip still free for query `q`.
    fn next_free(&mut self, q: usize, taken: &[bool]) -> (f64, usize) {
        let list = &self.lists[q];
        let mut pos = self.cursor[q];
        while pos < list.len() && taken[list[pos].1] {
            pos += 1;
        }
        self.cursor[q] = pos;
        if let Some(&hit) = list.get(pos) {
            return hit;
        }
        self.rescans += 1;
        best_free(self.queries.row(q), self.clips, taken)
            .expect("pool holds at least as many clips as queries")
    }
}

#[derive(PartialEq)]
struct Candidate {
    sim: f64,
    query: usize,
    clip: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // max-heap: higher sim first, then smaller query, then smaller clip
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then(other.query.cmp(&self.query))
            .then(other.clip.cmp(&self.clip))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Builds pseudo pairs by exclusive greedy assignment.
pub fn match_exclusive(
    queries: &EmbeddingSet,
    clips: &EmbeddingSet,
    config: &MatchConfig,
) -> Result<PseudoPairSet, MatchError> {
    embed::check_pair(queries, clips)?;
    if config.shortlist == 0 {
        return Err(MatchError::InvalidShortlist);
    }
    if queries.len() > clips.len() {
        return Err(MatchError::PoolExhausted {
            queries: queries.len(),
            clips: clips.len(),
        });
    }
    let mut lists = Shortlists::build(queries, clips, config.shortlist.min(clips.len().max(1)));
    let mut taken = vec![false; clips.len()];
    let mut pairs = Vec::with_capacity(queries.len());
    let mut commit = |q: usize, sim: f64, c: usize, taken: &mut [bool]| {
        taken[c] = true;
        pairs.push(PseudoPair {
            query_id: queries.ids()[q],
            clip_id: clips.ids()[c],
            sim,
        });
    };

    match config.order {
        MatchOrder::IdOrder => {
            for q in 0..queries.len() {
                let (sim, c) = lists.next_free(q, &taken);
                commit(q, sim, c, &mut taken);
            }
        }
        MatchOrder::GlobalGreedy => {
            let mut heap: BinaryHeap<Candidate> = (0..queries.len())
                .map(|q| {
                    let (sim, clip) = lists.next_free(q, &taken);
                    Candidate {
                        sim,
                        query: q,
                        clip,
                    }
                })
                .collect();
            // Heap entries are upper bounds on each query's current best; an
            // entry whose clip is still free is therefore the global maximum.
            while let Some(top) = heap.pop() {
                if taken[top.clip] {
                    let (sim, clip) = lists.next_free(top.query, &taken);
                    heap.push(Candidate {
                        sim,
                        query: top.query,
                        clip,
                    });
                } else {
                    commit(top.query, top.sim, top.clip, &mut taken);
                }
            }
        }
    }

    Ok(PseudoPairSet {
        query_source: String::new(),
        clip_source: String::new(),
        order: config.order,
        pairs,
        rescans: lists.rescans,
    })
}

/// Per-query top-`k` clips as `(clip_id, similarity)`, without exclusion.
pub fn match_topk_report(
    queries: &EmbeddingSet,
    clips: &EmbeddingSet,
    k: usize,
) -> Result<Vec<Vec<(u64, f64)>>, MatchError> {
    embed::check_pair(queries, clips)?;
    if k == 0 || k > clips.len() {
        return Err(MatchError::KTooLarge {
            k,
            clips: clips.len(),
        });
    }
    Ok((0..queries.len())
        .into_par_iter()
        .map(|i| {
            top_k(queries.row(i), clips, k)
                .into_iter()
                .map(|(s, j)| (clips.ids()[j], s))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{normalize, sim_matrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_set(ids: Vec<u64>, rows: &[Vec<f32>]) -> EmbeddingSet {
        normalize(&EmbeddingSet::from_rows(ids, rows).unwrap()).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingSet {
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        unit_set((0..n as u64).collect(), &rows)
    }

    /// Brute force: full similarity matrix, mask taken columns, argmax per step.
    fn reference(
        queries: &EmbeddingSet,
        clips: &EmbeddingSet,
        order: MatchOrder,
    ) -> Vec<(u64, u64, f64)> {
        let m = sim_matrix(queries, clips).unwrap();
        let mut q_done = vec![false; m.rows];
        let mut c_done = vec![false; m.cols];
        let mut out = Vec::new();
        for step in 0..m.rows {
            let mut best: Option<(f64, usize, usize)> = None;
            let rows: Vec<usize> = match order {
                MatchOrder::IdOrder => vec![step],
                MatchOrder::GlobalGreedy => (0..m.rows).filter(|&q| !q_done[q]).collect(),
            };
            for q in rows {
                for c in 0..m.cols {
                    if c_done[c] {
                        continue;
                    }
                    let s = m.get(q, c);
                    if best.is_none_or(|(bs, _, _)| s > bs) {
                        best = Some((s, q, c));
                    }
                }
            }
            let (s, q, c) = best.unwrap();
            q_done[q] = true;
            c_done[c] = true;
            out.push((queries.ids()[q], clips.ids()[c], s));
        }
        out
    }

    fn as_tuples(set: &PseudoPairSet) -> Vec<(u64, u64, f64)> {
        set.pairs
            .iter()
            .map(|p| (p.query_id, p.clip_id, p.sim))
            .collect()
    }

    #[test]
    fn single_pair() {
        let q = unit_set(vec![0], &[vec![1.0, 0.0]]);
        let out = match_exclusive(&q, &q, &MatchConfig::default()).unwrap();
        assert_eq!(as_tuples(&out), vec![(0, 0, 1.0)]);
    }

    #[test]
    fn second_identical_query_takes_runner_up() {
        let q = unit_set(vec![0, 1], &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let c = unit_set(vec![0, 1], &[vec![1.0, 0.0], vec![0.9, 0.43589]]);
        let out = match_exclusive(&q, &c, &MatchConfig::default()).unwrap();
        assert_eq!(out.pairs[0].clip_id, 0);
        assert_eq!(out.pairs[0].sim, 1.0);
        assert_eq!((out.pairs[1].query_id, out.pairs[1].clip_id), (1, 1));
        assert!((out.pairs[1].sim - 0.9).abs() < 1e-5);
    }

    #[test]
    fn ties_go_to_smallest_clip_id() {
        let q = unit_set(vec![0], &[vec![1.0, 0.0]]);
        let c = unit_set(
            vec![3, 5, 9],
            &[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]],
        );
        let out = match_exclusive(&q, &c, &MatchConfig::default()).unwrap();
        assert_eq!(out.pairs[0].clip_id, 5);
    }

    #[test]
    fn random_instance_matches_reference_both_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let q = random_unit(&mut rng, 20, 6);
        let c = random_unit(&mut rng, 60, 6);
        for order in [MatchOrder::IdOrder, MatchOrder::GlobalGreedy] {
            for shortlist in [1, 3, 32] {
                let out = match_exclusive(&q, &c, &MatchConfig { order, shortlist }).unwrap();
                assert_eq!(
                    as_tuples(&out),
                    reference(&q, &c, order),
                    "{order:?} shortlist {shortlist}"
                );
            }
        }
    }

    #[test]
    fn shortlist_exhaustion_falls_back_to_rescan() {
        // identical queries exhaust a 2-long shortlist after two assignments
        let q = unit_set((0..5).collect(), &vec![vec![1.0, 0.2, 0.0]; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_unit(&mut rng, 9, 3);
        let out = match_exclusive(
            &q,
            &c,
            &MatchConfig {
                order: MatchOrder::IdOrder,
                shortlist: 2,
            },
        )
        .unwrap();
        assert!(out.rescans >= 3);
        assert_eq!(as_tuples(&out), reference(&q, &c, MatchOrder::IdOrder));
    }

    #[test]
    fn identical_queries_degrade_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = unit_set((0..10).collect(), &vec![vec![0.3, -0.2, 0.9, 0.1]; 10]);
        let c = random_unit(&mut rng, 30, 4);
        let out = match_exclusive(&q, &c, &MatchConfig::default()).unwrap();
        assert!(out.pairs.windows(2).all(|w| w[0].sim >= w[1].sim));
    }

    #[test]
    fn errors() {
        let q = unit_set(vec![0, 1], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = unit_set(vec![0], &[vec![1.0, 0.0]]);
        assert!(matches!(
            match_exclusive(&q, &c, &MatchConfig::default()),
            Err(MatchError::PoolExhausted {
                queries: 2,
                clips: 1
            })
        ));
        let c3 = unit_set(vec![0, 1], &[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(matches!(
            match_exclusive(&q, &c3, &MatchConfig::default()),
            Err(MatchError::Embed(EmbedError::DimMismatch { .. }))
        ));
        assert!(matches!(
            match_topk_report(&q, &c, 2),
            Err(MatchError::KTooLarge { k: 2, clips: 1 })
        ));
    }

    #[test]
    fn topk_report() {
        let basis: Vec<Vec<f32>> = (0..4)
            .map(|i| (0..4).map(|j| f32::from(u8::from(i == j))).collect())
            .collect();
        let set = unit_set((10..14).collect(), &basis);
        let top1 = match_topk_report(&set, &set, 1).unwrap();
        for (i, list) in top1.iter().enumerate() {
            assert_eq!(list, &vec![(10 + i as u64, 1.0)]);
        }
        let full = match_topk_report(&set, &set, 4).unwrap();
        assert!(full.iter().all(|l| l.len() == 4));
        // the three zero-similarity clips follow in id order
        assert_eq!(
            full[2].iter().map(|p| p.0).collect::<Vec<_>>(),
            vec![12, 10, 11, 13]
        );

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_unit(&mut rng, 5, 4);
        let c = random_unit(&mut rng, 12, 4);
        let m = sim_matrix(&q, &c).unwrap();
        let report = match_topk_report(&q, &c, 3).unwrap();
        for (i, list) in report.iter().enumerate() {
            let mut all: Vec<(u64, f64)> = (0..12).map(|j| (c.ids()[j], m.get(i, j))).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(list, &all[..3].to_vec());
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_unit(&mut rng, 4, 3);
        let c = random_unit(&mut rng, 8, 3);
        let out = match_exclusive(&q, &c, &MatchConfig::default())
            .unwrap()
            .tagged("queries", "pool");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        out.write_jsonl(&path).unwrap();
        let first = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert!(first.contains("\"order\":\"id-order\""));
        let back = PseudoPairSet::read_jsonl(&path).unwrap();
        assert_eq!(back.pairs, out.pairs);
        assert_eq!(back.query_source, "queries");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn injective_and_sims_consistent(seed in 0u64..10_000, nq in 1usize..25, extra in 0usize..20, shortlist in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_unit(&mut rng, nq, 4);
            let c = random_unit(&mut rng, nq + extra, 4);
            for order in [MatchOrder::IdOrder, MatchOrder::GlobalGreedy] {
                let out = match_exclusive(&q, &c, &MatchConfig { order, shortlist }).unwrap();
                let mut clips: Vec<u64> = out.pairs.iter().map(|p| p.clip_id).collect();
                let mut queries: Vec<u64> = out.pairs.iter().map(|p| p.query_id).collect();
                clips.sort_unstable();
                clips.dedup();
                queries.sort_unstable();
                queries.dedup();
                prop_assert_eq!(clips.len(), nq);
                prop_assert_eq!(queries.len(), nq);
                for p in &out.pairs {
                    let cos = crate::embed::cosine_sim(
                        q.row(q.index_of(p.query_id).unwrap()),
                        c.row(c.index_of(p.clip_id).unwrap()),
                    ).unwrap();
                    prop_assert!((p.sim - cos).abs() < 1e-6);
                }
                prop_assert_eq!(as_tuples(&out), reference(&q, &c, order));
            }
        }

        #[test]
        fn clip_storage_order_is_irrelevant(seed in 0u64..10_000, nq in 1usize..12, extra in 0usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_unit(&mut rng, nq, 5);
            let c = random_unit(&mut rng, nq + extra, 5);
            // relabel clips with a random permutation of ids, which reorders storage
            let n = c.len();
            let mut perm: Vec<u64> = (0..n as u64).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut rows: Vec<(u64, Vec<f32>)> = (0..n).map(|j| (perm[j], c.row(j).to_vec())).collect();
            rows.sort_by_key(|r| r.0);
            let (ids, data): (Vec<u64>, Vec<Vec<f32>>) = rows.into_iter().unzip();
            let shuffled = EmbeddingSet::with_flag(ids, 5, data.concat(), true).unwrap();

            let a = match_exclusive(&q, &c, &MatchConfig::default()).unwrap();
            let b = match_exclusive(&q, &shuffled, &MatchConfig::default()).unwrap();
            for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
                prop_assert_eq!(pa.query_id, pb.query_id);
                prop_assert_eq!(perm[pa.clip_id as usize], pb.clip_id);
            }
        }
    }
}
