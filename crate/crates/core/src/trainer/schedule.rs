//! Epoch plans: which pairs go into which minibatch, in what order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::styler::GeneratedPairSet;

/// Tag used for batches (and the negative queue) that mix styles.
pub const MIXED_TAG: &str = "mixed";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Shuffle the union of all sets; batches may mix styles.
    Mixed,
    /// Every batch is drawn from a single style's set.
    #[default]
    InStyle,
}

impl std::str::FromStr for ScheduleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mixed" => Ok(Self::Mixed),
            "in-style" | "in_style" => Ok(Self::InStyle),
            other => Err(format!(
                "unknown schedule mode {other:?} (expected mixed or in-style)"
            )),
        }
    }
}

impl std::fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mixed => "mixed",
            Self::InStyle => "in_style",
        })
    }
}

/// A pair, addressed by the index of its set and its position in that set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRef {
    pub set: usize,
    pub pair: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Minibatch {
    /// Style tag of the source set, or [`MIXED_TAG`].
    pub tag: String,
    pub entries: Vec<PairRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleBatchPlan {
    pub mode: ScheduleMode,
    pub batch_size: usize,
    pub seed: u64,
    pub batches: Vec<Minibatch>,
}

impl StyleBatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Orders per-set batch lists so each set's batches are spread evenly: the
/// `k`-th of `n` batches of a set sits at time `(k + ½) / n`, ties going to
/// the lower set index.
fn interleave(per_set: Vec<Vec<Minibatch>>) -> Vec<Minibatch> {
    let mut slots: Vec<(u64, u64, usize, usize)> = Vec::new();
    for (set, batches) in per_set.iter().enumerate() {
        let n = batches.len() as u64;
        for k in 0..batches.len() {
            // time = (2k + 1) / (2n), kept as an exact fraction
            slots.push((2 * k as u64 + 1, 2 * n, set, k));
        }
    }
    slots.sort_by(|a, b| {
        let lhs = u128::from(a.0) * u128::from(b.1);
        let rhs = u128::from(b.0) * u128::from(a.1);
        lhs.cmp(&rhs).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
    });
    let mut per_set: Vec<std::vec::IntoIter<Minibatch>> =
        per_set.into_iter().map(Vec::into_iter).collect();
    slots
        .into_iter()
        .map(|(_, _, set, _)| per_set[set].next().expect("one batch per slot"))
        .collect()
}

/// Builds one epoch's batches.
///
/// `InStyle`: each set is shuffled on its own, cut into full batches, and the
/// per-set batch lists are interleaved in proportion to their lengths.
/// `Mixed`: the union of all pairs is shuffled and cut into batches.
/// Ragged tails are dropped in both modes. Deterministic given `seed`.
pub fn plan_epoch(
    style_sets: &[GeneratedPairSet],
    batch_size: usize,
    mode: ScheduleMode,
    seed: u64,
) -> Result<StyleBatchPlan, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidBatchSize(0));
    }
    if style_sets.is_empty() {
        return Err(TrainError::InvalidConfig("no style sets".into()));
    }
    if let Some(empty) = style_sets.iter().find(|s| s.is_empty()) {
        return Err(TrainError::EmptyStyleSet(empty.style_tag.clone()));
    }
    for (i, set) in style_sets.iter().enumerate() {
        if style_sets[..i]
            .iter()
            .any(|other| other.style_tag == set.style_tag)
            || set.style_tag == MIXED_TAG
        {
            return Err(TrainError::InvalidConfig(format!(
                "style tag {:?} is reserved or repeated",
                set.style_tag
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = match mode {
        ScheduleMode::InStyle => {
            if let Some(small) = style_sets.iter().find(|s| s.len() < batch_size) {
                return Err(TrainError::BatchTooLarge {
                    batch_size,
                    available: small.len(),
                });
            }
            let per_set = style_sets
                .iter()
                .enumerate()
                .map(|(set, pairs)| {
                    let mut order: Vec<usize> = (0..pairs.len()).collect();
                    order.shuffle(&mut rng);
                    order
                        .chunks_exact(batch_size)
                        .map(|chunk| Minibatch {
                            tag: pairs.style_tag.clone(),
                            entries: chunk.iter().map(|&pair| PairRef { set, pair }).collect(),
                        })
                        .collect()
                })
                .collect();
            interleave(per_set)
        }
        ScheduleMode::Mixed => {
            let mut all: Vec<PairRef> = style_sets
                .iter()
                .enumerate()
                .flat_map(|(set, pairs)| (0..pairs.len()).map(move |pair| PairRef { set, pair }))
                .collect();
            if all.len() < batch_size {
                return Err(TrainError::BatchTooLarge {
                    batch_size,
                    available: all.len(),
                });
            }
            all.shuffle(&mut rng);
            all.chunks_exact(batch_size)
                .map(|chunk| Minibatch {
                    tag: MIXED_TAG.to_string(),
                    entries: chunk.to_vec(),
                })
                .collect()
        }
    };
    Ok(StyleBatchPlan {
        mode,
        batch_size,
        seed,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::styler::GeneratedPair;
    use proptest::prelude::*;

    fn set(tag: &str, n: usize) -> GeneratedPairSet {
        GeneratedPairSet {
            style_tag: tag.into(),
            threshold: 0.28,
            pool_count: n,
            pairs: (0..n)
                .map(|i| GeneratedPair {
                    clip_id: i as u64,
                    row: i,
                    sim: 0.5,
                })
                .collect(),
        }
    }

    /// Reference: same shuffles from the same generator, then a merge by
    /// floating-point slot time.
    fn reference_in_style(sets: &[GeneratedPairSet], b: usize, seed: u64) -> Vec<Minibatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut timed = Vec::new();
        for (s, pairs) in sets.iter().enumerate() {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
            let n = order.len() / b;
            for k in 0..n {
                let entries = order[k * b..(k + 1) * b]
                    .iter()
                    .map(|&pair| PairRef { set: s, pair })
                    .collect();
                timed.push((
                    (k as f64 + 0.5) / n as f64,
                    s,
                    Minibatch {
                        tag: pairs.style_tag.clone(),
                        entries,
                    },
                ));
            }
        }
        timed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        timed.into_iter().map(|t| t.2).collect()
    }

    #[test]
    fn two_sets_of_four_give_four_homogeneous_batches() {
        let sets = [set("a", 4), set("b", 4)];
        let plan = plan_epoch(&sets, 2, ScheduleMode::InStyle, 1).unwrap();
        assert_eq!(plan.len(), 4);
        for batch in &plan.batches {
            assert!(batch.entries.iter().all(|e| e.set == batch.entries[0].set));
            assert_eq!(batch.tag, sets[batch.entries[0].set].style_tag);
        }
        // equal sizes alternate a, b, a, b
        let order: Vec<&str> = plan.batches.iter().map(|b| b.tag.as_str()).collect();
        assert_eq!(order, vec!["a", "b", "a", "b"]);
    }

    #[test]
    fn single_set_modes_cover_same_pairs() {
        let sets = [set("a", 9)];
        let mut a: Vec<PairRef> = plan_epoch(&sets, 3, ScheduleMode::InStyle, 5)
            .unwrap()
            .batches
            .into_iter()
            .flat_map(|b| b.entries)
            .collect();
        let mut m: Vec<PairRef> = plan_epoch(&sets, 3, ScheduleMode::Mixed, 5)
            .unwrap()
            .batches
            .into_iter()
            .flat_map(|b| b.entries)
            .collect();
        a.sort();
        m.sort();
        assert_eq!(a, m);
        assert_eq!(a.len(), 9);
    }

    #[test]
    fn matches_reference_scheduler() {
        let sets = [set("a", 10), set("b", 6)];
        let plan = plan_epoch(&sets, 2, ScheduleMode::InStyle, 42).unwrap();
        assert_eq!(plan.batches, reference_in_style(&sets, 2, 42));
        let tags: Vec<&str> = plan.batches.iter().map(|b| b.tag.as_str()).collect();
        assert_eq!(tags, vec!["a", "b", "a", "a", "b", "a", "b", "a"]);
    }

    #[test]
    fn ragged_tails_are_dropped() {
        let sets = [set("a", 7), set("b", 5)];
        let plan = plan_epoch(&sets, 3, ScheduleMode::InStyle, 0).unwrap();
        assert_eq!(plan.len(), 2 + 1);
        let mixed = plan_epoch(&sets, 5, ScheduleMode::Mixed, 0).unwrap();
        assert_eq!(mixed.len(), 2);
        assert!(mixed
            .batches
            .iter()
            .all(|b| b.tag == MIXED_TAG && b.entries.len() == 5));
    }

    #[test]
    fn plan_errors() {
        assert!(matches!(
            plan_epoch(&[set("a", 3), set("b", 0)], 2, ScheduleMode::InStyle, 0),
            Err(TrainError::EmptyStyleSet(t)) if t == "b"
        ));
        assert!(matches!(
            plan_epoch(&[set("a", 3)], 4, ScheduleMode::InStyle, 0),
            Err(TrainError::BatchTooLarge {
                batch_size: 4,
                available: 3
            })
        ));
        assert!(matches!(
            plan_epoch(&[set("a", 3)], 4, ScheduleMode::Mixed, 0),
            Err(TrainError::BatchTooLarge { .. })
        ));
        assert!(plan_epoch(&[set("a", 3), set("a", 3)], 2, ScheduleMode::Mixed, 0).is_err());
        assert!(matches!(
            plan_epoch(&[set("a", 3)], 0, ScheduleMode::Mixed, 0),
            Err(TrainError::InvalidBatchSize(0))
        ));
    }

    proptest! {
        #[test]
        fn in_style_batches_are_homogeneous_and_disjoint(
            seed in any::<u64>(),
            sizes in proptest::collection::vec(4usize..40, 1..4),
            b in 2usize..5,
        ) {
            let sets: Vec<GeneratedPairSet> = sizes.iter().enumerate().map(|(i, &n)| set(&format!("s{i}"), n)).collect();
            let plan = plan_epoch(&sets, b, ScheduleMode::InStyle, seed).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for batch in &plan.batches {
                prop_assert_eq!(batch.entries.len(), b);
                let s = batch.entries[0].set;
                prop_assert!(batch.entries.iter().all(|e| e.set == s));
                prop_assert_eq!(&batch.tag, &sets[s].style_tag);
                for e in &batch.entries {
                    prop_assert!(seen.insert(*e));
                }
            }
            let expected: usize = sizes.iter().map(|n| n / b).sum();
            prop_assert_eq!(plan.len(), expected);
            prop_assert_eq!(plan_epoch(&sets, b, ScheduleMode::InStyle, seed).unwrap(), plan);
        }
    }
}
