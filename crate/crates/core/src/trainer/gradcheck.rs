//! Central finite-difference check of the loss gradients.

use super::{info_nce_loss, AdapterModel, Batch, NegativeQueue, TrainError};

/// Relative errors are taken against `max(|analytic|, |numeric|, GRAD_FLOOR)`
/// so that entries which are zero up to round-off do not blow up the ratio.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub weights_checked: usize,
}

/// Compares the closed-form gradient with `(L(w + ε) − L(w − ε)) / 2ε` for
/// every weight of both heads.
///
/// # Panics
///
/// If `eps` is outside `[1e-6, 1e-3]`.
pub fn grad_check(
    model: &AdapterModel,
    batch: &Batch,
    queue: Option<&NegativeQueue>,
    eps: f64,
) -> Result<GradCheckReport, TrainError> {
    assert!(
        (1e-6..=1e-3).contains(&eps),
        "eps {eps} outside [1e-6, 1e-3]"
    );
    let analytic = info_nce_loss(model, batch, queue)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        weights_checked: 0,
    };
    let mut probe = model.clone();
    for head in 0..2 {
        let n = if head == 0 {
            model.text_head.len()
        } else {
            model.video_head.len()
        };
        for k in 0..n {
            let original = *weight_mut(&mut probe, head, k);
            *weight_mut(&mut probe, head, k) = original + eps;
            let plus = info_nce_loss(&probe, batch, queue)?.loss;
            *weight_mut(&mut probe, head, k) = original - eps;
            let minus = info_nce_loss(&probe, batch, queue)?.loss;
            *weight_mut(&mut probe, head, k) = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = if head == 0 {
                analytic.grad_text[k]
            } else {
                analytic.grad_video[k]
            };
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(GRAD_FLOOR);
            report.max_absolute_error = report.max_absolute_error.max(abs);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.weights_checked += 1;
        }
    }
    Ok(report)
}

fn weight_mut(model: &mut AdapterModel, head: usize, k: usize) -> &mut f64 {
    if head == 0 {
        &mut model.text_head[k]
    } else {
        &mut model.video_head[k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn fixture(seed: u64, b: usize, dim: usize, proj: usize) -> (AdapterModel, Batch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texts = unit_rows(&mut rng, b, dim);
        let videos = unit_rows(&mut rng, b, dim);
        let batch = Batch::from_rows(
            texts.iter().map(Vec::as_slice),
            videos.iter().map(Vec::as_slice),
        )
        .unwrap();
        (
            AdapterModel::random(proj, dim, dim, 0.5, seed + 1000),
            batch,
        )
    }

    #[test]
    fn small_fixture_matches_finite_differences() {
        let (model, batch) = fixture(0, 4, 6, 4);
        let report = grad_check(&model, &batch, None, 1e-5).unwrap();
        assert_eq!(report.weights_checked, 2 * 4 * 6);
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn unused_input_coordinate_has_zero_gradient() {
        let (model, _) = fixture(1, 3, 5, 4);
        // the last input coordinate is zero for every row
        let rows = [
            [0.6f32, 0.8, 0.0, 0.0, 0.0],
            [0.0, 0.6, 0.8, 0.0, 0.0],
            [0.0, 0.0, 0.6, 0.8, 0.0],
        ];
        let batch = Batch::from_rows(
            rows.iter().map(|r| &r[..]),
            rows.iter().rev().map(|r| &r[..]),
        )
        .unwrap();
        let out = info_nce_loss(&model, &batch, None).unwrap();
        for r in 0..4 {
            assert_eq!(out.grad_text[r * 5 + 4], 0.0);
            assert_eq!(out.grad_video[r * 5 + 4], 0.0);
        }
        let report = grad_check(&model, &batch, None, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-5);
    }

    #[test]
    fn smaller_eps_does_not_degrade_past_tolerance() {
        let (model, batch) = fixture(2, 4, 6, 4);
        let coarse = grad_check(&model, &batch, None, 1e-4).unwrap();
        let fine = grad_check(&model, &batch, None, 1e-5).unwrap();
        assert!(
            fine.max_relative_error <= coarse.max_relative_error || fine.max_relative_error < 1e-5
        );
    }

    #[test]
    fn queue_negatives_are_differentiated_correctly() {
        let (model, batch) = fixture(3, 5, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut queue = NegativeQueue::new("s", 8);
        let q: Vec<Vec<f64>> = unit_rows(&mut rng, 6, 4)
            .into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect();
        queue.push(&q, &q.iter().rev().cloned().collect::<Vec<_>>());
        let report = grad_check(&model, &batch, Some(&queue), 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}
