//! Symmetric InfoNCE over a batch of (text, video) pairs with exact gradients.

use rayon::prelude::*;

use super::{AdapterModel, NegativeQueue, TrainError};

/// Minibatch of input embeddings in `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub text_dim: usize,
    pub video_dim: usize,
    pub texts: Vec<f64>,
    pub videos: Vec<f64>,
}

impl Batch {
    pub fn from_rows<'a>(
        texts: impl IntoIterator<Item = &'a [f32]>,
        videos: impl IntoIterator<Item = &'a [f32]>,
    ) -> Result<Self, TrainError> {
        let mut text_dim = 0;
        let mut video_dim = 0;
        let mut t = Vec::new();
        let mut v = Vec::new();
        let mut n_t = 0;
        let mut n_v = 0;
        for row in texts {
            text_dim = row.len();
            t.extend(row.iter().map(|&x| f64::from(x)));
            n_t += 1;
        }
        for row in videos {
            video_dim = row.len();
            v.extend(row.iter().map(|&x| f64::from(x)));
            n_v += 1;
        }
        if n_t != n_v {
            return Err(TrainError::CountMismatch {
                texts: n_t,
                videos: n_v,
            });
        }
        if t.len() != n_t * text_dim || v.len() != n_v * video_dim {
            return Err(TrainError::InvalidConfig(
                "batch rows have inconsistent dimensions".into(),
            ));
        }
        Ok(Self {
            len: n_t,
            text_dim,
            video_dim,
            texts: t,
            videos: v,
        })
    }

    pub fn text(&self, i: usize) -> &[f64] {
        &self.texts[i * self.text_dim..(i + 1) * self.text_dim]
    }

    pub fn video(&self, i: usize) -> &[f64] {
        &self.videos[i * self.video_dim..(i + 1) * self.video_dim]
    }
}

/// Loss value, gradients with respect to both heads, and the normalized
/// projections of the batch (used to refill the negative queue).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_text: Vec<f64>,
    pub grad_video: Vec<f64>,
    pub text_proj: Vec<Vec<f64>>,
    pub video_proj: Vec<Vec<f64>>,
}

pub(crate) fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `head · x` for a `rows × x.len()` row-major head.
pub(crate) fn project(head: &[f64], x: &[f64]) -> Vec<f64> {
    head.chunks_exact(x.len())
        .map(|row| dot64(row, x))
        .collect()
}

/// Log-softmax of `logits` evaluated at `target`, plus the softmax itself.
/// The row maximum is subtracted before exponentiating.
fn log_softmax_at(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_p = logits[target] - max - sum.ln();
    (log_p, exps.into_iter().map(|e| e / sum).collect())
}

/// Symmetric contrastive loss
///
/// `L = −1/(2B) Σ_i [log softmax_j(s(t_i, v_j)/τ)_i + log softmax_j(s(v_i, t_j)/τ)_i]`
///
/// where `s` is the cosine of the projected, renormalized embeddings. With a
/// queue, its video entries are extra columns for every text anchor and its
/// text entries extra columns for every video anchor; queue entries carry no
/// gradient.
pub fn info_nce_loss(
    model: &AdapterModel,
    batch: &Batch,
    queue: Option<&NegativeQueue>,
) -> Result<LossOutput, TrainError> {
    if batch.len == 0 {
        return Err(TrainError::InvalidBatchSize(0));
    }
    if batch.text_dim != model.text_dim || batch.video_dim != model.video_dim {
        return Err(TrainError::InvalidConfig(format!(
            "batch dims ({}, {}) do not match model dims ({}, {})",
            batch.text_dim, batch.video_dim, model.text_dim, model.video_dim
        )));
    }
    let b = batch.len;
    let p = model.proj_dim;
    let inv_tau = 1.0 / model.temperature;
    let non_finite = || TrainError::NonFiniteLoss {
        step: model.step_count,
    };

    let unit = |head: &[f64], x: &[f64]| -> Option<(Vec<f64>, f64)> {
        let raw = project(head, x);
        let norm = dot64(&raw, &raw).sqrt();
        (norm > 0.0 && norm.is_finite()).then(|| (raw.iter().map(|v| v / norm).collect(), norm))
    };
    let texts: Vec<(Vec<f64>, f64)> = (0..b)
        .into_par_iter()
        .map(|i| unit(&model.text_head, batch.text(i)))
        .collect::<Option<_>>()
        .ok_or_else(non_finite)?;
    let videos: Vec<(Vec<f64>, f64)> = (0..b)
        .into_par_iter()
        .map(|i| unit(&model.video_head, batch.video(i)))
        .collect::<Option<_>>()
        .ok_or_else(non_finite)?;
    let (z, text_norm): (Vec<Vec<f64>>, Vec<f64>) = texts.into_iter().unzip();
    let (w, video_norm): (Vec<Vec<f64>>, Vec<f64>) = videos.into_iter().unzip();

    let (queued_videos, queued_texts): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = match queue {
        Some(q) => (q.videos.iter().collect(), q.texts.iter().collect()),
        None => (Vec::new(), Vec::new()),
    };
    if queued_videos
        .iter()
        .chain(&queued_texts)
        .any(|e| e.len() != p)
    {
        return Err(TrainError::InvalidConfig(
            "queue entries do not match projection dim".into(),
        ));
    }

    let scale = 1.0 / (2.0 * b as f64);
    let sims: Vec<Vec<f64>> = z
        .par_iter()
        .map(|zi| w.iter().map(|wj| dot64(zi, wj) * inv_tau).collect())
        .collect();

    // Per anchor: -log p(positive), the gradient on the batch logits, and
    // the gradient on the queue logits.
    let anchor = |logits: Vec<f64>, target: usize| {
        let (log_p, mut probs) = log_softmax_at(&logits, target);
        probs.iter_mut().for_each(|p| *p *= scale);
        probs[target] -= scale;
        let queue_part = probs.split_off(b);
        (-log_p, probs, queue_part)
    };
    // text anchors: row i over batch videos then queued videos
    let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut logits = sims[i].clone();
            logits.extend(queued_videos.iter().map(|qv| dot64(&z[i], qv) * inv_tau));
            anchor(logits, i)
        })
        .collect();
    // video anchors: column j over batch texts then queued texts
    let cols: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|j| {
            let mut logits: Vec<f64> = (0..b).map(|i| sims[i][j]).collect();
            logits.extend(queued_texts.iter().map(|qt| dot64(&w[j], qt) * inv_tau));
            anchor(logits, j)
        })
        .collect();

    let loss = scale * rows.iter().chain(&cols).fold(0.0, |acc, r| acc + r.0);
    if !loss.is_finite() {
        return Err(non_finite());
    }

    // d loss / d logit(i, j) from both directions
    let g_sim = |i: usize, j: usize| (rows[i].1[j] + cols[j].1[i]) * inv_tau;
    let d_text_raw: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut dz = vec![0.0f64; p];
            for j in 0..b {
                let g = g_sim(i, j);
                dz.iter_mut().zip(&w[j]).for_each(|(d, x)| *d += g * x);
            }
            for (qv, g) in queued_videos.iter().zip(&rows[i].2) {
                let g = g * inv_tau;
                dz.iter_mut().zip(qv.iter()).for_each(|(d, x)| *d += g * x);
            }
            through_normalization(&z[i], &dz, text_norm[i])
        })
        .collect();
    let d_video_raw: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|j| {
            let mut dw = vec![0.0f64; p];
            for i in 0..b {
                let g = g_sim(i, j);
                dw.iter_mut().zip(&z[i]).for_each(|(d, x)| *d += g * x);
            }
            for (qt, g) in queued_texts.iter().zip(&cols[j].2) {
                let g = g * inv_tau;
                dw.iter_mut().zip(qt.iter()).for_each(|(d, x)| *d += g * x);
            }
            through_normalization(&w[j], &dw, video_norm[j])
        })
        .collect();

    let grad_text = outer_sum(&d_text_raw, |i| batch.text(i), model.text_dim);
    let grad_video = outer_sum(&d_video_raw, |i| batch.video(i), model.video_dim);
    Ok(LossOutput {
        loss,
        grad_text,
        grad_video,
        text_proj: z,
        video_proj: w,
    })
}

/// Back-propagates through `unit = raw / ‖raw‖`.
fn through_normalization(unit: &[f64], d_unit: &[f64], raw_norm: f64) -> Vec<f64> {
    let radial = dot64(unit, d_unit);
    unit.iter()
        .zip(d_unit)
        .map(|(u, du)| (du - u * radial) / raw_norm)
        .collect()
}

/// `Σ_i d_raw[i] ⊗ input(i)` as a row-major matrix; each output row sums
/// over the batch in index order.
fn outer_sum<'a>(
    d_raw: &[Vec<f64>],
    input: impl Fn(usize) -> &'a [f64] + Sync,
    dim: usize,
) -> Vec<f64> {
    let p = d_raw.first().map_or(0, Vec::len);
    let mut grad = vec![0.0f64; p * dim];
    grad.par_chunks_mut(dim).enumerate().for_each(|(r, row)| {
        for (i, d) in d_raw.iter().enumerate() {
            let scale = d[r];
            row.iter_mut()
                .zip(input(i))
                .for_each(|(g, x)| *g += scale * x);
        }
    });
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, i: usize) -> Vec<f32> {
        (0..dim).map(|j| f32::from(u8::from(i == j))).collect()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let model = AdapterModel::identity(3, 0.05);
        let t = [0.6f32, 0.8, 0.0];
        let v = [0.0f32, 1.0, 0.0];
        let out =
            info_nce_loss(&model, &Batch::from_rows([&t[..]], [&v[..]]).unwrap(), None).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out
            .grad_text
            .iter()
            .chain(&out.grad_video)
            .all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_similarities_give_ln_batch() {
        let model = AdapterModel::identity(2, 0.05);
        let row = [0.6f32, 0.8];
        let rows = vec![&row[..]; 4];
        let out =
            info_nce_loss(&model, &Batch::from_rows(rows.clone(), rows).unwrap(), None).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-9, "{}", out.loss);
    }

    #[test]
    fn two_by_two_identity_similarities() {
        let model = AdapterModel::identity(2, 1.0);
        let (e0, e1) = (basis(2, 0), basis(2, 1));
        let batch = Batch::from_rows([&e0[..], &e1[..]], [&e0[..], &e1[..]]).unwrap();
        let out = info_nce_loss(&model, &batch, None).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn tied_off_diagonal_keeps_loss_positive() {
        let model = AdapterModel::identity(2, 0.05);
        let (e0, e1) = (basis(2, 0), basis(2, 1));
        // text 1 is as close to video 0 as to video 1
        let t1 = [
            std::f32::consts::FRAC_1_SQRT_2,
            std::f32::consts::FRAC_1_SQRT_2,
        ];
        let batch = Batch::from_rows([&e0[..], &t1[..]], [&e0[..], &e1[..]]).unwrap();
        assert!(info_nce_loss(&model, &batch, None).unwrap().loss > 0.0);
    }

    #[test]
    fn count_mismatch() {
        let e0 = basis(2, 0);
        assert!(matches!(
            Batch::from_rows([&e0[..], &e0[..]], [&e0[..]]),
            Err(TrainError::CountMismatch {
                texts: 2,
                videos: 1
            })
        ));
    }

    #[test]
    fn queue_adds_negatives() {
        let model = AdapterModel::identity(2, 1.0);
        let e0 = basis(2, 0);
        let batch = Batch::from_rows([&e0[..]], [&e0[..]]).unwrap();
        let mut queue = NegativeQueue::new("s", 4);
        queue.push(&[vec![0.0, 1.0]], &[vec![0.0, 1.0]]);
        let out = info_nce_loss(&model, &batch, Some(&queue)).unwrap();
        // each side: -log(e / (e + 1))
        assert!((out.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }
}
