//! Fixed-length clip segmentation and frame pooling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbedError, EmbeddingSet, Result};

/// One clip of a source video. `frame_row_start..frame_row_end` indexes rows
/// of the frame embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: u64,
    pub source_video_id: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub frame_row_start: usize,
    pub frame_row_end: usize,
}

/// Splits one video into consecutive non-overlapping clips of `clip_len_s`
/// seconds, keeping at most `max_clips`.
///
/// The video's frames occupy `frame_rows` and are assumed evenly spaced, frame
/// `k` sitting at `(k + 0.5) * duration / n`. Windows that receive no frame are
/// skipped. Clip ids are assigned consecutively from `first_clip_id`.
pub fn segment_video(
    first_clip_id: u64,
    source_video_id: u64,
    duration_s: f64,
    frame_rows: std::ops::Range<usize>,
    clip_len_s: f64,
    max_clips: usize,
) -> Result<Vec<Clip>> {
    if !(clip_len_s > 0.0) || !(duration_s > 0.0) {
        return Err(EmbedError::InvalidClipTable(
            "clip length and duration must be positive".into(),
        ));
    }
    let n_frames = frame_rows.len();
    let frame_time = |k: usize| (k as f64 + 0.5) * duration_s / n_frames as f64;
    let mut clips = Vec::new();
    let mut next_frame = 0;
    let mut window = 0usize;
    while clips.len() < max_clips {
        let start_s = window as f64 * clip_len_s;
        if start_s >= duration_s {
            break;
        }
        let end_s = (start_s + clip_len_s).min(duration_s);
        let first = next_frame;
        while next_frame < n_frames && frame_time(next_frame) < end_s {
            next_frame += 1;
        }
        if next_frame > first {
            clips.push(Clip {
                clip_id: first_clip_id + clips.len() as u64,
                source_video_id,
                start_s,
                end_s,
                frame_row_start: frame_rows.start + first,
                frame_row_end: frame_rows.start + next_frame,
            });
        }
        window += 1;
    }
    Ok(clips)
}

/// Checks the table invariants: every clip except the last of its video lasts
/// exactly `clip_len_s`, clips of a video are ordered and non-overlapping, and
/// no video has more than `max_clips` clips.
pub fn validate_clip_table(clips: &[Clip], clip_len_s: f64, max_clips: usize) -> Result<()> {
    let mut by_video: BTreeMap<u64, Vec<&Clip>> = BTreeMap::new();
    for clip in clips {
        if !(clip.start_s >= 0.0) || !(clip.end_s > clip.start_s) {
            return Err(EmbedError::InvalidClipTable(format!(
                "clip {} has an empty time span",
                clip.clip_id
            )));
        }
        by_video.entry(clip.source_video_id).or_default().push(clip);
    }
    for (video, group) in by_video {
        if group.len() > max_clips {
            return Err(EmbedError::InvalidClipTable(format!(
                "video {video} has {} clips, limit {max_clips}",
                group.len()
            )));
        }
        for pair in group.windows(2) {
            if pair[1].start_s < pair[0].end_s {
                return Err(EmbedError::InvalidClipTable(format!(
                    "clips {} and {} overlap or are out of order",
                    pair[0].clip_id, pair[1].clip_id
                )));
            }
            if ((pair[0].end_s - pair[0].start_s) - clip_len_s).abs() > 1e-9 {
                return Err(EmbedError::InvalidClipTable(format!(
                    "non-terminal clip {} is not {clip_len_s} s long",
                    pair[0].clip_id
                )));
            }
        }
    }
    Ok(())
}

/// Clip embedding = normalized mean of the clip's frame rows, accumulated in
/// `f64`. Output ids are the clip ids.
pub fn pool_clips(frames: &EmbeddingSet, clips: &[Clip]) -> Result<EmbeddingSet> {
    let dim = frames.dim();
    let mut order: Vec<&Clip> = clips.iter().collect();
    order.sort_by_key(|c| c.clip_id);
    let mut ids = Vec::with_capacity(order.len());
    let mut data = Vec::with_capacity(order.len() * dim);
    let mut mean = vec![0.0f64; dim];
    for clip in order {
        if clip.frame_row_end > frames.len() || clip.frame_row_start > clip.frame_row_end {
            return Err(EmbedError::RangeOutOfBounds {
                clip_id: clip.clip_id,
                start: clip.frame_row_start,
                end: clip.frame_row_end,
                rows: frames.len(),
            });
        }
        if clip.frame_row_start == clip.frame_row_end {
            return Err(EmbedError::EmptyClip(clip.clip_id));
        }
        mean.iter_mut().for_each(|m| *m = 0.0);
        for row in clip.frame_row_start..clip.frame_row_end {
            for (m, v) in mean.iter_mut().zip(frames.row(row)) {
                *m += f64::from(*v);
            }
        }
        let count = (clip.frame_row_end - clip.frame_row_start) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVectorRow(clip.clip_id));
        }
        ids.push(clip.clip_id);
        data.extend(mean.iter().map(|m| (m / norm) as f32));
    }
    EmbeddingSet::with_flag(ids, dim, data, true)
}

pub fn write_clip_table(path: impl AsRef<Path>, clips: &[Clip]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for clip in clips {
        serde_json::to_writer(&mut out, clip)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_clip_table(path: impl AsRef<Path>) -> Result<Vec<Clip>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut clips = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        clips.push(serde_json::from_str(&line)?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(id: u64, rows: std::ops::Range<usize>) -> Clip {
        Clip {
            clip_id: id,
            source_video_id: 0,
            start_s: id as f64 * 8.0,
            end_s: (id + 1) as f64 * 8.0,
            frame_row_start: rows.start,
            frame_row_end: rows.end,
        }
    }

    #[test]
    fn symmetric_mean() {
        let frames =
            EmbeddingSet::from_rows(vec![0, 1], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pooled = pool_clips(&frames, &[clip(0, 0..2)]).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((pooled.row(0)[0] - h).abs() < 1e-7 && (pooled.row(0)[1] - h).abs() < 1e-7);
        assert!(pooled.is_normalized());
    }

    #[test]
    fn single_frame_is_renormalized() {
        let frames = EmbeddingSet::from_rows(vec![0], &[vec![3.0, 4.0]]).unwrap();
        let pooled = pool_clips(&frames, &[clip(7, 0..1)]).unwrap();
        assert_eq!(pooled.ids(), &[7]);
        assert_eq!(pooled.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn random_three_frame_clips_match_mean_then_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let frames = EmbeddingSet::from_rows((0..12).collect(), &rows).unwrap();
        let clips: Vec<Clip> = (0..4)
            .map(|c| clip(c, c as usize * 3..c as usize * 3 + 3))
            .collect();
        let pooled = pool_clips(&frames, &clips).unwrap();
        for c in 0..4 {
            let mean: Vec<f32> = (0..6)
                .map(|k| (0..3).map(|r| rows[c * 3 + r][k]).sum::<f32>() / 3.0)
                .collect();
            let expected = normalize(&EmbeddingSet::from_rows(vec![0], &[mean]).unwrap()).unwrap();
            for (a, b) in pooled.row(c).iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pooling_ignores_frame_order_within_clip() {
        let rows = vec![
            vec![0.2, 0.9, -0.1],
            vec![0.7, -0.3, 0.5],
            vec![-0.4, 0.1, 0.8],
        ];
        let permuted = vec![rows[2].clone(), rows[0].clone(), rows[1].clone()];
        let a = pool_clips(
            &EmbeddingSet::from_rows(vec![0, 1, 2], &rows).unwrap(),
            &[clip(0, 0..3)],
        )
        .unwrap();
        let b = pool_clips(
            &EmbeddingSet::from_rows(vec![0, 1, 2], &permuted).unwrap(),
            &[clip(0, 0..3)],
        )
        .unwrap();
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_errors() {
        let frames = EmbeddingSet::from_rows(vec![0], &[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            pool_clips(&frames, &[clip(3, 0..0)]),
            Err(EmbedError::EmptyClip(3))
        ));
        assert!(matches!(
            pool_clips(&frames, &[clip(3, 0..2)]),
            Err(EmbedError::RangeOutOfBounds { .. })
        ));
    }

    #[test]
    fn segmentation_respects_length_and_cap() {
        // 130 s video, 65 frames (one per 2 s), 8 s clips, cap 15
        let clips = segment_video(100, 9, 130.0, 10..75, 8.0, 15).unwrap();
        assert_eq!(clips.len(), 15);
        assert_eq!(clips[0].clip_id, 100);
        assert_eq!(clips[0].frame_row_start, 10);
        validate_clip_table(&clips, 8.0, 15).unwrap();
        assert!(clips
            .iter()
            .all(|c| (c.end_s - c.start_s - 8.0).abs() < 1e-12));
        assert!(clips
            .windows(2)
            .all(|w| w[0].frame_row_end == w[1].frame_row_start));

        // short video ends with a terminal partial clip
        let clips = segment_video(0, 1, 20.0, 0..20, 8.0, 15).unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(clips[2].end_s, 20.0);
        assert_eq!(clips[2].frame_row_end, 20);
        validate_clip_table(&clips, 8.0, 15).unwrap();
    }

    #[test]
    fn validation_catches_overlap_and_excess() {
        let mut clips = segment_video(0, 1, 40.0, 0..40, 8.0, 15).unwrap();
        assert!(validate_clip_table(&clips, 8.0, 4).is_err());
        clips[1].start_s = 7.0;
        assert!(validate_clip_table(&clips, 8.0, 15).is_err());
    }

    #[test]
    fn clip_table_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clips.jsonl");
        let clips = segment_video(0, 4, 30.0, 0..15, 8.0, 15).unwrap();
        write_clip_table(&path, &clips).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("\"frame_row_start\":0"));
        assert_eq!(read_clip_table(&path).unwrap(), clips);
    }
}
