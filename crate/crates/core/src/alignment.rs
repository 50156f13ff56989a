//! Viterbi duration alignment of a fixed transcript to frame probabilities.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to raw probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-10;

/// A maximal run of one class: frames `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub fn segments_from_frames(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.class == c => s.end = t + 1,
            _ => out.push(Segment {
                start: t,
                end: t + 1,
                class: c,
            }),
        }
    }
    out
}

pub fn frames_from_segments(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.class, s.len()))
        .collect()
}

/// Run-length collapse: the class of each maximal run, in order.
pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out = labels.to_vec();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub durations: Vec<usize>,
    pub frame_labels: Vec<usize>,
    pub score: f64,
}

/// Elementwise `ln(max(p, PROB_FLOOR))`, widened to f64.
pub fn floored_log_probs<F: Scalar>(probs: &Tensor<F>) -> Tensor<f64> {
    let data = probs
        .data()
        .iter()
        .map(|&p| p.to_f64().max(PROB_FLOOR).ln())
        .collect();
    Tensor::new(probs.shape(), data).expect("same shape")
}

/// Assigns every transcript entry a nonempty run of frames, in order,
/// maximizing the summed frame log-probability of the assigned classes.
///
/// `best[t][n] = max(best[t−1][n], best[t−1][n−1]) + log_probs[t][transcript[n]]`;
/// ties extend the current segment.
pub fn viterbi_align(log_probs: &Tensor<f64>, transcript: &[usize]) -> Result<AlignmentResult> {
    let (frames, classes) = log_probs.require_2d("viterbi_align")?;
    let n_seg = transcript.len();
    if n_seg == 0 {
        return Err(Error::EmptyTranscript);
    }
    if n_seg > frames {
        return Err(Error::Infeasible {
            entries: n_seg,
            frames,
        });
    }
    if let Some(&bad) = transcript.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!(
            "transcript class {bad} out of range for {classes} classes"
        )));
    }
    if !log_probs.is_finite() {
        return Err(Error::InvalidArgument(
            "log probabilities must be finite".into(),
        ));
    }

    let emit = |t: usize, n: usize| log_probs.at(t, transcript[n]);
    let mut prev = vec![f64::NEG_INFINITY; n_seg];
    let mut cur = vec![f64::NEG_INFINITY; n_seg];
    // advanced[t * n_seg + n]: segment n started at frame t
    let mut advanced = vec![false; frames * n_seg];
    prev[0] = emit(0, 0);
    for t in 1..frames {
        let hi = n_seg.min(t + 1);
        for n in 0..hi {
            let stay = prev[n];
            let adv = if n > 0 {
                prev[n - 1]
            } else {
                f64::NEG_INFINITY
            };
            let (base, moved) = if stay >= adv {
                (stay, false)
            } else {
                (adv, true)
            };
            cur[n] = base + emit(t, n);
            advanced[t * n_seg + n] = moved;
        }
        cur[hi..].fill(f64::NEG_INFINITY);
        std::mem::swap(&mut prev, &mut cur);
    }

    let score = prev[n_seg - 1];
    let mut frame_labels = vec![0; frames];
    let mut durations = vec![0; n_seg];
    let mut n = n_seg - 1;
    for t in (0..frames).rev() {
        frame_labels[t] = transcript[n];
        durations[n] += 1;
        if t > 0 && advanced[t * n_seg + n] {
            n -= 1;
        }
    }
    debug_assert_eq!(n, 0);
    Ok(AlignmentResult {
        durations,
        frame_labels,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(rows: &[&[f64]]) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_frame_single_entry() {
        let r = viterbi_align(&lp(&[&[0.3, 0.7]]), &[1]).unwrap();
        assert_eq!(r.durations, vec![1]);
        assert_eq!(r.score, 0.7f64.ln());
    }

    #[test]
    fn three_frame_two_entry_example() {
        // p(A) = [0.9, 0.8, 0.1], p(B) = [0.05, 0.1, 0.8]
        let probs = lp(&[&[0.9, 0.05], &[0.8, 0.1], &[0.1, 0.8]]);
        let r = viterbi_align(&probs, &[0, 1]).unwrap();
        assert_eq!(r.durations, vec![2, 1]);
        assert_eq!(r.frame_labels, vec![0, 0, 1]);
        let expect = 0.9f64.ln() + 0.8f64.ln() + 0.8f64.ln();
        assert!((r.score - expect).abs() < 1e-12);
    }

    #[test]
    fn ties_extend_current_segment() {
        let probs = lp(&[&[0.5, 0.5] as &[f64]; 4]);
        let r = viterbi_align(&probs, &[0, 1]).unwrap();
        // each frame prefers staying in its segment, so the boundary lands earliest
        assert_eq!(r.durations, vec![1, 3]);
    }

    #[test]
    fn error_paths() {
        let probs = lp(&[&[0.5, 0.5] as &[f64]; 2]);
        assert!(matches!(
            viterbi_align(&probs, &[]),
            Err(Error::EmptyTranscript)
        ));
        assert!(matches!(
            viterbi_align(&probs, &[0, 1, 0]),
            Err(Error::Infeasible { .. })
        ));
        assert!(viterbi_align(&probs, &[2]).is_err());
    }

    #[test]
    fn segments_round_trip() {
        let labels = [3, 3, 1, 1, 1, 3, 0];
        let segs = segments_from_frames(&labels);
        assert_eq!(segs.len(), 4);
        assert_eq!(
            segs[0],
            Segment {
                start: 0,
                end: 2,
                class: 3
            }
        );
        assert_eq!(frames_from_segments(&segs), labels);
        assert_eq!(collapse(&labels), vec![3, 1, 3, 0]);
        assert_eq!(segments_from_frames(&[5]).len(), 1);
    }
}
