//! Frame accuracy, segmental Edit score and segmental F1@τ.
//!
//! Definitions follow the common action-segmentation evaluation convention:
//! Edit is the normalized Levenshtein distance between run-length collapsed
//! sequences, and F1 greedily matches each predicted segment, in order, to
//! the unmatched same-class ground-truth segment of highest IoU.

use std::fmt::Write as _;

use crate::alignment::{collapse, segments_from_frames, Segment};
use crate::error::{Error, Result};

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "frame_accuracy: {} predicted vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100·(1 − lev(pred, gt)/max(|pred|, |gt|))`; two empty sequences score 100.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(pred, gt) as f64 / longest as f64)
}

pub fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            200.0 * self.tp as f64 / denom as f64
        }
    }

    fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub fn match_segments(pred: &[Segment], gt: &[Segment], tau: f64) -> MatchCounts {
    let mut used = vec![false; gt.len()];
    let mut counts = MatchCounts::default();
    for p in pred {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, g)| !used[*j] && g.class == p.class)
            .map(|(j, g)| (j, iou(p, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= tau => {
                used[j] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = used.iter().filter(|u| !**u).count();
    counts
}

pub fn f1_at(pred: &[Segment], gt: &[Segment], tau: f64) -> f64 {
    match_segments(pred, gt, tau).f1()
}

/// Scores for one video or a whole corpus, all in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub edit: f64,
    /// `(τ, F1@τ)` for each threshold in [`F1_THRESHOLDS`].
    pub f1: Vec<(f64, f64)>,
    pub videos: usize,
    pub frames: usize,
}

impl MetricReport {
    pub fn f1_at(&self, tau: f64) -> f64 {
        self.f1
            .iter()
            .find(|(t, _)| (t - tau).abs() < 1e-12)
            .map(|&(_, v)| v)
            .unwrap_or(f64::NAN)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>8}", "videos", self.videos);
        let _ = writeln!(s, "{:<10}{:>8}", "frames", self.frames);
        let _ = writeln!(s, "{:<10}{:>8.2}", "accuracy", self.accuracy);
        let _ = writeln!(s, "{:<10}{:>8.2}", "edit", self.edit);
        for (tau, v) in &self.f1 {
            let _ = writeln!(
                s,
                "{:<10}{:>8.2}",
                format!("F1@{:02}", (tau * 100.0).round()),
                v
            );
        }
        s
    }

    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "videos={}", self.videos);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "edit={}", self.edit);
        for (tau, v) in &self.f1 {
            let _ = writeln!(s, "f1@{:02}={}", (tau * 100.0).round(), v);
        }
        s
    }
}

/// Corpus aggregation: accuracy is frame-weighted, Edit is the per-video mean,
/// and F1 is computed from TP/FP/FN pooled over videos.
#[derive(Debug, Clone, Default)]
pub struct CorpusMetrics {
    /// Class excluded from every metric (e.g. background), if any.
    pub ignore_class: Option<usize>,
    correct: usize,
    frames: usize,
    edit_sum: f64,
    videos: usize,
    counts: [MatchCounts; 3],
}

impl CorpusMetrics {
    pub fn new(ignore_class: Option<usize>) -> Self {
        Self {
            ignore_class,
            ..Self::default()
        }
    }

    pub fn add_video(&mut self, pred: &[usize], gt: &[usize]) -> Result<MetricReport> {
        frame_accuracy(pred, gt)?;
        let keep = |c: &usize| Some(*c) != self.ignore_class;
        let (mut correct, mut frames) = (0, 0);
        for (p, g) in pred.iter().zip(gt) {
            if keep(g) {
                frames += 1;
                correct += usize::from(p == g);
            }
        }
        let pred_segs: Vec<Segment> = segments_from_frames(pred)
            .into_iter()
            .filter(|s| keep(&s.class))
            .collect();
        let gt_segs: Vec<Segment> = segments_from_frames(gt)
            .into_iter()
            .filter(|s| keep(&s.class))
            .collect();
        let pred_seq: Vec<usize> = collapse(&pred.iter().copied().filter(keep).collect::<Vec<_>>());
        let gt_seq: Vec<usize> = collapse(&gt.iter().copied().filter(keep).collect::<Vec<_>>());
        let edit = edit_score(&pred_seq, &gt_seq);
        let mut f1 = Vec::with_capacity(3);
        for (i, &tau) in F1_THRESHOLDS.iter().enumerate() {
            let c = match_segments(&pred_segs, &gt_segs, tau);
            self.counts[i].add(c);
            f1.push((tau, c.f1()));
        }
        self.correct += correct;
        self.frames += frames;
        self.edit_sum += edit;
        self.videos += 1;
        Ok(MetricReport {
            accuracy: if frames == 0 {
                100.0
            } else {
                100.0 * correct as f64 / frames as f64
            },
            edit,
            f1,
            videos: 1,
            frames,
        })
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            accuracy: if self.frames == 0 {
                0.0
            } else {
                100.0 * self.correct as f64 / self.frames as f64
            },
            edit: if self.videos == 0 {
                0.0
            } else {
                self.edit_sum / self.videos as f64
            },
            f1: F1_THRESHOLDS
                .iter()
                .zip(&self.counts)
                .map(|(&t, c)| (t, c.f1()))
                .collect(),
            videos: self.videos,
            frames: self.frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: usize, end: usize, class: usize) -> Segment {
        Segment { start, end, class }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(frame_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(frame_accuracy(&[1, 1, 1, 0], &[1, 1, 1, 1]).unwrap(), 75.0);
        assert!(frame_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn edit_examples() {
        assert_eq!(edit_score(&[1, 2, 3], &[1, 2, 3]), 100.0);
        assert_eq!(edit_score(&[0, 1], &[0]), 50.0);
        assert_eq!(edit_score(&[], &[0]), 0.0);
        assert_eq!(edit_score(&[], &[]), 100.0);
    }

    #[test]
    fn f1_iou_threshold_example() {
        // IoU = 4 / 10 = 0.4
        let gt = [seg(0, 8, 0)];
        let pred = [seg(4, 10, 0)];
        assert!((iou(&pred[0], &gt[0]) - 0.4).abs() < 1e-12);
        assert_eq!(f1_at(&pred, &gt, 0.25), 100.0);
        assert_eq!(f1_at(&pred, &gt, 0.50), 0.0);
        assert_eq!(f1_at(&gt, &gt, 0.50), 100.0);
        assert_eq!(f1_at(&[], &[], 0.5), 100.0);
    }

    #[test]
    fn matched_ground_truth_is_not_reused() {
        let gt = [seg(0, 10, 1)];
        let pred = [seg(0, 6, 1), seg(6, 10, 1)];
        let c = match_segments(&pred, &gt, 0.1);
        assert_eq!(
            c,
            MatchCounts {
                tp: 1,
                fp: 1,
                fn_: 0
            }
        );
    }

    #[test]
    fn corpus_aggregation() {
        let mut corpus = CorpusMetrics::new(None);
        corpus.add_video(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap();
        corpus
            .add_video(&[0, 0, 0, 0, 0, 0], &[0, 0, 0, 1, 1, 1])
            .unwrap();
        let r = corpus.report();
        assert_eq!(r.accuracy, 70.0);
        assert_eq!(r.edit, 75.0);
        assert_eq!(r.videos, 2);
        let text = r.to_key_values();
        assert!(text.contains("accuracy=70"));
        assert!(text.contains("f1@50="));
    }

    #[test]
    fn ignored_class_is_excluded() {
        let mut corpus = CorpusMetrics::new(Some(0));
        let r = corpus.add_video(&[1, 1, 2, 2], &[0, 1, 2, 0]).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.edit, 100.0);
    }
}
