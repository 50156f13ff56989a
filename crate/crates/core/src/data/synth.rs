//! Seeded synthetic segmentation data: Gaussian class prototypes observed
//! through Gaussian noise, laid out as runs of non-repeating classes.
//!
//! Draw order from one `SplitMix64(seed)` stream, for reproduction in other
//! languages:
//!
//! 1. Prototypes: for each class, for each dimension, `σ_proto·normal()`.
//! 2. For each video in order:
//!    * length `T = range_inclusive(T_min, T_max)`;
//!    * segments until they cover T: the first class is `below(C)`, later
//!      ones come from the transition rule; each length is
//!      `max(seg_min, round(seg_mean + seg_std·normal()))`. The last segment
//!      is cut at T and merged into its predecessor if shorter than `seg_min`;
//!    * frames: for each frame, for each dimension,
//!      `prototype + σ_obs·normal()`, rounded to f32.
//!
//! `normal()` is Box–Muller and caches its second value, so the stream is
//! consumed in pairs of uniforms.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// How the next segment's class is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Transitions {
    /// Uniform over the other classes: `j = below(C − 1)`, skipping the current class.
    Uniform,
    /// Row-stochastic C×C matrix with zero diagonal, sampled by inverse CDF on `next_f64()`.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_videos: usize,
    /// The last `val_videos` videos form the validation split.
    pub val_videos: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub seg_mean: f64,
    pub seg_std: f64,
    pub seg_min: usize,
    pub proto_sigma: f64,
    pub obs_sigma: f64,
    pub transitions: Transitions,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            feature_dim: 16,
            num_videos: 25,
            val_videos: 5,
            len_min: 180,
            len_max: 220,
            seg_mean: 40.0,
            seg_std: 10.0,
            seg_min: 12,
            proto_sigma: 3.0,
            obs_sigma: 1.0,
            transitions: Transitions::Uniform,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least 2 classes".into());
        }
        if self.feature_dim == 0 || self.num_videos == 0 || self.len_min == 0 || self.seg_min == 0 {
            return bad("synthetic extents must be positive".into());
        }
        if self.val_videos >= self.num_videos {
            return bad("val_videos must leave at least one training video".into());
        }
        if self.len_min > self.len_max {
            return bad(format!(
                "len_min {} exceeds len_max {}",
                self.len_min, self.len_max
            ));
        }
        if !(self.proto_sigma > 0.0) || !(self.obs_sigma >= 0.0) || !(self.seg_std >= 0.0) {
            return bad("proto_sigma must be positive; obs_sigma and seg_std nonnegative".into());
        }
        if !self.seg_mean.is_finite() || self.seg_mean <= 0.0 {
            return bad("seg_mean must be positive".into());
        }
        if let Transitions::Matrix(m) = &self.transitions {
            if m.len() != self.num_classes || m.iter().any(|r| r.len() != self.num_classes) {
                return bad("transition matrix must be C×C".into());
            }
            for (i, row) in m.iter().enumerate() {
                if row[i] != 0.0 {
                    return bad(format!("transition matrix diagonal must be 0 (row {i})"));
                }
                if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return bad(format!("transition row {i} is not a distribution"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    /// C×D class means.
    pub prototypes: Tensor<f64>,
    pub videos: Vec<SyntheticVideo>,
}

impl SyntheticDataset {
    pub fn class_names(&self) -> Vec<String> {
        (0..self.config.num_classes)
            .map(|c| format!("action{c}"))
            .collect()
    }

    pub fn train_ids(&self) -> Vec<String> {
        let n = self.videos.len() - self.config.val_videos;
        self.videos[..n].iter().map(|v| v.id.clone()).collect()
    }

    pub fn val_ids(&self) -> Vec<String> {
        let n = self.videos.len() - self.config.val_videos;
        self.videos[n..].iter().map(|v| v.id.clone()).collect()
    }
}

fn next_class(current: usize, cfg: &SyntheticConfig, rng: &mut SplitMix64) -> usize {
    match &cfg.transitions {
        Transitions::Uniform => {
            let j = rng.below(cfg.num_classes - 1);
            if j >= current {
                j + 1
            } else {
                j
            }
        }
        Transitions::Matrix(m) => {
            let u = rng.next_f64();
            let mut acc = 0.0;
            let row = &m[current];
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            // rounding left u above the total: take the last reachable class
            row.iter().rposition(|&p| p > 0.0).expect("row has mass")
        }
    }
}

fn segment_lengths(
    frames: usize,
    cfg: &SyntheticConfig,
    rng: &mut SplitMix64,
) -> Vec<(usize, usize)> {
    let mut segs: Vec<(usize, usize)> = Vec::new();
    let mut covered = 0;
    let mut class = rng.below(cfg.num_classes);
    while covered < frames {
        if !segs.is_empty() {
            class = next_class(class, cfg, rng);
        }
        let draw = (cfg.seg_mean + cfg.seg_std * rng.normal()).round();
        let len = if draw.is_finite() && draw > cfg.seg_min as f64 {
            draw as usize
        } else {
            cfg.seg_min
        };
        let len = len.min(frames - covered);
        segs.push((class, len));
        covered += len;
    }
    if segs.len() > 1 && segs.last().expect("nonempty").1 < cfg.seg_min {
        let (_, tail) = segs.pop().expect("nonempty");
        segs.last_mut().expect("nonempty").1 += tail;
    }
    segs
}

pub fn synth_generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let (c, d) = (cfg.num_classes, cfg.feature_dim);
    let mut protos = Vec::with_capacity(c * d);
    for _ in 0..c * d {
        protos.push(cfg.proto_sigma * rng.normal());
    }
    let prototypes = Tensor::new(&[c, d], protos)?;
    let width = cfg.num_videos.to_string().len().max(3);
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for v in 0..cfg.num_videos {
        let frames = rng.range_inclusive(cfg.len_min, cfg.len_max);
        let mut labels = Vec::with_capacity(frames);
        for (class, len) in segment_lengths(frames, cfg, &mut rng) {
            labels.extend(std::iter::repeat_n(class, len));
        }
        let mut data = Vec::with_capacity(frames * d);
        for &l in &labels {
            for &p in prototypes.row(l) {
                data.push((p + cfg.obs_sigma * rng.normal()) as f32);
            }
        }
        videos.push(SyntheticVideo {
            id: format!("video_{v:0width$}"),
            features: Tensor::new(&[frames, d], data)?,
            labels,
        });
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        prototypes,
        videos,
    })
}

/// Frame labels by nearest prototype in Euclidean distance (the dataset's skyline classifier).
pub fn nearest_prototype(features: &Tensor<f32>, prototypes: &Tensor<f64>) -> Vec<usize> {
    (0..features.rows())
        .map(|t| {
            let x = features.row(t);
            let dist = |c: usize| -> f64 {
                prototypes
                    .row(c)
                    .iter()
                    .zip(x)
                    .map(|(p, &v)| (p - v as f64).powi(2))
                    .sum()
            };
            (0..prototypes.rows())
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .expect("at least one class")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::segments_from_frames;

    #[test]
    fn segments_respect_length_and_order_rules() {
        let cfg = SyntheticConfig::default();
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.videos.len(), 25);
        for v in &ds.videos {
            let t = v.labels.len();
            assert!((cfg.len_min..=cfg.len_max).contains(&t));
            assert_eq!(v.features.shape(), &[t, 16]);
            for s in segments_from_frames(&v.labels) {
                assert!(s.len() >= cfg.seg_min || t < cfg.seg_min);
            }
        }
        assert_eq!(ds.train_ids().len(), 20);
        assert_eq!(
            ds.val_ids(),
            vec![
                "video_020",
                "video_021",
                "video_022",
                "video_023",
                "video_024"
            ]
        );
    }

    #[test]
    fn matrix_transitions_follow_support() {
        let cfg = SyntheticConfig {
            num_classes: 3,
            transitions: Transitions::Matrix(vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
            ]),
            ..SyntheticConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        for v in &ds.videos {
            let segs = segments_from_frames(&v.labels);
            for w in segs.windows(2) {
                assert_eq!(w[1].class, (w[0].class + 1) % 3);
            }
        }
        let mut bad = cfg.clone();
        bad.transitions = Transitions::Matrix(vec![vec![0.5, 0.5, 0.0]; 3]);
        assert!(bad.validate().is_err());
    }
}
