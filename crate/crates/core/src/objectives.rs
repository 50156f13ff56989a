//! Label smoothing, input noise, and the identification/reasoning losses.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingConfig {
    /// Maximum temporal shift for boundary smoothing; 0 disables it.
    pub tls_eps: usize,
    /// Categorical smoothing of frame targets.
    pub cls_alpha_i: f64,
    /// Categorical smoothing of transcript-slot targets.
    pub cls_alpha_t: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            tls_eps: 4,
            cls_alpha_i: 0.1,
            cls_alpha_t: 0.4,
        }
    }
}

impl SmoothingConfig {
    pub fn long() -> Self {
        Self {
            tls_eps: 10,
            cls_alpha_i: 0.2,
            cls_alpha_t: 0.45,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("cls_alpha_i", self.cls_alpha_i),
            ("cls_alpha_t", self.cls_alpha_t),
        ] {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {a}")));
            }
        }
        Ok(())
    }
}

/// Standard deviations of the Gaussian noise added to input features in each training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub weight_phase1: f64,
    pub weight_phase2: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            weight_phase1: 0.5,
            weight_phase2: 1.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight_phase1 < 0.0 || self.weight_phase2 < 0.0 {
            return Err(Error::Config("noise weights must be nonnegative".into()));
        }
        if self.weight_phase2 < self.weight_phase1 {
            return Err(Error::Config(format!(
                "phase-2 noise weight {} below phase-1 weight {}",
                self.weight_phase2, self.weight_phase1
            )));
        }
        Ok(())
    }
}

/// Shifts labels by `shift` frames (positive moves them later), repeating
/// the edge label into vacated positions.
pub fn shift_labels(labels: &[usize], shift: isize) -> Vec<usize> {
    let last = labels.len() as isize - 1;
    (0..labels.len() as isize)
        .map(|t| labels[(t - shift).clamp(0, last) as usize])
        .collect()
}

/// Temporal label smoothing: roll the targets by a random signed step in
/// `1..=eps`. Only frames within `eps` of a segment boundary can change.
pub fn temporal_label_smooth(labels: &[usize], eps: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if eps == 0 || labels.is_empty() {
        return labels.to_vec();
    }
    let step = rng.range_inclusive(1, eps) as isize;
    let shift = if rng.coin() { step } else { -step };
    shift_labels(labels, shift)
}

/// `(1 − α)·onehot + α/C` for each label.
pub fn categorical_label_smooth<F: Scalar>(
    labels: &[usize],
    alpha: f64,
    classes: usize,
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    if labels.is_empty() || classes == 0 {
        return Err(Error::InvalidArgument("empty label set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let off = alpha / classes as f64;
    let on = 1.0 - alpha + off;
    let mut t = Tensor::filled(&[labels.len(), classes], F::from_f64(off));
    for (r, &c) in labels.iter().enumerate() {
        t.data_mut()[r * classes + c] = F::from_f64(on);
    }
    Ok(t)
}

/// `features + weight·N(0, 1)` elementwise. A zero weight returns the input unchanged.
pub fn add_gaussian_noise<F: Scalar>(
    features: &Tensor<F>,
    weight: f64,
    rng: &mut SplitMix64,
) -> Tensor<F> {
    if weight == 0.0 {
        return features.clone();
    }
    let mut out = features.clone();
    for v in out.data_mut() {
        *v = *v + F::from_f64(weight * rng.normal());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub identification: f64,
    pub reasoning: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            identification: 0.9,
            reasoning: 0.1,
        }
    }
}

impl LossWeights {
    pub fn equal() -> Self {
        Self {
            identification: 0.5,
            reasoning: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub total: Var,
    pub identification: Var,
    pub reasoning: Var,
}

/// Combined objective.
///
/// * `frame_targets`: T×C soft targets (already temporally and categorically smoothed).
/// * `slot_targets`: (N+1)×(C+1) soft targets for the transcript entries plus
///   the End token; slots past End are not supervised.
pub fn loss_total<F: Scalar>(
    tape: &mut Tape<F>,
    frame_logits: Var,
    frame_targets: &Tensor<F>,
    transcript_logits: Var,
    slot_targets: &Tensor<F>,
    weights: LossWeights,
) -> Result<Losses> {
    let identification = tape.cross_entropy_soft(frame_logits, frame_targets)?;
    let slots = slot_targets.rows();
    let (max_len, _) = tape.value(transcript_logits).require_2d("loss_total")?;
    if slots > max_len {
        return Err(Error::TranscriptTooLong {
            len: slots,
            max: max_len,
        });
    }
    let supervised = tape.slice_rows(transcript_logits, 0, slots)?;
    let reasoning = tape.cross_entropy_soft(supervised, slot_targets)?;
    let a = tape.scale(identification, F::from_f64(weights.identification));
    let b = tape.scale(reasoning, F::from_f64(weights.reasoning));
    let total = tape.add(a, b)?;
    Ok(Losses {
        total,
        identification,
        reasoning,
    })
}
