//! Coarse transcripts: the duration-free action order fed to the reasoning decoder.

use crate::alignment::{collapse, segments_from_frames};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An ordered, duplicate-free list of action ids plus the slot layout used
/// to query the reasoning decoder.
///
/// The padded form has `max_len` slots: the actions, one End token (id `C`),
/// then pad tokens (id `C + 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoarseTranscript {
    ids: Vec<usize>,
    num_classes: usize,
    max_len: usize,
}

impl CoarseTranscript {
    pub fn new(ids: Vec<usize>, num_classes: usize, max_len: usize) -> Result<Self> {
        if ids.len() + 1 > max_len {
            return Err(Error::TranscriptTooLong {
                len: ids.len() + 1,
                max: max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "transcript id {bad} out of range for {num_classes} classes"
            )));
        }
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "transcript has consecutive duplicates".into(),
            ));
        }
        Ok(Self {
            ids,
            num_classes,
            max_len,
        })
    }

    /// Collapses frame labels; entries beyond `max_len − 1` are dropped.
    /// Returns the transcript and whether it was truncated.
    pub fn from_frame_labels(
        labels: &[usize],
        num_classes: usize,
        max_len: usize,
    ) -> Result<(Self, bool)> {
        let mut ids = collapse(labels);
        let truncated = ids.len() + 1 > max_len;
        ids.truncate(max_len.saturating_sub(1));
        Ok((Self::new(ids, num_classes, max_len)?, truncated))
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn end_id(&self) -> usize {
        self.num_classes
    }

    pub fn pad_id(&self) -> usize {
        self.num_classes + 1
    }

    pub fn padded(&self) -> Vec<usize> {
        let mut out = self.ids.clone();
        out.push(self.end_id());
        out.resize(self.max_len, self.pad_id());
        out
    }

    /// True for slots after End.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.max_len).map(|s| s > self.ids.len()).collect()
    }

    /// Supervised slot labels: the actions followed by End.
    pub fn slot_labels(&self) -> Vec<usize> {
        let mut out = self.ids.clone();
        out.push(self.end_id());
        out
    }
}

/// Frame-wise argmax collapsed into a transcript.
///
/// Runs shorter than `min_duration` frames are dropped before collapsing
/// (0 or 1 disables the filter; if every run is dropped the filter is
/// skipped). Overlong transcripts are truncated with a warning.
pub fn extract_coarse_transcript<F: Scalar>(
    frame_logits: &Tensor<F>,
    max_len: usize,
    min_duration: usize,
) -> Result<CoarseTranscript> {
    let (_, classes) = frame_logits.require_2d("extract_coarse_transcript")?;
    let labels = frame_logits.argmax_rows();
    let mut kept: Vec<usize> = segments_from_frames(&labels)
        .into_iter()
        .filter(|s| s.len() >= min_duration)
        .map(|s| s.class)
        .collect();
    if kept.is_empty() {
        kept = labels;
    }
    let (t, truncated) = CoarseTranscript::from_frame_labels(&kept, classes, max_len)?;
    if truncated {
        log::warn!(
            "coarse transcript of {} entries truncated to {}",
            collapse(&kept).len(),
            max_len - 1
        );
    }
    Ok(t)
}

/// A transcript read back from per-slot logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedTranscript {
    pub ids: Vec<usize>,
    /// False when no slot predicted End; all slots were then used.
    pub end_found: bool,
}

/// Per-slot argmax over `max_len × (C + 1)` logits, cut at the first End and collapsed.
pub fn decode_transcript<F: Scalar>(transcript_logits: &Tensor<F>) -> Result<DecodedTranscript> {
    let (_, width) = transcript_logits.require_2d("decode_transcript")?;
    if width < 2 {
        return Err(Error::InvalidArgument(
            "transcript logits need at least one class plus End".into(),
        ));
    }
    let end = width - 1;
    let slots = transcript_logits.argmax_rows();
    let cut = slots.iter().position(|&s| s == end);
    if cut.is_none() {
        log::warn!("no End token predicted in {} slots", slots.len());
    }
    let ids = collapse(&slots[..cut.unwrap_or(slots.len())]);
    Ok(DecodedTranscript {
        ids,
        end_found: cut.is_some(),
    })
}
