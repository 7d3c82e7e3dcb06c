//! Contiguous span masks over encoder output frames, shared by both
//! pretraining objectives. Sampling is replayable: the same (length, policy,
//! seed) triple yields the same mask on every platform.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{FrameSequence, MaskPolicy};
use crate::tensor::Mat;

/// The set M of masked frame indices for a length-T sequence. Indices are
/// sorted, deduplicated, and strictly below `length_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    indices: Vec<usize>,
    length_t: usize,
}

impl MaskSpec {
    pub fn new(mut indices: Vec<usize>, length_t: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= length_t) {
            return Err(Error::MaskIndexOutOfRange {
                index: bad,
                len: length_t,
            });
        }
        Ok(MaskSpec { indices, length_t })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn length(&self) -> usize {
        self.length_t
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.length_t == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.length_t as f64
        }
    }

    /// Text fixture format: `length=T indices=i1,i2,...`.
    pub fn to_text(&self) -> String {
        let joined = self
            .indices
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!("length={} indices={}", self.length_t, joined)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut length = None;
        let mut indices = Vec::new();
        for field in s.split_whitespace() {
            if let Some(v) = field.strip_prefix("length=") {
                length = Some(
                    v.parse::<usize>()
                        .map_err(|e| Error::Data(format!("bad mask length: {e}")))?,
                );
            } else if let Some(v) = field.strip_prefix("indices=") {
                if !v.is_empty() {
                    for part in v.split(',') {
                        indices.push(
                            part.parse::<usize>()
                                .map_err(|e| Error::Data(format!("bad mask index: {e}")))?,
                        );
                    }
                }
            } else {
                return Err(Error::Data(format!("unknown mask field {field}")));
            }
        }
        let length = length.ok_or_else(|| Error::Data("mask text missing length".into()))?;
        MaskSpec::new(indices, length)
    }
}

/// Sample a union of fixed-length spans: each frame independently starts a
/// span with `policy.span_start_prob`; spans truncate at the sequence end and
/// overlaps merge.
pub fn sample_mask(length_t: usize, policy: MaskPolicy, rng_seed: u64) -> Result<MaskSpec> {
    if length_t == 0 {
        return Err(Error::InvalidConfig("length_t must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&policy.span_start_prob) {
        return Err(Error::InvalidConfig("span_start_prob outside [0,1]".into()));
    }
    if policy.span_length < 1 {
        return Err(Error::InvalidConfig("span_length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut masked = vec![false; length_t];
    for t in 0..length_t {
        // one draw per frame, in order, keeps the stream replayable
        let u: f64 = rng.random_range(0.0..1.0);
        if u < policy.span_start_prob {
            let end = (t + policy.span_length).min(length_t);
            for m in masked.iter_mut().take(end).skip(t) {
                *m = true;
            }
        }
    }
    let indices = masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| if m { Some(i) } else { None })
        .collect();
    MaskSpec::new(indices, length_t)
}

/// Replace masked rows with the mask embedding; all other rows (including
/// padding beyond `frames.length`) are bit-identical to the input.
pub fn apply_mask(
    frames: &FrameSequence,
    mask: &MaskSpec,
    mask_embedding: &Mat,
) -> Result<FrameSequence> {
    if mask.length() != frames.length {
        return Err(Error::DimMismatch {
            expected: frames.length,
            got: mask.length(),
            context: "mask length vs frame count".into(),
        });
    }
    if mask_embedding.rows() != 1 || mask_embedding.cols() != frames.dim() {
        return Err(Error::DimMismatch {
            expected: frames.dim(),
            got: mask_embedding.len(),
            context: "mask embedding dim vs frame dim".into(),
        });
    }
    let mut values = frames.values.clone();
    for &i in mask.indices() {
        values.row_mut(i).copy_from_slice(mask_embedding.row(0));
    }
    FrameSequence::new(values, frames.length)
}
