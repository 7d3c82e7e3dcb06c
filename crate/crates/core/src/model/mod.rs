//! The two-part encoder: a CNN feature encoder over raw waveforms and a
//! transformer contextualized encoder, plus the wav2vec-style quantizer and
//! the HuBERT-style cluster projections.

mod checkpoint;
mod encoder;
mod params;
mod quantizer;

pub use checkpoint::{import_pretrained, load_checkpoint, save_checkpoint, Checkpoint, PretrainedKey};
pub use encoder::{contextualize_graph, encode_graph, output_frames, receptive_field, total_stride};
pub use params::{BoundParams, EncoderParams, ParamGroup};
pub use quantizer::{quantize_graph, CodeProbs, QuantizeMode};

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::tensor::{Graph, Mat};
use serde::{Deserialize, Serialize};

/// Which pretraining objective family the encoder belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "w2v")]
    W2v,
    #[serde(rename = "hbt")]
    Hbt,
}

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::W2v => "w2v",
            Variant::Hbt => "hbt",
        }
    }
}

/// base = 12 blocks / 768 dim, large = 24 blocks / 1024 dim; toy is free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SizePreset {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "large")]
    Large,
    #[serde(rename = "toy")]
    Toy { blocks: usize, embed_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnLayer {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookSpec {
    pub num_groups: usize,
    pub entries_per_group: usize,
}

/// Span-mask sampling policy: independent per-frame start probability and a
/// fixed span length (truncated at the sequence end).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub span_start_prob: f64,
    pub span_length: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            span_start_prob: 0.065,
            span_length: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PositionalKind {
    /// Learned absolute position table (toy preset default).
    #[serde(rename = "learned")]
    LearnedAbsolute,
    /// Depthwise convolutional relative positions (paper-scale default).
    #[serde(rename = "conv")]
    ConvRelative { kernel: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub size_preset: SizePreset,
    pub cnn_layers: Vec<CnnLayer>,
    pub num_attention_heads: usize,
    /// Required for the w2v variant.
    pub codebook: Option<CodebookSpec>,
    /// Cluster counts per k-means ensemble member; required for hbt.
    pub num_clusters_per_ensemble: Vec<usize>,
    pub mask_policy: MaskPolicy,
    pub positional: PositionalKind,
    /// Capacity of the learned position table.
    pub max_positions: usize,
    /// Whether fine-tuning applies input masking (off by default; exposed as
    /// a flag, not an interpretation).
    pub mask_during_finetune: bool,
}

/// The upstream 7-layer CNN stack used by the base/large presets.
fn paper_cnn_stack() -> Vec<CnnLayer> {
    let ks = [10, 3, 3, 3, 3, 2, 2];
    let ss = [5, 2, 2, 2, 2, 2, 2];
    ks.iter()
        .zip(ss.iter())
        .map(|(&kernel, &stride)| CnnLayer {
            kernel,
            stride,
            channels: 512,
        })
        .collect()
}

/// Small 3-layer stack (receptive field 40 samples, stride 20) for fast tests.
fn toy_cnn_stack(channels: usize) -> Vec<CnnLayer> {
    vec![
        CnnLayer { kernel: 10, stride: 5, channels },
        CnnLayer { kernel: 3, stride: 2, channels },
        CnnLayer { kernel: 3, stride: 2, channels },
    ]
}

impl ModelConfig {
    pub fn toy(variant: Variant) -> Self {
        let mut cfg = ModelConfig {
            variant,
            size_preset: SizePreset::Toy {
                blocks: 2,
                embed_dim: 32,
            },
            cnn_layers: toy_cnn_stack(24),
            num_attention_heads: 4,
            codebook: None,
            num_clusters_per_ensemble: Vec::new(),
            mask_policy: MaskPolicy::default(),
            positional: PositionalKind::LearnedAbsolute,
            max_positions: 1024,
            mask_during_finetune: false,
        };
        match variant {
            Variant::W2v => {
                cfg.codebook = Some(CodebookSpec {
                    num_groups: 2,
                    entries_per_group: 8,
                })
            }
            Variant::Hbt => cfg.num_clusters_per_ensemble = vec![8],
        }
        cfg
    }

    pub fn base(variant: Variant) -> Self {
        let mut cfg = Self::toy(variant);
        cfg.size_preset = SizePreset::Base;
        cfg.cnn_layers = paper_cnn_stack();
        cfg.num_attention_heads = 12;
        cfg.positional = PositionalKind::ConvRelative { kernel: 128 };
        cfg.max_positions = 4096;
        if variant == Variant::W2v {
            cfg.codebook = Some(CodebookSpec {
                num_groups: 2,
                entries_per_group: 320,
            });
        } else {
            cfg.num_clusters_per_ensemble = vec![500];
        }
        cfg
    }

    pub fn large(variant: Variant) -> Self {
        let mut cfg = Self::base(variant);
        cfg.size_preset = SizePreset::Large;
        cfg.num_attention_heads = 16;
        cfg
    }

    pub fn blocks(&self) -> usize {
        match self.size_preset {
            SizePreset::Base => 12,
            SizePreset::Large => 24,
            SizePreset::Toy { blocks, .. } => blocks,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self.size_preset {
            SizePreset::Base => 768,
            SizePreset::Large => 1024,
            SizePreset::Toy { embed_dim, .. } => embed_dim,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim()
    }

    pub fn cnn_output_channels(&self) -> usize {
        self.cnn_layers.last().map(|l| l.channels).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_layers.is_empty() {
            return Err(Error::InvalidConfig("empty CNN stack".into()));
        }
        for (i, l) in self.cnn_layers.iter().enumerate() {
            if l.kernel < 1 || l.stride < 1 || l.channels < 1 {
                return Err(Error::InvalidConfig(format!(
                    "cnn layer {i}: kernel/stride/channels must be >= 1"
                )));
            }
        }
        let d = self.embed_dim();
        if d == 0 || self.blocks() == 0 {
            return Err(Error::InvalidConfig("zero blocks or embedding dim".into()));
        }
        if self.num_attention_heads == 0 || d % self.num_attention_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding dim {d} not divisible by {} heads",
                self.num_attention_heads
            )));
        }
        match self.variant {
            Variant::W2v => {
                let cb = self.codebook.ok_or_else(|| {
                    Error::InvalidConfig("w2v variant requires a codebook".into())
                })?;
                if cb.num_groups == 0 || cb.entries_per_group == 0 {
                    return Err(Error::InvalidConfig("empty codebook".into()));
                }
                if d % cb.num_groups != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "embedding dim {d} not divisible by {} codebook groups",
                        cb.num_groups
                    )));
                }
            }
            Variant::Hbt => {
                if self.num_clusters_per_ensemble.is_empty()
                    || self.num_clusters_per_ensemble.iter().any(|&k| k == 0)
                {
                    return Err(Error::InvalidConfig(
                        "hbt variant requires at least one non-empty cluster ensemble".into(),
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mask_policy.span_start_prob) {
            return Err(Error::InvalidConfig("span_start_prob outside [0,1]".into()));
        }
        if self.mask_policy.span_length < 1 {
            return Err(Error::InvalidConfig("span_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// A [time x feature] matrix with an explicit valid-frame count; rows past
/// `length` are padding and must never influence results.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub values: Mat,
    pub length: usize,
}

impl FrameSequence {
    pub fn new(values: Mat, length: usize) -> Result<Self> {
        if length > values.rows() {
            return Err(Error::DimMismatch {
                expected: values.rows(),
                got: length,
                context: "frame length exceeds allocated rows".into(),
            });
        }
        Ok(FrameSequence { values, length })
    }

    /// Exact-length sequence (no padding rows).
    pub fn exact(values: Mat) -> Self {
        let length = values.rows();
        FrameSequence { values, length }
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// The valid (unpadded) rows as a fresh matrix.
    pub fn valid(&self) -> Mat {
        let mut out = Mat::zeros(self.length, self.values.cols());
        for r in 0..self.length {
            out.row_mut(r).copy_from_slice(self.values.row(r));
        }
        out
    }
}

/// Encoder weights plus configuration; the unit that checkpoints, freezes,
/// and fine-tunes.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: EncoderParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Run the CNN feature encoder over a raw waveform.
    pub fn encode_features(&self, waveform: &[f64]) -> Result<FrameSequence> {
        let mut g = Graph::new();
        let bound = BoundParams::bind_frozen(&mut g, &self.params);
        let node = encode_graph(&mut g, &bound, &self.config, waveform)?;
        Ok(FrameSequence::exact(g.value(node).clone()))
    }

    /// Run the transformer contextualized encoder (optionally with masked
    /// positions replaced by the learned mask embedding).
    pub fn contextualize(
        &self,
        frames: &FrameSequence,
        mask: Option<&MaskSpec>,
    ) -> Result<FrameSequence> {
        let layers = self.contextualize_layers(frames, mask)?;
        Ok(layers.into_iter().last().expect("at least one block"))
    }

    /// Like [`Model::contextualize`] but returns every block's output
    /// (index 0 = first block). Used for iterative target refinement.
    pub fn contextualize_layers(
        &self,
        frames: &FrameSequence,
        mask: Option<&MaskSpec>,
    ) -> Result<Vec<FrameSequence>> {
        let mut g = Graph::new();
        let bound = BoundParams::bind_frozen(&mut g, &self.params);
        let input = g.constant(frames.valid());
        let layers = contextualize_graph(&mut g, &bound, &self.config, input, mask)?;
        Ok(layers
            .into_iter()
            .map(|id| FrameSequence::exact(g.value(id).clone()))
            .collect())
    }

    /// Quantize CNN-encoder output frames (w2v variant only).
    pub fn quantize(
        &self,
        frames: &FrameSequence,
        mode: QuantizeMode,
    ) -> Result<(FrameSequence, CodeProbs)> {
        let mut g = Graph::new();
        let bound = BoundParams::bind_frozen(&mut g, &self.params);
        let input = g.constant(frames.valid());
        let (q, probs) = quantize_graph(&mut g, &bound, &self.config, input, mode)?;
        Ok((FrameSequence::exact(g.value(q).clone()), probs))
    }
}
