//! Downstream task adaptors: mean pooling + linear classification (SER and
//! speaker ID), cosine-scored verification, and the attentional GRU decoder
//! with beam search for SLU.

mod decoder;
mod semantics;

pub use decoder::{
    beam_search, decode_step, greedy_decode, teacher_forced_nll, teacher_forced_nll_graph,
    DecodeHypothesis, DecoderConfig, DecoderState, VocabSpec,
};
pub use semantics::{
    char_vocab, parse_semantics, serialize_semantics, ParseOutcome, SemanticAnnotation, Vocab,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, FrameSequence, ParamGroup};
use crate::tensor::{Graph, Mat, NodeId};

/// Utterance-level embedding: the mean over valid frames only.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub vector: Mat, // 1 x dim
    pub source_length: usize,
}

/// Average time pooling over the first `length` rows; padding rows beyond
/// the valid length never contribute.
pub fn pool_mean(frames: &FrameSequence) -> Result<PooledEmbedding> {
    if frames.length == 0 {
        return Err(Error::Data("pool_mean on zero-length sequence".into()));
    }
    let d = frames.dim();
    let mut acc = vec![0.0; d];
    for r in 0..frames.length {
        for (a, &v) in acc.iter_mut().zip(frames.values.row(r)) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= frames.length as f64;
    }
    Ok(PooledEmbedding {
        vector: Mat::row_vec(acc),
        source_length: frames.length,
    })
}

/// Graph-side mean pooling over the valid prefix of a frame node.
pub fn pool_mean_graph(g: &mut Graph, frames: NodeId, valid_len: usize) -> NodeId {
    let rows = g.value(frames).rows();
    let x = if valid_len < rows {
        g.slice_rows(frames, 0, valid_len)
    } else {
        frames
    };
    g.mean_rows(x)
}

/// What kind of head a parameter set implements; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadMeta {
    Classifier { in_dim: usize, num_classes: usize },
    Decoder { config: DecoderConfig },
}

/// Downstream head parameters (always trainable, regardless of the encoder
/// freeze policy).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    meta: HeadMeta,
    group: ParamGroup,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect(),
    )
}

impl HeadParams {
    pub fn init_classifier(in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig("degenerate classifier head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut group = ParamGroup::new();
        group.insert("cls.w", xavier(&mut rng, in_dim, num_classes))?;
        group.insert("cls.b", Mat::zeros(1, num_classes))?;
        Ok(HeadParams {
            meta: HeadMeta::Classifier {
                in_dim,
                num_classes,
            },
            group,
        })
    }

    pub fn init_decoder(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut group = ParamGroup::new();
        let (e, h, enc, v) = (
            config.embed_dim,
            config.hidden_dim,
            config.enc_dim,
            config.vocab.size,
        );
        group.insert("dec.embed", xavier(&mut rng, v, e))?;
        group.insert("dec.attn.w", xavier(&mut rng, h, enc))?;
        for gate in ["r", "z", "n"] {
            group.insert(&format!("dec.gru.wx{gate}"), xavier(&mut rng, e + enc, h))?;
            group.insert(&format!("dec.gru.wh{gate}"), xavier(&mut rng, h, h))?;
            group.insert(&format!("dec.gru.b{gate}"), Mat::zeros(1, h))?;
        }
        group.insert("dec.init.w", xavier(&mut rng, enc, h))?;
        group.insert("dec.init.b", Mat::zeros(1, h))?;
        group.insert("dec.out.w", xavier(&mut rng, h + enc, v))?;
        group.insert("dec.out.b", Mat::zeros(1, v))?;
        Ok(HeadParams {
            meta: HeadMeta::Decoder { config },
            group,
        })
    }

    pub fn from_parts(meta: HeadMeta, group: ParamGroup) -> Self {
        HeadParams { meta, group }
    }

    pub fn meta(&self) -> &HeadMeta {
        &self.meta
    }

    pub fn group(&self) -> &ParamGroup {
        &self.group
    }

    pub fn group_mut(&mut self) -> &mut ParamGroup {
        &mut self.group
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.meta {
            HeadMeta::Classifier { num_classes, .. } => Some(num_classes),
            _ => None,
        }
    }

    pub fn decoder_config(&self) -> Option<&DecoderConfig> {
        match &self.meta {
            HeadMeta::Decoder { config } => Some(config),
            _ => None,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams::bind_named(g, self.group.iter(), trainable)
    }

    pub fn checksum(&self) -> u64 {
        self.group.checksum()
    }
}

/// Class logits for a pooled embedding.
pub fn classify(embedding: &PooledEmbedding, head: &HeadParams) -> Result<Vec<f64>> {
    let (in_dim, _) = match head.meta {
        HeadMeta::Classifier {
            in_dim,
            num_classes,
        } => (in_dim, num_classes),
        _ => return Err(Error::InvalidConfig("head is not a classifier".into())),
    };
    if embedding.vector.cols() != in_dim {
        return Err(Error::DimMismatch {
            expected: in_dim,
            got: embedding.vector.cols(),
            context: "embedding dim vs classifier input".into(),
        });
    }
    let w = head.group.get("cls.w").expect("classifier weights");
    let b = head.group.get("cls.b").expect("classifier bias");
    let mut logits = embedding.vector.matmul(w);
    logits.add_assign(b);
    Ok(logits.into_data())
}

/// Cross-entropy of logits against a class label.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Graph-side classifier loss: pooled embedding node -> cross-entropy scalar.
pub fn classifier_loss_graph(
    g: &mut Graph,
    head_bound: &BoundParams,
    pooled: NodeId,
    label: usize,
) -> NodeId {
    let w = head_bound.id("cls.w");
    let b = head_bound.id("cls.b");
    let logits = g.matmul(pooled, w);
    let logits = g.add_broadcast(logits, b);
    let lp = g.log_softmax(logits);
    let picked = g.element(lp, 0, label);
    g.scale(picked, -1.0)
}

/// Graph-side logits (for evaluation through the same code path).
pub fn classifier_logits_graph(g: &mut Graph, head_bound: &BoundParams, pooled: NodeId) -> NodeId {
    let w = head_bound.id("cls.w");
    let b = head_bound.id("cls.b");
    let logits = g.matmul(pooled, w);
    g.add_broadcast(logits, b)
}

/// Cosine similarity between two pooled embeddings, symmetric and
/// epsilon-stabilized (zero-norm inputs score 0 rather than NaN).
pub fn sv_score(a: &PooledEmbedding, b: &PooledEmbedding) -> Result<f64> {
    if a.vector.cols() != b.vector.cols() {
        return Err(Error::DimMismatch {
            expected: a.vector.cols(),
            got: b.vector.cols(),
            context: "embedding dims in sv_score".into(),
        });
    }
    Ok(cosine(a.vector.data(), b.vector.data()))
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-8)
}
