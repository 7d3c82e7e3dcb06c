//! Graph builders for the CNN feature encoder and the transformer
//! contextualized encoder. The same builders serve inference (all-constant
//! bindings) and training (trainable leaves).

use super::params::BoundParams;
use super::{ModelConfig, PositionalKind};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::tensor::{Graph, Mat, NodeId};

/// Total receptive field of the CNN stack in input samples.
pub fn receptive_field(config: &ModelConfig) -> usize {
    let mut rf = 1usize;
    let mut stride = 1usize;
    for layer in &config.cnn_layers {
        rf += (layer.kernel - 1) * stride;
        stride *= layer.stride;
    }
    rf
}

/// Product of all layer strides: input samples per output frame.
pub fn total_stride(config: &ModelConfig) -> usize {
    config.cnn_layers.iter().map(|l| l.stride).product()
}

/// Frame count produced for `samples` input samples, folding each layer's
/// floor((t - k)/s) + 1 in sequence.
pub fn output_frames(config: &ModelConfig, samples: usize) -> Result<usize> {
    let rf = receptive_field(config);
    if samples < rf {
        return Err(Error::WaveformTooShort {
            got: samples,
            need: rf,
        });
    }
    let mut t = samples;
    for layer in &config.cnn_layers {
        t = (t - layer.kernel) / layer.stride + 1;
    }
    Ok(t)
}

/// CNN feature encoder: waveform -> [frames x channels].
pub fn encode_graph(
    g: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    waveform: &[f64],
) -> Result<NodeId> {
    output_frames(config, waveform.len())?; // validates length
    let mut x = g.constant(Mat::col_vec(waveform.to_vec()));
    for (i, layer) in config.cnn_layers.iter().enumerate() {
        let u = g.unfold(x, layer.kernel, layer.stride);
        let w = bound.id(&format!("cnn.{i}.w"));
        let b = bound.id(&format!("cnn.{i}.b"));
        let m = g.matmul(u, w);
        let m = g.add_broadcast(m, b);
        x = g.gelu(m);
    }
    Ok(x)
}

fn attention_block(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> NodeId {
    let d = g.value(x).cols();
    let dh = d / heads;
    let q = {
        let w = bound.id(&format!("{prefix}.attn.wq"));
        let b = bound.id(&format!("{prefix}.attn.bq"));
        let m = g.matmul(x, w);
        g.add_broadcast(m, b)
    };
    let k = {
        let w = bound.id(&format!("{prefix}.attn.wk"));
        let b = bound.id(&format!("{prefix}.attn.bk"));
        let m = g.matmul(x, w);
        g.add_broadcast(m, b)
    };
    let v = {
        let w = bound.id(&format!("{prefix}.attn.wv"));
        let b = bound.id(&format!("{prefix}.attn.bv"));
        let m = g.matmul(x, w);
        g.add_broadcast(m, b)
    };
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, c0, c1);
        let kh = g.slice_cols(k, c0, c1);
        let vh = g.slice_cols(v, c0, c1);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        head_outputs.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&head_outputs);
    let wo = bound.id(&format!("{prefix}.attn.wo"));
    let bo = bound.id(&format!("{prefix}.attn.bo"));
    let out = g.matmul(cat, wo);
    g.add_broadcast(out, bo)
}

fn transformer_block(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> NodeId {
    // Pre-norm residual blocks; a zeroed block is the identity map.
    let g1 = bound.id(&format!("{prefix}.ln1.gamma"));
    let b1 = bound.id(&format!("{prefix}.ln1.beta"));
    let normed = g.layer_norm(x, g1, b1, 1e-5);
    let attn = attention_block(g, bound, prefix, normed, heads);
    let x = g.add(x, attn);

    let g2 = bound.id(&format!("{prefix}.ln2.gamma"));
    let b2 = bound.id(&format!("{prefix}.ln2.beta"));
    let normed = g.layer_norm(x, g2, b2, 1e-5);
    let w1 = bound.id(&format!("{prefix}.ffn.w1"));
    let fb1 = bound.id(&format!("{prefix}.ffn.b1"));
    let w2 = bound.id(&format!("{prefix}.ffn.w2"));
    let fb2 = bound.id(&format!("{prefix}.ffn.b2"));
    let h = g.matmul(normed, w1);
    let h = g.add_broadcast(h, fb1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    let ffn = g.add_broadcast(h, fb2);
    g.add(x, ffn)
}

/// Input projection, optional mask replacement, positional information, and
/// the transformer stack. Returns each block's output in order.
pub fn contextualize_graph(
    g: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    frames: NodeId,
    mask: Option<&MaskSpec>,
) -> Result<Vec<NodeId>> {
    let t = g.value(frames).rows();
    let d = config.embed_dim();
    if let Some(m) = mask {
        if m.length() != t {
            return Err(Error::DimMismatch {
                expected: t,
                got: m.length(),
                context: "mask length vs frame count".into(),
            });
        }
        if let Some(&bad) = m.indices().iter().find(|&&i| i >= t) {
            return Err(Error::MaskIndexOutOfRange { index: bad, len: t });
        }
    }

    // Projection into embedding space happens before masking so the mask
    // embedding lives in the same space as the transformer inputs.
    let pw = bound.id("proj.w");
    let pb = bound.id("proj.b");
    let x = g.matmul(frames, pw);
    let mut x = g.add_broadcast(x, pb);

    if let Some(m) = mask {
        if !m.indices().is_empty() {
            let emb = bound.id("mask_embedding");
            x = g.replace_rows(x, m.indices().to_vec(), emb);
        }
    }

    match config.positional {
        PositionalKind::LearnedAbsolute => {
            if t > config.max_positions {
                return Err(Error::InvalidConfig(format!(
                    "sequence of {t} frames exceeds position table of {}",
                    config.max_positions
                )));
            }
            let table = bound.id("pos.embed");
            let pos = g.slice_rows(table, 0, t);
            x = g.add(x, pos);
        }
        PositionalKind::ConvRelative { .. } => {
            let w = bound.id("pos.conv_w");
            let b = bound.id("pos.conv_b");
            let conv = g.depthwise_conv_same(x, w);
            let conv = g.add_broadcast(conv, b);
            let conv = g.gelu(conv);
            x = g.add(x, conv);
        }
    }

    debug_assert_eq!(g.value(x).cols(), d);
    let mut outputs = Vec::with_capacity(config.blocks());
    for b in 0..config.blocks() {
        x = transformer_block(g, bound, &format!("transformer.{b}"), x, config.num_attention_heads);
        outputs.push(x);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskSpec;
    use crate::model::{Model, ModelConfig, Variant};
    use crate::tensor::Mat;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_stack_shape_matches_stride_arithmetic() {
        let cfg = ModelConfig::toy(Variant::W2v);
        assert_eq!(receptive_field(&cfg), 40);
        assert_eq!(total_stride(&cfg), 20);
        // floor((16000 - 40) / 20) + 1 = 799
        assert_eq!(output_frames(&cfg, 16000).unwrap(), 799);
        // exactly the receptive field -> a single frame
        assert_eq!(output_frames(&cfg, 40).unwrap(), 1);
        assert!(matches!(
            output_frames(&cfg, 39),
            Err(Error::WaveformTooShort { got: 39, need: 40 })
        ));
    }

    /// Independent shape oracle: run each layer's length formula separately
    /// and compare against output_frames for random configs.
    #[test]
    fn frame_count_matches_per_layer_oracle_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let layers = (0..rng.random_range(1..=4))
                .map(|_| crate::model::CnnLayer {
                    kernel: rng.random_range(1..=12),
                    stride: rng.random_range(1..=6),
                    channels: 4,
                })
                .collect::<Vec<_>>();
            let mut cfg = ModelConfig::toy(Variant::W2v);
            cfg.cnn_layers = layers.clone();
            let rf = receptive_field(&cfg);
            let samples = rf + rng.random_range(0..200);
            let got = output_frames(&cfg, samples).unwrap();
            let mut t = samples;
            for l in &layers {
                assert!(t >= l.kernel, "receptive-field bound violated");
                t = (t - l.kernel) / l.stride + 1;
            }
            assert_eq!(got, t, "layers {layers:?} samples {samples}");
        }
    }

    #[test]
    fn encode_features_is_deterministic_and_finite() {
        let model = Model::init(ModelConfig::toy(Variant::W2v), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wav: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = model.encode_features(&wav).unwrap();
        let b = model.encode_features(&wav).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.length, output_frames(&model.config, 2000).unwrap());
        assert!(a.values.all_finite());
    }

    #[test]
    fn empty_mask_equals_no_mask() {
        let model = Model::init(ModelConfig::toy(Variant::Hbt), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wav: Vec<f64> = (0..900).map(|_| rng.random_range(-1.0..1.0)).collect();
        let frames = model.encode_features(&wav).unwrap();
        let empty = MaskSpec::new(Vec::new(), frames.length).unwrap();
        let with_empty = model.contextualize(&frames, Some(&empty)).unwrap();
        let without = model.contextualize(&frames, None).unwrap();
        assert_eq!(with_empty.values, without.values);
    }

    #[test]
    fn full_mask_erases_input_differences() {
        let model = Model::init(ModelConfig::toy(Variant::W2v), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wav_a: Vec<f64> = (0..800).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wav_b: Vec<f64> = (0..800).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fa = model.encode_features(&wav_a).unwrap();
        let fb = model.encode_features(&wav_b).unwrap();
        assert_eq!(fa.length, fb.length);
        let full = MaskSpec::new((0..fa.length).collect(), fa.length).unwrap();
        let ca = model.contextualize(&fa, Some(&full)).unwrap();
        let cb = model.contextualize(&fb, Some(&full)).unwrap();
        assert_eq!(ca.values, cb.values);
    }

    #[test]
    fn mask_out_of_range_is_an_error() {
        let model = Model::init(ModelConfig::toy(Variant::W2v), 5).unwrap();
        let frames = FrameSeqFixture::random(&model, 400);
        let bad = MaskSpec::new(vec![frames.length + 3], frames.length + 10).unwrap();
        let err = model.contextualize(&frames, Some(&bad)).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. } | Error::MaskIndexOutOfRange { .. }));
    }

    /// Zeroed transformer blocks plus zeroed positions reduce contextualize
    /// to the input projection; compared against a hand-computed projection.
    #[test]
    fn zeroed_blocks_reduce_to_input_projection() {
        let cfg = ModelConfig::toy(Variant::W2v);
        let mut model = Model::init(cfg, 21).unwrap();
        for b in 0..model.config.blocks() {
            for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"] {
                let key = format!("transformer.{b}.{name}");
                let m = model.params.transformer.get_mut(&key).unwrap();
                *m = Mat::zeros(m.rows(), m.cols());
            }
        }
        {
            let pos = model.params.auxiliary.get_mut("pos.embed").unwrap();
            *pos = Mat::zeros(pos.rows(), pos.cols());
        }
        let c_last = model.config.cnn_output_channels();
        let frame = Mat::from_vec(1, c_last, (0..c_last).map(|i| 0.01 * i as f64).collect());
        let fs = crate::model::FrameSequence::exact(frame.clone());
        let out = model.contextualize(&fs, None).unwrap();

        // oracle: single-row affine map computed by hand
        let w = model.params.auxiliary.get("proj.w").unwrap();
        let b = model.params.auxiliary.get("proj.b").unwrap();
        let d = model.config.embed_dim();
        let mut expect = vec![0.0; d];
        for j in 0..d {
            let mut acc = b.at(0, j);
            for i in 0..c_last {
                acc += frame.at(0, i) * w.at(i, j);
            }
            expect[j] = acc;
        }
        for j in 0..d {
            assert!((out.values.at(0, j) - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn shifting_input_changes_output_with_positions_enabled() {
        let model = Model::init(ModelConfig::toy(Variant::W2v), 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = model.config.cnn_output_channels();
        let base: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = (0..6).map(|i| base[(i + 1) % 6].clone()).collect();
        let fa = crate::model::FrameSequence::exact(Mat::from_rows(&base));
        let fb = crate::model::FrameSequence::exact(Mat::from_rows(&shifted));
        let ca = model.contextualize(&fa, None).unwrap();
        let cb = model.contextualize(&fb, None).unwrap();
        // row 0 of the shifted input is row 1 of the original; with absolute
        // positions the outputs must differ.
        let diff: f64 = (0..model.config.embed_dim())
            .map(|j| (ca.values.at(1, j) - cb.values.at(0, j)).abs())
            .sum();
        assert!(diff > 1e-9, "positional encoding had no effect");
    }

    struct FrameSeqFixture;
    impl FrameSeqFixture {
        fn random(model: &Model, samples: usize) -> crate::model::FrameSequence {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let wav: Vec<f64> = (0..samples).map(|_| rng.random_range(-1.0..1.0)).collect();
            model.encode_features(&wav).unwrap()
        }
    }
}
