//! The downstream training loop: deterministic length-bucketed batches,
//! gradient accumulation, two Adam optimizers on independently annealed
//! learning rates, best-checkpoint tracking, and divergence detection.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::schedule::{scheduler_step, ScheduleState};
use super::{apply_freeze_policy, FreezePolicy};
use crate::error::{Error, Result};
use crate::heads::{
    char_vocab, classifier_loss_graph, classifier_logits_graph, classify, greedy_decode,
    parse_semantics, pool_mean, pool_mean_graph, teacher_forced_nll_graph, DecodeHypothesis,
    HeadMeta, HeadParams, PooledEmbedding, SemanticAnnotation,
};
use crate::masking::sample_mask;
use crate::model::{contextualize_graph, encode_graph, BoundParams, FrameSequence, Model};
use crate::tensor::{Graph, Mat, NodeId};

/// One training example, already labeled and tokenized.
#[derive(Debug, Clone)]
pub enum TrainItem {
    Class {
        id: String,
        samples: Vec<f64>,
        label: usize,
    },
    Seq {
        id: String,
        samples: Vec<f64>,
        targets: Vec<usize>,
        annotation: SemanticAnnotation,
    },
}

impl TrainItem {
    fn samples(&self) -> &[f64] {
        match self {
            TrainItem::Class { samples, .. } => samples,
            TrainItem::Seq { samples, .. } => samples,
        }
    }

    fn id(&self) -> &str {
        match self {
            TrainItem::Class { id, .. } => id,
            TrainItem::Seq { id, .. } => id,
        }
    }
}

/// What the per-epoch validation pass measures (always higher-is-better).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValMetric {
    /// Percentage of correctly classified utterances.
    Accuracy,
    /// Percentage with scenario and action jointly correct, via greedy
    /// decoding.
    IntentAccuracy,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub downstream_lr: f64,
    pub anneal_factor: f64,
    pub improvement_threshold: f64,
    pub patience: usize,
    pub seed: u64,
    pub val_metric: ValMetric,
    /// Greedy-decode budget for SLU validation.
    pub max_decode_len: usize,
    pub verbose: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 30,
            batch_size: 8,
            encoder_lr: 1e-5,
            downstream_lr: 1e-4,
            anneal_factor: 0.5,
            improvement_threshold: 0.0025,
            patience: 10,
            seed: 0,
            val_metric: ValMetric::Accuracy,
            max_decode_len: 48,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub encoder_lr: f64,
    pub downstream_lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub head: HeadParams,
    pub best_model: Model,
    pub best_head: HeadParams,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
}

/// Final contextualized frames for one utterance (evaluation path).
pub fn contextualize_utterance(model: &Model, samples: &[f64]) -> Result<FrameSequence> {
    let frames = model.encode_features(samples)?;
    model.contextualize(&frames, None)
}

/// Utterance embedding before any classification layer (the SV embedding).
pub fn pooled_embedding(model: &Model, samples: &[f64]) -> Result<PooledEmbedding> {
    pool_mean(&contextualize_utterance(model, samples)?)
}

/// Argmax class for one utterance.
pub fn classify_utterance(model: &Model, head: &HeadParams, samples: &[f64]) -> Result<usize> {
    let emb = pooled_embedding(model, samples)?;
    let logits = classify(&emb, head)?;
    Ok(argmax(&logits))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Beam-search decode of one utterance into a token string.
pub fn decode_utterance(
    model: &Model,
    head: &HeadParams,
    samples: &[f64],
    beam_width: usize,
    max_len: usize,
) -> Result<(DecodeHypothesis, String)> {
    let ctx = contextualize_utterance(model, samples)?;
    let hyp = crate::heads::beam_search(head, &ctx.values, beam_width, max_len)?;
    let text = char_vocab().decode(&hyp.tokens);
    Ok((hyp, text))
}

fn validate_inputs(model: &Model, head: &HeadParams, items: &[TrainItem]) -> Result<()> {
    let d = model.config.embed_dim();
    match head.meta() {
        HeadMeta::Classifier {
            in_dim,
            num_classes,
        } => {
            if *in_dim != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: *in_dim,
                    context: "classifier input vs embedding dim".into(),
                });
            }
            for item in items {
                match item {
                    TrainItem::Class { label, id, .. } => {
                        if label >= num_classes {
                            return Err(Error::Data(format!(
                                "label {label} out of range for {id}"
                            )));
                        }
                    }
                    TrainItem::Seq { id, .. } => {
                        return Err(Error::Data(format!(
                            "sequence item {id} given to a classifier head"
                        )))
                    }
                }
            }
        }
        HeadMeta::Decoder { config } => {
            if config.enc_dim != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: config.enc_dim,
                    context: "decoder encoder-dim vs embedding dim".into(),
                });
            }
            for item in items {
                if let TrainItem::Class { id, .. } = item {
                    return Err(Error::Data(format!(
                        "classification item {id} given to a decoder head"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Build the per-item loss on `g`, given the contextualized frames node.
fn item_loss_graph(
    g: &mut Graph,
    head: &HeadParams,
    head_bound: &BoundParams,
    ctx: NodeId,
    item: &TrainItem,
) -> Result<NodeId> {
    match (head.meta(), item) {
        (HeadMeta::Classifier { .. }, TrainItem::Class { label, .. }) => {
            let rows = g.value(ctx).rows();
            let pooled = pool_mean_graph(g, ctx, rows);
            Ok(classifier_loss_graph(g, head_bound, pooled, *label))
        }
        (HeadMeta::Decoder { config }, TrainItem::Seq { targets, .. }) => {
            let cfg = *config;
            let nll = teacher_forced_nll_graph(g, head_bound, &cfg, ctx, targets)?;
            // per-token normalization keeps sequence lengths comparable
            Ok(g.scale(nll, 1.0 / (targets.len() + 1) as f64))
        }
        _ => Err(Error::Data("head/item kind mismatch".into())),
    }
}

fn val_metric_value(
    cfg: &FitConfig,
    model: &Model,
    head: &HeadParams,
    items: &[TrainItem],
    cached_ctx: Option<&BTreeMap<String, Mat>>,
) -> Result<f64> {
    let ctx_for = |item: &TrainItem| -> Result<Mat> {
        if let Some(cache) = cached_ctx {
            if let Some(m) = cache.get(item.id()) {
                return Ok(m.clone());
            }
        }
        Ok(contextualize_utterance(model, item.samples())?.values)
    };
    match cfg.val_metric {
        ValMetric::Accuracy => {
            let mut correct = 0usize;
            for item in items {
                let label = match item {
                    TrainItem::Class { label, .. } => *label,
                    _ => return Err(Error::Data("accuracy metric on sequence items".into())),
                };
                let ctx = ctx_for(item)?;
                let mut g = Graph::new();
                let hb = head.bind(&mut g, false);
                let node = g.constant(ctx);
                let rows = g.value(node).rows();
                let pooled = pool_mean_graph(&mut g, node, rows);
                let logits = classifier_logits_graph(&mut g, &hb, pooled);
                if argmax(g.value(logits).row(0)) == label {
                    correct += 1;
                }
            }
            Ok(100.0 * correct as f64 / items.len() as f64)
        }
        ValMetric::IntentAccuracy => {
            let vocab = char_vocab();
            let mut correct = 0usize;
            for item in items {
                let annotation = match item {
                    TrainItem::Seq { annotation, .. } => annotation,
                    _ => return Err(Error::Data("intent metric on class items".into())),
                };
                let ctx = ctx_for(item)?;
                let hyp = greedy_decode(head, &ctx, cfg.max_decode_len)?;
                let parsed = parse_semantics(&vocab.decode(&hyp.tokens));
                if parsed.annotation.scenario == annotation.scenario
                    && parsed.annotation.action == annotation.action
                {
                    correct += 1;
                }
            }
            Ok(100.0 * correct as f64 / items.len() as f64)
        }
    }
}

/// Fine-tune `model` + `head` on `train`, validating on `val` each epoch.
/// Frozen collections are bit-identical afterwards; identical (seed, config)
/// inputs give identical histories.
pub fn fit(
    model: &Model,
    head: &HeadParams,
    train: &[TrainItem],
    val: &[TrainItem],
    policy: FreezePolicy,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("fit needs non-empty train and val sets".into()));
    }
    if cfg.encoder_lr < 0.0 || cfg.downstream_lr < 0.0 {
        return Err(Error::InvalidConfig("negative learning rate".into()));
    }
    validate_inputs(model, head, train)?;
    validate_inputs(model, head, val)?;

    let mut model = model.clone();
    let mut head = head.clone();
    let trainable_enc: BTreeSet<String> = apply_freeze_policy(&model.params, &policy);
    let encoder_static = trainable_enc.is_empty() && !model.config.mask_during_finetune;

    // With a fully frozen encoder the contextualized frames never change;
    // compute them once.
    let cached_ctx: Option<BTreeMap<String, Mat>> = if encoder_static {
        let mut cache = BTreeMap::new();
        for item in train.iter().chain(val.iter()) {
            let ctx = contextualize_utterance(&model, item.samples())?;
            cache.insert(item.id().to_string(), ctx.values);
        }
        Some(cache)
    } else {
        None
    };

    let mut schedule = ScheduleState::new(cfg.encoder_lr, cfg.downstream_lr);
    schedule.anneal_factor = cfg.anneal_factor;
    schedule.improvement_threshold = cfg.improvement_threshold;
    schedule.patience = cfg.patience;
    schedule.validate()?;

    let mut enc_adam = Adam::new();
    let mut head_adam = Adam::new();

    // deterministic length buckets
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| (train[i].samples().len(), train[i].id().to_string()));
    let batches: Vec<Vec<usize>> = order
        .chunks(cfg.batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();

    let mut history = Vec::new();
    let mut best: Option<(Model, HeadParams, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let mut batch_order = batches.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        batch_order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        for batch in &batch_order {
            let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
            let mut accumulate = |grads: &mut BTreeMap<String, Mat>, name: &str, grad: &Mat| {
                grads
                    .entry(name.to_string())
                    .and_modify(|m| m.add_assign(grad))
                    .or_insert_with(|| grad.clone());
            };
            let mut batch_loss = 0.0;
            for &idx in batch {
                let item = &train[idx];
                let mut g = Graph::new();
                let head_bound = head.bind(&mut g, true);
                let enc_bound;
                let ctx = match &cached_ctx {
                    Some(cache) => {
                        enc_bound = None;
                        g.constant(cache[item.id()].clone())
                    }
                    None => {
                        let bound = BoundParams::bind(&mut g, &model.params, &trainable_enc);
                        let frames =
                            encode_graph(&mut g, &bound, &model.config, item.samples())?;
                        let mask = if model.config.mask_during_finetune {
                            let t = g.value(frames).rows();
                            Some(sample_mask(
                                t,
                                model.config.mask_policy,
                                cfg.seed ^ ((epoch as u64) << 32) ^ idx as u64,
                            )?)
                        } else {
                            None
                        };
                        let layers = contextualize_graph(
                            &mut g,
                            &bound,
                            &model.config,
                            frames,
                            mask.as_ref(),
                        )?;
                        let last = *layers.last().expect("at least one block");
                        enc_bound = Some(bound);
                        last
                    }
                };
                let loss = item_loss_graph(&mut g, &head, &head_bound, ctx, item)?;
                let lv = g.value(loss).scalar_value();
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        encoder_lr: schedule.encoder_lr,
                        downstream_lr: schedule.downstream_lr,
                        message: format!("loss {lv} on {}", item.id()),
                    });
                }
                batch_loss += lv;
                g.backward(loss);
                if let Some(bound) = &enc_bound {
                    for name in &trainable_enc {
                        if let Some(grad) = g.grad(bound.id(name)) {
                            accumulate(&mut grads, name, grad);
                        }
                    }
                }
                for (name, _) in head.group().iter() {
                    if let Some(grad) = g.grad(head_bound.id(name)) {
                        accumulate(&mut grads, name, grad);
                    }
                }
            }

            let scale = 1.0 / batch.len() as f64;
            for name in &trainable_enc {
                if let Some(grad) = grads.get_mut(name) {
                    grad.scale_assign(scale);
                    let param = model
                        .params
                        .get_mut(name)
                        .expect("trainable name exists in params");
                    enc_adam.step(name, param, grad, schedule.encoder_lr);
                }
            }
            let head_names: Vec<String> = head.group().names().map(String::from).collect();
            for name in head_names {
                if let Some(grad) = grads.get_mut(&name) {
                    grad.scale_assign(scale);
                    let param = head.group_mut().get_mut(&name).expect("head param");
                    head_adam.step(&name, param, grad, schedule.downstream_lr);
                }
            }
            epoch_loss += batch_loss;
            epoch_items += batch.len();
        }
        let train_loss = epoch_loss / epoch_items.max(1) as f64;

        let metric = val_metric_value(cfg, &model, &head, val, cached_ctx.as_ref())?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric: metric,
            encoder_lr: schedule.encoder_lr,
            downstream_lr: schedule.downstream_lr,
        });
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:>3}  loss {train_loss:.4}  val {metric:.2}  lrs ({:.2e}, {:.2e})",
                schedule.encoder_lr, schedule.downstream_lr
            );
        }

        let is_better = best.as_ref().map(|(_, _, _, b)| metric > *b).unwrap_or(true);
        if is_better {
            best = Some((model.clone(), head.clone(), epoch, metric));
        }

        schedule = scheduler_step(&schedule, metric, true)?;
        if schedule.exhausted() {
            break;
        }
    }

    let (best_model, best_head, best_epoch, best_val) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        model,
        head,
        best_model,
        best_head,
        best_epoch,
        best_val,
        history,
    })
}
