//! Pretraining objectives: the contrastive loss over quantized targets with
//! in-utterance distractors (w2v), and masked cluster prediction over
//! k-means target ensembles (hbt), plus the diversity regularizer and the
//! MFCC/k-means machinery that generates first-iteration targets.

mod kmeans;
mod mfcc;
mod targets;

pub use kmeans::{assign_targets, kmeans_fit, kmeans_objective, KmeansModel};
pub use mfcc::{mfcc_features, MfccConfig};
pub use targets::{
    cluster_targets, initial_targets, read_target_labels, refine_targets, write_target_labels,
    TargetLabels, TargetProvenance,
};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::model::CodeProbs;
use crate::tensor::{Graph, Mat, NodeId};

/// Weights and knobs for the composite pretraining loss. The paper states
/// the L2 and diversity terms exist but not their weights; both are exposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainLossConfig {
    pub diversity_weight: f64,
    pub l2_weight: f64,
    pub temperature: f64,
    pub distractor_count: usize,
    /// Divide the contrastive sum by |M| instead of summing (off by default).
    pub mean_over_masked: bool,
}

impl Default for PretrainLossConfig {
    fn default() -> Self {
        PretrainLossConfig {
            diversity_weight: 0.1,
            l2_weight: 10.0,
            temperature: 0.1,
            distractor_count: 100,
            mean_over_masked: false,
        }
    }
}

impl PretrainLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diversity_weight < 0.0 || self.l2_weight < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Candidate set for one masked step: the positive is the step itself, the
/// distractors are other masked steps of the same utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub step: usize,
    pub distractors: Vec<usize>,
}

/// Sample K distractors per masked step, without replacement, from the other
/// masked frames of the same utterance. Steps with fewer than K other masked
/// frames use all of them.
pub fn build_candidate_sets(mask: &MaskSpec, k: usize, seed: u64) -> Vec<CandidateSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = mask.indices();
    masked
        .iter()
        .map(|&t| {
            let mut pool: Vec<usize> = masked.iter().copied().filter(|&m| m != t).collect();
            pool.shuffle(&mut rng);
            pool.truncate(k);
            pool.sort_unstable();
            CandidateSet {
                step: t,
                distractors: pool,
            }
        })
        .collect()
}

/// Everything Eq. 1 needs: contextualized outputs c, quantized targets q,
/// the mask, the per-step candidate sets, and the temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub context_outputs: Mat,   // c_t rows
    pub quantized_targets: Mat, // q_t rows
    pub mask: MaskSpec,
    pub candidate_sets: Vec<CandidateSet>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn build(
        context_outputs: Mat,
        quantized_targets: Mat,
        mask: MaskSpec,
        cfg: &PretrainLossConfig,
        seed: u64,
    ) -> Result<Self> {
        if context_outputs.shape() != quantized_targets.shape() {
            return Err(Error::DimMismatch {
                expected: context_outputs.len(),
                got: quantized_targets.len(),
                context: "context vs quantized shapes".into(),
            });
        }
        let candidate_sets = build_candidate_sets(&mask, cfg.distractor_count, seed);
        Ok(ContrastiveBatch {
            context_outputs,
            quantized_targets,
            mask,
            candidate_sets,
            temperature: cfg.temperature,
        })
    }
}

/// Cosine similarity of one row of `c` against gathered rows of `q`, as a
/// column of logits scaled by 1/kappa. The denominator uses
/// max(|a||b|, 1e-8), so exact unit vectors give exactly 1.
fn step_logits(
    g: &mut Graph,
    c: NodeId,
    q: NodeId,
    step: usize,
    distractors: &[usize],
    temperature: f64,
) -> NodeId {
    let mut rows = Vec::with_capacity(distractors.len() + 1);
    rows.push(step); // positive candidate first
    rows.extend_from_slice(distractors);
    let c_t = g.gather_rows(c, vec![step]); // 1 x D
    let cand = g.gather_rows(q, rows); // K+1 x D
    let ct_t = g.transpose(c_t); // D x 1
    let dots = g.matmul(cand, ct_t); // K+1 x 1

    let cand_sq = g.square(cand);
    let cand_norm_sq = g.row_sum(cand_sq); // K+1 x 1
    let cand_norm = g.sqrt(cand_norm_sq);
    let c_sq = g.square(c_t);
    let c_norm_sq = g.sum_all(c_sq);
    let c_norm = g.sqrt(c_norm_sq); // 1 x 1

    let prod = g.mul_broadcast(cand_norm, c_norm); // K+1 x 1
    // epsilon floor keeps zero-norm inputs finite without biasing unit vectors
    let floored = {
        let shifted = g.add_const(prod, -1e-8);
        let relu = g.relu(shifted);
        g.add_const(relu, 1e-8)
    };
    let inv = g.recip(floored);
    let sims = g.mul(dots, inv);
    g.scale(sims, 1.0 / temperature)
}

/// Eq. 1 on the tape: -log softmax of the positive among its candidates,
/// summed (or averaged) over masked steps. `c` and `q` are [T x D] nodes.
pub fn contrastive_loss_graph(
    g: &mut Graph,
    c: NodeId,
    q: NodeId,
    candidate_sets: &[CandidateSet],
    temperature: f64,
    mean_over_masked: bool,
) -> Result<NodeId> {
    if candidate_sets.is_empty() {
        return Err(Error::InvalidConfig(
            "contrastive loss requires a non-empty mask".into(),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be > 0".into()));
    }
    let t_frames = g.value(c).rows();
    for cs in candidate_sets {
        if cs.step >= t_frames || cs.distractors.iter().any(|&d| d >= t_frames) {
            return Err(Error::MaskIndexOutOfRange {
                index: cs.step,
                len: t_frames,
            });
        }
    }
    let mut terms = Vec::with_capacity(candidate_sets.len());
    for cs in candidate_sets {
        let logits = step_logits(g, c, q, cs.step, &cs.distractors, temperature);
        let row = g.transpose(logits); // 1 x (K+1)
        let lse = g.logsumexp_rows(row); // 1 x 1
        let pos = g.element(row, 0, 0);
        let term = g.sub(lse, pos);
        terms.push(term);
    }
    let total = g.add_n(&terms);
    Ok(if mean_over_masked {
        g.scale(total, 1.0 / candidate_sets.len() as f64)
    } else {
        total
    })
}

/// Evaluate Eq. 1 on a prepared batch.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    contrastive_loss_with_reduction(batch, false)
}

pub fn contrastive_loss_with_reduction(
    batch: &ContrastiveBatch,
    mean_over_masked: bool,
) -> Result<f64> {
    if batch.mask.is_empty() {
        return Err(Error::InvalidConfig(
            "contrastive loss requires a non-empty mask".into(),
        ));
    }
    let mut g = Graph::new();
    let c = g.constant(batch.context_outputs.clone());
    let q = g.constant(batch.quantized_targets.clone());
    let loss = contrastive_loss_graph(
        &mut g,
        c,
        q,
        &batch.candidate_sets,
        batch.temperature,
        mean_over_masked,
    )?;
    Ok(g.value(loss).scalar_value())
}

/// Diversity regularizer: (V - exp(entropy of batch-averaged usage)) / V per
/// group, averaged over groups. Zero at uniform usage, (V-1)/V at one-hot.
pub fn diversity_loss(code_probs: &CodeProbs) -> f64 {
    let mut total = 0.0;
    for m in &code_probs.per_group {
        let (t, v) = m.shape();
        let mut avg = vec![0.0; v];
        for r in 0..t {
            for (a, &p) in avg.iter_mut().zip(m.row(r)) {
                *a += p;
            }
        }
        for a in avg.iter_mut() {
            *a /= t as f64;
        }
        let entropy: f64 = -avg
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        total += (v as f64 - entropy.exp()) / v as f64;
    }
    total / code_probs.per_group.len() as f64
}

/// Tape version of [`diversity_loss`] over per-group probability nodes.
pub fn diversity_loss_graph(g: &mut Graph, prob_nodes: &[NodeId]) -> NodeId {
    let mut terms = Vec::with_capacity(prob_nodes.len());
    for &p in prob_nodes {
        let v = g.value(p).cols() as f64;
        let avg = g.mean_rows(p); // 1 x V
        let floored = g.add_const(avg, 1e-12);
        let lp = g.ln(floored);
        let pl = g.mul(avg, lp);
        let neg_h = g.sum_all(pl);
        let h = g.scale(neg_h, -1.0);
        let eh = g.exp(h);
        let num = g.scale(eh, -1.0);
        let num = g.add_const(num, v);
        terms.push(g.scale(num, 1.0 / v));
    }
    let total = g.add_n(&terms);
    g.scale(total, 1.0 / prob_nodes.len() as f64)
}

/// Eq. 2 ingredients: per-ensemble prediction logits and target label
/// sequences, with the mask selecting the scored steps.
#[derive(Debug, Clone)]
pub struct MaskedPredictionBatch {
    /// Per-ensemble [T x C_k] prediction logits.
    pub logits_per_ensemble: Vec<Mat>,
    /// Per-ensemble length-T target labels z_t.
    pub targets_per_ensemble: Vec<Vec<usize>>,
    pub mask: MaskSpec,
}

impl MaskedPredictionBatch {
    pub fn validate(&self) -> Result<()> {
        if self.logits_per_ensemble.len() != self.targets_per_ensemble.len() {
            return Err(Error::DimMismatch {
                expected: self.logits_per_ensemble.len(),
                got: self.targets_per_ensemble.len(),
                context: "ensemble count".into(),
            });
        }
        for (k, (logits, targets)) in self
            .logits_per_ensemble
            .iter()
            .zip(&self.targets_per_ensemble)
            .enumerate()
        {
            if logits.rows() != self.mask.length() || targets.len() != self.mask.length() {
                return Err(Error::DimMismatch {
                    expected: self.mask.length(),
                    got: logits.rows().min(targets.len()),
                    context: format!("ensemble {k} length"),
                });
            }
            if let Some(&bad) = targets.iter().find(|&&z| z >= logits.cols()) {
                return Err(Error::Data(format!(
                    "ensemble {k}: target label {bad} outside {} clusters",
                    logits.cols()
                )));
            }
        }
        Ok(())
    }

    /// Predicted categorical distributions (softmax over logits).
    pub fn distributions(&self) -> Vec<Mat> {
        self.logits_per_ensemble
            .iter()
            .map(|m| {
                let mut out = Mat::zeros(m.rows(), m.cols());
                for r in 0..m.rows() {
                    let row = m.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (j, &x) in row.iter().enumerate() {
                        let e = (x - mx).exp();
                        out.set(r, j, e);
                        sum += e;
                    }
                    for j in 0..m.cols() {
                        out.set(r, j, out.at(r, j) / sum);
                    }
                }
                out
            })
            .collect()
    }
}

/// Eq. 2 as a minimizable cross-entropy (the printed equation lacks the
/// leading minus; the surrounding text calls it a cross-entropy, so the
/// negated sum is what gets returned). Summed over masked steps and
/// ensembles.
pub fn masked_prediction_loss_graph(
    g: &mut Graph,
    logit_nodes: &[NodeId],
    targets_per_ensemble: &[Vec<usize>],
    mask: &MaskSpec,
    mean_over_masked: bool,
) -> Result<NodeId> {
    if mask.is_empty() {
        return Err(Error::InvalidConfig(
            "masked prediction loss requires a non-empty mask".into(),
        ));
    }
    if logit_nodes.len() != targets_per_ensemble.len() {
        return Err(Error::DimMismatch {
            expected: logit_nodes.len(),
            got: targets_per_ensemble.len(),
            context: "ensemble count".into(),
        });
    }
    let mut terms = Vec::new();
    for (&logits, targets) in logit_nodes.iter().zip(targets_per_ensemble) {
        let lp = g.log_softmax(logits);
        for &t in mask.indices() {
            let z = targets
                .get(t)
                .copied()
                .ok_or_else(|| Error::MaskIndexOutOfRange {
                    index: t,
                    len: targets.len(),
                })?;
            if z >= g.value(logits).cols() {
                return Err(Error::Data(format!(
                    "target label {z} outside {} clusters",
                    g.value(logits).cols()
                )));
            }
            terms.push(g.element(lp, t, z));
        }
    }
    let total = g.add_n(&terms);
    let loss = g.scale(total, -1.0);
    Ok(if mean_over_masked {
        g.scale(loss, 1.0 / mask.indices().len() as f64)
    } else {
        loss
    })
}

/// Evaluate Eq. 2 for a prepared batch.
pub fn masked_prediction_loss(batch: &MaskedPredictionBatch) -> Result<f64> {
    batch.validate()?;
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = batch
        .logits_per_ensemble
        .iter()
        .map(|m| g.constant(m.clone()))
        .collect();
    let loss = masked_prediction_loss_graph(
        &mut g,
        &nodes,
        &batch.targets_per_ensemble,
        &batch.mask,
        false,
    )?;
    Ok(g.value(loss).scalar_value())
}

/// Cross-entropy from already-normalized probabilities (for targets produced
/// outside the tape); probabilities are floored at `epsilon` so a zero on
/// the target never yields infinity.
pub fn masked_prediction_loss_from_probs(
    probs_per_ensemble: &[Mat],
    targets_per_ensemble: &[Vec<usize>],
    mask: &MaskSpec,
    epsilon: f64,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidConfig(
            "masked prediction loss requires a non-empty mask".into(),
        ));
    }
    if probs_per_ensemble.len() != targets_per_ensemble.len() {
        return Err(Error::DimMismatch {
            expected: probs_per_ensemble.len(),
            got: targets_per_ensemble.len(),
            context: "ensemble count".into(),
        });
    }
    let mut total = 0.0;
    for (probs, targets) in probs_per_ensemble.iter().zip(targets_per_ensemble) {
        for &t in mask.indices() {
            let z = targets
                .get(t)
                .copied()
                .ok_or_else(|| Error::MaskIndexOutOfRange {
                    index: t,
                    len: targets.len(),
                })?;
            if z >= probs.cols() {
                return Err(Error::Data(format!(
                    "target label {z} outside {} clusters",
                    probs.cols()
                )));
            }
            total -= probs.at(t, z).max(epsilon).ln();
        }
    }
    Ok(total)
}
