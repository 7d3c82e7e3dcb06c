//! Evaluation metrics: weighted accuracy for SER/SID, equal error rate for
//! SV, and intent accuracy / slot F1 for SLU, plus the trial-file formats
//! they consume.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::SemanticAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialLabel {
    #[serde(rename = "target")]
    Target,
    #[serde(rename = "nontarget")]
    Nontarget,
}

impl TrialLabel {
    pub fn tag(&self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            other => Err(Error::Data(format!("unknown trial label {other:?}"))),
        }
    }
}

/// One scored verification trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub label: TrialLabel,
}

impl TrialScore {
    pub fn validate(&self) -> Result<()> {
        if self.enroll_id.is_empty() || self.test_id.is_empty() {
            return Err(Error::Metric("trial with empty utterance id".into()));
        }
        if !self.score.is_finite() {
            return Err(Error::Metric(format!(
                "non-finite score for trial {} {}",
                self.enroll_id, self.test_id
            )));
        }
        Ok(())
    }
}

/// Overall fraction correct, as a percentage. This is the
/// class-frequency-weighted accuracy convention.
pub fn weighted_accuracy(predictions: &[usize], references: &[usize]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Metric(format!(
            "prediction/reference length mismatch: {} vs {}",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Metric("empty prediction list".into()));
    }
    let correct = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p == r)
        .count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// Macro-averaged per-class accuracy (not used for acceptance; provided for
/// comparison with the weighted convention).
pub fn unweighted_accuracy(predictions: &[usize], references: &[usize]) -> Result<f64> {
    if predictions.len() != references.len() || predictions.is_empty() {
        return Err(Error::Metric("bad prediction/reference lists".into()));
    }
    let mut per_class: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (p, r) in predictions.iter().zip(references) {
        let e = per_class.entry(*r).or_default();
        e.1 += 1;
        if p == r {
            e.0 += 1;
        }
    }
    let sum: f64 = per_class
        .values()
        .map(|&(c, n)| c as f64 / n as f64)
        .sum();
    Ok(100.0 * sum / per_class.len() as f64)
}

/// ROC operating points (false-accept rate, false-reject rate) swept over
/// descending thresholds with the accept-if-score>=threshold convention.
fn roc_points(trials: &[TrialScore]) -> Result<Vec<(f64, f64)>> {
    let mut n_target = 0usize;
    let mut n_nontarget = 0usize;
    for t in trials {
        t.validate()?;
        match t.label {
            TrialLabel::Target => n_target += 1,
            TrialLabel::Nontarget => n_nontarget += 1,
        }
    }
    if n_target == 0 || n_nontarget == 0 {
        return Err(Error::Metric(
            "EER requires at least one target and one nontarget trial".into(),
        ));
    }
    let mut sorted: Vec<(f64, TrialLabel)> =
        trials.iter().map(|t| (t.score, t.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    // theta = +inf: accept nothing
    let mut points = vec![(0.0, 1.0)];
    let mut accepted_nontargets = 0usize;
    let mut accepted_targets = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        // lower theta to the next distinct score; all ties cross together
        let theta = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == theta {
            match sorted[i].1 {
                TrialLabel::Target => accepted_targets += 1,
                TrialLabel::Nontarget => accepted_nontargets += 1,
            }
            i += 1;
        }
        let far = accepted_nontargets as f64 / n_nontarget as f64;
        let frr = (n_target - accepted_targets) as f64 / n_target as f64;
        points.push((far, frr));
    }
    Ok(points)
}

/// Crossing of the (FAR, FRR) polyline with FAR = FRR; linear interpolation
/// between the two bracketing operating points, in rate space.
fn interpolate_eer(points: &[(f64, f64)]) -> f64 {
    for w in points.windows(2) {
        let (far1, frr1) = w[0];
        let (far2, frr2) = w[1];
        let d1 = far1 - frr1;
        let d2 = far2 - frr2;
        if d1 == 0.0 {
            return far1;
        }
        if d1 < 0.0 && d2 >= 0.0 {
            let t = -d1 / (d2 - d1);
            return frr1 + t * (frr2 - frr1);
        }
    }
    // FAR=1, FRR=0 endpoint guarantees a crossing; fall through only on ties
    let last = points.last().expect("non-empty roc");
    last.0.max(last.1)
}

/// Equal error rate (percentage) at the FAR = FRR crossing.
pub fn equal_error_rate(trials: &[TrialScore]) -> Result<f64> {
    let points = roc_points(trials)?;
    Ok(100.0 * interpolate_eer(&points))
}

/// Intent classification accuracy: a hypothesis is correct only when both
/// scenario and action match (after lowercasing and whitespace trimming).
pub fn intent_accuracy(
    hyps: &[SemanticAnnotation],
    refs: &[SemanticAnnotation],
) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "hypothesis/reference length mismatch: {} vs {}",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Metric("empty annotation lists".into()));
    }
    let norm = |s: &str| s.trim().to_lowercase();
    let correct = hyps
        .iter()
        .zip(refs)
        .filter(|(h, r)| norm(&h.scenario) == norm(&r.scenario) && norm(&h.action) == norm(&r.action))
        .count();
    Ok(100.0 * correct as f64 / hyps.len() as f64)
}

fn norm_slot(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Micro-averaged F1 over exact-match (slot_type, slot_value) pairs pooled
/// across utterances, after lowercasing and whitespace normalization.
pub fn slot_f1(hyps: &[SemanticAnnotation], refs: &[SemanticAnnotation]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "hypothesis/reference length mismatch: {} vs {}",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Metric("empty annotation lists".into()));
    }
    let (mut tp, mut n_hyp, mut n_ref) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let hs: std::collections::BTreeSet<(String, String)> = h
            .entities
            .iter()
            .map(|(t, v)| (norm_slot(t), norm_slot(v)))
            .collect();
        let rs: std::collections::BTreeSet<(String, String)> = r
            .entities
            .iter()
            .map(|(t, v)| (norm_slot(t), norm_slot(v)))
            .collect();
        tp += hs.intersection(&rs).count();
        n_hyp += hs.len();
        n_ref += rs.len();
    }
    if n_hyp == 0 && n_ref == 0 {
        return Ok(100.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / n_hyp as f64;
    let r = tp as f64 / n_ref as f64;
    Ok(100.0 * 2.0 * p * r / (p + r))
}

/// Trial score file: `enroll_id test_id score label` per line.
pub fn write_trial_scores(path: &Path, trials: &[TrialScore]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for t in trials {
        t.validate()?;
        out.push_str(&format!(
            "{} {} {} {}\n",
            t.enroll_id,
            t.test_id,
            t.score,
            t.label.tag()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_trial_scores(path: &Path) -> Result<Vec<TrialScore>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::Data(format!("bad trial score line: {l:?}")));
            }
            Ok(TrialScore {
                enroll_id: parts[0].to_string(),
                test_id: parts[1].to_string(),
                score: parts[2]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad score: {e}")))?,
                label: TrialLabel::parse(parts[3])?,
            })
        })
        .collect()
}

/// Decoded-output file: `id<TAB>token string` per line.
pub fn write_decoded_outputs(path: &Path, rows: &[(String, String)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for (id, text) in rows {
        out.push_str(id);
        out.push('\t');
        out.push_str(text);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_decoded_outputs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Data(format!("decoded line missing tab: {l:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trial(score: f64, label: TrialLabel) -> TrialScore {
        TrialScore {
            enroll_id: "e".into(),
            test_id: "t".into(),
            score,
            label,
        }
    }

    fn trials_from(targets: &[f64], nontargets: &[f64]) -> Vec<TrialScore> {
        targets
            .iter()
            .map(|&s| trial(s, TrialLabel::Target))
            .chain(nontargets.iter().map(|&s| trial(s, TrialLabel::Nontarget)))
            .collect()
    }

    /// Fully independent EER oracle: recount FAR/FRR from scratch at every
    /// candidate threshold, walk the resulting polyline by hand.
    fn eer_oracle(trials: &[TrialScore]) -> f64 {
        let targets: Vec<f64> = trials
            .iter()
            .filter(|t| t.label == TrialLabel::Target)
            .map(|t| t.score)
            .collect();
        let nontargets: Vec<f64> = trials
            .iter()
            .filter(|t| t.label == TrialLabel::Nontarget)
            .map(|t| t.score)
            .collect();
        let mut thetas: Vec<f64> = trials.iter().map(|t| t.score).collect();
        thetas.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thetas.dedup();
        let rates = |theta: f64| -> (f64, f64) {
            let far =
                nontargets.iter().filter(|&&s| s >= theta).count() as f64 / nontargets.len() as f64;
            let frr = targets.iter().filter(|&&s| s < theta).count() as f64 / targets.len() as f64;
            (far, frr)
        };
        let mut prev = (0.0f64, 1.0f64);
        for theta in thetas {
            let cur = rates(theta);
            let (d1, d2) = (prev.0 - prev.1, cur.0 - cur.1);
            if d1 == 0.0 {
                return 100.0 * prev.0;
            }
            if d1 < 0.0 && d2 >= 0.0 {
                let t = -d1 / (d2 - d1);
                return 100.0 * (prev.1 + t * (cur.1 - prev.1));
            }
            prev = cur;
        }
        100.0 * prev.0.max(prev.1)
    }

    #[test]
    fn weighted_accuracy_counts() {
        assert_eq!(weighted_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(weighted_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 75.0);
        assert!(weighted_accuracy(&[1], &[1, 2]).is_err());
        assert!(weighted_accuracy(&[], &[]).is_err());
    }

    /// Class-imbalanced fixture that distinguishes WA from macro accuracy:
    /// 9 of 9 class-A correct, 0 of 1 class-B correct.
    #[test]
    fn weighted_vs_unweighted_on_imbalanced_set() {
        let refs: Vec<usize> = vec![0; 9].into_iter().chain([1]).collect();
        let mut preds = vec![0; 9];
        preds.push(0); // class B predicted wrong
        let wa = weighted_accuracy(&preds, &refs).unwrap();
        assert_eq!(wa, 90.0);
        let ua = unweighted_accuracy(&preds, &refs).unwrap();
        assert_eq!(ua, 50.0);
    }

    #[test]
    fn eer_perfectly_separable_is_zero() {
        let trials = trials_from(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(equal_error_rate(&trials).unwrap(), 0.0);
    }

    #[test]
    fn eer_interleaved_is_fifty() {
        let trials = trials_from(&[0.8, 0.2], &[0.7, 0.3]);
        assert_eq!(equal_error_rate(&trials).unwrap(), 50.0);
        assert_eq!(eer_oracle(&trials), 50.0);
    }

    #[test]
    fn eer_single_class_errors() {
        let trials = trials_from(&[0.5, 0.6], &[]);
        assert!(equal_error_rate(&trials).is_err());
    }

    #[test]
    fn eer_matches_brute_force_on_random_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for case in 0..50 {
            let n = rng.random_range(20..200);
            let trials: Vec<TrialScore> = (0..n)
                .map(|_| {
                    trial(
                        rng.random_range(-1.0..1.0),
                        if rng.random_range(0.0..1.0) < 0.5 {
                            TrialLabel::Target
                        } else {
                            TrialLabel::Nontarget
                        },
                    )
                })
                .collect();
            let has_both = trials.iter().any(|t| t.label == TrialLabel::Target)
                && trials.iter().any(|t| t.label == TrialLabel::Nontarget);
            if !has_both {
                continue;
            }
            let fast = equal_error_rate(&trials).unwrap();
            let slow = eer_oracle(&trials);
            assert!(
                (fast - slow).abs() < 1e-9,
                "case {case}: {fast} vs {slow}"
            );
            assert!((0.0..=100.0).contains(&fast));
        }
    }

    #[test]
    fn eer_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials: Vec<TrialScore> = (0..120)
            .map(|_| {
                trial(
                    rng.random_range(-2.0..2.0),
                    if rng.random_range(0.0..1.0) < 0.4 {
                        TrialLabel::Target
                    } else {
                        TrialLabel::Nontarget
                    },
                )
            })
            .collect();
        let base = equal_error_rate(&trials).unwrap();
        let transforms: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|s| 3.0 * s + 7.0),
            Box::new(|s| s.exp()),
            Box::new(|s| s.atan()),
            Box::new(|s| s * s * s + s),
        ];
        for f in &transforms {
            let mapped: Vec<TrialScore> = trials
                .iter()
                .map(|t| trial(f(t.score), t.label))
                .collect();
            let e = equal_error_rate(&mapped).unwrap();
            assert!((e - base).abs() < 1e-9, "transform changed EER: {base} -> {e}");
        }
    }

    fn ann(s: &str, a: &str, ents: &[(&str, &str)]) -> SemanticAnnotation {
        SemanticAnnotation::new(s, a, ents)
    }

    #[test]
    fn intent_accuracy_joint_match() {
        let refs = vec![ann("alarm", "set", &[]), ann("music", "play", &[])];
        assert_eq!(intent_accuracy(&refs, &refs).unwrap(), 100.0);
        let hyps = vec![ann("alarm", "off", &[]), ann("music", "play", &[])];
        assert_eq!(intent_accuracy(&hyps, &refs).unwrap(), 50.0);
        // scenario right, action wrong -> zero credit for that utterance
        let hyps = vec![ann("alarm", "off", &[])];
        let refs1 = vec![ann("alarm", "set", &[])];
        assert_eq!(intent_accuracy(&hyps, &refs1).unwrap(), 0.0);
        assert!(intent_accuracy(&refs, &refs1).is_err());
    }

    #[test]
    fn intent_accuracy_two_of_five() {
        let refs: Vec<_> = (0..5).map(|i| ann("s", &format!("a{i}"), &[])).collect();
        let hyps: Vec<_> = (0..5)
            .map(|i| {
                if i < 2 {
                    ann("s", &format!("a{i}"), &[])
                } else {
                    ann("s", "wrong", &[])
                }
            })
            .collect();
        assert_eq!(intent_accuracy(&hyps, &refs).unwrap(), 40.0);
    }

    #[test]
    fn slot_f1_closed_forms() {
        let refs = vec![ann("s", "a", &[("date", "today"), ("place", "paris")])];
        assert_eq!(slot_f1(&refs, &refs).unwrap(), 100.0);
        let empty_hyp = vec![ann("s", "a", &[])];
        assert_eq!(slot_f1(&empty_hyp, &refs).unwrap(), 0.0);
        // P = R = 0.5 -> F1 = 50
        let hyps = vec![ann("s", "a", &[("date", "today"), ("place", "london")])];
        assert_eq!(slot_f1(&hyps, &refs).unwrap(), 50.0);
    }

    #[test]
    fn slot_f1_normalizes_case_and_whitespace() {
        let refs = vec![ann("s", "a", &[("date", "today")])];
        let hyps = vec![ann("s", "a", &[("DATE", "  Today ")])];
        assert_eq!(slot_f1(&hyps, &refs).unwrap(), 100.0);
    }

    #[test]
    fn trial_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let trials = trials_from(&[0.25, -0.5], &[0.125]);
        let path = dir.path().join("scores.txt");
        write_trial_scores(&path, &trials).unwrap();
        let back = read_trial_scores(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].score, 0.25);
        assert_eq!(back[2].label, TrialLabel::Nontarget);
    }

    proptest! {
        /// Metric ranges and permutation invariance.
        #[test]
        fn metrics_in_range_and_permutation_invariant(
            seed in 0u64..100,
            n in 4usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let wa = weighted_accuracy(&preds, &refs).unwrap();
            prop_assert!((0.0..=100.0).contains(&wa));

            // permute the (pred, ref) pairs together
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let p2: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
            let r2: Vec<usize> = order.iter().map(|&i| refs[i]).collect();
            prop_assert_eq!(wa, weighted_accuracy(&p2, &r2).unwrap());
        }

        /// slot_f1 is symmetric in (hyp, ref) when entity sets are
        /// duplicate-free (P and R swap).
        #[test]
        fn slot_f1_symmetric(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                let ents: Vec<(String, String)> = (0..rng.random_range(0..4))
                    .map(|i| (format!("t{i}"), format!("v{}", rng.random_range(0..3))))
                    .collect();
                SemanticAnnotation {
                    scenario: "s".into(),
                    action: "a".into(),
                    entities: ents.into_iter().collect(),
                }
            };
            let a: Vec<SemanticAnnotation> = (0..5).map(|_| mk(&mut rng)).collect();
            let b: Vec<SemanticAnnotation> = (0..5).map(|_| mk(&mut rng)).collect();
            prop_assert_eq!(slot_f1(&a, &b).unwrap(), slot_f1(&b, &a).unwrap());
        }
    }
}
