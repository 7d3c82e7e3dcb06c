//! Manifests, split protocols (speaker-dependent seeds, leave-two-speaker-out
//! folds, verification trials), and corpus loading. All splits are seeded and
//! auditable by set algebra.

mod toygen;
mod wav;

pub use toygen::{generate_toy_corpus, SluGrammar, ToyLabels, ToySpec};
pub use wav::{read_wav, write_wav, SAMPLE_RATE};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::SemanticAnnotation;
use crate::metrics::TrialLabel;

pub const DATA_ROOT_ENV: &str = "SSLFT_DATA_ROOT";

/// One manifest record. `audio` is a path relative to the data root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub audio: String,
    pub duration: f64,
    pub speaker_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantics: Option<SemanticAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Which task labels a manifest must provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLabelKind {
    Emotion,
    Speaker,
    Semantics,
}

impl Manifest {
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.speaker_id.as_str()).collect();
        set.into_iter().map(|s| s.to_string()).collect()
    }

    pub fn by_id(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == id)
    }

    /// Uniqueness of ids plus presence of the labels the task needs.
    pub fn validate(&self, task: TaskLabelKind) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate utterance id {}",
                    e.utterance_id
                )));
            }
            match task {
                TaskLabelKind::Emotion if e.emotion.is_none() => {
                    return Err(Error::Data(format!(
                        "utterance {} lacks an emotion label",
                        e.utterance_id
                    )));
                }
                TaskLabelKind::Semantics if e.semantics.is_none() => {
                    return Err(Error::Data(format!(
                        "utterance {} lacks a semantic annotation",
                        e.utterance_id
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Check that every referenced audio file exists under `root`.
    pub fn check_audio(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            let p = root.join(&e.audio);
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "audio for {} not found at {}",
                    e.utterance_id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// One JSON record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(
                &serde_json::to_string(e).map_err(|e| Error::Data(format!("manifest: {e}")))?,
            );
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Data(format!("manifest line {l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { entries })
    }
}

/// Resolve the data root: the environment variable wins over the configured
/// value; both default to the current directory.
pub fn resolve_data_root(configured: Option<&Path>) -> PathBuf {
    if let Ok(v) = std::env::var(DATA_ROOT_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    configured
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// A train/validation/test partition of utterance ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_id: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    /// Pairwise disjoint and jointly covering the given id universe.
    pub fn audit(&self, universe: &BTreeSet<String>) -> Result<()> {
        let train: BTreeSet<_> = self.train.iter().cloned().collect();
        let val: BTreeSet<_> = self.validation.iter().cloned().collect();
        let test: BTreeSet<_> = self.test.iter().cloned().collect();
        if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
            return Err(Error::Data(format!("fold {} sets overlap", self.fold_id)));
        }
        let mut union = train;
        union.extend(val);
        union.extend(test);
        if &union != universe {
            return Err(Error::Data(format!(
                "fold {} does not cover the corpus: {} vs {} ids",
                self.fold_id,
                union.len(),
                universe.len()
            )));
        }
        Ok(())
    }
}

/// Speaker-dependent protocol: one seeded 80/10/10 utterance-level split per
/// seed; speakers may appear in every set.
pub fn make_sd_splits(manifest: &Manifest, seeds: &[u64]) -> Result<Vec<SplitPlan>> {
    let n = manifest.entries.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "speaker-dependent split needs >= 3 utterances, got {n}"
        )));
    }
    let ids: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| e.utterance_id.clone())
        .collect();
    seeds
        .iter()
        .enumerate()
        .map(|(fold_id, &seed)| {
            let mut shuffled = ids.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let n_val = (n / 10).max(1);
            let n_test = (n / 10).max(1);
            let n_train = n - n_val - n_test;
            Ok(SplitPlan {
                fold_id,
                seed,
                train: shuffled[..n_train].to_vec(),
                validation: shuffled[n_train..n_train + n_val].to_vec(),
                test: shuffled[n_train + n_val..].to_vec(),
            })
        })
        .collect()
}

/// Speaker-independent protocol: N speakers -> N folds, each holding out two
/// speakers (test speaker s_i, validation speaker s_{i+1 mod N}); the
/// remaining speakers train. Every speaker appears exactly once as the test
/// speaker across folds.
pub fn make_si_folds(manifest: &Manifest) -> Result<Vec<SplitPlan>> {
    let speakers = manifest.speakers();
    let n = speakers.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "leave-two-speaker-out needs >= 3 speakers, got {n}"
        )));
    }
    let by_speaker: BTreeMap<&str, Vec<&str>> = {
        let mut m: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &manifest.entries {
            m.entry(e.speaker_id.as_str())
                .or_default()
                .push(e.utterance_id.as_str());
        }
        m
    };
    Ok((0..n)
        .map(|i| {
            let test_spk = &speakers[i];
            let val_spk = &speakers[(i + 1) % n];
            let mut plan = SplitPlan {
                fold_id: i,
                seed: 0,
                train: Vec::new(),
                validation: Vec::new(),
                test: Vec::new(),
            };
            for (spk, utts) in &by_speaker {
                let dst = if *spk == test_spk.as_str() {
                    &mut plan.test
                } else if *spk == val_spk.as_str() {
                    &mut plan.validation
                } else {
                    &mut plan.train
                };
                dst.extend(utts.iter().map(|s| s.to_string()));
            }
            plan
        })
        .collect())
}

/// A verification trial before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

/// Trials over held-out speakers plus seeded identification train/validation
/// plans over the remaining speakers.
#[derive(Debug, Clone)]
pub struct SvPlan {
    pub trials: Vec<Trial>,
    pub held_out_speakers: Vec<String>,
    pub id_speakers: Vec<String>,
    pub id_plans: Vec<SplitPlan>,
}

/// Build balanced target/nontarget trials among `held_out_speakers` speakers
/// (disjoint from identification training) and 5 seeded train/validation
/// plans for the identification task.
pub fn make_sv_trials(
    manifest: &Manifest,
    held_out_speakers: usize,
    trials_per_speaker: usize,
    seed: u64,
) -> Result<SvPlan> {
    let speakers = manifest.speakers();
    if held_out_speakers < 2 {
        return Err(Error::Data("need >= 2 held-out speakers".into()));
    }
    if speakers.len() < held_out_speakers + 2 {
        return Err(Error::Data(format!(
            "{} speakers cannot support {held_out_speakers} held out plus identification training",
            speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = speakers.clone();
    shuffled.shuffle(&mut rng);
    let held: Vec<String> = shuffled[..held_out_speakers].to_vec();
    let id_speakers: Vec<String> = {
        let mut v = shuffled[held_out_speakers..].to_vec();
        v.sort();
        v
    };

    let by_speaker: BTreeMap<String, Vec<String>> = {
        let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in &manifest.entries {
            m.entry(e.speaker_id.clone())
                .or_default()
                .push(e.utterance_id.clone());
        }
        m
    };
    for spk in &held {
        if by_speaker.get(spk).map(|v| v.len()).unwrap_or(0) < 2 {
            return Err(Error::Data(format!(
                "held-out speaker {spk} has fewer than 2 utterances; cannot form target trials"
            )));
        }
    }

    // target trials: same-speaker pairs within each held-out speaker
    let mut trials = Vec::new();
    for spk in &held {
        let utts = &by_speaker[spk];
        let mut pairs = Vec::new();
        for i in 0..utts.len() {
            for j in i + 1..utts.len() {
                pairs.push((utts[i].clone(), utts[j].clone()));
            }
        }
        pairs.shuffle(&mut rng);
        pairs.truncate(trials_per_speaker);
        for (a, b) in pairs {
            trials.push(Trial {
                enroll_id: a,
                test_id: b,
                label: TrialLabel::Target,
            });
        }
    }
    // nontarget trials: cross-speaker pairs among held-out speakers,
    // balanced to the target count (plus/minus one)
    let n_target = trials.len();
    let mut cross = Vec::new();
    for i in 0..held.len() {
        for j in i + 1..held.len() {
            for a in &by_speaker[&held[i]] {
                for b in &by_speaker[&held[j]] {
                    cross.push((a.clone(), b.clone()));
                }
            }
        }
    }
    cross.shuffle(&mut rng);
    cross.truncate(n_target);
    for (a, b) in cross {
        trials.push(Trial {
            enroll_id: a,
            test_id: b,
            label: TrialLabel::Nontarget,
        });
    }

    // identification train/validation plans over the remaining speakers
    let id_utts: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| id_speakers.contains(&e.speaker_id))
        .map(|e| e.utterance_id.clone())
        .collect();
    if id_utts.len() < 2 {
        return Err(Error::Data("too few identification utterances".into()));
    }
    let id_plans = (0..5)
        .map(|i| {
            let plan_seed = seed.wrapping_add(1 + i as u64);
            let mut shuffled = id_utts.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
            shuffled.shuffle(&mut rng);
            let n_val = (shuffled.len() / 10).max(1);
            SplitPlan {
                fold_id: i,
                seed: plan_seed,
                train: shuffled[n_val..].to_vec(),
                validation: shuffled[..n_val].to_vec(),
                test: Vec::new(),
            }
        })
        .collect();

    Ok(SvPlan {
        trials,
        held_out_speakers: held,
        id_speakers,
        id_plans,
    })
}

/// Trial list file: `enroll_id test_id label` per line.
pub fn write_trial_list(path: &Path, trials: &[Trial]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!(
            "{} {} {}\n",
            t.enroll_id,
            t.test_id,
            t.label.tag()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_trial_list(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Data(format!("bad trial line {l:?}")));
            }
            Ok(Trial {
                enroll_id: parts[0].to_string(),
                test_id: parts[1].to_string(),
                label: TrialLabel::parse(parts[2])?,
            })
        })
        .collect()
}

/// An utterance with loaded audio, ready for training.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub samples: Vec<f64>,
    pub emotion: Option<String>,
    pub semantics: Option<SemanticAnnotation>,
}

/// Load every manifest entry's audio from the data root.
pub fn load_utterances(manifest: &Manifest, root: &Path) -> Result<Vec<Utterance>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let (samples, _) = read_wav(&root.join(&e.audio))?;
            Ok(Utterance {
                id: e.utterance_id.clone(),
                speaker_id: e.speaker_id.clone(),
                samples,
                emotion: e.emotion.clone(),
                semantics: e.semantics.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest(num_speakers: usize, per_speaker: usize) -> Manifest {
        let entries = (0..num_speakers)
            .flat_map(|s| {
                (0..per_speaker).map(move |u| ManifestEntry {
                    utterance_id: format!("spk{s}_utt{u}"),
                    audio: format!("audio/spk{s}_utt{u}.wav"),
                    duration: 0.2,
                    speaker_id: format!("spk{s}"),
                    emotion: Some(format!("class{}", u % 4)),
                    semantics: None,
                })
            })
            .collect();
        Manifest { entries }
    }

    fn universe(m: &Manifest) -> BTreeSet<String> {
        m.entries.iter().map(|e| e.utterance_id.clone()).collect()
    }

    #[test]
    fn sd_splits_deterministic_and_partitioning() {
        let m = toy_manifest(10, 10); // 100 utterances
        let plans = make_sd_splits(&m, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(plans.len(), 5);
        let u = universe(&m);
        for p in &plans {
            p.audit(&u).unwrap();
            assert_eq!(p.train.len(), 80);
            assert_eq!(p.validation.len(), 10);
            assert_eq!(p.test.len(), 10);
        }
        let again = make_sd_splits(&m, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(plans, again);
        // different seeds shuffle differently
        assert_ne!(plans[0].train, plans[1].train);
    }

    #[test]
    fn sd_split_too_small_errors() {
        let m = toy_manifest(1, 2);
        assert!(make_sd_splits(&m, &[1]).is_err());
    }

    #[test]
    fn si_folds_rotate_test_speakers() {
        let m = toy_manifest(10, 5);
        let folds = make_si_folds(&m).unwrap();
        assert_eq!(folds.len(), 10);
        let u = universe(&m);
        let mut test_speakers = BTreeSet::new();
        for f in &folds {
            f.audit(&u).unwrap();
            // all test utterances share one speaker, all val another
            let spk_of = |id: &str| m.by_id(id).unwrap().speaker_id.clone();
            let t: BTreeSet<String> = f.test.iter().map(|i| spk_of(i)).collect();
            let v: BTreeSet<String> = f.validation.iter().map(|i| spk_of(i)).collect();
            assert_eq!(t.len(), 1);
            assert_eq!(v.len(), 1);
            assert_ne!(t, v);
            // train has the remaining 8 speakers
            let tr: BTreeSet<String> = f.train.iter().map(|i| spk_of(i)).collect();
            assert_eq!(tr.len(), 8);
            assert!(tr.is_disjoint(&t) && tr.is_disjoint(&v));
            test_speakers.extend(t);
        }
        assert_eq!(test_speakers.len(), 10, "each speaker tests exactly once");
    }

    /// No utterance of a held-out speaker may appear in train (set scan).
    #[test]
    fn si_folds_zero_leakage_scan() {
        let m = toy_manifest(10, 4);
        for f in make_si_folds(&m).unwrap() {
            let spk_of = |id: &str| m.by_id(id).unwrap().speaker_id.clone();
            let held: BTreeSet<String> = f
                .test
                .iter()
                .chain(f.validation.iter())
                .map(|i| spk_of(i))
                .collect();
            for id in &f.train {
                assert!(
                    !held.contains(&spk_of(id)),
                    "train utterance {id} from held-out speaker"
                );
            }
        }
    }

    #[test]
    fn si_needs_three_speakers() {
        let m = toy_manifest(2, 5);
        assert!(make_si_folds(&m).is_err());
    }

    #[test]
    fn sv_trials_balanced_and_disjoint() {
        let m = toy_manifest(8, 5);
        let plan = make_sv_trials(&m, 4, 5, 42).unwrap();
        assert_eq!(plan.held_out_speakers.len(), 4);
        assert_eq!(plan.id_speakers.len(), 4);
        let held: BTreeSet<&String> = plan.held_out_speakers.iter().collect();
        for s in &plan.id_speakers {
            assert!(!held.contains(s), "speaker {s} in both sets");
        }
        // balance within one
        let n_t = plan
            .trials
            .iter()
            .filter(|t| t.label == TrialLabel::Target)
            .count();
        let n_n = plan.trials.len() - n_t;
        assert!((n_t as i64 - n_n as i64).abs() <= 1, "{n_t} vs {n_n}");
        // target trials pair same-speaker utterances only
        for t in &plan.trials {
            let se = m.by_id(&t.enroll_id).unwrap().speaker_id.clone();
            let st = m.by_id(&t.test_id).unwrap().speaker_id.clone();
            match t.label {
                TrialLabel::Target => assert_eq!(se, st),
                TrialLabel::Nontarget => assert_ne!(se, st),
            }
            // trial speakers are held out
            assert!(plan.held_out_speakers.contains(&se));
            assert!(plan.held_out_speakers.contains(&st));
        }
        // no trial utterance appears in identification training
        let trial_utts: BTreeSet<&String> = plan
            .trials
            .iter()
            .flat_map(|t| [&t.enroll_id, &t.test_id])
            .collect();
        for p in &plan.id_plans {
            for id in p.train.iter().chain(p.validation.iter()) {
                assert!(!trial_utts.contains(id), "trial utterance {id} in SID training");
            }
        }
        assert_eq!(plan.id_plans.len(), 5);
    }

    #[test]
    fn sv_single_utterance_speaker_errors() {
        let mut m = toy_manifest(6, 1);
        // give identification speakers enough data but held-out ones only 1 utt
        m.entries.push(ManifestEntry {
            utterance_id: "extra".into(),
            audio: "audio/extra.wav".into(),
            duration: 0.2,
            speaker_id: "spk5".into(),
            emotion: Some("class0".into()),
            semantics: None,
        });
        // with only one utterance for most speakers, some held-out speaker
        // will lack a same-speaker pair
        assert!(make_sv_trials(&m, 4, 3, 7).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy_manifest(2, 3);
        m.entries[0].semantics = Some(SemanticAnnotation::new(
            "alarm",
            "set",
            &[("time", "7am")],
        ));
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(m, back);
        m.validate(TaskLabelKind::Emotion).unwrap();
        assert!(m.validate(TaskLabelKind::Semantics).is_err());
        let mut dup = m.clone();
        let cloned = dup.entries[0].clone();
        dup.entries.push(cloned);
        assert!(dup.validate(TaskLabelKind::Speaker).is_err());
    }

    #[test]
    fn trial_list_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let trials = vec![
            Trial {
                enroll_id: "a".into(),
                test_id: "b".into(),
                label: TrialLabel::Target,
            },
            Trial {
                enroll_id: "c".into(),
                test_id: "d".into(),
                label: TrialLabel::Nontarget,
            },
        ];
        let path = dir.path().join("trials.txt");
        write_trial_list(&path, &trials).unwrap();
        assert_eq!(read_trial_list(&path).unwrap(), trials);
    }

    #[test]
    fn data_root_env_override() {
        // the env var wins over the configured path
        std::env::set_var(DATA_ROOT_ENV, "/tmp/sslft-test-root");
        let root = resolve_data_root(Some(Path::new("/configured")));
        assert_eq!(root, PathBuf::from("/tmp/sslft-test-root"));
        std::env::remove_var(DATA_ROOT_ENV);
        let root = resolve_data_root(Some(Path::new("/configured")));
        assert_eq!(root, PathBuf::from("/configured"));
    }
}
