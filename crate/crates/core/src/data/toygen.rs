//! Deterministic synthetic corpora for end-to-end runs without licensed
//! datasets. Speaker identity controls the fundamental frequency band; class
//! (or intent) identity controls a formant-like resonance and an amplitude
//! modulation rate, so classification, speaker, and SLU tasks are all
//! learnable from the audio.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wav::{write_wav, SAMPLE_RATE};
use super::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::heads::SemanticAnnotation;

/// Small closed grammar for toy SLU annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SluGrammar {
    pub scenarios: Vec<String>,
    pub actions: Vec<String>,
    pub slot_types: Vec<String>,
    pub slot_values: Vec<String>,
    pub max_entities: usize,
}

impl Default for SluGrammar {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        SluGrammar {
            scenarios: s(&["alarm", "music", "light", "timer"]),
            actions: s(&["set", "off", "on", "query"]),
            slot_types: s(&["time", "day", "name", "room"]),
            slot_values: s(&["7am", "9pm", "mon", "fri", "kitchen", "desk"]),
            max_entities: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyLabels {
    /// Plain classification with this many classes (SER/SID corpora).
    Classes(usize),
    /// Annotations drawn from a grammar (SLU corpora).
    Grammar(SluGrammar),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub num_speakers: usize,
    pub labels: ToyLabels,
    pub utterances_per_cell: usize,
    pub duration_range: (f64, f64),
}

impl ToySpec {
    pub fn ser(num_speakers: usize, num_classes: usize, per_cell: usize) -> Self {
        ToySpec {
            num_speakers,
            labels: ToyLabels::Classes(num_classes),
            utterances_per_cell: per_cell,
            duration_range: (0.12, 0.2),
        }
    }

    pub fn slu(num_speakers: usize, utterances: usize) -> Self {
        ToySpec {
            num_speakers,
            labels: ToyLabels::Grammar(SluGrammar::default()),
            utterances_per_cell: utterances,
            duration_range: (0.12, 0.2),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.utterances_per_cell == 0 {
            return Err(Error::InvalidConfig("toy spec needs positive counts".into()));
        }
        match &self.labels {
            ToyLabels::Classes(0) => {
                return Err(Error::InvalidConfig("toy spec needs >= 1 class".into()))
            }
            ToyLabels::Grammar(g) => {
                if g.scenarios.is_empty() || g.actions.is_empty() {
                    return Err(Error::InvalidConfig("empty grammar".into()));
                }
            }
            _ => {}
        }
        if self.duration_range.0 <= 0.0 || self.duration_range.1 < self.duration_range.0 {
            return Err(Error::InvalidConfig("bad duration range".into()));
        }
        Ok(())
    }
}

/// The four-class SER label names; larger class counts fall back to classN.
fn emotion_name(class: usize, num_classes: usize) -> String {
    const FOUR: [&str; 4] = ["anger", "happiness", "sadness", "neutral"];
    if num_classes == 4 {
        FOUR[class].to_string()
    } else {
        format!("class{class}")
    }
}

/// Synthesize one utterance: harmonics of the speaker's f0 shaped by a
/// class-dependent resonance, amplitude-modulated at a class-dependent rate.
fn synth(
    rng: &mut ChaCha8Rng,
    speaker: usize,
    class: usize,
    duration: f64,
) -> Vec<f64> {
    let f0 = 100.0 + 14.0 * speaker as f64 + rng.random_range(-3.0..3.0);
    let resonance = 500.0 + 350.0 * class as f64;
    let am_rate = 2.0 + 1.5 * class as f64;
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let n = (SAMPLE_RATE as f64 * duration).round() as usize;
    let bw = 250.0;
    let harmonics: Vec<(f64, f64)> = (1..=10)
        .map(|h| {
            let freq = h as f64 * f0;
            let a = (-((freq - resonance) / bw).powi(2)).exp() + 0.05;
            (freq, a)
        })
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, a)| a).sum();
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let am = 1.0 + 0.5 * (2.0 * PI * am_rate * t).sin();
            let tone: f64 = harmonics
                .iter()
                .map(|(f, a)| a * (2.0 * PI * f * t + phase).sin())
                .sum();
            0.35 * am * tone / norm
        })
        .collect()
}

fn sample_annotation(rng: &mut ChaCha8Rng, g: &SluGrammar) -> SemanticAnnotation {
    let scenario = g.scenarios[rng.random_range(0..g.scenarios.len())].clone();
    let action = g.actions[rng.random_range(0..g.actions.len())].clone();
    let n_ent = rng.random_range(0..=g.max_entities.min(g.slot_types.len()));
    let mut types = g.slot_types.clone();
    for i in (1..types.len()).rev() {
        let j = rng.random_range(0..=i);
        types.swap(i, j);
    }
    let entities = types
        .into_iter()
        .take(n_ent)
        .map(|t| {
            let v = g.slot_values[rng.random_range(0..g.slot_values.len())].clone();
            (t, v)
        })
        .collect();
    SemanticAnnotation {
        scenario,
        action,
        entities,
    }
}

/// Generate audio under `<out_dir>/audio/` plus a manifest. Byte-identical
/// for identical (spec, seed).
pub fn generate_toy_corpus(spec: &ToySpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    match &spec.labels {
        ToyLabels::Classes(num_classes) => {
            for speaker in 0..spec.num_speakers {
                for class in 0..*num_classes {
                    for u in 0..spec.utterances_per_cell {
                        let duration =
                            rng.random_range(spec.duration_range.0..=spec.duration_range.1);
                        let samples = synth(&mut rng, speaker, class, duration);
                        let id = format!("spk{speaker}_cls{class}_u{u}");
                        let rel = format!("audio/{id}.wav");
                        write_wav(&out_dir.join(&rel), &samples, SAMPLE_RATE as u32)?;
                        entries.push(ManifestEntry {
                            utterance_id: id,
                            audio: rel,
                            duration,
                            speaker_id: format!("spk{speaker}"),
                            emotion: Some(emotion_name(class, *num_classes)),
                            semantics: None,
                        });
                    }
                }
            }
        }
        ToyLabels::Grammar(grammar) => {
            // intent cell (scenario, action) drives the acoustics so intent
            // is recoverable from audio
            for u in 0..spec.utterances_per_cell {
                let speaker = u % spec.num_speakers;
                let ann = sample_annotation(&mut rng, grammar);
                let s_idx = grammar
                    .scenarios
                    .iter()
                    .position(|s| *s == ann.scenario)
                    .unwrap();
                let a_idx = grammar.actions.iter().position(|a| *a == ann.action).unwrap();
                let class = s_idx * grammar.actions.len() + a_idx;
                let duration = rng.random_range(spec.duration_range.0..=spec.duration_range.1);
                let mut samples = synth(&mut rng, speaker, class % 6, duration);
                // entity fingerprint: one quiet high tone per slot pair
                for (t, v) in &ann.entities {
                    let h = t
                        .bytes()
                        .chain(v.bytes())
                        .fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64));
                    let freq = 2600.0 + (h % 12) as f64 * 180.0;
                    for (i, s) in samples.iter_mut().enumerate() {
                        let tt = i as f64 / SAMPLE_RATE as f64;
                        *s += 0.04 * (2.0 * PI * freq * tt).sin();
                    }
                }
                let id = format!("slu_u{u:04}");
                let rel = format!("audio/{id}.wav");
                write_wav(&out_dir.join(&rel), &samples, SAMPLE_RATE as u32)?;
                entries.push(ManifestEntry {
                    utterance_id: id,
                    audio: rel,
                    duration,
                    speaker_id: format!("spk{speaker}"),
                    emotion: None,
                    semantics: Some(ann),
                });
            }
        }
    }
    let manifest = Manifest { entries };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
