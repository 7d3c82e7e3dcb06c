//! Token format for SLU semantics: `scenario|action|type=value;type=value`,
//! plus the character vocabulary the decoder emits. Parsing is best-effort:
//! decoder output is unconstrained text, so malformed strings produce a
//! partial annotation with flags instead of an error.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::decoder::VocabSpec;
use crate::error::{Error, Result};

/// Three-level semantics: scenario, action, and a set of typed slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SemanticAnnotation {
    pub scenario: String,
    pub action: String,
    pub entities: BTreeSet<(String, String)>,
}

impl SemanticAnnotation {
    pub fn new(scenario: &str, action: &str, entities: &[(&str, &str)]) -> Self {
        SemanticAnnotation {
            scenario: scenario.to_string(),
            action: action.to_string(),
            entities: entities
                .iter()
                .map(|(t, v)| (t.to_string(), v.to_string()))
                .collect(),
        }
    }
}

/// Outcome of a best-effort parse: the annotation plus malformation flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub annotation: SemanticAnnotation,
    pub malformed: bool,
    pub issues: Vec<String>,
}

const RESERVED: [char; 3] = ['|', '=', ';'];

fn check_label(label: &str, context: &str) -> Result<()> {
    if label.chars().any(|c| RESERVED.contains(&c)) {
        return Err(Error::Data(format!(
            "{context} {label:?} contains a reserved delimiter"
        )));
    }
    Ok(())
}

/// Render an annotation as a decodable token string. Entities are emitted
/// sorted by slot type (then value), so serialization is deterministic.
pub fn serialize_semantics(annotation: &SemanticAnnotation) -> Result<String> {
    check_label(&annotation.scenario, "scenario")?;
    check_label(&annotation.action, "action")?;
    let mut parts = Vec::with_capacity(annotation.entities.len());
    for (t, v) in &annotation.entities {
        check_label(t, "slot type")?;
        check_label(v, "slot value")?;
        parts.push(format!("{t}={v}"));
    }
    Ok(format!(
        "{}|{}|{}",
        annotation.scenario,
        annotation.action,
        parts.join(";")
    ))
}

/// Best-effort inverse of [`serialize_semantics`]; never fails.
pub fn parse_semantics(s: &str) -> ParseOutcome {
    let mut issues = Vec::new();
    let mut fields = s.splitn(3, '|');
    let scenario = fields.next().unwrap_or("").to_string();
    let action = match fields.next() {
        Some(a) => a.to_string(),
        None => {
            issues.push("missing action field".to_string());
            String::new()
        }
    };
    let entity_str = fields.next();
    if entity_str.is_none() {
        issues.push("missing entity field".to_string());
    }
    let mut entities = BTreeSet::new();
    if let Some(ent) = entity_str {
        for seg in ent.split(';') {
            if seg.is_empty() {
                continue;
            }
            match seg.split_once('=') {
                Some((t, v)) => {
                    if v.is_empty() {
                        issues.push(format!("empty value for slot {t:?}"));
                    }
                    if t.is_empty() {
                        issues.push("empty slot type".to_string());
                    }
                    entities.insert((t.to_string(), v.to_string()));
                }
                None => {
                    issues.push(format!("slot segment {seg:?} lacks '='"));
                    entities.insert((seg.to_string(), String::new()));
                }
            }
        }
    }
    if scenario.is_empty() {
        issues.push("empty scenario".to_string());
    }
    ParseOutcome {
        malformed: !issues.is_empty(),
        annotation: SemanticAnnotation {
            scenario,
            action,
            entities,
        },
        issues,
    }
}

/// Character-level vocabulary: lowercase letters, digits, space, and the
/// three semantic delimiters, plus start/end/pad ids at the top.
#[derive(Debug, Clone)]
pub struct Vocab {
    chars: Vec<char>,
    spec: VocabSpec,
}

pub fn char_vocab() -> Vocab {
    let mut chars: Vec<char> = ('a'..='z').collect();
    chars.extend('0'..='9');
    chars.extend([' ', '|', '=', ';']);
    let n = chars.len();
    Vocab {
        chars,
        spec: VocabSpec {
            size: n + 3,
            sos: n,
            eos: n + 1,
            pad: n + 2,
        },
    }
}

impl Vocab {
    pub fn spec(&self) -> VocabSpec {
        self.spec
    }

    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&k| k == c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.chars.get(t).copied())
            .collect()
    }
}
