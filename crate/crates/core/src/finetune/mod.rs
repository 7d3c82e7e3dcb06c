//! Fine-tuning machinery: Frozen/Partial/Entire freeze policies, the §3.2
//! run-naming grid, validation-annealed learning-rate scheduling, and the
//! training loop with two independently-rated Adam optimizers.

mod adam;
mod fit;
mod schedule;

pub use adam::Adam;
pub use fit::{
    classify_utterance, contextualize_utterance, decode_utterance, fit, pooled_embedding,
    EpochRecord, FitConfig, FitOutcome, TrainItem, ValMetric,
};
pub use schedule::{scheduler_step, ScheduleState};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderParams, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeMode {
    /// Both encoder collections (and auxiliaries) stay fixed; only the
    /// downstream head trains.
    Frozen,
    /// The CNN feature encoder stays fixed; transformer and auxiliaries
    /// train.
    Partial,
    /// Everything trains.
    Entire,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub mode: FreezeMode,
}

impl FreezePolicy {
    pub fn frozen() -> Self {
        FreezePolicy {
            mode: FreezeMode::Frozen,
        }
    }

    pub fn partial() -> Self {
        FreezePolicy {
            mode: FreezeMode::Partial,
        }
    }

    pub fn entire() -> Self {
        FreezePolicy {
            mode: FreezeMode::Entire,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self.mode {
            FreezeMode::Frozen => "Frozen",
            FreezeMode::Partial => "PF",
            FreezeMode::Entire => "EF",
        }
    }
}

/// The set of encoder parameter names the policy leaves trainable. Frozen
/// parameters receive no optimizer updates at all.
pub fn apply_freeze_policy(params: &EncoderParams, policy: &FreezePolicy) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    match policy.mode {
        FreezeMode::Frozen => {}
        FreezeMode::Partial => {
            set.extend(params.transformer.names().map(String::from));
            set.extend(params.auxiliary.names().map(String::from));
        }
        FreezeMode::Entire => {
            set.extend(params.cnn.names().map(String::from));
            set.extend(params.transformer.names().map(String::from));
            set.extend(params.auxiliary.names().map(String::from));
        }
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeTag {
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "large")]
    Large,
}

impl SizeTag {
    pub fn tag(&self) -> &'static str {
        match self {
            SizeTag::Toy => "toy",
            SizeTag::Base => "base",
            SizeTag::Large => "large",
        }
    }
}

/// Canonical run name, e.g. `EF-w2v-base` or `PF-hbt-large-960h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunName {
    pub policy: FreezePolicy,
    pub variant: Variant,
    pub size: SizeTag,
    pub asr_960h: bool,
}

impl RunName {
    pub fn render(&self) -> String {
        format!(
            "{}-{}-{}{}",
            self.policy.tag(),
            self.variant.tag(),
            self.size.tag(),
            if self.asr_960h { "-960h" } else { "" }
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut it = s.split('-');
        let policy = match it.next() {
            Some("EF") => FreezePolicy::entire(),
            Some("PF") => FreezePolicy::partial(),
            Some("Frozen") => FreezePolicy::frozen(),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown policy tag {other:?} in {s}"
                )))
            }
        };
        let variant = match it.next() {
            Some("w2v") => Variant::W2v,
            Some("hbt") => Variant::Hbt,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown variant tag {other:?} in {s}"
                )))
            }
        };
        let size = match it.next() {
            Some("toy") => SizeTag::Toy,
            Some("base") => SizeTag::Base,
            Some("large") => SizeTag::Large,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown size tag {other:?} in {s}"
                )))
            }
        };
        let asr_960h = match it.next() {
            None => false,
            Some("960h") => true,
            Some(other) => {
                return Err(Error::InvalidConfig(format!(
                    "unexpected suffix {other} in {s}"
                )))
            }
        };
        if it.next().is_some() {
            return Err(Error::InvalidConfig(format!("trailing junk in {s}")));
        }
        Ok(RunName {
            policy,
            variant,
            size,
            asr_960h,
        })
    }

    /// Table-1 row ordering: fine-tuned rows grouped by (variant, size, asr)
    /// with EF before PF, then the Frozen block.
    pub fn grid_key(&self) -> (u8, u8, u8, u8, u8) {
        let frozen = matches!(self.policy.mode, FreezeMode::Frozen) as u8;
        let variant = match self.variant {
            Variant::W2v => 0,
            Variant::Hbt => 1,
        };
        let size = match self.size {
            SizeTag::Toy => 0,
            SizeTag::Base => 1,
            SizeTag::Large => 2,
        };
        let asr = self.asr_960h as u8;
        let policy = match self.policy.mode {
            FreezeMode::Entire => 0,
            FreezeMode::Partial => 1,
            FreezeMode::Frozen => 2,
        };
        (frozen, variant, size, asr, policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn freeze_policy_partitions_trainable_sets() {
        let model = Model::init(ModelConfig::toy(Variant::W2v), 1).unwrap();
        let p = &model.params;
        let total = p.cnn.len() + p.transformer.len() + p.auxiliary.len();

        let frozen = apply_freeze_policy(p, &FreezePolicy::frozen());
        assert!(frozen.is_empty());

        let partial = apply_freeze_policy(p, &FreezePolicy::partial());
        assert_eq!(partial.len(), p.transformer.len() + p.auxiliary.len());
        for name in p.cnn.names() {
            assert!(!partial.contains(name), "cnn param {name} trainable under PF");
        }

        let entire = apply_freeze_policy(p, &FreezePolicy::entire());
        assert_eq!(entire.len(), total);
    }

    /// Scalar-count version of the 100 CNN + 400 transformer example.
    #[test]
    fn trainable_scalar_counts_follow_policy() {
        let model = Model::init(ModelConfig::toy(Variant::Hbt), 2).unwrap();
        let p = &model.params;
        let count = |set: &std::collections::BTreeSet<String>| -> usize {
            set.iter().map(|n| p.get(n).unwrap().len()).sum()
        };
        let cnn_scalars = p.cnn.scalar_count();
        let tf_scalars = p.transformer.scalar_count();
        let aux_scalars = p.auxiliary.scalar_count();

        assert_eq!(count(&apply_freeze_policy(p, &FreezePolicy::frozen())), 0);
        assert_eq!(
            count(&apply_freeze_policy(p, &FreezePolicy::partial())),
            tf_scalars + aux_scalars
        );
        assert_eq!(
            count(&apply_freeze_policy(p, &FreezePolicy::entire())),
            cnn_scalars + tf_scalars + aux_scalars
        );
    }

    #[test]
    fn run_names_render_like_the_naming_grid() {
        let name = RunName {
            policy: FreezePolicy::entire(),
            variant: Variant::W2v,
            size: SizeTag::Base,
            asr_960h: false,
        };
        assert_eq!(name.render(), "EF-w2v-base");
        let name = RunName {
            policy: FreezePolicy::partial(),
            variant: Variant::Hbt,
            size: SizeTag::Large,
            asr_960h: true,
        };
        assert_eq!(name.render(), "PF-hbt-large-960h");
        assert_eq!(RunName::parse("PF-hbt-large-960h").unwrap(), name);
        assert!(RunName::parse("XX-hbt-large").is_err());
    }

    #[test]
    fn grid_ordering_matches_table_layout() {
        let rows = [
            "EF-w2v-base",
            "PF-w2v-base",
            "EF-w2v-base-960h",
            "PF-w2v-base-960h",
            "EF-w2v-large",
            "PF-w2v-large",
            "EF-w2v-large-960h",
            "PF-w2v-large-960h",
            "EF-hbt-base",
            "PF-hbt-base",
            "EF-hbt-large",
            "PF-hbt-large",
            "EF-hbt-large-960h",
            "PF-hbt-large-960h",
            "Frozen-w2v-base",
            "Frozen-w2v-large",
            "Frozen-hbt-base",
            "Frozen-hbt-large",
        ];
        let mut parsed: Vec<RunName> = rows.iter().map(|s| RunName::parse(s).unwrap()).collect();
        parsed.sort_by_key(|r| r.grid_key());
        let rendered: Vec<String> = parsed.iter().map(|r| r.render()).collect();
        assert_eq!(rendered, rows);
    }
}
