//! Named parameter storage. Every encoder weight lives in exactly one of
//! three groups — `cnn`, `transformer`, `auxiliary` — and the partition is
//! what the freeze policies and checkpoints operate on.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, PositionalKind, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mat, NodeId};

/// An ordered name -> matrix map (BTreeMap so iteration order is stable).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGroup {
    entries: BTreeMap<String, Mat>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar parameters across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Checksum over names and raw f64 bits, order-stable.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, m) in &self.entries {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= m.bit_checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// The partitioned encoder parameters: the CNN feature encoder, the
/// transformer contextualized encoder, and auxiliaries (input projection,
/// mask embedding, positional table, quantizer or cluster projections).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cnn: ParamGroup,
    pub transformer: ParamGroup,
    pub auxiliary: ParamGroup,
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

impl EncoderParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim();
        let mut cnn = ParamGroup::new();
        let mut in_ch = 1usize;
        for (i, layer) in config.cnn_layers.iter().enumerate() {
            cnn.insert(
                &format!("cnn.{i}.w"),
                xavier(&mut rng, layer.kernel * in_ch, layer.channels),
            )?;
            cnn.insert(&format!("cnn.{i}.b"), Mat::zeros(1, layer.channels))?;
            in_ch = layer.channels;
        }

        let mut transformer = ParamGroup::new();
        for b in 0..config.blocks() {
            let p = format!("transformer.{b}");
            transformer.insert(&format!("{p}.ln1.gamma"), Mat::from_vec(1, d, vec![1.0; d]))?;
            transformer.insert(&format!("{p}.ln1.beta"), Mat::zeros(1, d))?;
            for w in ["wq", "wk", "wv", "wo"] {
                transformer.insert(&format!("{p}.attn.{w}"), xavier(&mut rng, d, d))?;
            }
            for bname in ["bq", "bk", "bv", "bo"] {
                transformer.insert(&format!("{p}.attn.{bname}"), Mat::zeros(1, d))?;
            }
            transformer.insert(&format!("{p}.ln2.gamma"), Mat::from_vec(1, d, vec![1.0; d]))?;
            transformer.insert(&format!("{p}.ln2.beta"), Mat::zeros(1, d))?;
            transformer.insert(&format!("{p}.ffn.w1"), xavier(&mut rng, d, config.ffn_dim()))?;
            transformer.insert(&format!("{p}.ffn.b1"), Mat::zeros(1, config.ffn_dim()))?;
            transformer.insert(&format!("{p}.ffn.w2"), xavier(&mut rng, config.ffn_dim(), d))?;
            transformer.insert(&format!("{p}.ffn.b2"), Mat::zeros(1, d))?;
        }

        let mut auxiliary = ParamGroup::new();
        let c_last = config.cnn_output_channels();
        auxiliary.insert("proj.w", xavier(&mut rng, c_last, d))?;
        auxiliary.insert("proj.b", Mat::zeros(1, d))?;
        auxiliary.insert("mask_embedding", xavier(&mut rng, 1, d))?;
        match config.positional {
            PositionalKind::LearnedAbsolute => {
                let mut pos = xavier(&mut rng, config.max_positions, d);
                pos.scale_assign(0.1);
                auxiliary.insert("pos.embed", pos)?;
            }
            PositionalKind::ConvRelative { kernel } => {
                auxiliary.insert("pos.conv_w", xavier(&mut rng, kernel, d))?;
                auxiliary.insert("pos.conv_b", Mat::zeros(1, d))?;
            }
        }
        match config.variant {
            Variant::W2v => {
                let cb = config.codebook.expect("validated");
                let gv = cb.num_groups * cb.entries_per_group;
                auxiliary.insert("quantizer.logit_w", xavier(&mut rng, c_last, gv))?;
                auxiliary.insert("quantizer.logit_b", Mat::zeros(1, gv))?;
                auxiliary.insert(
                    "quantizer.codebook",
                    xavier(&mut rng, gv, d / cb.num_groups),
                )?;
            }
            Variant::Hbt => {
                for (k, &clusters) in config.num_clusters_per_ensemble.iter().enumerate() {
                    auxiliary.insert(&format!("cluster_proj.{k}.w"), xavier(&mut rng, d, clusters))?;
                    auxiliary.insert(&format!("cluster_proj.{k}.b"), Mat::zeros(1, clusters))?;
                }
            }
        }

        let params = EncoderParams {
            cnn,
            transformer,
            auxiliary,
        };
        params.check_partition()?;
        Ok(params)
    }

    /// Every parameter name across the three groups, each exactly once.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in self
            .cnn
            .names()
            .chain(self.transformer.names())
            .chain(self.auxiliary.names())
        {
            if !seen.insert(name.to_string()) {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} appears in more than one collection"
                )));
            }
        }
        Ok(())
    }

    pub fn iter_all(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.cnn
            .iter()
            .chain(self.transformer.iter())
            .chain(self.auxiliary.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.cnn
            .get(name)
            .or_else(|| self.transformer.get(name))
            .or_else(|| self.auxiliary.get(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        if self.cnn.get(name).is_some() {
            return self.cnn.get_mut(name);
        }
        if self.transformer.get(name).is_some() {
            return self.transformer.get_mut(name);
        }
        self.auxiliary.get_mut(name)
    }

    pub fn mask_embedding(&self) -> &Mat {
        self.auxiliary
            .get("mask_embedding")
            .expect("mask_embedding always present")
    }

    pub fn total_scalars(&self) -> usize {
        self.cnn.scalar_count() + self.transformer.scalar_count() + self.auxiliary.scalar_count()
    }
}

/// Parameters bound into a graph for one forward/backward pass. Names map to
/// leaf nodes (trainable) or constants (frozen).
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Bind encoder parameters; names in `trainable` become differentiable
    /// leaves, the rest constants.
    pub fn bind(g: &mut Graph, params: &EncoderParams, trainable: &BTreeSet<String>) -> Self {
        let mut ids = BTreeMap::new();
        for (name, value) in params.iter_all() {
            let id = g.input(value.clone(), trainable.contains(name));
            ids.insert(name.to_string(), id);
        }
        BoundParams { ids }
    }

    /// Bind everything as constants (inference).
    pub fn bind_frozen(g: &mut Graph, params: &EncoderParams) -> Self {
        Self::bind(g, params, &BTreeSet::new())
    }

    /// Bind an arbitrary named collection (e.g. head parameters).
    pub fn bind_named<'a>(
        g: &mut Graph,
        entries: impl Iterator<Item = (&'a str, &'a Mat)>,
        trainable: bool,
    ) -> Self {
        let mut ids = BTreeMap::new();
        for (name, value) in entries {
            ids.insert(name.to_string(), g.input(value.clone(), trainable));
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn partition_is_complete_and_disjoint() {
        let cfg = ModelConfig::toy(Variant::W2v);
        let p = EncoderParams::init(&cfg, 3).unwrap();
        p.check_partition().unwrap();
        let total = p.iter_all().count();
        assert_eq!(total, p.cnn.len() + p.transformer.len() + p.auxiliary.len());
        assert_eq!(
            p.total_scalars(),
            p.iter_all().map(|(_, m)| m.len()).sum::<usize>()
        );
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy(Variant::Hbt);
        let a = EncoderParams::init(&cfg, 11).unwrap();
        let b = EncoderParams::init(&cfg, 11).unwrap();
        assert_eq!(a.cnn.checksum(), b.cnn.checksum());
        assert_eq!(a.transformer.checksum(), b.transformer.checksum());
        assert_eq!(a.auxiliary.checksum(), b.auxiliary.checksum());
        let c = EncoderParams::init(&cfg, 12).unwrap();
        assert_ne!(a.transformer.checksum(), c.transformer.checksum());
    }
}
