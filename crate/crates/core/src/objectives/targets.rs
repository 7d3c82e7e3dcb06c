//! Cluster-target generation for masked prediction: first iteration from
//! MFCC features, later iterations from intermediate encoder layers, with
//! provenance recorded alongside the labels.

use std::fs;
use std::path::Path;

use super::kmeans::{assign_targets, kmeans_fit};
use super::mfcc::{mfcc_features, MfccConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Mat;

/// Where a label set came from: which refinement iteration, the cluster
/// count, and the feature source ("mfcc" or "layer<i>").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetProvenance {
    pub iteration: usize,
    pub k: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetLabels {
    pub provenance: TargetProvenance,
    pub per_utterance: Vec<(String, Vec<usize>)>,
}

/// Pool per-utterance feature matrices, fit k-means on the pool, and assign
/// every utterance's frames. Shared by the MFCC and layer-feature routes.
pub fn cluster_targets(
    features_per_utt: &[(String, Mat)],
    k: usize,
    seed: u64,
    provenance: TargetProvenance,
) -> Result<TargetLabels> {
    if features_per_utt.is_empty() {
        return Err(Error::Data("no utterances to cluster".into()));
    }
    let dim = features_per_utt[0].1.cols();
    let total_rows: usize = features_per_utt.iter().map(|(_, m)| m.rows()).sum();
    let mut pooled = Mat::zeros(total_rows, dim);
    let mut off = 0;
    for (_, m) in features_per_utt {
        if m.cols() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: m.cols(),
                context: "inconsistent feature dims across utterances".into(),
            });
        }
        for r in 0..m.rows() {
            pooled.row_mut(off + r).copy_from_slice(m.row(r));
        }
        off += m.rows();
    }
    let model = kmeans_fit(&pooled, k, seed)?;
    let per_utterance = features_per_utt
        .iter()
        .map(|(id, m)| Ok((id.clone(), assign_targets(m, &model.centroids)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetLabels {
        provenance,
        per_utterance,
    })
}

/// First-iteration targets: k-means over 39-dim MFCC features.
pub fn initial_targets(
    corpus: &[(String, Vec<f64>)],
    k: usize,
    seed: u64,
    mfcc: &MfccConfig,
) -> Result<TargetLabels> {
    let features = corpus
        .iter()
        .map(|(id, wav)| Ok((id.clone(), mfcc_features(wav, mfcc)?.values)))
        .collect::<Result<Vec<_>>>()?;
    cluster_targets(
        &features,
        k,
        seed,
        TargetProvenance {
            iteration: 1,
            k,
            source: "mfcc".into(),
        },
    )
}

/// Later-iteration targets: k-means over the features extracted from an
/// intermediate transformer layer of the pretrained model.
pub fn refine_targets(
    model: &Model,
    corpus: &[(String, Vec<f64>)],
    layer_index: usize,
    k: usize,
    seed: u64,
    iteration: usize,
) -> Result<TargetLabels> {
    if layer_index >= model.config.blocks() {
        return Err(Error::InvalidConfig(format!(
            "layer index {layer_index} out of range for {} blocks",
            model.config.blocks()
        )));
    }
    let features = corpus
        .iter()
        .map(|(id, wav)| {
            let frames = model.encode_features(wav)?;
            let layers = model.contextualize_layers(&frames, None)?;
            Ok((id.clone(), layers[layer_index].values.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    cluster_targets(
        &features,
        k,
        seed,
        TargetProvenance {
            iteration,
            k,
            source: format!("layer{layer_index}"),
        },
    )
}

/// Label file format: `# iteration=<i> k=<k> source=<s>` header, then one
/// `utt_id idx idx ...` line per utterance.
pub fn write_target_labels(path: &Path, labels: &TargetLabels) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = format!(
        "# iteration={} k={} source={}\n",
        labels.provenance.iteration, labels.provenance.k, labels.provenance.source
    );
    for (id, seq) in &labels.per_utterance {
        out.push_str(id);
        for z in seq {
            out.push(' ');
            out.push_str(&z.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_target_labels(path: &Path) -> Result<TargetLabels> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty label file".into()))?;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::Data("label file missing provenance header".into()))?;
    let mut iteration = None;
    let mut k = None;
    let mut source = None;
    for field in header.split_whitespace() {
        if let Some(v) = field.strip_prefix("iteration=") {
            iteration = Some(v.parse().map_err(|e| Error::Data(format!("{e}")))?);
        } else if let Some(v) = field.strip_prefix("k=") {
            k = Some(v.parse().map_err(|e| Error::Data(format!("{e}")))?);
        } else if let Some(v) = field.strip_prefix("source=") {
            source = Some(v.to_string());
        }
    }
    let provenance = TargetProvenance {
        iteration: iteration.ok_or_else(|| Error::Data("missing iteration".into()))?,
        k: k.ok_or_else(|| Error::Data("missing k".into()))?,
        source: source.ok_or_else(|| Error::Data("missing source".into()))?,
    };
    let per_utterance = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let id = it
                .next()
                .ok_or_else(|| Error::Data("empty label line".into()))?
                .to_string();
            let seq = it
                .map(|s| s.parse::<usize>().map_err(|e| Error::Data(format!("{e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((id, seq))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetLabels {
        provenance,
        per_utterance,
    })
}
