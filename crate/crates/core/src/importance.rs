//! Class-based importance scores.
//!
//! For every hidden neuron the per-sample score is the magnitude of the
//! change of a scalar readout when the neuron is frozen at zero, estimated
//! to first order as `|a * dPhi/da|` from one backward pass. The per-class
//! score `beta` is the fraction of a class batch for which the neuron lies
//! on the critical pathway (`s > epsilon`), the neuron score `gamma` sums
//! `beta` over classes, and a unit (conv filter or dense neuron) takes the
//! maximum `gamma` of its neurons as `phi`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::quantizer::{QuantUnit, UnitId};
use crate::tensor::{ForwardOptions, FreezeMask, Layer, Network};

pub const DEFAULT_EPSILON: f64 = 1e-50;

/// Which scalar of the network output the scores differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Pre-softmax logit of the sample's ground-truth class.
    #[default]
    TrueClassLogit,
    /// L1 norm of the logit vector.
    LogitL1,
}

impl Readout {
    pub fn value(self, logits: &[f64], label: usize) -> f64 {
        match self {
            Readout::TrueClassLogit => logits[label],
            Readout::LogitL1 => logits.iter().map(|v| v.abs()).sum(),
        }
    }

    pub fn gradient(self, logits: &[f64], label: usize) -> Vec<f64> {
        match self {
            Readout::TrueClassLogit => {
                let mut g = vec![0.0; logits.len()];
                g[label] = 1.0;
                g
            }
            Readout::LogitL1 => logits.iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-neuron scores of one sample; `layers[i]` holds hidden layer `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScores {
    pub layers: Vec<Vec<f64>>,
}

fn check_label(net: &Network, label: usize) -> Result<()> {
    if label >= net.num_classes() {
        return Err(Error::Shape(format!("label {label} out of range for {} classes", net.num_classes())));
    }
    Ok(())
}

/// `|Phi(x) - Phi(x; a_j <- 0)|` by two forward passes.
pub fn ablation_score_exact(net: &Network, x: &[f64], label: usize, layer: usize, neuron: usize, readout: Readout) -> Result<f64> {
    check_label(net, label)?;
    let full = readout.value(&net.logits(x)?, label);
    let mask = FreezeMask::single(layer, neuron);
    let frozen = net.forward(x, ForwardOptions { freeze: Some(&mask), activations: None })?;
    Ok((full - readout.value(frozen.logits(), label)).abs())
}

/// First-order scores `|a * dPhi/da|` of every hidden neuron from a single
/// forward and backward pass.
pub fn taylor_scores(net: &Network, x: &[f64], label: usize, readout: Readout) -> Result<NeuronScores> {
    check_label(net, label)?;
    let trace = net.forward(x, ForwardOptions::default())?;
    let grads = net.backward(&trace, &readout.gradient(trace.logits(), label))?;
    let layers = (1..net.depth())
        .map(|l| {
            let pos = net.neuron_position(l)?;
            Ok(trace.value(pos).iter().zip(&grads.values[pos]).map(|(a, g)| (a * g).abs()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(NeuronScores { layers })
}

/// Fraction of the batch scores strictly above `epsilon`.
pub fn class_score(scores: &[f64], epsilon: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("class batch has no samples".into()));
    }
    Ok(scores.iter().filter(|&&s| s > epsilon).count() as f64 / scores.len() as f64)
}

/// Sum of per-class scores; `beta[m][j]` is class `m`, neuron `j`.
pub fn aggregate_scores(beta: &[Vec<f64>], num_classes: usize) -> Result<Vec<f64>> {
    if beta.len() != num_classes {
        return Err(Error::Shape(format!("{} class columns, expected {num_classes}", beta.len())));
    }
    let n = beta.first().map_or(0, Vec::len);
    if beta.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("class columns have different neuron counts".into()));
    }
    Ok((0..n).map(|j| beta.iter().map(|c| c[j]).sum()).collect())
}

/// Maximum member `gamma` per unit.
pub fn filter_scores(gamma: &[f64], units: &[Vec<usize>]) -> Result<Vec<f64>> {
    units
        .iter()
        .enumerate()
        .map(|(k, members)| {
            if members.is_empty() {
                return Err(Error::Shape(format!("unit {k} has no neurons")));
            }
            members
                .iter()
                .map(|&j| gamma.get(j).copied().ok_or_else(|| Error::Shape(format!("neuron {j} out of range"))))
                .try_fold(f64::NEG_INFINITY, |m, g| g.map(|g| m.max(g)))
        })
        .collect()
}

/// Neuron indices belonging to each unit of hidden layer `layer`: every
/// spatial position of a conv filter's output channel, or the single neuron
/// of a dense unit.
pub fn unit_members(net: &Network, layer: usize) -> Result<Vec<Vec<usize>>> {
    let l = net.param_layer(layer)?;
    let shape = net.param_output_shape(layer)?;
    Ok(match l {
        Layer::Conv2d(c) => {
            let plane = shape[1] * shape[2];
            (0..c.out_channels).map(|k| (k * plane..(k + 1) * plane).collect()).collect()
        }
        _ => (0..l.units()).map(|j| vec![j]).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub epsilon: f64,
    pub samples_per_class: usize,
    pub readout: Readout,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, samples_per_class: 64, readout: Readout::TrueClassLogit }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub layer: usize,
    /// `beta[m][j]` for class `m`, neuron `j`.
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub members: Vec<Vec<usize>>,
    pub phi: Vec<f64>,
}

impl LayerImportance {
    /// Member neuron with the largest `gamma` (first on ties).
    pub fn peak_neuron(&self, unit: usize) -> usize {
        let m = &self.members[unit];
        m.iter().copied().fold(m[0], |best, j| if self.gamma[j] > self.gamma[best] { j } else { best })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub epsilon: f64,
    pub readout: Readout,
    pub num_classes: usize,
    /// Batch size actually used for each class.
    pub samples_per_class: Vec<usize>,
    pub layers: Vec<LayerImportance>,
}

/// Score every hidden neuron of `net` on class batches drawn from `data`.
pub fn score_network<R: Rng + ?Sized>(net: &Network, data: &LabeledSet, cfg: &ScoringConfig, rng: &mut R) -> Result<ImportanceTable> {
    if cfg.samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be positive".into()));
    }
    let m_classes = net.num_classes();
    data.check_labels(m_classes)?;
    let hidden = net.depth() - 1;
    let sizes: Vec<usize> = (1..=hidden).map(|l| net.neuron_count(l)).collect::<Result<_>>()?;
    let mut beta: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(m_classes); hidden];
    let mut used = Vec::with_capacity(m_classes);
    for (m, mut idx) in data.indices_by_class(m_classes).into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Empty(format!("class {m} has no scoring samples")));
        }
        idx.shuffle(rng);
        idx.truncate(cfg.samples_per_class);
        let mut hits: Vec<Vec<usize>> = sizes.iter().map(|&n| vec![0; n]).collect();
        for &i in &idx {
            let (x, y) = data.get(i);
            let s = taylor_scores(net, x, y, cfg.readout)?;
            for (h, layer) in hits.iter_mut().zip(&s.layers) {
                for (c, &v) in h.iter_mut().zip(layer) {
                    *c += usize::from(v > cfg.epsilon);
                }
            }
        }
        for (b, h) in beta.iter_mut().zip(&hits) {
            b.push(h.iter().map(|&c| c as f64 / idx.len() as f64).collect());
        }
        used.push(idx.len());
    }
    let layers = beta
        .into_iter()
        .enumerate()
        .map(|(i, beta)| {
            let layer = i + 1;
            let gamma = aggregate_scores(&beta, m_classes)?;
            let members = unit_members(net, layer)?;
            let phi = filter_scores(&gamma, &members)?;
            Ok(LayerImportance { layer, beta, gamma, members, phi })
        })
        .collect::<Result<_>>()?;
    Ok(ImportanceTable { epsilon: cfg.epsilon, readout: cfg.readout, num_classes: m_classes, samples_per_class: used, layers })
}

/// One unit record of the score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitScore {
    pub layer: usize,
    pub unit: usize,
    pub phi: f64,
    /// `beta` vector of the member neuron that attains `phi`.
    pub beta: Vec<f64>,
}

/// Persisted unit scores with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFile {
    pub version: u32,
    pub epsilon: f64,
    pub readout: Readout,
    pub num_classes: usize,
    pub samples_per_class: Vec<usize>,
    pub model_sha256: String,
    pub units: Vec<UnitScore>,
}

impl ScoreFile {
    pub fn from_table(table: &ImportanceTable, model_sha256: String) -> Self {
        let units = table
            .layers
            .iter()
            .flat_map(|l| {
                (0..l.phi.len()).map(move |k| {
                    let peak = l.peak_neuron(k);
                    UnitScore { layer: l.layer, unit: k, phi: l.phi[k], beta: l.beta.iter().map(|c| c[peak]).collect() }
                })
            })
            .collect();
        Self {
            version: 1,
            epsilon: table.epsilon,
            readout: table.readout,
            num_classes: table.num_classes,
            samples_per_class: table.samples_per_class.clone(),
            model_sha256,
            units,
        }
    }

    /// `phi` for each quantizable unit, in the order given.
    pub fn unit_scores(&self, units: &[QuantUnit]) -> Result<Vec<f64>> {
        let lookup: std::collections::HashMap<UnitId, f64> =
            self.units.iter().map(|u| (UnitId { layer: u.layer, unit: u.unit }, u.phi)).collect();
        units
            .iter()
            .map(|u| {
                lookup
                    .get(&u.id)
                    .copied()
                    .ok_or_else(|| Error::Format { what: "score file", msg: format!("no score for unit ({}, {})", u.id.layer, u.id.unit) })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let f: ScoreFile = serde_json::from_str(&text)?;
        if f.version != 1 {
            return Err(Error::Format { what: "score file", msg: format!("unsupported version {}", f.version) });
        }
        Ok(f)
    }
}
