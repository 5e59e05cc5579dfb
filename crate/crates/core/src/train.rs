//! Mini-batch SGD with momentum and the float baseline training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::{evaluate_accuracy, ForwardOptions, Network, ParamGrads};

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-ln max(p_label, floor)` and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[label].max(PROB_FLOOR).ln();
    let grad = if p[label] > PROB_FLOOR {
        p.iter().enumerate().map(|(j, &pj)| pj - f64::from(u8::from(j == label))).collect()
    } else {
        vec![0.0; p.len()]
    };
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, learning_rate: 0.02, momentum: 0.9, weight_decay: 1e-4, batch_size: 50 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Step schedule: the rate is divided by 10 at 50% and again at 75% of
/// the epochs.
pub fn scheduled_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let mut lr = base;
    for frac in [0.5, 0.75] {
        if epoch as f64 >= frac * epochs as f64 {
            lr /= 10.0;
        }
    }
    lr
}

/// Which parameters an optimizer step may touch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMask {
    /// `frozen[i]` covers layer `i + 1`: one flag per weight, then per bias.
    pub weight: Vec<Vec<bool>>,
    pub bias: Vec<Vec<bool>>,
}

impl UpdateMask {
    pub fn none(net: &Network) -> Self {
        let grads = net.zero_grads();
        Self {
            weight: grads.layers.iter().map(|l| vec![false; l.weight.len()]).collect(),
            bias: grads.layers.iter().map(|l| vec![false; l.bias.len()]).collect(),
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamGrads,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: net.zero_grads() }
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads, lr: f64, frozen: Option<&UpdateMask>) -> Result<()> {
        for (i, (g, v)) in grads.layers.iter().zip(&mut self.velocity.layers).enumerate() {
            let layer = net.param_layer_mut(i + 1)?;
            let fw = frozen.map(|m| m.weight[i].as_slice());
            let fb = frozen.map(|m| m.bias[i].as_slice());
            update(layer.weight_mut(), &g.weight, &mut v.weight, fw, lr, self.momentum, self.weight_decay);
            update(layer.bias_mut(), &g.bias, &mut v.bias, fb, lr, self.momentum, self.weight_decay);
        }
        Ok(())
    }
}

fn update(w: &mut [f64], g: &[f64], v: &mut [f64], frozen: Option<&[bool]>, lr: f64, mu: f64, wd: f64) {
    for j in 0..w.len() {
        if frozen.is_some_and(|f| f[j]) {
            continue;
        }
        v[j] = mu * v[j] + g[j] + wd * w[j];
        w[j] -= lr * v[j];
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Train a float network with cross-entropy.
pub fn train_float<R: Rng + ?Sized>(net: &mut Network, data: &LabeledSet, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<TrainEpoch>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    data.check_labels(net.num_classes())?;
    let mut sgd = Sgd::new(net, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.learning_rate, epoch, cfg.epochs);
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_grads();
            for &i in batch {
                let (x, y) = data.get(i);
                let trace = net.forward(x, ForwardOptions::default())?;
                let (loss, g) = cross_entropy(trace.logits(), y);
                total += loss;
                net.accumulate_grads(&trace, &g, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd.step(net, &grads, lr, None)?;
        }
        let train_accuracy = evaluate_accuracy(net, data, None)?;
        log::info!("train epoch {epoch}: loss {:.4} acc {train_accuracy:.4}", total / data.len() as f64);
        log.push(TrainEpoch { epoch, loss: total / data.len() as f64, train_accuracy });
    }
    Ok(log)
}
