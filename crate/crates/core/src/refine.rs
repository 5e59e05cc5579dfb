//! Refining a fake-quantized network against its full-precision teacher
//! with a distillation loss and straight-through weight updates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::quantizer::{
    apply_arrangement_with, calibrate_activations, quantizable_units, ste_grad, weight_bounds,
    ActivationQuant, BitArrangement, CalibrationSource, QuantRange, UnitId,
};
use crate::tensor::{evaluate_accuracy, ForwardOptions, Layer, Network};
use crate::train::{scheduled_lr, softmax, Sgd, UpdateMask, PROB_FLOOR};

/// Orientation of the divergence term between student `Y` and teacher
/// `Y^fc` distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrientation {
    /// `sum_k Y_k ln(Y_k / Y^fc_k)`, a proper non-negative divergence.
    #[default]
    Standard,
    /// `sum_k Y_k ln(Y^fc_k / Y_k)`, the negated divergence.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    /// Weight of the cross-entropy term; the divergence gets `1 - alpha`.
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub orientation: KlOrientation,
    /// Keep the weight ranges measured before refining instead of
    /// recomputing them from the shadow weights every step.
    pub freeze_weight_ranges: bool,
    pub calibration: CalibrationSource,
    /// Recalibrate activation ranges at the start of every epoch instead of
    /// keeping the ranges measured before refining.
    pub recalibrate_activations: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            epochs: 40,
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 50,
            orientation: KlOrientation::Standard,
            freeze_weight_ranges: false,
            calibration: CalibrationSource::Quantized,
            recalibrate_activations: false,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("bad refine optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    /// Gradient of `total` with respect to the student logits.
    pub grad: Vec<f64>,
}

/// `alpha * CE(student, label) + (1 - alpha) * KL` with probabilities
/// floored at `1e-12` before every logarithm.
pub fn kd_loss(student: &[f64], teacher: &[f64], label: usize, alpha: f64, orientation: KlOrientation) -> Result<KdLoss> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!("student has {} logits, teacher {}", student.len(), teacher.len())));
    }
    if label >= student.len() {
        return Err(Error::Shape(format!("label {label} out of range for {} classes", student.len())));
    }
    let y = softmax(student);
    let t = softmax(teacher);

    let ce = -y[label].max(PROB_FLOOR).ln();
    let ce_active = y[label] > PROB_FLOOR;

    let sign = match orientation {
        KlOrientation::Standard => 1.0,
        KlOrientation::AsPrinted => -1.0,
    };
    let logs: Vec<f64> = y.iter().zip(&t).map(|(&yk, &tk)| yk.max(PROB_FLOOR).ln() - tk.max(PROB_FLOOR).ln()).collect();
    let kl = sign * y.iter().zip(&logs).map(|(yk, l)| yk * l).sum::<f64>();
    // dKL/dY_k, then through the softmax Jacobian
    let dy: Vec<f64> = y.iter().zip(&logs).map(|(&yk, &l)| l + if yk > PROB_FLOOR { 1.0 } else { 0.0 }).collect();
    let mean: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();

    let grad = (0..y.len())
        .map(|j| {
            let ce_g = if ce_active { y[j] - f64::from(u8::from(j == label)) } else { 0.0 };
            let kl_g = sign * y[j] * (dy[j] - mean);
            alpha * ce_g + (1.0 - alpha) * kl_g
        })
        .collect();
    Ok(KdLoss { total: alpha * ce + (1.0 - alpha) * kl, ce, kl, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub val_accuracy: f64,
}

pub fn render_refine_log(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,ce,kl,val_accuracy\n");
    for e in history {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.loss, e.ce, e.kl, e.val_accuracy);
    }
    s
}

/// Data used while refining.
#[derive(Debug, Clone, Copy)]
pub struct RefineData<'a> {
    pub train: &'a LabeledSet,
    pub calib: &'a LabeledSet,
    pub val: &'a LabeledSet,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Full-precision shadow weights after refining.
    pub shadow: Network,
    /// Fake-quantized view of the refined shadow weights.
    pub quantized: Network,
    pub history: Vec<EpochLog>,
    /// Activation ranges the refined network was trained and evaluated with.
    pub activations: ActivationQuant,
    /// Quantized validation accuracy after refining.
    pub accuracy: f64,
}

fn pruned_mask(net: &Network, arr: &BitArrangement) -> UpdateMask {
    let mut mask = UpdateMask::none(net);
    for u in quantizable_units(net) {
        if arr.bits(u.id) == Some(0) {
            let i = u.id.layer - 1;
            mask.weight[i][u.id.unit * u.weights..(u.id.unit + 1) * u.weights].iter_mut().for_each(|f| *f = true);
            mask.bias[i][u.id.unit] = true;
        }
    }
    mask
}

fn check_teacher(student: &Network, teacher: &Network) -> Result<()> {
    if student.input_shape() != teacher.input_shape() || student.specs() != teacher.specs() {
        return Err(Error::Shape("teacher and student architectures differ".into()));
    }
    Ok(())
}

/// Fine-tune `shadow` under `arr`. Every forward pass uses freshly quantized
/// weights and activations; gradients reach the shadow weights through the
/// clipped straight-through estimator. Pruned units are never updated.
pub fn refine<R: Rng + ?Sized>(
    shadow: &Network,
    arr: &BitArrangement,
    teacher: &Network,
    data: RefineData<'_>,
    cfg: &KdConfig,
    rng: &mut R,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    arr.validate(shadow)?;
    check_teacher(shadow, teacher)?;
    if data.train.is_empty() {
        return Err(Error::Empty("refine training set is empty".into()));
    }
    data.train.check_labels(shadow.num_classes())?;

    let teacher_logits = data.train.iter().map(|(x, _)| teacher.logits(x)).collect::<Result<Vec<_>>>()?;
    let mut shadow = shadow.clone();
    let frozen = pruned_mask(&shadow, arr);
    let initial_bounds = weight_bounds(&shadow);
    let mut sgd = Sgd::new(&shadow, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let bounds_of = |net: &Network| if cfg.freeze_weight_ranges { initial_bounds.clone() } else { weight_bounds(net) };
    let calibrate = |shadow: &Network| -> Result<ActivationQuant> {
        let view = apply_arrangement_with(shadow, arr, &bounds_of(shadow))?;
        let net = match cfg.calibration {
            CalibrationSource::Quantized => &view,
            CalibrationSource::Float => shadow,
        };
        Ok(calibrate_activations(net, data.calib, arr.act_bits)?.quant)
    };
    let mut acts = calibrate(&shadow)?;

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.learning_rate, epoch, cfg.epochs);
        if cfg.recalibrate_activations && epoch > 0 {
            acts = calibrate(&shadow)?;
        }
        log::debug!("refine epoch {epoch}: activation ranges {:?}", acts.upper);
        order.shuffle(rng);
        let (mut sum_loss, mut sum_ce, mut sum_kl) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let bounds = bounds_of(&shadow);
            let view = apply_arrangement_with(&shadow, arr, &bounds)?;
            let mut grads = view.zero_grads();
            for &i in batch {
                let (x, y) = data.train.get(i);
                let trace = view.forward(x, ForwardOptions { freeze: None, activations: Some(&acts) })?;
                let loss = kd_loss(trace.logits(), &teacher_logits[i], y, cfg.alpha, cfg.orientation)?;
                sum_loss += loss.total;
                sum_ce += loss.ce;
                sum_kl += loss.kl;
                view.accumulate_grads(&trace, &loss.grad, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            for (&layer, &b) in &bounds {
                let Ok(range) = QuantRange::for_weights(b) else { continue };
                let w = shadow.param_layer(layer)?.weight();
                for (g, &wv) in grads.layers[layer - 1].weight.iter_mut().zip(w) {
                    *g = ste_grad(*g, wv, range);
                }
            }
            sgd.step(&mut shadow, &grads, lr, Some(&frozen))?;
        }
        let n = data.train.len() as f64;
        let view = apply_arrangement_with(&shadow, arr, &bounds_of(&shadow))?;
        let val_accuracy = evaluate_accuracy(&view, data.val, Some(&acts))?;
        log::info!("refine epoch {epoch}: loss {:.4} val {val_accuracy:.4}", sum_loss / n);
        history.push(EpochLog { epoch, loss: sum_loss / n, ce: sum_ce / n, kl: sum_kl / n, val_accuracy });
    }

    let quantized = apply_arrangement_with(&shadow, arr, &bounds_of(&shadow))?;
    let accuracy = evaluate_accuracy(&quantized, data.val, Some(&acts))?;
    Ok(RefineOutcome { shadow, quantized, history, activations: acts, accuracy })
}

/// True when every weight of every 0-bit unit of `net` is exactly zero.
pub fn pruned_units_are_zero(net: &Network, arr: &BitArrangement) -> bool {
    quantizable_units(net).iter().filter(|u| arr.bits(u.id) == Some(0)).all(|u| {
        let UnitId { layer, unit } = u.id;
        let l: &Layer = net.param_layer(layer).expect("unit layer exists");
        l.weight()[unit * u.weights..(unit + 1) * u.weights].iter().all(|&w| w == 0.0) && l.bias()[unit] == 0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_one_is_cross_entropy() {
        let s = [0.2, -0.4, 1.3];
        let t = [2.0, 0.1, -0.5];
        let l = kd_loss(&s, &t, 1, 1.0, KlOrientation::Standard).unwrap();
        let (ce, g) = crate::train::cross_entropy(&s, 1);
        assert!((l.total - ce).abs() < 1e-12);
        for (a, b) in l.grad.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_logits_zero_the_divergence() {
        let z = [0.5, 1.5, -2.0, 0.0];
        for o in [KlOrientation::Standard, KlOrientation::AsPrinted] {
            let l = kd_loss(&z, &z, 0, 0.3, o).unwrap();
            assert!(l.kl.abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_two_class_case() {
        // student softmax (0.5, 0.5); teacher softmax (0.9, 0.1)
        let teacher = [0.0, (0.1f64 / 0.9).ln()];
        let printed = kd_loss(&[0.0, 0.0], &teacher, 0, 0.0, KlOrientation::AsPrinted).unwrap();
        let expect = 0.5 * 1.8f64.ln() + 0.5 * 0.2f64.ln();
        assert!((printed.total - expect).abs() < 1e-12);
        assert!((printed.total + 0.5108).abs() < 1e-4);
        let standard = kd_loss(&[0.0, 0.0], &teacher, 0, 0.0, KlOrientation::Standard).unwrap();
        assert!((standard.total + expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = [0.4, -1.1, 2.2, 0.3];
        let t = [1.5, 0.2, -0.7, 0.9];
        for o in [KlOrientation::Standard, KlOrientation::AsPrinted] {
            for alpha in [0.0, 0.3, 1.0] {
                let g = kd_loss(&s, &t, 2, alpha, o).unwrap().grad;
                for j in 0..4 {
                    let (mut up, mut dn) = (s, s);
                    up[j] += 1e-6;
                    dn[j] -= 1e-6;
                    let fd = (kd_loss(&up, &t, 2, alpha, o).unwrap().total - kd_loss(&dn, &t, 2, alpha, o).unwrap().total) / 2e-6;
                    assert!((fd - g[j]).abs() <= 1e-3 * fd.abs() + 1e-8, "{o:?} alpha {alpha} j {j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(kd_loss(&[0.0, 1.0], &[0.0], 0, 0.5, KlOrientation::Standard).is_err());
        assert!(kd_loss(&[0.0, 1.0], &[0.0, 1.0], 2, 0.5, KlOrientation::Standard).is_err());
    }
}
