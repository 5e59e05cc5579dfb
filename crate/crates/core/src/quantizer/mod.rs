//! Uniform fake quantization of weights and activations with per-unit
//! bit-widths, 0-bit pruning and the clipped straight-through estimator.

mod arrangement;

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

pub use arrangement::{parse_arrangement, read_arrangement, render_arrangement, write_arrangement, BitArrangement};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::{evaluate_accuracy, ForwardOptions, Network};

/// Clipping interval `[a, b]` of a quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantRange {
    a: f64,
    b: f64,
}

impl QuantRange {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a.is_finite() && b.is_finite() && a < b {
            Ok(Self { a, b })
        } else {
            Err(Error::Range { a, b })
        }
    }

    /// Symmetric weight range `[-max|w|, max|w|]`.
    pub fn for_weights(max_abs: f64) -> Result<Self> {
        Self::new(-max_abs, max_abs)
    }

    /// Post-ReLU activation range `[0, b]`.
    pub fn for_activations(upper: f64) -> Result<Self> {
        Self::new(0.0, upper)
    }

    pub fn lower(&self) -> f64 {
        self.a
    }

    pub fn upper(&self) -> f64 {
        self.b
    }
}

/// Number of grid levels for a bit-width.
pub fn levels(bits: u8) -> u64 {
    1u64 << bits
}

pub fn clip(x: f64, range: QuantRange) -> f64 {
    if x >= range.b {
        range.b
    } else if x <= range.a {
        range.a
    } else {
        x
    }
}

/// Snap `x` onto the uniform `2^bits`-level grid spanning `range`.
///
/// Rounding is half away from zero. The endpoints map exactly onto `a`
/// and `b`.
pub fn quantize_value(x: f64, range: QuantRange, bits: u8) -> f64 {
    debug_assert!(bits >= 1, "0-bit units are pruned, not quantized");
    let steps = (levels(bits) - 1) as f64;
    let QuantRange { a, b } = range;
    let xc = clip(x, range);
    let k = (steps * (xc - a) / (b - a)).round();
    if k <= 0.0 {
        a
    } else if k >= steps {
        b
    } else {
        (b - a) * (k / steps) + a
    }
}

/// Activation quantization with a degenerate (`upper <= 0`) range mapping
/// everything to zero.
pub fn quantize_activation(x: f64, upper: f64, bits: u8) -> f64 {
    match QuantRange::for_activations(upper) {
        Ok(r) => quantize_value(x, r, bits),
        Err(_) => 0.0,
    }
}

/// Clipped straight-through estimator: the upstream gradient passes where
/// `a <= x <= b` and is zero outside the clipping interval.
pub fn ste_grad(upstream: f64, x: f64, range: QuantRange) -> f64 {
    if x >= range.a && x <= range.b {
        upstream
    } else {
        0.0
    }
}

/// A quantization unit: filter `unit` of a conv layer or neuron `unit` of a
/// dense layer. `layer` is the 1-based parameterized layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitId {
    pub layer: usize,
    pub unit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantUnit {
    pub id: UnitId,
    pub weights: usize,
}

/// Every unit of layers `2..L-1`; the first layer and the output head are
/// never quantized.
pub fn quantizable_units(net: &Network) -> Vec<QuantUnit> {
    let mut units = Vec::new();
    for layer in 2..net.depth() {
        let l = net.param_layer(layer).expect("layer index in range");
        for unit in 0..l.units() {
            units.push(QuantUnit { id: UnitId { layer, unit }, weights: l.weights_per_unit() });
        }
    }
    units
}

/// Per-layer symmetric weight bound `max |w|` of the quantizable layers.
pub fn weight_bounds(net: &Network) -> BTreeMap<usize, f64> {
    (2..net.depth())
        .map(|layer| {
            let w = net.param_layer(layer).expect("layer index in range").weight();
            (layer, w.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        })
        .collect()
}

/// Fake-quantized view of `net` under `arr`, with weight ranges computed
/// from the weights themselves.
pub fn apply_arrangement(net: &Network, arr: &BitArrangement) -> Result<Network> {
    apply_arrangement_with(net, arr, &weight_bounds(net))
}

/// Fake-quantized view of `net` using explicit per-layer weight bounds.
/// 0-bit units have weights and bias zeroed; the first and output layers
/// are copied unchanged.
pub fn apply_arrangement_with(net: &Network, arr: &BitArrangement, bounds: &BTreeMap<usize, f64>) -> Result<Network> {
    arr.validate(net)?;
    let mut out = net.clone();
    for layer in 2..net.depth() {
        let bound = *bounds
            .get(&layer)
            .ok_or_else(|| Error::Arrangement(format!("no weight range for layer {layer}")))?;
        let range = QuantRange::for_weights(bound).ok();
        let l = out.param_layer_mut(layer)?;
        let per = l.weights_per_unit();
        for unit in 0..l.units() {
            let bits = arr.bits(UnitId { layer, unit }).expect("validated");
            let w = &mut l.weight_mut()[unit * per..(unit + 1) * per];
            match (bits, range) {
                (0, _) => w.iter_mut().for_each(|v| *v = 0.0),
                // all-zero layer: nothing to snap
                (_, None) => w.iter_mut().for_each(|v| *v = 0.0),
                (bits, Some(r)) => w.iter_mut().for_each(|v| *v = quantize_value(*v, r, bits)),
            }
            if bits == 0 {
                l.bias_mut()[unit] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Global activation bit-width plus the calibrated upper bound of every
/// hidden layer (index `i` holds layer `i + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationQuant {
    pub bits: u8,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub quant: ActivationQuant,
    /// Hidden layers whose activations never rose above zero; they are
    /// quantized to identically zero.
    pub degenerate: Vec<usize>,
}

/// Record the maximum post-ReLU activation of every hidden layer over the
/// calibration set.
pub fn calibrate_activations(net: &Network, calib: &LabeledSet, bits: u8) -> Result<Calibration> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set is empty".into()));
    }
    if bits == 0 {
        return Err(Error::Config("activation bit-width must be at least 1".into()));
    }
    let hidden = net.depth() - 1;
    let positions = (1..=hidden).map(|l| net.neuron_position(l)).collect::<Result<Vec<_>>>()?;
    let mut upper = vec![0.0f64; hidden];
    for (x, _) in calib.iter() {
        let trace = net.forward(x, ForwardOptions::default())?;
        for (u, &pos) in upper.iter_mut().zip(&positions) {
            *u = trace.value(pos).iter().fold(*u, |m, &v| m.max(v));
        }
    }
    let degenerate: Vec<usize> = upper.iter().enumerate().filter(|(_, &b)| b <= 0.0).map(|(i, _)| i + 1).collect();
    for layer in &degenerate {
        warn!("hidden layer {layer} has no positive activation on the calibration set; quantizing it to zero");
    }
    Ok(Calibration { quant: ActivationQuant { bits, upper }, degenerate })
}

/// Which network the activation ranges are calibrated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    /// The fake-quantized view, after the arrangement is applied.
    #[default]
    Quantized,
    /// The float network the arrangement is applied to.
    Float,
}

#[derive(Debug, Clone)]
pub struct QuantizedEval {
    pub view: Network,
    pub activations: ActivationQuant,
    pub accuracy: f64,
}

/// Apply `arr` to `shadow`, calibrate activation ranges at `arr.act_bits`
/// and measure accuracy on `data` with weights and activations quantized.
pub fn evaluate_quantized(
    shadow: &Network,
    arr: &BitArrangement,
    calib: &LabeledSet,
    data: &LabeledSet,
    source: CalibrationSource,
) -> Result<QuantizedEval> {
    let view = apply_arrangement(shadow, arr)?;
    let calibrated = match source {
        CalibrationSource::Quantized => calibrate_activations(&view, calib, arr.act_bits)?,
        CalibrationSource::Float => calibrate_activations(shadow, calib, arr.act_bits)?,
    };
    let accuracy = evaluate_accuracy(&view, data, Some(&calibrated.quant))?;
    Ok(QuantizedEval { view, activations: calibrated.quant, accuracy })
}
