//! Dense/convolutional network substrate: construction, forward inference
//! with optional neuron freezing and activation quantization, reverse-mode
//! gradients, accuracy evaluation and the on-disk model format.

mod format;
mod layer;
mod network;

pub use format::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use layer::{format_architecture, parse_architecture, Conv2d, Dense, Layer, LayerSpec};
pub use network::{
    argmax, CallCounts, ForwardOptions, FreezeMask, Gradients, LayerGrad, Network, ParamGrads, Trace,
};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::quantizer::ActivationQuant;

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate_accuracy(net: &Network, data: &LabeledSet, activations: Option<&ActivationQuant>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("accuracy evaluation needs at least one sample".into()));
    }
    let mut correct = 0usize;
    for (x, &y) in data.iter() {
        if net.predict(x, activations)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
