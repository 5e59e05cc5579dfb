//! Class-based mixed-precision quantization for small conv/dense networks.
//!
//! The workflow scores every hidden neuron by how many dataset classes it
//! serves ([`importance`]), searches global score thresholds that map each
//! filter or neuron to a bit-width under an average bit-width budget
//! ([`bitsearch`]), fake-quantizes weights and activations ([`quantizer`])
//! and recovers accuracy by distillation from the float model ([`refine`]).
//! [`pipeline`] strings the stages together with persisted, resumable
//! artifacts.

pub mod bitsearch;
pub mod config;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod importance;
pub mod pipeline;
pub mod quantizer;
pub mod refine;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
