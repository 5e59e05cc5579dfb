use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::layer::{Layer, LayerSpec};
use crate::error::{Error, Result};
use crate::quantizer::{quantize_activation, ActivationQuant};

/// Forward/backward call counters shared by a network and every view
/// derived from it by cloning.
#[derive(Debug, Default)]
pub struct CallCounters {
    forward: AtomicUsize,
    backward: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallCounts {
    pub forward: usize,
    pub backward: usize,
}

impl std::ops::Sub for CallCounts {
    type Output = CallCounts;
    fn sub(self, rhs: CallCounts) -> CallCounts {
        CallCounts { forward: self.forward - rhs.forward, backward: self.backward - rhs.backward }
    }
}

/// A feed-forward chain of conv/dense/ReLU/flatten layers ending in a dense
/// output head whose outputs are the class logits.
///
/// Parameterized layers are addressed by a 1-based index `1..=L`; layer `L`
/// is the output head. Every hidden parameterized layer is immediately
/// followed by a ReLU whose outputs are that layer's neurons.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    params: Vec<usize>,
    counters: Arc<CallCounters>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

/// Neurons whose activation is held at zero during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    neurons: BTreeSet<(usize, usize)>,
}

impl FreezeMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(layer: usize, neuron: usize) -> Self {
        let mut m = Self::new();
        m.freeze(layer, neuron);
        m
    }

    pub fn freeze(&mut self, layer: usize, neuron: usize) {
        self.neurons.insert((layer, neuron));
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neurons.iter().copied()
    }
}

impl FromIterator<(usize, usize)> for FreezeMask {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        Self { neurons: iter.into_iter().collect() }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub freeze: Option<&'a FreezeMask>,
    pub activations: Option<&'a ActivationQuant>,
}

/// Values recorded by one forward pass: `values[0]` is the input and
/// `values[k + 1]` is the output of layer `k`.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Vec<f64>>,
    frozen: Vec<Option<Vec<bool>>>,
    act_upper: Vec<Option<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn value(&self, position: usize) -> &[f64] {
        &self.values[position]
    }

    pub fn into_logits(mut self) -> Vec<f64> {
        self.values.pop().unwrap_or_default()
    }
}

/// Per parameterized layer weight and bias gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|g| *g *= factor);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamGrads,
    /// Gradient with respect to every recorded value, indexed like [`Trace`].
    pub values: Vec<Vec<f64>>,
}

impl Network {
    /// Validate a layer chain against an input shape.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Network(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for (k, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| Error::Network(format!("layer {k}: {e}")))?;
            if let Layer::Conv2d(c) = layer {
                check_len(k, "weight", c.weight.len(), c.out_channels * c.in_channels * c.kernel * c.kernel)?;
                check_len(k, "bias", c.bias.len(), c.out_channels)?;
            }
            if let Layer::Dense(d) = layer {
                check_len(k, "weight", d.weight.len(), d.inputs * d.outputs)?;
                check_len(k, "bias", d.bias.len(), d.outputs)?;
            }
            shapes.push(shape.clone());
        }
        let params: Vec<usize> = (0..layers.len()).filter(|&k| layers[k].is_parameterized()).collect();
        let Some(&last) = params.last() else {
            return Err(Error::Network("no parameterized layers".into()));
        };
        if last != layers.len() - 1 || !matches!(layers[last], Layer::Dense(_)) {
            return Err(Error::Network("the last layer must be the dense output head".into()));
        }
        for &p in &params[..params.len() - 1] {
            if !matches!(layers.get(p + 1), Some(Layer::Relu)) {
                return Err(Error::Network(format!("hidden layer {p} is not followed by relu")));
            }
        }
        for (k, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) && (k == 0 || !layers[k - 1].is_parameterized()) {
                return Err(Error::Network(format!("relu at {k} does not follow a parameterized layer")));
            }
        }
        Ok(Self { input_shape, layers, shapes, params, counters: Arc::default() })
    }

    /// Build a network from layer specs with seeded He-uniform initialization.
    pub fn init<R: Rng + ?Sized>(input_shape: &[usize], specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for spec in specs {
            let layer = spec.init(&shape, rng)?;
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Self::from_layers(input_shape.to_vec(), layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    /// Number of parameterized layers, `L`.
    pub fn depth(&self) -> usize {
        self.params.len()
    }

    /// The parameterized layer with 1-based index `layer`.
    pub fn param_layer(&self, layer: usize) -> Result<&Layer> {
        self.position_of(layer).map(|k| &self.layers[k])
    }

    pub fn param_layer_mut(&mut self, layer: usize) -> Result<&mut Layer> {
        let k = self.position_of(layer)?;
        Ok(&mut self.layers[k])
    }

    fn position_of(&self, layer: usize) -> Result<usize> {
        layer
            .checked_sub(1)
            .and_then(|i| self.params.get(i).copied())
            .ok_or_else(|| Error::Network(format!("no parameterized layer {layer}")))
    }

    /// Trace position holding the neurons of hidden layer `layer`
    /// (the output of its ReLU).
    pub fn neuron_position(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer >= self.depth() {
            return Err(Error::Network(format!("layer {layer} has no hidden neurons")));
        }
        Ok(self.params[layer - 1] + 2)
    }

    /// Number of neurons of hidden layer `layer`.
    pub fn neuron_count(&self, layer: usize) -> Result<usize> {
        let pos = self.neuron_position(layer)?;
        Ok(self.shapes[pos - 1].iter().product())
    }

    /// Output shape of parameterized layer `layer`.
    pub fn param_output_shape(&self, layer: usize) -> Result<&[usize]> {
        self.position_of(layer).map(|k| self.shapes[k].as_slice())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight().len() + l.bias().len()).sum()
    }

    pub fn call_counts(&self) -> CallCounts {
        CallCounts {
            forward: self.counters.forward.load(Ordering::Relaxed),
            backward: self.counters.backward.load(Ordering::Relaxed),
        }
    }

    /// Give this network its own counters, detached from its clone family.
    pub fn detach_counters(&mut self) {
        self.counters = Arc::default();
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            layers: self
                .params
                .iter()
                .map(|&k| LayerGrad {
                    weight: vec![0.0; self.layers[k].weight().len()],
                    bias: vec![0.0; self.layers[k].bias().len()],
                })
                .collect(),
        }
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input, ForwardOptions::default()).map(Trace::into_logits)
    }

    pub fn forward(&self, input: &[f64], opts: ForwardOptions<'_>) -> Result<Trace> {
        if input.len() != self.input_len() {
            return Err(Error::Shape(format!("input has {} values, network expects {}", input.len(), self.input_len())));
        }
        let mut frozen: Vec<Option<Vec<bool>>> = vec![None; self.layers.len()];
        if let Some(mask) = opts.freeze {
            for (layer, neuron) in mask.iter() {
                let pos = self
                    .neuron_position(layer)
                    .map_err(|_| Error::Mask(format!("layer {layer} has no maskable neurons")))?;
                let n = self.shapes[pos - 1].iter().product();
                if neuron >= n {
                    return Err(Error::Mask(format!("neuron {neuron} out of range for layer {layer} ({n} neurons)")));
                }
                frozen[pos - 1].get_or_insert_with(|| vec![false; n])[neuron] = true;
            }
        }
        let mut act_upper: Vec<Option<f64>> = vec![None; self.layers.len()];
        if let Some(aq) = opts.activations {
            if aq.upper.len() + 1 != self.depth() {
                return Err(Error::Shape(format!(
                    "activation ranges cover {} layers, network has {} hidden layers",
                    aq.upper.len(),
                    self.depth() - 1
                )));
            }
            for (i, &b) in aq.upper.iter().enumerate() {
                act_upper[self.params[i] + 1] = Some(b);
            }
        }
        self.counters.forward.fetch_add(1, Ordering::Relaxed);

        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let x = &values[k];
            let in_shape = if k == 0 { &self.input_shape } else { &self.shapes[k - 1] };
            let y = match layer {
                Layer::Dense(d) => {
                    let mut y = d.bias.clone();
                    for (o, yo) in y.iter_mut().enumerate() {
                        let row = &d.weight[o * d.inputs..(o + 1) * d.inputs];
                        *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                    }
                    y
                }
                Layer::Conv2d(c) => conv_forward(c, x, in_shape[1], in_shape[2], &self.shapes[k]),
                Layer::Relu => {
                    let mut y: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    if let (Some(b), Some(aq)) = (act_upper[k], opts.activations) {
                        y.iter_mut().for_each(|v| *v = quantize_activation(*v, b, aq.bits));
                    }
                    if let Some(f) = &frozen[k] {
                        y.iter_mut().zip(f).filter(|(_, &z)| z).for_each(|(v, _)| *v = 0.0);
                    }
                    y
                }
                Layer::Flatten => x.clone(),
            };
            values.push(y);
        }
        Ok(Trace { values, frozen, act_upper })
    }

    /// Reverse-mode pass for the scalar whose gradient with respect to the
    /// logits is `grad_logits`. Returns weight and value gradients.
    pub fn backward(&self, trace: &Trace, grad_logits: &[f64]) -> Result<Gradients> {
        let mut params = self.zero_grads();
        let mut values = vec![Vec::new(); self.layers.len() + 1];
        self.backward_impl(trace, grad_logits, &mut params, Some(&mut values))?;
        Ok(Gradients { params, values })
    }

    /// Like [`Network::backward`] but only accumulates weight gradients into `acc`.
    pub fn accumulate_grads(&self, trace: &Trace, grad_logits: &[f64], acc: &mut ParamGrads) -> Result<()> {
        self.backward_impl(trace, grad_logits, acc, None)
    }

    fn backward_impl(
        &self,
        trace: &Trace,
        grad_logits: &[f64],
        acc: &mut ParamGrads,
        mut record: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<()> {
        let compatible = trace.values.len() == self.layers.len() + 1
            && trace.values[0].len() == self.input_len()
            && trace.values[1..].iter().zip(&self.shapes).all(|(v, s)| v.len() == s.iter().product::<usize>());
        if !compatible {
            return Err(Error::Shape("trace was not recorded by a forward pass of this network".into()));
        }
        if grad_logits.len() != self.num_classes() {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries, network has {} classes",
                grad_logits.len(),
                self.num_classes()
            )));
        }
        if acc.layers.len() != self.params.len() {
            return Err(Error::Shape("gradient accumulator does not match network".into()));
        }
        self.counters.backward.fetch_add(1, Ordering::Relaxed);

        let mut g = grad_logits.to_vec();
        let mut param_i = self.params.len();
        for k in (0..self.layers.len()).rev() {
            let x = &trace.values[k];
            let need_input_grad = k > 0 || record.is_some();
            let in_shape = if k == 0 { &self.input_shape } else { &self.shapes[k - 1] };
            if let Some(rec) = record.as_deref_mut() {
                rec[k + 1] = g.clone();
            }
            g = match &self.layers[k] {
                Layer::Dense(d) => {
                    param_i -= 1;
                    let lg = &mut acc.layers[param_i];
                    let mut dx = if need_input_grad { vec![0.0; d.inputs] } else { Vec::new() };
                    for (o, &go) in g.iter().enumerate() {
                        lg.bias[o] += go;
                        if go == 0.0 {
                            continue;
                        }
                        let row = o * d.inputs..(o + 1) * d.inputs;
                        for (gw, &xv) in lg.weight[row.clone()].iter_mut().zip(x) {
                            *gw += go * xv;
                        }
                        if need_input_grad {
                            for (dxi, &w) in dx.iter_mut().zip(&d.weight[row]) {
                                *dxi += go * w;
                            }
                        }
                    }
                    dx
                }
                Layer::Conv2d(c) => {
                    param_i -= 1;
                    conv_backward(c, x, in_shape[1], in_shape[2], &self.shapes[k], &g, &mut acc.layers[param_i], need_input_grad)
                }
                Layer::Relu => {
                    let frozen = trace.frozen[k].as_deref();
                    let upper = trace.act_upper[k];
                    g.iter()
                        .zip(x)
                        .enumerate()
                        .map(|(j, (&gj, &z))| {
                            let open = z > 0.0
                                && upper.is_none_or(|b| z <= b)
                                && !frozen.is_some_and(|f| f[j]);
                            if open { gj } else { 0.0 }
                        })
                        .collect()
                }
                Layer::Flatten => g,
            };
        }
        if let Some(rec) = record {
            rec[0] = g;
        }
        Ok(())
    }

    /// Index of the largest logit; ties resolve to the lowest class index.
    pub fn predict(&self, input: &[f64], activations: Option<&ActivationQuant>) -> Result<usize> {
        let trace = self.forward(input, ForwardOptions { freeze: None, activations })?;
        Ok(argmax(trace.logits()))
    }
}

fn check_len(k: usize, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Network(format!("layer {k}: {what} has {got} values, expected {want}")));
    }
    Ok(())
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn conv_forward(c: &crate::tensor::Conv2d, x: &[f64], h: usize, w: usize, out_shape: &[usize]) -> Vec<f64> {
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = c.kernel;
    let mut y = vec![0.0; c.out_channels * oh * ow];
    for co in 0..c.out_channels {
        let out = &mut y[co * oh * ow..(co + 1) * oh * ow];
        out.iter_mut().for_each(|v| *v = c.bias[co]);
        for ci in 0..c.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            let kern = &c.weight[(co * c.in_channels + ci) * k * k..(co * c.in_channels + ci + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    c: &crate::tensor::Conv2d,
    x: &[f64],
    h: usize,
    w: usize,
    out_shape: &[usize],
    g: &[f64],
    lg: &mut LayerGrad,
    need_input_grad: bool,
) -> Vec<f64> {
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let k = c.kernel;
    let mut dx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    for co in 0..c.out_channels {
        let gout = &g[co * oh * ow..(co + 1) * oh * ow];
        lg.bias[co] += gout.iter().sum::<f64>();
        for ci in 0..c.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            let base = (co * c.in_channels + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = c.weight[base + ky * k + kx];
                    let mut gw = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let go = gout[oy * ow + ox];
                            gw += go * plane[iy * w + ix as usize];
                            if need_input_grad {
                                dx[ci * h * w + iy * w + ix as usize] += go * wv;
                            }
                        }
                    }
                    lg.weight[base + ky * k + kx] += gw;
                }
            }
        }
    }
    dx
}
