#![allow(dead_code)]

use classquant::quantizer::{QuantUnit, UnitId};
use classquant::tensor::{Dense, Layer, LayerSpec, Network};
use classquant::train::cross_entropy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random ReLU MLP with at most `max_params` parameters.
pub fn random_mlp<R: Rng>(rng: &mut R, max_params: usize) -> Network {
    loop {
        let inputs = rng.gen_range(2..=6);
        let hidden = rng.gen_range(1..=3);
        let mut specs = Vec::new();
        for _ in 0..hidden {
            specs.push(LayerSpec::Dense { outputs: rng.gen_range(2..=10) });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Dense { outputs: rng.gen_range(2..=4) });
        let net = Network::init(&[inputs], &specs, rng).unwrap();
        if net.parameter_count() <= max_params {
            return jitter_biases(net, rng);
        }
    }
}

/// Random small CNN: one or two conv layers then a dense head.
pub fn random_cnn<R: Rng>(rng: &mut R, max_params: usize) -> Network {
    loop {
        let channels = rng.gen_range(1..=2);
        let side = rng.gen_range(4..=6);
        let mut specs = Vec::new();
        for _ in 0..rng.gen_range(1..=2) {
            specs.push(LayerSpec::Conv {
                out_channels: rng.gen_range(1..=3),
                kernel: rng.gen_range(2..=3),
                stride: rng.gen_range(1..=2),
                padding: rng.gen_range(0..=1),
            });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Flatten);
        if rng.gen_bool(0.5) {
            specs.push(LayerSpec::Dense { outputs: rng.gen_range(2..=6) });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Dense { outputs: rng.gen_range(2..=4) });
        if let Ok(net) = Network::init(&[channels, side, side], &specs, rng) {
            if net.parameter_count() <= max_params {
                return jitter_biases(net, rng);
            }
        }
    }
}

/// Zero-initialized biases put pre-activations fed only by padding or dead
/// units exactly on the ReLU kink, where finite differences are undefined.
fn jitter_biases<R: Rng>(mut net: Network, rng: &mut R) -> Network {
    for layer in 1..=net.depth() {
        net.param_layer_mut(layer).unwrap().bias_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
    }
    net
}

/// ReLU MLP at the default initialization.
pub fn random_relu_net<R: Rng>(rng: &mut R, inputs: usize, widths: &[usize], classes: usize) -> Network {
    let mut specs = Vec::new();
    for &w in widths {
        specs.push(LayerSpec::Dense { outputs: w });
        specs.push(LayerSpec::Relu);
    }
    specs.push(LayerSpec::Dense { outputs: classes });
    Network::init(&[inputs], &specs, rng).unwrap()
}

/// Dense chain with identity-like activations: every hidden layer is
/// followed by a ReLU, but biases are large enough that every
/// pre-activation stays positive on inputs in `[0, 1]`.
pub fn linear_net<R: Rng>(rng: &mut R, inputs: usize, widths: &[usize], classes: usize) -> Network {
    let mut layers = Vec::new();
    let mut fan_in = inputs;
    let dims: Vec<usize> = widths.iter().copied().chain([classes]).collect();
    let last = dims.len() - 1;
    for (i, &out) in dims.iter().enumerate() {
        let weight: Vec<f64> = (0..out * fan_in).map(|_| rng.gen_range(0.05..0.5)).collect();
        let bias: Vec<f64> = (0..out).map(|_| rng.gen_range(0.1..1.0)).collect();
        layers.push(Layer::Dense(Dense { inputs: fan_in, outputs: out, weight, bias }));
        if i < last {
            layers.push(Layer::Relu);
        }
        fan_in = out;
    }
    Network::from_layers(vec![inputs], layers).unwrap()
}

pub fn random_input<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Every parameter of `net` as `(layer, is_bias, index)`.
pub fn parameters(net: &Network) -> Vec<(usize, bool, usize)> {
    let mut out = Vec::new();
    for layer in 1..=net.depth() {
        let l = net.param_layer(layer).unwrap();
        out.extend((0..l.weight().len()).map(|i| (layer, false, i)));
        out.extend((0..l.bias().len()).map(|i| (layer, true, i)));
    }
    out
}

pub fn nudge(net: &Network, (layer, bias, i): (usize, bool, usize), delta: f64) -> Network {
    let mut n = net.clone();
    let l = n.param_layer_mut(layer).unwrap();
    if bias {
        l.bias_mut()[i] += delta;
    } else {
        l.weight_mut()[i] += delta;
    }
    n
}

/// Largest relative mismatch between analytic and central-difference
/// gradients of the cross-entropy loss over every parameter.
pub fn max_gradient_error(net: &Network, x: &[f64], label: usize) -> f64 {
    let trace = net.forward(x, Default::default()).unwrap();
    let (_, grad) = cross_entropy(trace.logits(), label);
    let grads = net.backward(&trace, &grad).unwrap().params;
    let h = 1e-6;
    let loss = |n: &Network| cross_entropy(&n.logits(x).unwrap(), label).0;
    parameters(net)
        .into_iter()
        .map(|p| {
            let (layer, bias, i) = p;
            let lg = &grads.layers[layer - 1];
            let analytic = if bias { lg.bias[i] } else { lg.weight[i] };
            let numeric = (loss(&nudge(net, p, h)) - loss(&nudge(net, p, -h))) / (2.0 * h);
            relative_error(analytic, numeric)
        })
        .fold(0.0, f64::max)
}

/// `|a - b|` relative to the larger magnitude, with a floor so that
/// gradients near zero are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Units spread over layers 2.., with random weight counts.
pub fn random_units<R: Rng>(rng: &mut R, count: usize) -> Vec<QuantUnit> {
    (0..count)
        .map(|i| QuantUnit { id: UnitId { layer: 2 + i / 8, unit: i % 8 }, weights: rng.gen_range(1..=50) })
        .collect()
}

/// Reference weighted mean bit-width.
pub fn mean_bits(bits: &[u8], units: &[QuantUnit]) -> f64 {
    let total: usize = units.iter().map(|u| u.weights).sum();
    bits.iter().zip(units).map(|(&b, u)| b as f64 * u.weights as f64).sum::<f64>() / total as f64
}
