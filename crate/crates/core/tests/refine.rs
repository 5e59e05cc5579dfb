mod common;

use classquant::data::{synthetic_blobs, Dataset, LabeledSet, SplitFractions};
use classquant::quantizer::{apply_arrangement, calibrate_activations, quantizable_units, BitArrangement};
use classquant::refine::{kd_loss, pruned_units_are_zero, refine, KdConfig, KlOrientation, RefineData};
use classquant::tensor::{encode_model, ForwardOptions, LayerSpec, Network};
use classquant::Error;
use rand::Rng;

fn setup(seed: u64) -> (Network, Dataset, BitArrangement) {
    let mut rng = common::rng(seed);
    let all = synthetic_blobs(400, 6, 0.2, &mut rng).unwrap();
    let data = Dataset::split(all, 10, SplitFractions::default(), &mut rng).unwrap();
    let specs = [
        LayerSpec::Dense { outputs: 12 },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs: 9 },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs: 10 },
    ];
    let net = Network::init(&[6], &specs, &mut rng).unwrap();
    let mut arr = BitArrangement::new(4, 3);
    for u in quantizable_units(&net) {
        arr.set(u.id, rng.gen_range(0..=4));
    }
    (net, data, arr)
}

fn refine_data(d: &Dataset) -> RefineData<'_> {
    RefineData { train: &d.train, calib: &d.calib, val: &d.val }
}

#[test]
fn one_full_batch_step_matches_hand_computation() {
    let (shadow, data, arr) = setup(1);
    let mut rng = common::rng(2);
    let teacher = common::random_relu_net(&mut rng, 6, &[12, 9], 10);
    let (alpha, lr) = (0.3, 0.05);
    let cfg = KdConfig {
        alpha,
        epochs: 1,
        learning_rate: lr,
        momentum: 0.0,
        weight_decay: 0.0,
        batch_size: data.train.len(),
        ..KdConfig::default()
    };
    let out = refine(&shadow, &arr, &teacher, refine_data(&data), &cfg, &mut rng).unwrap();

    let view = apply_arrangement(&shadow, &arr).unwrap();
    let acts = calibrate_activations(&view, &data.calib, arr.act_bits).unwrap().quant;
    let mut grads = view.zero_grads();
    for (x, &y) in data.train.iter() {
        let trace = view.forward(x, ForwardOptions { freeze: None, activations: Some(&acts) }).unwrap();
        let loss = kd_loss(trace.logits(), &teacher.logits(x).unwrap(), y, alpha, KlOrientation::Standard).unwrap();
        view.accumulate_grads(&trace, &loss.grad, &mut grads).unwrap();
    }
    let n = data.train.len() as f64;
    let pruned: Vec<_> = quantizable_units(&shadow).into_iter().filter(|u| arr.bits(u.id) == Some(0)).collect();
    for layer in 1..=shadow.depth() {
        let before = shadow.param_layer(layer).unwrap();
        let after = out.shadow.param_layer(layer).unwrap();
        let g = &grads.layers[layer - 1];
        let per = before.weights_per_unit();
        for (i, (w0, w1)) in before.weight().iter().zip(after.weight()).enumerate() {
            let frozen = pruned.iter().any(|u| u.id.layer == layer && u.id.unit == i / per);
            // ranges come from max |w|, so no shadow weight is clipped yet
            let expect = if frozen { *w0 } else { w0 - lr * g.weight[i] / n };
            assert!((w1 - expect).abs() < 1e-12, "layer {layer} weight {i}: {w1} vs {expect}");
        }
        for (i, (b0, b1)) in before.bias().iter().zip(after.bias()).enumerate() {
            let frozen = pruned.iter().any(|u| u.id.layer == layer && u.id.unit == i);
            let expect = if frozen { *b0 } else { b0 - lr * g.bias[i] / n };
            assert!((b1 - expect).abs() < 1e-12, "layer {layer} bias {i}: {b1} vs {expect}");
        }
    }
}

#[test]
fn zero_epochs_change_nothing() {
    let (shadow, data, arr) = setup(3);
    let cfg = KdConfig { epochs: 0, ..KdConfig::default() };
    let out = refine(&shadow, &arr, &shadow, refine_data(&data), &cfg, &mut common::rng(0)).unwrap();
    assert_eq!(encode_model(&out.shadow), encode_model(&shadow));
    assert_eq!(encode_model(&out.quantized), encode_model(&apply_arrangement(&shadow, &arr).unwrap()));
    assert!(out.history.is_empty());
}

#[test]
fn long_run_keeps_teacher_and_pruned_units_fixed() {
    let (shadow, data, arr) = setup(4);
    let teacher = shadow.clone();
    let bytes = encode_model(&teacher);
    let cfg = KdConfig { epochs: 6, weight_decay: 1e-2, learning_rate: 0.01, ..KdConfig::default() };
    let out = refine(&shadow, &arr, &teacher, refine_data(&data), &cfg, &mut common::rng(5)).unwrap();
    assert_eq!(encode_model(&teacher), bytes);
    assert!(pruned_units_are_zero(&out.quantized, &arr));
    assert_eq!(out.history.len(), 6);
    assert!(out.history.iter().all(|e| e.loss.is_finite()));
    assert_ne!(encode_model(&out.shadow), encode_model(&shadow));
}

#[test]
fn refining_is_reproducible_from_the_seed() {
    let (shadow, data, arr) = setup(6);
    let cfg = KdConfig { epochs: 2, ..KdConfig::default() };
    let a = refine(&shadow, &arr, &shadow, refine_data(&data), &cfg, &mut common::rng(9)).unwrap();
    let b = refine(&shadow, &arr, &shadow, refine_data(&data), &cfg, &mut common::rng(9)).unwrap();
    assert_eq!(encode_model(&a.shadow), encode_model(&b.shadow));
    assert_eq!(a.history, b.history);
}

#[test]
fn rejects_teacher_with_other_architecture() {
    let (shadow, data, arr) = setup(7);
    let teacher = common::random_relu_net(&mut common::rng(1), 6, &[5], 10);
    let err = refine(&shadow, &arr, &teacher, refine_data(&data), &KdConfig::default(), &mut common::rng(0)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn rejects_empty_training_set() {
    let (shadow, data, arr) = setup(8);
    let empty = LabeledSet::new(vec![6], Vec::new(), Vec::new()).unwrap();
    let d = RefineData { train: &empty, calib: &data.calib, val: &data.val };
    assert!(refine(&shadow, &arr, &shadow, d, &KdConfig::default(), &mut common::rng(0)).is_err());
}
