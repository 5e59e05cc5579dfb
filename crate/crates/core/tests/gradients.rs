mod common;

use classquant::refine::{kd_loss, KlOrientation};
use classquant::tensor::{ForwardOptions, FreezeMask, Network};
use classquant::train::cross_entropy;
use proptest::prelude::*;
use rand::Rng;

fn input_gradient_error(net: &Network, x: &[f64], label: usize) -> f64 {
    let trace = net.forward(x, ForwardOptions::default()).unwrap();
    let (_, g) = cross_entropy(trace.logits(), label);
    let grads = net.backward(&trace, &g).unwrap();
    let h = 1e-6;
    let loss = |v: &[f64]| cross_entropy(&net.logits(v).unwrap(), label).0;
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            common::relative_error(grads.values[0][i], (loss(&up) - loss(&down)) / (2.0 * h))
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mlp_parameter_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let net = common::random_mlp(&mut rng, 500);
        let x = common::random_input(&mut rng, net.input_len());
        let label = rng.gen_range(0..net.num_classes());
        prop_assert!(common::max_gradient_error(&net, &x, label) <= 1e-3);
    }

    #[test]
    fn cnn_parameter_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let net = common::random_cnn(&mut rng, 500);
        let x = common::random_input(&mut rng, net.input_len());
        let label = rng.gen_range(0..net.num_classes());
        prop_assert!(common::max_gradient_error(&net, &x, label) <= 1e-3);
    }

    #[test]
    fn input_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let net = if seed % 2 == 0 { common::random_mlp(&mut rng, 500) } else { common::random_cnn(&mut rng, 500) };
        let x = common::random_input(&mut rng, net.input_len());
        let label = rng.gen_range(0..net.num_classes());
        prop_assert!(input_gradient_error(&net, &x, label) <= 1e-3);
    }

    #[test]
    fn distillation_gradient_through_the_network(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = common::rng(seed);
        let net = common::random_mlp(&mut rng, 500);
        let teacher: Vec<f64> = (0..net.num_classes()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = common::random_input(&mut rng, net.input_len());
        let label = rng.gen_range(0..net.num_classes());
        let loss = |n: &Network| kd_loss(&n.logits(&x).unwrap(), &teacher, label, alpha, KlOrientation::Standard).unwrap().total;
        let trace = net.forward(&x, ForwardOptions::default()).unwrap();
        let g = kd_loss(trace.logits(), &teacher, label, alpha, KlOrientation::Standard).unwrap().grad;
        let grads = net.backward(&trace, &g).unwrap().params;
        for p in common::parameters(&net) {
            let (layer, bias, i) = p;
            let analytic = if bias { grads.layers[layer - 1].bias[i] } else { grads.layers[layer - 1].weight[i] };
            let h = 1e-6;
            let numeric = (loss(&common::nudge(&net, p, h)) - loss(&common::nudge(&net, p, -h))) / (2.0 * h);
            prop_assert!(common::relative_error(analytic, numeric) <= 1e-3, "{p:?}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn frozen_neurons_block_gradient_flow(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let net = common::random_relu_net(&mut rng, 5, &[6, 6], 3);
        let x = common::random_input(&mut rng, 5);
        let mask = FreezeMask::single(1, rng.gen_range(0..6));
        let trace = net.forward(&x, ForwardOptions { freeze: Some(&mask), activations: None }).unwrap();
        let (_, g) = cross_entropy(trace.logits(), 0);
        let grads = net.backward(&trace, &g).unwrap();
        let (_, j) = mask.iter().next().unwrap();
        // the frozen neuron's incoming weights and bias get no gradient
        let lg = &grads.params.layers[0];
        prop_assert!(lg.weight[j * 5..(j + 1) * 5].iter().all(|&v| v == 0.0));
        prop_assert_eq!(lg.bias[j], 0.0);
    }
}
