mod common;

use classquant::data::LabeledSet;
use classquant::importance::{score_network, taylor_scores, unit_members, Readout, ScoreFile, ScoringConfig};
use classquant::quantizer::quantizable_units;
use classquant::tensor::LayerSpec;
use classquant::tensor::Network;
use proptest::prelude::*;
use rand::Rng;

fn random_set<R: Rng>(rng: &mut R, net: &Network, per_class: usize) -> LabeledSet {
    let classes = net.num_classes();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for m in 0..classes {
        for _ in 0..per_class {
            features.push(common::random_input(rng, net.input_len()));
            labels.push(m);
        }
    }
    LabeledSet::new(net.input_shape().to_vec(), features, labels).unwrap()
}

/// Reference table built straight from per-sample first-order scores:
/// `beta[layer][m][j]` over the whole class batch.
fn brute_beta(net: &Network, data: &LabeledSet, eps: f64, readout: Readout) -> Vec<Vec<Vec<f64>>> {
    let hidden = net.depth() - 1;
    let classes = net.num_classes();
    let mut out = Vec::new();
    for layer in 0..hidden {
        let n = net.neuron_count(layer + 1).unwrap();
        let mut per_class = vec![vec![0.0; n]; classes];
        let mut counts = vec![0usize; classes];
        for (x, &y) in data.iter() {
            let s = taylor_scores(net, x, y, readout).unwrap();
            counts[y] += 1;
            for j in 0..n {
                if s.layers[layer][j] > eps {
                    per_class[y][j] += 1.0;
                }
            }
        }
        for (m, col) in per_class.iter_mut().enumerate() {
            col.iter_mut().for_each(|c| *c /= counts[m] as f64);
        }
        out.push(per_class);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn table_matches_brute_force_over_whole_batches(seed in any::<u64>(), eps in prop::sample::select(vec![0.0, 1e-50, 1e-3, 0.1])) {
        let mut rng = common::rng(seed);
        let net = if seed % 2 == 0 { common::random_mlp(&mut rng, 500) } else { common::random_cnn(&mut rng, 500) };
        let data = random_set(&mut rng, &net, 5);
        let readout = if seed % 3 == 0 { Readout::LogitL1 } else { Readout::TrueClassLogit };
        let cfg = ScoringConfig { epsilon: eps, samples_per_class: 5, readout };
        let table = score_network(&net, &data, &cfg, &mut rng).unwrap();
        let beta = brute_beta(&net, &data, eps, readout);
        prop_assert_eq!(table.layers.len(), beta.len());
        for (l, layer) in table.layers.iter().enumerate() {
            prop_assert_eq!(&layer.beta, &beta[l]);
            for (j, g) in layer.gamma.iter().enumerate() {
                let mut sum = 0.0;
                for col in &beta[l] {
                    sum += col[j];
                }
                prop_assert_eq!(*g, sum);
            }
            let members = unit_members(&net, l + 1).unwrap();
            for (k, m) in members.iter().enumerate() {
                let best = m.iter().map(|&j| layer.gamma[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(layer.phi[k], best);
            }
        }
    }

    #[test]
    fn larger_epsilon_never_raises_scores(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let net = common::random_mlp(&mut rng, 500);
        let data = random_set(&mut rng, &net, 6);
        let score = |eps: f64| {
            let cfg = ScoringConfig { epsilon: eps, samples_per_class: 6, readout: Readout::TrueClassLogit };
            score_network(&net, &data, &cfg, &mut common::rng(1)).unwrap()
        };
        let (lo, hi) = (score(1e-6), score(1e-2));
        for (a, b) in lo.layers.iter().zip(&hi.layers) {
            prop_assert!(a.gamma.iter().zip(&b.gamma).all(|(x, y)| y <= x));
        }
    }

    #[test]
    fn scores_lie_between_zero_and_class_count(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let net = common::random_cnn(&mut rng, 500);
        let data = random_set(&mut rng, &net, 4);
        let cfg = ScoringConfig { samples_per_class: 3, ..ScoringConfig::default() };
        let table = score_network(&net, &data, &cfg, &mut rng).unwrap();
        let m = net.num_classes() as f64;
        for layer in &table.layers {
            prop_assert!(layer.phi.iter().all(|&p| (0.0..=m).contains(&p)));
            prop_assert!(layer.beta.iter().flatten().all(|&b| (0.0..=1.0).contains(&b)));
        }
        prop_assert_eq!(&table.samples_per_class, &vec![3; net.num_classes()]);
    }
}

#[test]
fn scoring_uses_one_backward_pass_per_sample() {
    let mut rng = common::rng(77);
    let net = common::random_relu_net(&mut rng, 6, &[10, 8], 3);
    let data = random_set(&mut rng, &net, 7);
    let before = net.call_counts();
    let cfg = ScoringConfig { samples_per_class: 5, ..ScoringConfig::default() };
    score_network(&net, &data, &cfg, &mut rng).unwrap();
    let used = net.call_counts() - before;
    assert_eq!(used.backward, 15);
    assert_eq!(used.forward, 15);
}

#[test]
fn class_batches_are_sampled_within_each_class() {
    // a class whose samples all share one input gets identical scores no
    // matter which of its samples are drawn
    let mut rng = common::rng(78);
    let net = common::random_relu_net(&mut rng, 4, &[8], 2);
    let x0 = common::random_input(&mut rng, 4);
    let mut features = vec![x0; 10];
    let mut labels = vec![0; 10];
    for _ in 0..10 {
        features.push(common::random_input(&mut rng, 4));
        labels.push(1);
    }
    let data = LabeledSet::new(vec![4], features, labels).unwrap();
    let cfg = ScoringConfig { samples_per_class: 3, ..ScoringConfig::default() };
    let a = score_network(&net, &data, &cfg, &mut common::rng(1)).unwrap();
    let b = score_network(&net, &data, &cfg, &mut common::rng(2)).unwrap();
    assert_eq!(a.layers[0].beta[0], b.layers[0].beta[0]);
}

#[test]
fn score_file_lists_every_quantizable_unit() {
    let mut rng = common::rng(79);
    let specs = [
        LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { outputs: 5 },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs: 3 },
    ];
    let net = Network::init(&[1, 6, 6], &specs, &mut rng).unwrap();
    let data = random_set(&mut rng, &net, 4);
    let table = score_network(&net, &data, &ScoringConfig::default(), &mut rng).unwrap();
    let file = ScoreFile::from_table(&table, "sha".into());
    let units = quantizable_units(&net);
    let scores = file.unit_scores(&units).unwrap();
    assert_eq!(scores.len(), 4 + 5);
    for (u, s) in units.iter().zip(&scores) {
        assert_eq!(*s, table.layers[u.id.layer - 1].phi[u.id.unit]);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.json");
    file.save(&path).unwrap();
    assert_eq!(ScoreFile::load(&path).unwrap(), file);
}
