use breathprint::features::FeatureMatrix;
use breathprint::neuralnet::layers::{gru_forward, softmax, ConvShape, GruShape};
use breathprint::neuralnet::{
    argmax, ensemble_average, train, Ensemble, Network, NetworkSpec, Optimizer, Sample, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> FeatureMatrix {
    FeatureMatrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Worst relative error between backprop and central differences over all parameters.
fn gradient_error(
    net: &Network,
    x: &FeatureMatrix,
    label: usize,
    dropout_seed: Option<u64>,
) -> f64 {
    let rng = || dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let loss_of = |n: &Network| {
        let mut r = rng();
        n.loss_and_gradient(x, label, r.as_mut()).unwrap().0
    };
    let mut r = rng();
    let (_, grad, _) = net.loss_and_gradient(x, label, r.as_mut()).unwrap();
    let eps = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.num_params() {
        let p = net.params()[i];
        probe.params_mut()[i] = p + eps;
        let up = loss_of(&probe);
        probe.params_mut()[i] = p - eps;
        let down = loss_of(&probe);
        probe.params_mut()[i] = p;
        let numeric = (up - down) / (2.0 * eps);
        let denom = (grad[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let spec = NetworkSpec::parse("C1D(2,4,2,0) -> GRU(3,0) -> Dense(2)", 4, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let mut net = Network::new(spec.clone(), draw).unwrap();
        for p in net.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let x = random_matrix(4, 12, &mut rng);
        worst = worst.max(gradient_error(&net, &x, (draw % 2) as usize, None));
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn gradients_with_dropout_and_two_convs() {
    let spec = NetworkSpec::parse(
        "C1D(3,3,2,0.3) -> C1D(2,2,1,0.2) -> GRU(3,0.25) -> Dense(3)",
        4,
        3,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for draw in 0..5 {
        let mut net = Network::new(spec.clone(), draw).unwrap();
        for p in net.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let x = random_matrix(4, 15, &mut rng);
        let err = gradient_error(&net, &x, (draw % 3) as usize, Some(draw + 100));
        assert!(err < 1e-4, "draw {draw}: {err:e}");
    }
}

#[test]
fn gradient_vanishes_at_perfect_prediction() {
    let spec = NetworkSpec::parse("C1D(2,4,2,0) -> GRU(3,0) -> Dense(2)", 4, 2).unwrap();
    let mut net = Network::new(spec, 1).unwrap();
    let n = net.num_params();
    net.params_mut()[n - 2] = 60.0;
    let x = random_matrix(4, 12, &mut ChaCha8Rng::seed_from_u64(2));
    let (loss, grad, probs) = net.loss_and_gradient(&x, 0, None).unwrap();
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(probs[0] > 1.0 - 1e-12 && loss < 1e-20);
    assert!(norm < 1e-6, "{norm:e}");
}

#[test]
fn zero_dropout_train_mode_matches_inference() {
    let spec = NetworkSpec::parse("C1D(4,4,2,0) -> GRU(5,0) -> Dense(3)", 6, 3).unwrap();
    let net = Network::new(spec, 9).unwrap();
    let x = random_matrix(6, 40, &mut ChaCha8Rng::seed_from_u64(3));
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let (_, _, train_probs) = net.loss_and_gradient(&x, 1, Some(&mut r)).unwrap();
    assert_eq!(train_probs, net.predict(&x).unwrap());
}

fn dataset(n: usize, d: usize, len: usize, seed: u64) -> Vec<(FeatureMatrix, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let extra = rng.gen_range(0..10);
            (random_matrix(d, len + extra, &mut rng), i % 2)
        })
        .collect()
}

fn samples(data: &[(FeatureMatrix, usize)]) -> Vec<Sample<'_>> {
    data.iter()
        .map(|(features, label)| Sample {
            features,
            label: *label,
        })
        .collect()
}

#[test]
fn duplicated_sample_keeps_batch_mean() {
    let spec = NetworkSpec::parse("C1D(2,4,2,0) -> GRU(3,0) -> Dense(2)", 4, 2).unwrap();
    let data = dataset(1, 4, 12, 4);
    let one = samples(&data);
    let two = [one[0], one[0]];
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd { momentum: 0.0 },
        learning_rate: 0.1,
        batch_size: 2,
        epochs: 1,
        clip_norm: None,
        ..Default::default()
    };
    let mut a = Network::new(spec.clone(), 1).unwrap();
    let mut b = a.clone();
    train(&mut a, &one, &[], &cfg, None).unwrap();
    train(&mut b, &two, &[], &cfg, None).unwrap();
    assert_eq!(a.params(), b.params());
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = dataset(6, 9, 30, 1);
    let s = samples(&data);
    let mut net = Network::new(NetworkSpec::model3(9, 2), 2).unwrap();
    let before = net.params().to_vec();
    for optimizer in [Optimizer::default(), Optimizer::Sgd { momentum: 0.9 }] {
        let cfg = TrainConfig {
            optimizer,
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        train(&mut net, &s, &[], &cfg, None).unwrap();
        assert_eq!(net.params(), &before[..]);
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let data = dataset(12, 9, 30, 2);
    let s = samples(&data);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 5,
        seed: 17,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let mut net = Network::new(NetworkSpec::model1(9, 2), 4).unwrap();
            let report = train(&mut net, &s, &s, &cfg, None).unwrap();
            (report.to_csv(), net.params().to_vec())
        })
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

#[test]
fn overfits_ten_samples() {
    let data = dataset(10, 9, 40, 8);
    let s = samples(&data);
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 10,
        seed: 1,
        ..Default::default()
    };
    let mut net = Network::new(NetworkSpec::model3(9, 2), 1).unwrap();
    let report = train(&mut net, &s, &[], &cfg, None).unwrap();
    let correct = s
        .iter()
        .filter(|x| argmax(&net.predict(x.features).unwrap()) == x.label)
        .count();
    assert_eq!(correct, 10);
    let losses = report.train_losses();
    assert!(
        losses[499] < 0.05 * losses[0],
        "{} -> {}",
        losses[0],
        losses[499]
    );
}

#[test]
fn overfit_loss_is_monotone_without_dropout() {
    let data = dataset(10, 9, 40, 8);
    let s = samples(&data);
    let spec = NetworkSpec::parse(
        "C1D(48,4,2,0) -> C1D(48,4,2,0) -> GRU(32,0) -> Dense(2)",
        9,
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 10,
        seed: 1,
        ..Default::default()
    };
    let mut net = Network::new(spec, 1).unwrap();
    let losses = train(&mut net, &s, &[], &cfg, None).unwrap().train_losses();
    for w in losses[200..].windows(2) {
        assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn ensemble_of_identical_models_matches_member() {
    let net = Network::new(NetworkSpec::model2(9, 3), 5).unwrap();
    let x = random_matrix(9, 50, &mut ChaCha8Rng::seed_from_u64(1));
    let ens = Ensemble::new(vec![net.clone(), net.clone(), net.clone()]).unwrap();
    let single = net.predict(&x).unwrap();
    let mean = ens.predict(&x).unwrap();
    for (a, b) in single.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-15);
    }
    let other = Network::new(NetworkSpec::model2(9, 4), 5).unwrap();
    assert!(Ensemble::new(vec![net, other]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_on_simplex(logits in prop::collection::vec(-700.0f64..700.0, 2..12)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conv_length_formula(n in 2usize..300, kernel in 2usize..20, stride_frac in 0.0f64..1.0) {
        let stride = 1 + ((kernel - 1) as f64 * stride_frac) as usize % (kernel - 1);
        let shape = ConvShape { in_ch: 1, filters: 1, kernel, stride };
        let expect = (n >= kernel).then(|| (n - kernel) / stride + 1);
        prop_assert_eq!(shape.output_len(n), expect);
    }

    #[test]
    fn gru_state_is_bounded(seed in any::<u64>(), scale in 0.1f64..20.0, steps in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = GruShape { input: 3, units: 4 };
        let (lw, lu, lb) = shape.block_lens();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..scale)).collect() };
        let (w, u, b, xs) = (draw(lw), draw(lu), draw(lb), draw(3 * steps));
        let tr = gru_forward(shape, &w, &u, &b, &xs, steps, &[0.0; 4]);
        prop_assert!(tr.h.iter().all(|h| (-1.0..=1.0).contains(h)));
    }

    #[test]
    fn ensemble_preserves_agreed_argmax(raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 3), winner in 0usize..4) {
        let outs: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| {
                let mut v = r.clone();
                v[winner] = 1.5;
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect()
            })
            .collect();
        prop_assert_eq!(argmax(&ensemble_average(&outs).unwrap()), winner);
    }
}
