use msgcrf::exact_oracle::ExactOracle;
use msgcrf::factor_graph::{build_grid_graph, ConnectivitySpec, FactorGraph, FactorType};
use msgcrf::image::{Image, LabelMap};
use msgcrf::message_estimator::{forward, Architecture, EstimatorParams};
use msgcrf::synthetic_data::{generate_dataset, DatasetParams, SyntheticSample};
use msgcrf::trainer::{
    batch_gradient, marginal_cross_entropy, train_crf_potentials_exact, train_from, train_message_estimators,
    BaselineCrf, TrainError, TrainingConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_set(count: usize, seed: u64) -> Vec<SyntheticSample> {
    generate_dataset(&DatasetParams::new(seed, count, 8, 8, 3, 0.3)).unwrap()
}

fn toy_graph() -> FactorGraph {
    build_grid_graph(8, 8, 3, &ConnectivitySpec::default()).unwrap()
}

fn small_arch(graph: &FactorGraph) -> Architecture {
    Architecture {
        trunk_widths: vec![8, 8],
        head_hidden: 8,
        ..Architecture::toy(3, graph.num_classes(), graph.factor_types().to_vec())
    }
}

fn config(epochs: usize) -> TrainingConfig {
    TrainingConfig { epochs, batch_size: 5, learning_rate: 0.0005, ..TrainingConfig::default() }
}

#[test]
fn ten_sample_loss_halves() {
    let data = toy_set(10, 1);
    let graph = toy_graph();
    let cfg = TrainingConfig { batch_size: 1, learning_rate: 1e-3, ..config(30) };
    let out = train_message_estimators(&data, &graph, &small_arch(&graph), &cfg, |_, _| {}).unwrap();
    let h = out.loss_history();
    assert!(h[29] < 0.5 * h[0], "{} vs {}", h[29], h[0]);
}

#[test]
fn runs_are_reproducible() {
    let data = toy_set(6, 2);
    let graph = toy_graph();
    let cfg = TrainingConfig { horizontal_flip: true, ..config(3) };
    let a = train_message_estimators(&data, &graph, &small_arch(&graph), &cfg, |_, _| {}).unwrap();
    let b = train_message_estimators(&data, &graph, &small_arch(&graph), &cfg, |_, _| {}).unwrap();
    assert_eq!(a.loss_history(), b.loss_history());
    assert_eq!(a.params, b.params);
    assert!(a.steps.iter().any(|s| s.flipped.contains(&true)));
    let c = train_message_estimators(&data, &graph, &small_arch(&graph), &TrainingConfig { seed: 1, ..cfg }, |_, _| {})
        .unwrap();
    assert_ne!(a.loss_history(), c.loss_history());
}

#[test]
fn huge_weight_decay_shrinks_parameters() {
    let data = toy_set(4, 3);
    let graph = toy_graph();
    let cfg = TrainingConfig { weight_decay: 1e6, learning_rate: 1e-7, batch_size: 4, ..config(6) };
    let mut norms = Vec::new();
    let out = train_message_estimators(&data, &graph, &small_arch(&graph), &cfg, |_, p| norms.push(p.squared_norm()))
        .unwrap();
    let initial = out.steps[0].regularizer / (0.5 * 1e6);
    assert!(norms[0] < initial);
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    assert!(norms[5] < 0.6 * initial);
}

#[test]
fn reported_loss_matches_independent_objective() {
    let data = toy_set(6, 4);
    let graph = toy_graph();
    let arch = small_arch(&graph);
    let cfg = TrainingConfig { weight_decay: 0.05, ..config(2) };
    let init = EstimatorParams::init(arch, 77).unwrap();
    let out = train_from(init.clone(), &data, &graph, &cfg, &mut |_, _| {}).unwrap();
    let first = &out.steps[0];
    let mut j = 0.0;
    for id in &first.sample_ids {
        let s = data.iter().find(|s| s.id == *id).unwrap();
        let m = forward(&init, &graph, &s.image).unwrap().marginals();
        j += marginal_cross_entropy(&m, &s.labels.labels).unwrap();
    }
    let expected = j / first.sample_ids.len() as f64 + 0.025 * init.squared_norm();
    assert!((first.loss - expected).abs() < 1e-10, "{} vs {expected}", first.loss);
}

#[test]
fn split_batches_accumulate_to_the_full_batch() {
    let data = toy_set(6, 5);
    let graph = toy_graph();
    let params = EstimatorParams::init(small_arch(&graph), 3).unwrap();
    let batch: Vec<(&Image, &[usize])> = data.iter().map(|s| (&s.image, s.labels.labels.as_slice())).collect();
    let (full_l, full_g) = batch_gradient(&params, &graph, &batch).unwrap();
    let (a_l, a_g) = batch_gradient(&params, &graph, &batch[..3]).unwrap();
    let (b_l, b_g) = batch_gradient(&params, &graph, &batch[3..]).unwrap();
    assert_eq!(full_l, [a_l, b_l].concat());
    for ((f, a), b) in full_g.iter().zip(&a_g).zip(&b_g) {
        assert!((f - (a + b)).abs() < 1e-9);
    }
    // Serial accumulation oracle.
    let mut serial = vec![0.0; params.num_params()];
    for item in &batch {
        let (_, g) = batch_gradient(&params, &graph, std::slice::from_ref(item)).unwrap();
        serial.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
    }
    for (f, s) in full_g.iter().zip(&serial) {
        assert!((f - s).abs() < 1e-9);
    }
}

#[test]
fn non_finite_loss_is_reported_with_step_and_sample() {
    let data = toy_set(3, 6);
    let graph = toy_graph();
    let mut params = EstimatorParams::init(small_arch(&graph), 3).unwrap();
    params.values_mut().iter_mut().for_each(|v| *v = f64::NAN);
    let err = train_from(params, &data, &graph, &config(1), &mut |_, _| {}).unwrap_err();
    match err {
        TrainError::NonFiniteLoss { step, sample_id } => {
            assert_eq!(step, 0);
            assert!(data.iter().any(|s| s.id == sample_id));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        train_message_estimators(&[], &graph, &small_arch(&graph), &config(1), |_, _| {}),
        Err(TrainError::EmptyDataset)
    ));
}

fn noise_samples(count: usize, h: usize, w: usize, k: usize, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count as u64)
        .map(|id| {
            let mut image = Image::zeros(h, w, 3);
            image.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
            let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..k)).collect());
            SyntheticSample { id, seed, image, labels }
        })
        .collect()
}

#[test]
fn noise_labels_learn_no_interaction() {
    let data = noise_samples(200, 3, 3, 2, 8);
    let cfg = TrainingConfig { learning_rate: 0.05, batch_size: 10, epochs: 30, weight_decay: 1e-4, ..Default::default() };
    let out = train_crf_potentials_exact(&data, &ConnectivitySpec::default(), 2, &cfg, &ExactOracle::default()).unwrap();
    for (tag, table) in &out.crf.tables {
        if *tag == FactorType::Unary {
            continue;
        }
        for row in table.chunks(2) {
            let gap = row.iter().copied().fold(f64::MIN, f64::max) - row.iter().copied().fold(f64::MAX, f64::min);
            assert!(gap < 0.1, "{tag}: {table:?}");
        }
    }
}

#[test]
fn single_example_nll_descends() {
    let data: Vec<_> = generate_dataset(&DatasetParams::new(9, 1, 3, 3, 3, 0.3)).unwrap();
    let cfg = TrainingConfig { learning_rate: 0.01, batch_size: 1, epochs: 60, weight_decay: 0.0, lr_decay: 1.0, ..Default::default() };
    let out = train_crf_potentials_exact(&data, &ConnectivitySpec::default(), 3, &cfg, &ExactOracle::default()).unwrap();
    let h = out.loss_history();
    let ok = h.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(ok * 100 >= 95 * (h.len() - 1), "{h:?}");
    assert!(h[h.len() - 1] < h[0]);
}

#[test]
fn baseline_rejects_oversized_graphs() {
    let data = generate_dataset(&DatasetParams::new(0, 1, 6, 6, 3, 0.3)).unwrap();
    let oracle = ExactOracle::new(1 << 10);
    let err = train_crf_potentials_exact(&data, &ConnectivitySpec::default(), 3, &config(1), &oracle).unwrap_err();
    assert!(matches!(err, TrainError::Oracle(_)), "{err:?}");
}

#[test]
fn baseline_parameters_flatten_round_trip() {
    let graph = build_grid_graph(2, 2, 3, &ConnectivitySpec::default()).unwrap();
    let mut crf = BaselineCrf::zeros(&graph, 3);
    let values: Vec<f64> = (0..crf.num_params()).map(|i| i as f64 * 0.1).collect();
    crf.set_flat(&values);
    assert_eq!(crf.flatten(), values);
    assert_eq!(crf.num_params(), 3 + 3 * 9 + 9);
}
