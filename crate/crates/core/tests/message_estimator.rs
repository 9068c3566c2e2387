use msgcrf::exact_oracle::Marginals;
use msgcrf::factor_graph::{build_grid_graph, ConnectivitySpec, Factor, FactorGraph, FactorType};
use msgcrf::image::Image;
use msgcrf::message_estimator::{
    backward, dependent_feature, estimate_message, extract_features, forward, infer, node_factor_feature, Architecture,
    EstimatorError, EstimatorParams, EstimatorSession,
};
use msgcrf::message_passing::{run_estimator_inference, MessageSet};
use msgcrf::numerics::log_softmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::zeros(h, w, c);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    img
}

fn grid(h: usize, w: usize, k: usize) -> FactorGraph {
    build_grid_graph(h, w, k, &ConnectivitySpec::default()).unwrap()
}

fn small_arch(graph: &FactorGraph, rounds: usize, shared: bool) -> Architecture {
    Architecture {
        in_channels: 3,
        num_classes: graph.num_classes(),
        trunk_widths: vec![4, 4],
        kernel_size: 3,
        head_hidden: 6,
        factor_types: graph.factor_types().to_vec(),
        rounds,
        shared,
    }
}

/// Random init plus nonzero biases and head outputs, so every block carries
/// gradient and few ReLUs sit exactly at zero.
fn jittered_params(arch: Architecture, seed: u64) -> EstimatorParams {
    let mut params = EstimatorParams::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let ranges: Vec<_> = params
        .blocks()
        .iter()
        .filter(|b| b.name.ends_with(".bias") || b.name.ends_with(".fc2.weight"))
        .map(|b| (b.range(), if b.name.ends_with(".bias") { 0.2 } else { 0.5 }))
        .collect();
    for (range, scale) in ranges {
        for v in &mut params.values_mut()[range] {
            *v = rng.random_range(-scale..scale);
        }
    }
    params
}

/// Log-marginals built only from the single-message public operations.
fn unrolled_log_marginals(params: &EstimatorParams, graph: &FactorGraph, image: &Image) -> Vec<f64> {
    let k = graph.num_classes();
    let feats = extract_features(params, image).unwrap();
    let rounds = params.architecture().rounds;
    let mut prev: Option<MessageSet> = None;
    let mut msgs = Vec::new();
    for t in 1..=rounds {
        msgs = vec![0.0; graph.num_slots() * k];
        for s in 0..graph.num_slots() {
            let (f, p) = (graph.slot_factor(s), graph.slot_variable(s));
            let z = node_factor_feature(&feats, graph, p, f).unwrap();
            let dep = prev.as_ref().map(|m| dependent_feature(m, graph, p, f).unwrap());
            let tag = &graph.factor(f).unwrap().type_tag;
            let m = estimate_message(params, tag, t, &z, dep.as_deref()).unwrap();
            msgs[s * k..(s + 1) * k].copy_from_slice(&m);
        }
        prev = Some(MessageSet::from_factor_messages(graph, msgs.clone(), t));
    }
    let mut out = Vec::new();
    for p in 0..graph.num_variables() {
        let mut sum = vec![0.0; k];
        for &s in graph.slots_of(p) {
            for (a, b) in sum.iter_mut().zip(&msgs[s * k..(s + 1) * k]) {
                *a += b;
            }
        }
        out.extend(log_softmax(&sum));
    }
    out
}

#[test]
fn zero_parameters_give_uniform_beliefs() {
    let graph = grid(3, 4, 3);
    let params = EstimatorParams::zeros(Architecture::toy(3, 3, graph.factor_types().to_vec())).unwrap();
    let image = random_image(3, 4, 3, 1);
    let feats = extract_features(&params, &image).unwrap();
    assert!(feats.data.iter().all(|&v| v == 0.0));
    let record = forward(&params, &graph, &image).unwrap();
    assert!(record.round_messages(1).iter().all(|&v| v == 0.0));
    let beliefs = run_estimator_inference(&graph, &params, &image).unwrap();
    assert_eq!(beliefs, Marginals::uniform(12, 3));
}

#[test]
fn identity_trunk_passes_pixels_through() {
    let graph = grid(2, 3, 2);
    let arch = Architecture {
        in_channels: 3,
        num_classes: 2,
        trunk_widths: vec![3],
        kernel_size: 1,
        head_hidden: 4,
        factor_types: graph.factor_types().to_vec(),
        rounds: 1,
        shared: false,
    };
    let mut params = EstimatorParams::zeros(arch).unwrap();
    let w = params.block_mut("trunk.conv0.weight").unwrap();
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let image = random_image(2, 3, 3, 2);
    let feats = extract_features(&params, &image).unwrap();
    for p in 0..6 {
        assert_eq!(feats.node(p), image.pixel(p));
    }

    // Unary: complement empty, second half zero.
    let z = node_factor_feature(&feats, &graph, 4, 4).unwrap();
    assert_eq!(&z[..3], image.pixel(4));
    assert_eq!(&z[3..], &[0.0; 3]);
    // Pairwise: second half is the partner's features.
    let f = graph.factors_of(0).iter().copied().find(|&f| graph.factor(f).unwrap().scope == vec![0, 1]).unwrap();
    let z = node_factor_feature(&feats, &graph, 0, f).unwrap();
    assert_eq!(&z[3..], image.pixel(1));
    assert!(node_factor_feature(&feats, &graph, 5, f).is_err());
}

#[test]
fn triple_factor_feature_averages_the_other_two() {
    let custom = FactorType::Custom("triple".into());
    let mut factors: Vec<Factor> =
        (0..3).map(|p| Factor { id: p, type_tag: FactorType::Unary, scope: vec![p] }).collect();
    factors.push(Factor { id: 3, type_tag: custom.clone(), scope: vec![0, 1, 2] });
    let graph = FactorGraph::from_factors(3, 2, vec![FactorType::Unary, custom], factors).unwrap();
    let arch = Architecture {
        in_channels: 2,
        num_classes: 2,
        trunk_widths: vec![2],
        kernel_size: 1,
        head_hidden: 2,
        factor_types: graph.factor_types().to_vec(),
        rounds: 1,
        shared: false,
    };
    let mut params = EstimatorParams::zeros(arch).unwrap();
    let w = params.block_mut("trunk.conv0.weight").unwrap();
    w[0] = 1.0;
    w[3] = 1.0;
    let mut image = Image::zeros(1, 3, 2);
    image.data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let feats = extract_features(&params, &image).unwrap();
    let z = node_factor_feature(&feats, &graph, 0, 3).unwrap();
    assert_eq!(z, vec![1.0, 2.0, 4.0, 5.0]);
}

#[test]
fn dependent_feature_examples() {
    let graph = grid(1, 2, 2);
    let pair = 2;
    assert_eq!(graph.factor(pair).unwrap().scope, vec![0, 1]);
    let mut prev = MessageSet::zeros(&graph);

    // All-zero previous messages: log(1/K) per neighbour.
    let d = dependent_feature(&prev, &graph, 0, pair).unwrap();
    for v in &d {
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }

    // Unary message [1, 0] into node 1; the pairwise message into node 1 is excluded.
    prev.factor_to_var_mut(graph.slot_of(1, 1).unwrap()).copy_from_slice(&[1.0, 0.0]);
    prev.factor_to_var_mut(graph.slot_of(pair, 1).unwrap()).copy_from_slice(&[50.0, -50.0]);
    let d = dependent_feature(&prev, &graph, 0, pair).unwrap();
    assert!((d[0] + 0.3133).abs() < 1e-4 && (d[1] + 1.3133).abs() < 1e-4, "{d:?}");

    // Unary factors have an empty complement.
    assert_eq!(dependent_feature(&prev, &graph, 0, 0).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn estimate_message_with_handmade_head() {
    let graph = grid(1, 2, 2);
    let mut arch = small_arch(&graph, 2, false);
    arch.head_hidden = 2;
    arch.trunk_widths = vec![1];
    arch.in_channels = 1;
    let mut params = EstimatorParams::zeros(arch).unwrap();
    let names = params.head_block_names(&FactorType::Unary, 1).unwrap();
    // in_width 2: hidden = relu(z), output = hidden.
    params.block_mut(&names[0]).unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    params.block_mut(&names[2]).unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    params.block_mut(&names[3]).unwrap().copy_from_slice(&[0.5, -0.5]);
    let m = estimate_message(&params, &FactorType::Unary, 1, &[2.0, -3.0], None).unwrap();
    assert_eq!(m, vec![2.5, -0.5]);

    // Round two head takes d_pF and is untouched here: bias-only zero output.
    let m = estimate_message(&params, &FactorType::Unary, 2, &[2.0, -3.0], Some(&[0.1, 0.2])).unwrap();
    assert_eq!(m, vec![0.0, 0.0]);
    assert!(matches!(
        estimate_message(&params, &FactorType::Unary, 2, &[2.0, -3.0], None),
        Err(EstimatorError::WidthMismatch { .. })
    ));
    assert!(matches!(
        estimate_message(&params, &FactorType::Unary, 1, &[2.0, -3.0], Some(&[0.0, 0.0])),
        Err(EstimatorError::WidthMismatch { .. })
    ));
    assert!(matches!(
        estimate_message(&params, &FactorType::Unary, 3, &[2.0, -3.0], None),
        Err(EstimatorError::RoundOutOfRange { round: 3, rounds: 2 })
    ));
    assert!(matches!(
        estimate_message(&params, &FactorType::Custom("x".into()), 1, &[2.0, -3.0], None),
        Err(EstimatorError::MissingHead(_))
    ));
}

#[test]
fn forward_matches_manual_unroll() {
    let graph = grid(3, 3, 3);
    let image = random_image(3, 3, 3, 5);
    for shared in [false, true] {
        for rounds in [1, 2, 3] {
            let params = jittered_params(small_arch(&graph, rounds, shared), 11 + rounds as u64);
            let fast = forward(&params, &graph, &image).unwrap();
            let slow = unrolled_log_marginals(&params, &graph, &image);
            for (a, b) in fast.log_marginals().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "shared={shared} T={rounds}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn shared_parameter_count_ignores_rounds() {
    let graph = grid(2, 2, 3);
    let count = |t, shared| EstimatorParams::zeros(small_arch(&graph, t, shared)).unwrap().num_params();
    assert_eq!(count(1, true), count(5, true));
    assert!(count(1, false) < count(2, false));
    // A later per-round block adds one head of width 2r + K per type.
    let types = graph.factor_types().len();
    let (r, k, hid) = (4, 3, 6);
    assert_eq!(count(2, false) - count(1, false), types * (hid * (2 * r + k) + hid + k * hid + k));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let graph = grid(4, 4, 3);
    let image = random_image(4, 4, 3, 9);
    let params = jittered_params(small_arch(&graph, 2, true), 3);
    let a = forward(&params, &graph, &image).unwrap();
    let b = forward(&params, &graph, &image).unwrap();
    assert_eq!(a.log_marginals(), b.log_marginals());
    let g: Vec<f64> = (0..a.log_marginals().len()).map(|i| (i % 5) as f64 - 2.0).collect();
    assert_eq!(backward(&params, &graph, &a, &g).unwrap(), backward(&params, &graph, &b, &g).unwrap());
}

#[test]
fn tape_free_inference_matches_forward_bitwise() {
    let graph = grid(5, 4, 3);
    let image = random_image(5, 4, 3, 12);
    for (rounds, shared) in [(1, false), (2, false), (3, true)] {
        let params = jittered_params(small_arch(&graph, rounds, shared), 4);
        let full = forward(&params, &graph, &image).unwrap().marginals();
        assert_eq!(infer(&params, &graph, &image).unwrap(), full);
        assert_eq!(run_estimator_inference(&graph, &params, &image).unwrap(), full);
    }
}

#[test]
fn init_is_seeded_with_zero_biases_and_outputs() {
    let graph = grid(2, 2, 3);
    let arch = small_arch(&graph, 1, false);
    let a = EstimatorParams::init(arch.clone(), 7).unwrap();
    assert_eq!(a, EstimatorParams::init(arch.clone(), 7).unwrap());
    assert_ne!(a, EstimatorParams::init(arch, 8).unwrap());
    for b in a.blocks() {
        let zero = a.block(&b.name).unwrap().iter().all(|&v| v == 0.0);
        assert_eq!(zero, b.name.ends_with(".bias") || b.name.ends_with(".fc2.weight"), "{}", b.name);
    }
    // Zero outputs mean training starts from uniform beliefs.
    let rec = forward(&a, &graph, &random_image(2, 2, 3, 1)).unwrap();
    assert_eq!(rec.marginals(), Marginals::uniform(4, 3));
}

fn loss(params: &EstimatorParams, graph: &FactorGraph, image: &Image, g: &[f64]) -> (f64, Vec<bool>) {
    let rec = forward(params, graph, image).unwrap();
    (rec.log_marginals().iter().zip(g).map(|(a, b)| a * b).sum(), rec.activation_pattern())
}

/// Central differences over every parameter, skipping entries whose
/// perturbation flips a ReLU. Returns (max relative error, skipped).
fn finite_difference_check(params: &EstimatorParams, graph: &FactorGraph, image: &Image, seed: u64) -> (f64, usize) {
    let n = graph.num_variables() * graph.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rec = forward(params, graph, image).unwrap();
    let analytic = backward(params, graph, &rec, &g).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut probe = params.clone();
    for i in 0..params.num_params() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let (lp, pp) = loss(&probe, graph, image, &g);
        probe.values_mut()[i] = orig - h;
        let (lm, pm) = loss(&probe, graph, image, &g);
        probe.values_mut()[i] = orig;
        if pp != pm {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    (worst, skipped)
}

#[test]
fn gradients_match_finite_differences() {
    let graph = grid(3, 3, 3);
    let image = random_image(3, 3, 3, 21);
    for shared in [false, true] {
        for rounds in [1, 2] {
            let params = jittered_params(small_arch(&graph, rounds, shared), 40 + rounds as u64);
            let (worst, skipped) = finite_difference_check(&params, &graph, &image, 99);
            assert!(worst < 1e-4, "shared={shared} T={rounds}: max rel err {worst}");
            assert!(skipped * 100 < params.num_params(), "skipped {skipped}");
        }
    }
}

#[test]
fn gradient_is_linear_in_the_upstream_signal() {
    let graph = grid(3, 3, 3);
    let image = random_image(3, 3, 3, 4);
    let params = jittered_params(small_arch(&graph, 2, false), 2);
    let rec = forward(&params, &graph, &image).unwrap();
    let g: Vec<f64> = (0..27).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
    let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
    let a = backward(&params, &graph, &rec, &g).unwrap();
    let b = backward(&params, &graph, &rec, &g2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
    // logsumexp of each log-marginal row is identically zero, so an upstream
    // gradient equal to the marginals themselves must vanish.
    let flat = rec.marginals().as_slice().to_vec();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let residual = backward(&params, &graph, &rec, &flat).unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(residual < 1e-12 * scale.max(1.0), "{residual} vs {scale}");
}

#[test]
fn heads_for_absent_types_get_zero_gradient() {
    let graph = build_grid_graph(3, 3, 3, &ConnectivitySpec::four_neighborhood()).unwrap();
    let mut arch = small_arch(&graph, 1, false);
    arch.factor_types.push(FactorType::PairwiseAbove);
    let params = jittered_params(arch, 6);
    let image = random_image(3, 3, 3, 6);
    let rec = forward(&params, &graph, &image).unwrap();
    let g: Vec<f64> = (0..27).map(|i| (i % 3) as f64).collect();
    let grad = backward(&params, &graph, &rec, &g).unwrap();
    for name in params.head_block_names(&FactorType::PairwiseAbove, 1).unwrap() {
        let block = params.blocks().iter().find(|b| b.name == name).unwrap();
        assert!(grad[block.range()].iter().all(|&v| v == 0.0), "{name}");
    }
    assert!(grad.iter().any(|&v| v != 0.0));
}

#[test]
fn session_requires_forward_before_backward() {
    let graph = grid(2, 2, 2);
    let params = EstimatorParams::init(small_arch(&graph, 1, false), 0).unwrap();
    let mut session = EstimatorSession::new(&params, &graph);
    assert!(matches!(session.backward(&[0.0; 8]), Err(EstimatorError::NoForwardRecorded)));
    session.forward(&random_image(2, 2, 3, 0)).unwrap();
    assert_eq!(session.backward(&[0.0; 8]).unwrap().len(), params.num_params());
    assert!(matches!(session.backward(&[0.0; 3]), Err(EstimatorError::GradientShape { .. })));
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let graph = grid(2, 2, 2);
    let params = EstimatorParams::init(small_arch(&graph, 1, false), 0).unwrap();
    assert!(matches!(
        forward(&params, &graph, &random_image(2, 2, 4, 0)),
        Err(EstimatorError::ImageShape { .. })
    ));
    assert!(matches!(
        forward(&params, &grid(2, 3, 2), &random_image(2, 2, 3, 0)),
        Err(EstimatorError::GraphImageMismatch { .. })
    ));
    assert!(matches!(
        forward(&params, &grid(2, 2, 3), &random_image(2, 2, 3, 0)),
        Err(EstimatorError::ClassMismatch { .. })
    ));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let graph = grid(2, 2, 3);
    let params = EstimatorParams::init(small_arch(&graph, 2, true), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    params.save(&path).unwrap();
    assert_eq!(EstimatorParams::load(&path).unwrap(), params);
    assert_eq!(EstimatorParams::load_expecting(&path, 3, 4).unwrap(), params);
    assert!(matches!(EstimatorParams::load_expecting(&path, 4, 4), Err(EstimatorError::CheckpointMismatch(_))));
    assert!(matches!(EstimatorParams::load_expecting(&path, 3, 8), Err(EstimatorError::CheckpointMismatch(_))));

    let mut ckpt = params.to_checkpoint();
    ckpt.values.pop();
    assert!(matches!(EstimatorParams::from_checkpoint(ckpt), Err(EstimatorError::CheckpointMismatch(_))));
    let mut ckpt = params.to_checkpoint();
    ckpt.version = 99;
    assert!(matches!(EstimatorParams::from_checkpoint(ckpt), Err(EstimatorError::Version(99))));
}

#[test]
fn golden_log_marginals() {
    let graph = grid(2, 2, 3);
    let params = jittered_params(Architecture::toy(3, 3, graph.factor_types().to_vec()), 2024);
    let mut image = Image::zeros(2, 2, 3);
    image.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 / 12.0);
    let rec = forward(&params, &graph, &image).unwrap();
    let got = &rec.log_marginals()[..3];
    for (a, b) in got.iter().zip(GOLDEN) {
        assert!((a - b).abs() < 1e-12, "{got:?}");
    }
    let feats = &rec.features().node(3)[..3];
    for (a, b) in feats.iter().zip(GOLDEN_FEATURES) {
        assert!((a - b).abs() < 1e-12, "{feats:?}");
    }
}

const GOLDEN_FEATURES: [f64; 3] = [0.0985463720864955, 0.0, 0.012734577967772567];

const GOLDEN: [f64; 3] = [-1.3791842280980604, -1.2775296373509555, -0.7561058729728438];
