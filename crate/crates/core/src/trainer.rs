//! Learning the estimator parameters by regularized marginal cross-entropy,
//! and the likelihood-trained potential baseline for tiny graphs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_oracle::{ExactOracle, Marginals, OracleError, PotentialTable};
use crate::factor_graph::{build_grid_graph, ConnectivitySpec, FactorGraph, FactorType, GraphError};
use crate::image::{Image, LabelMap};
use crate::message_estimator::{backward, forward, Architecture, EstimatorError, EstimatorParams};
use crate::seeds::derive_seed;
use crate::synthetic_data::SyntheticSample;

/// Lower clamp on probabilities before taking logs in the loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step} on sample {sample_id}")]
    NonFiniteLoss { step: usize, sample_id: u64 },
    #[error("non-finite gradient entry {index}")]
    NonFiniteGradient { index: usize },
    #[error("gradient has {got} entries for {expected} parameters")]
    GradientShape { expected: usize, got: usize },
    #[error("label {label} outside 0..{num_classes}")]
    LabelRange { label: usize, num_classes: usize },
    #[error("{got} labels for {expected} nodes")]
    LabelCount { expected: usize, got: usize },
    #[error("sample {id} is {h}x{w}, training graph expects {eh}x{ew}")]
    SampleShape { id: u64, h: usize, w: usize, eh: usize, ew: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    MessageLearning,
    BaselineExactLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// `lambda` in `(lambda/2) ||theta||^2`.
    pub weight_decay: f64,
    /// The loss sums over every node of an image, so useful rates are small
    /// (the default suits 16x16 images with batch size 1).
    pub learning_rate: f64,
    /// Multiplier applied at each decay point.
    pub lr_decay: f64,
    /// Training is split into this many equal phases; the rate is decayed
    /// once per completed phase.
    pub lr_phases: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Inference rounds `T` used in training and prediction.
    pub rounds: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Random left-right flips of training samples.
    pub horizontal_flip: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            weight_decay: 1e-4,
            learning_rate: 1e-4,
            lr_decay: 0.5,
            lr_phases: 3,
            batch_size: 1,
            epochs: 40,
            rounds: 1,
            seed: 0,
            mode: TrainMode::MessageLearning,
            horizontal_flip: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.lr_phases == 0 {
            return bad("lr_phases must be >= 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }

    /// Step-decayed rate for `epoch` (0-based).
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let phase = if self.epochs == 0 { 0 } else { epoch * self.lr_phases / self.epochs };
        self.learning_rate * self.lr_decay.powi(phase as i32)
    }
}

/// `J = -sum_p log P(y_p)`, probabilities clamped below at [`PROB_CLAMP`].
pub fn marginal_cross_entropy(marginals: &Marginals, gt: &[usize]) -> Result<f64, TrainError> {
    let k = marginals.num_classes();
    if gt.len() != marginals.num_nodes() {
        return Err(TrainError::LabelCount { expected: marginals.num_nodes(), got: gt.len() });
    }
    let mut j = 0.0;
    for (row, &y) in marginals.iter().zip(gt) {
        if y >= k {
            return Err(TrainError::LabelRange { label: y, num_classes: k });
        }
        j -= row[y].max(PROB_CLAMP).ln();
    }
    Ok(j)
}

/// `theta <- theta - rate * (grad + lambda * theta)`.
pub fn sgd_update(theta: &mut [f64], grad: &[f64], rate: f64, lambda: f64) -> Result<(), TrainError> {
    if grad.len() != theta.len() {
        return Err(TrainError::GradientShape { expected: theta.len(), got: grad.len() });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index });
    }
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= rate * (g + lambda * *t);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EstimatorParams,
    pub epoch: usize,
    pub step: usize,
    pub running_loss: f64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: EstimatorParams, seed: u64) -> Self {
        TrainState {
            params,
            epoch: 0,
            step: 0,
            running_loss: 0.0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "trainer/shuffle")),
        }
    }

    pub fn sgd_step(&mut self, grad: &[f64], rate: f64, lambda: f64) -> Result<(), TrainError> {
        sgd_update(self.params.values_mut(), grad, rate, lambda)?;
        self.step += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub sample_ids: Vec<u64>,
    pub flipped: Vec<bool>,
    /// Mean per-example cross-entropy over the batch.
    pub cross_entropy: f64,
    /// `(lambda/2) ||theta||^2` before the update.
    pub regularizer: f64,
    pub loss: f64,
    /// Norm of the full gradient `mean grad J + lambda theta`.
    pub grad_norm: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    /// Excluded from equality-sensitive outputs by callers.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EstimatorParams,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn loss_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

fn training_views(sample: &SyntheticSample, flip: bool) -> (Image, LabelMap) {
    if flip {
        (sample.image.flip_horizontal(), sample.labels.flip_horizontal())
    } else {
        (sample.image.clone(), sample.labels.clone())
    }
}

/// Cross-entropy and its parameter gradient for one example.
pub fn example_gradient(
    params: &EstimatorParams,
    graph: &FactorGraph,
    image: &Image,
    labels: &[usize],
) -> Result<(f64, Vec<f64>), TrainError> {
    let k = graph.num_classes();
    if labels.len() != graph.num_variables() {
        return Err(TrainError::LabelCount { expected: graph.num_variables(), got: labels.len() });
    }
    let record = forward(params, graph, image)?;
    let logm = record.log_marginals();
    let mut j = 0.0;
    let mut upstream = vec![0.0; logm.len()];
    for (p, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(TrainError::LabelRange { label: y, num_classes: k });
        }
        j -= logm[p * k + y];
        upstream[p * k + y] = -1.0;
    }
    let grad = backward(params, graph, &record, &upstream)?;
    Ok((j, grad))
}

/// Summed cross-entropy and summed gradient over `batch`, computed in
/// parallel and reduced in batch order.
pub fn batch_gradient(
    params: &EstimatorParams,
    graph: &FactorGraph,
    batch: &[(&Image, &[usize])],
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let parts: Vec<Result<(f64, Vec<f64>), TrainError>> = batch
        .par_iter()
        .map(|(img, labels)| example_gradient(params, graph, img, labels))
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut total = vec![0.0; params.num_params()];
    for part in parts {
        let (j, g) = part?;
        losses.push(j);
        total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((losses, total))
}

fn check_samples(samples: &[SyntheticSample], graph: &FactorGraph) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (eh, ew) = graph.grid().map(|g| (g.height, g.width)).unwrap_or((0, 0));
    for s in samples {
        if s.image.num_pixels() != graph.num_variables() || (graph.grid().is_some() && (s.image.height, s.image.width) != (eh, ew))
        {
            return Err(TrainError::SampleShape { id: s.id, h: s.image.height, w: s.image.width, eh, ew });
        }
    }
    Ok(())
}

/// SGD on `mean_i J_i + (lambda/2) ||theta||^2` over mini-batches. The
/// estimator is initialized from `arch` with `rounds` taken from the config
/// and a seed derived from `config.seed`. `on_epoch` sees every finished
/// epoch with the current parameters.
pub fn train_message_estimators(
    samples: &[SyntheticSample],
    graph: &FactorGraph,
    arch: &Architecture,
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &EstimatorParams),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut arch = arch.clone();
    arch.rounds = config.rounds;
    let params = EstimatorParams::init(arch, derive_seed(config.seed, "trainer/init"))?;
    train_from(params, samples, graph, config, &mut on_epoch)
}

/// Continues training from given parameters.
pub fn train_from(
    params: EstimatorParams,
    samples: &[SyntheticSample],
    graph: &FactorGraph,
    config: &TrainingConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord, &EstimatorParams),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_samples(samples, graph)?;
    let mut state = TrainState::new(params, config.seed);
    let lambda = config.weight_decay;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        state.epoch = epoch;
        let rate = config.rate_at(epoch);
        order.shuffle(&mut state.rng);
        let (mut loss_sum, mut norm_sum, mut n_steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let flipped: Vec<bool> = chunk
                .iter()
                .map(|_| config.horizontal_flip && state.rng.random_bool(0.5))
                .collect();
            let views: Vec<(Image, LabelMap)> =
                chunk.iter().zip(&flipped).map(|(&i, &f)| training_views(&samples[i], f)).collect();
            let batch: Vec<(&Image, &[usize])> = views.iter().map(|(im, l)| (im, l.labels.as_slice())).collect();
            let (losses, mut grad) = batch_gradient(&state.params, graph, &batch)?;
            if let Some(pos) = losses.iter().position(|j| !j.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step: state.step, sample_id: samples[chunk[pos]].id });
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let cross_entropy = losses.iter().sum::<f64>() * inv;
            let regularizer = 0.5 * lambda * state.params.squared_norm();
            let grad_norm = grad
                .iter()
                .zip(state.params.values())
                .map(|(g, t)| (g + lambda * t).powi(2))
                .sum::<f64>()
                .sqrt();
            let record = StepRecord {
                epoch,
                step: state.step,
                sample_ids: chunk.iter().map(|&i| samples[i].id).collect(),
                flipped,
                cross_entropy,
                regularizer,
                loss: cross_entropy + regularizer,
                grad_norm,
                rate,
            };
            state.sgd_step(&grad, rate, lambda)?;
            loss_sum += record.loss;
            norm_sum += record.grad_norm;
            n_steps += 1;
            steps.push(record);
        }
        state.running_loss = loss_sum / n_steps as f64;
        let rec = EpochRecord {
            epoch,
            mean_loss: state.running_loss,
            mean_grad_norm: norm_sum / n_steps as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, &state.params);
        epochs.push(rec);
    }
    Ok(TrainOutcome { params: state.params, epochs, steps })
}

/// Potential-table CRF with parameters tied per factor type. Unary energies
/// additionally carry a linear colour term so the baseline can see the image:
/// `E_p(y) = table_unary[y] - sum_c W[y, c] x_{p,c}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCrf {
    pub num_classes: usize,
    pub channels: usize,
    pub tables: BTreeMap<FactorType, Vec<f64>>,
    pub color_weights: Vec<f64>,
}

impl BaselineCrf {
    pub fn zeros(graph: &FactorGraph, channels: usize) -> Self {
        let k = graph.num_classes();
        let tables = graph
            .factor_types()
            .iter()
            .map(|t| {
                let order = graph.factors().iter().find(|f| &f.type_tag == t).map(|f| f.order()).unwrap_or(2);
                (t.clone(), vec![0.0; k.pow(order as u32)])
            })
            .collect();
        BaselineCrf { num_classes: k, channels, tables, color_weights: vec![0.0; k * channels] }
    }

    pub fn num_params(&self) -> usize {
        self.tables.values().map(Vec::len).sum::<usize>() + self.color_weights.len()
    }

    /// Tables then colour weights, in `BTreeMap` key order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.tables.values().flatten().copied().collect();
        out.extend_from_slice(&self.color_weights);
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for table in self.tables.values_mut() {
            table.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
        self.color_weights.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
    }

    /// Per-factor energy tables for one image.
    pub fn potentials(&self, graph: &FactorGraph, image: &Image) -> Vec<PotentialTable> {
        let k = self.num_classes;
        graph
            .factors()
            .iter()
            .map(|f| {
                let mut e = self.tables[&f.type_tag].clone();
                if f.type_tag == FactorType::Unary {
                    let x = image.pixel(f.scope[0]);
                    for (y, ey) in e.iter_mut().enumerate().take(k) {
                        *ey -= self.color_weights[y * self.channels..(y + 1) * self.channels]
                            .iter()
                            .zip(x)
                            .map(|(w, v)| w * v)
                            .sum::<f64>();
                    }
                }
                PotentialTable::new(f.id, e)
            })
            .collect()
    }

    /// `-log P(y | x) = E(y) + log Z` and its gradient in [`flatten`] order.
    ///
    /// [`flatten`]: BaselineCrf::flatten
    pub fn nll_and_gradient(
        &self,
        graph: &FactorGraph,
        oracle: &ExactOracle,
        image: &Image,
        labels: &[usize],
    ) -> Result<(f64, Vec<f64>), TrainError> {
        let k = self.num_classes;
        let tables = self.potentials(graph, image);
        let (fm, log_z) = oracle.factor_marginals(graph, &tables)?;
        let offsets: BTreeMap<&FactorType, usize> = self
            .tables
            .iter()
            .scan(0, |acc, (t, v)| {
                let o = *acc;
                *acc += v.len();
                Some((t, o))
            })
            .collect();
        let color_off = self.tables.values().map(Vec::len).sum::<usize>();
        let mut grad = vec![0.0; self.num_params()];
        let mut energy = 0.0;
        for (f, probs) in graph.factors().iter().zip(&fm.tables) {
            let off = offsets[&f.type_tag];
            let observed = crate::exact_oracle::joint_index(&f.scope, labels, k);
            energy += tables[f.id].energies[observed];
            // dE/dtable is the indicator; d log Z/dtable is -P.
            grad[off + observed] += 1.0;
            for (g, p) in grad[off..off + probs.len()].iter_mut().zip(probs) {
                *g -= p;
            }
            if f.type_tag == FactorType::Unary {
                let x = image.pixel(f.scope[0]);
                for y in 0..k {
                    let coeff = probs[y] - if y == labels[f.scope[0]] { 1.0 } else { 0.0 };
                    for (c, v) in x.iter().enumerate() {
                        grad[color_off + y * self.channels + c] += coeff * v;
                    }
                }
            }
        }
        Ok((energy + log_z, grad))
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub crf: BaselineCrf,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl BaselineOutcome {
    pub fn loss_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Conditional-likelihood training of [`BaselineCrf`] with exact gradients
/// from enumeration. Every sample must share one tiny grid shape.
pub fn train_crf_potentials_exact(
    samples: &[SyntheticSample],
    spec: &ConnectivitySpec,
    num_classes: usize,
    config: &TrainingConfig,
    oracle: &ExactOracle,
) -> Result<BaselineOutcome, TrainError> {
    config.validate()?;
    let first = samples.first().ok_or(TrainError::EmptyDataset)?;
    let graph = build_grid_graph(first.image.height, first.image.width, num_classes, spec)?;
    check_samples(samples, &graph)?;
    let mut crf = BaselineCrf::zeros(&graph, first.image.channels);
    let mut theta = crf.flatten();
    let lambda = config.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "trainer/shuffle"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut epochs, mut steps, mut step) = (Vec::new(), Vec::new(), 0usize);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let rate = config.rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut n_steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let flipped: Vec<bool> =
                chunk.iter().map(|_| config.horizontal_flip && rng.random_bool(0.5)).collect();
            let parts: Vec<Result<(f64, Vec<f64>), TrainError>> = chunk
                .par_iter()
                .zip(&flipped)
                .map(|(&i, &f)| {
                    let (im, l) = training_views(&samples[i], f);
                    crf.nll_and_gradient(&graph, oracle, &im, &l.labels)
                })
                .collect();
            let mut grad = vec![0.0; theta.len()];
            let mut losses = Vec::with_capacity(chunk.len());
            for (pos, part) in parts.into_iter().enumerate() {
                let (j, g) = part?;
                if !j.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step, sample_id: samples[chunk[pos]].id });
                }
                losses.push(j);
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let cross_entropy = losses.iter().sum::<f64>() * inv;
            let regularizer = 0.5 * lambda * theta.iter().map(|v| v * v).sum::<f64>();
            let grad_norm =
                grad.iter().zip(&theta).map(|(g, t)| (g + lambda * t).powi(2)).sum::<f64>().sqrt();
            sgd_update(&mut theta, &grad, rate, lambda)?;
            crf.set_flat(&theta);
            steps.push(StepRecord {
                epoch,
                step,
                sample_ids: chunk.iter().map(|&i| samples[i].id).collect(),
                flipped,
                cross_entropy,
                regularizer,
                loss: cross_entropy + regularizer,
                grad_norm,
                rate,
            });
            loss_sum += cross_entropy + regularizer;
            norm_sum += grad_norm;
            n_steps += 1;
            step += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n_steps as f64,
            mean_grad_norm: norm_sum / n_steps as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(BaselineOutcome { crf, epochs, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Marginals::uniform(5, 3);
        let j = marginal_cross_entropy(&uniform, &[0, 1, 2, 0, 1]).unwrap();
        assert!((j - 5.0 * 3f64.ln()).abs() < 1e-12);

        let hi = 1.0 - 1e-12;
        let onehot = Marginals::new(2, vec![hi, 1e-12, 1e-12, hi]);
        assert!(marginal_cross_entropy(&onehot, &[0, 1]).unwrap().abs() < 1e-9);

        let m = Marginals::new(2, vec![0.7311, 0.2689, 0.5, 0.5]);
        let j = marginal_cross_entropy(&m, &[0, 1]).unwrap();
        assert!((j - (-(0.7311f64).ln() - 0.5f64.ln())).abs() < 1e-12);
        assert!((j - 1.0064).abs() < 1e-4);

        assert!(matches!(marginal_cross_entropy(&m, &[0, 2]), Err(TrainError::LabelRange { label: 2, .. })));
        assert!(matches!(marginal_cross_entropy(&m, &[0]), Err(TrainError::LabelCount { .. })));
    }

    #[test]
    fn sgd_examples() {
        let mut theta = vec![0.3, -1.2];
        sgd_update(&mut theta, &[0.0, 0.0], 0.5, 0.0).unwrap();
        assert_eq!(theta, vec![0.3, -1.2]);

        let mut theta = vec![1.0; 4];
        sgd_update(&mut theta, &[0.0; 4], 0.1, 1.0).unwrap();
        assert!(theta.iter().all(|&v| (v - 0.9).abs() < 1e-15));

        assert!(matches!(sgd_update(&mut theta, &[0.0], 0.1, 0.0), Err(TrainError::GradientShape { .. })));
        assert!(matches!(
            sgd_update(&mut theta, &[0.0, f64::NAN, 0.0, 0.0], 0.1, 0.0),
            Err(TrainError::NonFiniteGradient { index: 1 })
        ));
    }

    #[test]
    fn rate_schedule_halves_each_third() {
        let c = TrainingConfig { epochs: 30, learning_rate: 0.01, ..TrainingConfig::default() };
        assert_eq!(c.rate_at(0), 0.01);
        assert_eq!(c.rate_at(9), 0.01);
        assert_eq!(c.rate_at(10), 0.005);
        assert_eq!(c.rate_at(29), 0.0025);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        for bad in [
            TrainingConfig { weight_decay: -1.0, ..TrainingConfig::default() },
            TrainingConfig { rounds: 0, ..TrainingConfig::default() },
            TrainingConfig { batch_size: 0, ..TrainingConfig::default() },
            TrainingConfig { learning_rate: f64::NAN, ..TrainingConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
        let json = serde_json::to_string(&TrainingConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainingConfig>(&json).unwrap(), TrainingConfig::default());
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"epochz": 3}"#).is_err());
    }
}
