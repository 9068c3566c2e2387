//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Relative error of an entry is `|a - n| / max(|a|, |n|, floor)`. Estimator
//! entries whose `+h` and `-h` evaluations land on different ReLU activation
//! patterns are skipped (the loss is not differentiable across the kink);
//! a suite fails if more than `max_skip_fraction` of its entries are skipped.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exact_oracle::{exact_log_partition, ExactOracle, PotentialTable};
use crate::factor_graph::{build_grid_graph, ConnectivitySpec, FactorGraph};
use crate::image::Image;
use crate::message_estimator::{backward, forward, Architecture, EstimatorParams};
use crate::seeds::derive_seed;
use crate::trainer::{BaselineCrf, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Tolerance for the estimator suites.
    pub estimator_tolerance: f64,
    /// Tolerance for the potential-table suites.
    pub baseline_tolerance: f64,
    pub denominator_floor: f64,
    pub max_skip_fraction: f64,
    pub seed: u64,
    pub grid: usize,
    pub num_classes: usize,
    pub weight_decay: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            estimator_tolerance: 1e-4,
            baseline_tolerance: 1e-5,
            denominator_floor: 1e-5,
            max_skip_fraction: 0.01,
            seed: 0,
            grid: 4,
            num_classes: 3,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    /// Fixed-width table, one row per suite.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>8} {:>8} {:>14} {:>10}  result", "suite", "checked", "skipped", "max_rel_err", "tol");
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<28} {:>8} {:>8} {:>14.3e} {:>10.0e}  {}",
                s.name,
                s.checked,
                s.skipped,
                s.max_rel_error,
                s.tolerance,
                if s.passed { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Gives every parameter a generic nonzero value: random weights, small
/// random biases and head outputs. The default init zeroes biases and head
/// outputs, which would make most gradients trivially zero.
pub fn generic_point(arch: Architecture, seed: u64) -> Result<EstimatorParams, TrainError> {
    let mut params = EstimatorParams::init(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck/jitter"));
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
    Ok(params)
}

/// Checks the full training loss `J + (lambda/2)||theta||^2` of one example.
pub fn check_estimator(
    name: &str,
    params: &EstimatorParams,
    graph: &FactorGraph,
    image: &Image,
    labels: &[usize],
    opts: &GradcheckOptions,
) -> Result<SuiteReport, TrainError> {
    let k = graph.num_classes();
    let lambda = opts.weight_decay;
    let rec = forward(params, graph, image)?;
    let mut upstream = vec![0.0; rec.log_marginals().len()];
    for (p, &y) in labels.iter().enumerate() {
        upstream[p * k + y] = -1.0;
    }
    let mut analytic = backward(params, graph, &rec, &upstream)?;
    analytic.iter_mut().zip(params.values()).for_each(|(g, t)| *g += lambda * t);

    let h = opts.step;
    let mut probe = params.clone();
    let mut skipped = 0;
    let mut worst = 0.0f64;
    let mut blocks = Vec::new();
    for block in params.blocks() {
        let mut block_worst = 0.0f64;
        for i in block.range() {
            let orig = params.values()[i];
            probe.values_mut()[i] = orig + h;
            let plus = forward(&probe, graph, image)?;
            probe.values_mut()[i] = orig - h;
            let minus = forward(&probe, graph, image)?;
            probe.values_mut()[i] = orig;
            if plus.activation_pattern() != minus.activation_pattern() {
                skipped += 1;
                continue;
            }
            // Difference per node before summing keeps roundoff at the
            // scale of one log-probability instead of the whole loss.
            let (lp, lm) = (plus.log_marginals(), minus.log_marginals());
            let d_ce: f64 = labels.iter().enumerate().map(|(p, &y)| -(lp[p * k + y] - lm[p * k + y])).sum();
            let d_reg = 0.5 * lambda * ((orig + h).powi(2) - (orig - h).powi(2));
            let numeric = (d_ce + d_reg) / (2.0 * h);
            block_worst = block_worst.max(rel_error(analytic[i], numeric, opts.denominator_floor));
        }
        worst = worst.max(block_worst);
        blocks.push(BlockError { block: block.name.clone(), max_rel_error: block_worst });
    }
    let checked = params.num_params();
    let passed = worst < opts.estimator_tolerance && (skipped as f64) <= opts.max_skip_fraction * checked as f64;
    Ok(SuiteReport {
        name: name.to_owned(),
        checked,
        skipped,
        max_rel_error: worst,
        tolerance: opts.estimator_tolerance,
        blocks,
        passed,
    })
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::zeros(h, w, c);
    img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    img
}

/// The four estimator suites: `T` in {1, 2}, per-round and shared heads, on
/// the default connectivity with the toy architecture.
pub fn estimator_suites(opts: &GradcheckOptions) -> Result<Vec<SuiteReport>, TrainError> {
    let n = opts.grid;
    let graph = build_grid_graph(n, n, opts.num_classes, &ConnectivitySpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "gradcheck/data"));
    let image = random_image(n, n, 3, &mut rng);
    let labels: Vec<usize> = (0..n * n).map(|_| rng.random_range(0..opts.num_classes)).collect();
    let mut out = Vec::new();
    for rounds in [1, 2] {
        for shared in [false, true] {
            let arch = Architecture {
                rounds,
                shared,
                ..Architecture::toy(3, opts.num_classes, graph.factor_types().to_vec())
            };
            let params = generic_point(arch, derive_seed(opts.seed, &format!("gradcheck/T{rounds}/{shared}")))?;
            let name = format!("estimator T={rounds} {}", if shared { "shared" } else { "per-round" });
            out.push(check_estimator(&name, &params, &graph, &image, &labels, opts)?);
        }
    }
    Ok(out)
}

/// `d log Z / d E_F(y) = -P(y_F = y)` from oracle factor marginals against
/// central differences of [`exact_log_partition`], every entry of every
/// table, on a 2x2 grid with the default connectivity.
pub fn log_partition_suite(opts: &GradcheckOptions) -> Result<SuiteReport, TrainError> {
    let k = opts.num_classes;
    let graph = build_grid_graph(2, 2, k, &ConnectivitySpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "gradcheck/logz"));
    let mut tables: Vec<PotentialTable> = graph
        .factors()
        .iter()
        .map(|f| PotentialTable::new(f.id, (0..k.pow(f.order() as u32)).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let (fm, _) = ExactOracle::default().factor_marginals(&graph, &tables)?;
    let h = opts.step;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for f in 0..tables.len() {
        for e in 0..tables[f].energies.len() {
            let orig = tables[f].energies[e];
            tables[f].energies[e] = orig + h;
            let plus = exact_log_partition(&graph, &tables)?;
            tables[f].energies[e] = orig - h;
            let minus = exact_log_partition(&graph, &tables)?;
            tables[f].energies[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_error(-fm.tables[f][e], numeric, opts.denominator_floor));
            checked += 1;
        }
    }
    Ok(SuiteReport {
        name: "baseline grad log Z".into(),
        checked,
        skipped: 0,
        max_rel_error: worst,
        tolerance: opts.baseline_tolerance,
        blocks: Vec::new(),
        passed: worst < opts.baseline_tolerance,
    })
}

/// Gradient of the tied baseline's `E(y) + log Z` against central
/// differences on a 2x2 example.
pub fn baseline_nll_suite(opts: &GradcheckOptions) -> Result<SuiteReport, TrainError> {
    let k = opts.num_classes;
    let graph = build_grid_graph(2, 2, k, &ConnectivitySpec::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "gradcheck/nll"));
    let image = random_image(2, 2, 3, &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..k)).collect();
    let mut crf = BaselineCrf::zeros(&graph, 3);
    let theta: Vec<f64> = (0..crf.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    crf.set_flat(&theta);
    let oracle = ExactOracle::default();
    let (_, analytic) = crf.nll_and_gradient(&graph, &oracle, &image, &labels)?;
    let h = opts.step;
    let mut worst = 0.0f64;
    let mut probe = crf.clone();
    let mut values = theta.clone();
    for i in 0..theta.len() {
        values[i] = theta[i] + h;
        probe.set_flat(&values);
        let (plus, _) = probe.nll_and_gradient(&graph, &oracle, &image, &labels)?;
        values[i] = theta[i] - h;
        probe.set_flat(&values);
        let (minus, _) = probe.nll_and_gradient(&graph, &oracle, &image, &labels)?;
        values[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_error(analytic[i], numeric, opts.denominator_floor));
    }
    Ok(SuiteReport {
        name: "baseline grad NLL".into(),
        checked: theta.len(),
        skipped: 0,
        max_rel_error: worst,
        tolerance: opts.baseline_tolerance,
        blocks: Vec::new(),
        passed: worst < opts.baseline_tolerance,
    })
}

pub fn run_all(opts: &GradcheckOptions) -> Result<GradcheckReport, TrainError> {
    let mut suites = estimator_suites(opts)?;
    suites.push(log_partition_suite(opts)?);
    suites.push(baseline_nll_suite(opts)?);
    Ok(GradcheckReport { suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_suites_pass() {
        let opts = GradcheckOptions::default();
        let logz = log_partition_suite(&opts).unwrap();
        assert!(logz.passed, "{logz:?}");
        // 4 unary, 6 surround, 4 above and 4 below pairs.
        assert_eq!(logz.checked, 4 * 3 + 14 * 9);
        let nll = baseline_nll_suite(&opts).unwrap();
        assert!(nll.passed, "{nll:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        assert!(rel_error(1.0, 1.001, 1e-5) > 1e-4);
        assert!(rel_error(1e-9, 0.0, 1e-5) < 1e-3);
        let report = GradcheckReport {
            suites: vec![SuiteReport {
                name: "x".into(),
                checked: 1,
                skipped: 0,
                max_rel_error: 1.0,
                tolerance: 1e-4,
                blocks: vec![],
                passed: false,
            }],
        };
        assert!(!report.passed());
        assert!(report.table().contains("FAIL"));
    }
}
