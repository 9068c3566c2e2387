//! One function per pipeline stage. Each writes `config.resolved` and a
//! `report.txt` into the output directory; timings only ever go to `*.log`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msgcrf::evaluation::{compare_marginals, evaluate, predict_labels, DivergenceStats};
use msgcrf::exact_oracle::{ExactOracle, PotentialTable};
use msgcrf::factor_graph::{build_grid_graph, Factor, FactorGraph, FactorType};
use msgcrf::gradcheck;
use msgcrf::message_estimator::EstimatorParams;
use msgcrf::message_passing::{run_estimator_inference, run_sync_bp};
use msgcrf::seeds::derive_seed;
use msgcrf::synthetic_data::{read_pgm, write_pgm, Dataset, SyntheticSample};
use msgcrf::trainer::{train_crf_potentials_exact, train_message_estimators, BaselineCrf, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Result of a command: `ok == false` maps to a nonzero exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub ok: bool,
    pub report: String,
}

impl Outcome {
    fn pass(report: String) -> Self {
        Outcome { ok: true, report }
    }
}

/// Optional input paths given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
}

fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.resolved"), cfg.to_json())?;
    Ok(out)
}

fn finish(out: &Path, outcome: Outcome) -> Result<Outcome> {
    fs::write(out.join("report.txt"), &outcome.report)?;
    Ok(outcome)
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    if !path.exists() {
        bail!("dataset {} does not exist (run `generate` or pass --dataset)", path.display());
    }
    let ds = Dataset::load(path, Some(cfg.data.num_classes)).with_context(|| format!("loading {}", path.display()))?;
    let h = &ds.header;
    if (h.height, h.width, h.channels) != (cfg.data.height, cfg.data.width, cfg.data.channels) {
        bail!(
            "dataset {} is {}x{}x{}, config expects {}x{}x{}",
            path.display(),
            h.height,
            h.width,
            h.channels,
            cfg.data.height,
            cfg.data.width,
            cfg.data.channels
        );
    }
    Ok(ds)
}

fn grid_graph(cfg: &RunConfig) -> Result<FactorGraph> {
    Ok(build_grid_graph(cfg.data.height, cfg.data.width, cfg.data.num_classes, &cfg.connectivity)?)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Outcome> {
    let out = prepare(cfg)?;
    let mut report = String::new();
    for (name, params) in [("train", cfg.train_params()), ("test", cfg.test_params())] {
        let ds = Dataset::generate(&params)?;
        let path = out.join(format!("{name}.mcrf"));
        ds.save(&path)?;
        let mut counts = vec![0usize; params.num_classes];
        ds.samples.iter().flat_map(|s| &s.labels.labels).for_each(|&l| counts[l] += 1);
        let total: usize = counts.iter().sum();
        let freqs: Vec<String> = counts.iter().map(|&c| format!("{:.4}", c as f64 / total as f64)).collect();
        let _ = writeln!(report, "{name}: {} samples -> {}", ds.samples.len(), path.display());
        let _ = writeln!(report, "{name} class frequencies: {}", freqs.join(" "));
    }
    finish(&out, Outcome::pass(report))
}

fn default_input(given: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join(name))
}

pub fn cmd_train(cfg: &RunConfig, inputs: &Inputs) -> Result<Outcome> {
    let out = prepare(cfg)?;
    let ds = load_dataset(&default_input(&inputs.dataset, &out, "train.mcrf"), cfg)?;
    let mut metrics = String::from("epoch,loss,grad_norm\n");
    let mut log = String::new();
    let mut report = String::new();
    match cfg.training.mode {
        TrainMode::MessageLearning => {
            let graph = grid_graph(cfg)?;
            let arch = cfg.architecture_for(&graph);
            let ckpt_dir = out.join("checkpoints");
            fs::create_dir_all(&ckpt_dir)?;
            let mut save_err = None;
            let every = cfg.checkpoint_every;
            let outcome = train_message_estimators(&ds.samples, &graph, &arch, &cfg.training, |rec, params| {
                let _ = writeln!(metrics, "{},{},{}", rec.epoch + 1, rec.mean_loss, rec.mean_grad_norm);
                let _ = writeln!(log, "epoch {} wall_seconds {:.3}", rec.epoch + 1, rec.wall_seconds);
                if every > 0 && (rec.epoch + 1) % every == 0 && save_err.is_none() {
                    save_err = params.save(&ckpt_dir.join(format!("epoch{:03}.json", rec.epoch + 1))).err();
                }
            })?;
            if let Some(e) = save_err {
                return Err(e.into());
            }
            outcome.params.save(&ckpt_dir.join("final.json"))?;
            let _ = writeln!(report, "mode: message_learning");
            let _ = writeln!(report, "factor types: {}", type_list(graph.factor_types()));
            let _ = writeln!(report, "parameters: {}", outcome.params.num_params());
            let _ = writeln!(report, "epochs: {}", outcome.epochs.len());
            if let (Some(first), Some(last)) = (outcome.epochs.first(), outcome.epochs.last()) {
                let _ = writeln!(report, "loss: first {} last {}", first.mean_loss, last.mean_loss);
            }
        }
        TrainMode::BaselineExactLikelihood => {
            let crops = baseline_crops(&ds.samples, cfg.baseline.crop, derive_seed(cfg.seed, "baseline/crop"))?;
            let oracle = ExactOracle::new(cfg.baseline.max_states);
            let outcome =
                train_crf_potentials_exact(&crops, &cfg.connectivity, cfg.data.num_classes, &cfg.training, &oracle)?;
            for rec in &outcome.epochs {
                let _ = writeln!(metrics, "{},{},{}", rec.epoch + 1, rec.mean_loss, rec.mean_grad_norm);
                let _ = writeln!(log, "epoch {} wall_seconds {:.3}", rec.epoch + 1, rec.wall_seconds);
            }
            fs::write(out.join("baseline.json"), serde_json::to_string_pretty(&outcome.crf)?)?;
            let _ = writeln!(report, "mode: baseline_exact_likelihood");
            let _ = writeln!(report, "crop: {0}x{0}", cfg.baseline.crop);
            let _ = writeln!(report, "parameters: {}", outcome.crf.num_params());
            if let (Some(first), Some(last)) = (outcome.epochs.first(), outcome.epochs.last()) {
                let _ = writeln!(report, "loss: first {} last {}", first.mean_loss, last.mean_loss);
            }
        }
    }
    fs::write(out.join("metrics.csv"), metrics)?;
    fs::write(out.join("train.log"), log)?;
    finish(&out, Outcome::pass(report))
}

fn type_list(types: &[FactorType]) -> String {
    types.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

/// One random `size x size` crop per sample, for the enumeration baseline.
pub fn baseline_crops(samples: &[SyntheticSample], size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let (h, w) = (s.image.height, s.image.width);
            if size == 0 || size > h || size > w {
                bail!("crop {size} does not fit a {h}x{w} sample");
            }
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            Ok(SyntheticSample {
                id: s.id,
                seed: s.seed,
                image: s.image.crop(top, left, size, size),
                labels: s.labels.crop(top, left, size, size),
            })
        })
        .collect()
}

fn label_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:05}.pgm"))
}

pub fn cmd_infer(cfg: &RunConfig, inputs: &Inputs) -> Result<Outcome> {
    let out = prepare(cfg)?;
    let ds = load_dataset(&default_input(&inputs.dataset, &out, "test.mcrf"), cfg)?;
    let ckpt = default_input(&inputs.checkpoint, &out, "checkpoints/final.json");
    if !ckpt.exists() {
        bail!("checkpoint {} does not exist (run `train` or pass --checkpoint)", ckpt.display());
    }
    let graph = grid_graph(cfg)?;
    let r = cfg.architecture.trunk_widths.last().copied().unwrap_or(cfg.data.channels);
    let params = EstimatorParams::load_expecting(&ckpt, cfg.data.num_classes, r)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let labels_dir = out.join("labels");
    fs::create_dir_all(&labels_dir)?;
    let mut marginals_out = String::new();
    for s in &ds.samples {
        let m = run_estimator_inference(&graph, &params, &s.image)?;
        let pred = predict_labels(&m);
        let map = msgcrf::image::LabelMap::new(s.image.height, s.image.width, pred);
        write_pgm(&label_path(&labels_dir, s.id), &map, cfg.data.num_classes)?;
        marginals_out.push_str(&serde_json::to_string(&serde_json::json!({ "id": s.id, "marginals": m.as_slice() }))?);
        marginals_out.push('\n');
    }
    fs::write(out.join("marginals.jsonl"), marginals_out)?;
    let report = format!(
        "inferred {} samples with T = {} -> {}\n",
        ds.samples.len(),
        params.architecture().rounds,
        labels_dir.display()
    );
    finish(&out, Outcome::pass(report))
}

pub fn cmd_eval(cfg: &RunConfig, inputs: &Inputs) -> Result<Outcome> {
    let out = prepare(cfg)?;
    let ds = load_dataset(&default_input(&inputs.dataset, &out, "test.mcrf"), cfg)?;
    let pred_dir = default_input(&inputs.predictions, &out, "labels");
    let mut preds = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let path = label_path(&pred_dir, s.id);
        let (map, _) = read_pgm(&path).with_context(|| format!("reading prediction {}", path.display()))?;
        if (map.height, map.width) != (s.labels.height, s.labels.width) {
            bail!("prediction {} is {}x{}, ground truth {}x{}", path.display(), map.height, map.width, s.labels.height, s.labels.width);
        }
        preds.push(map.labels);
    }
    let gts: Vec<&[usize]> = ds.samples.iter().map(|s| s.labels.labels.as_slice()).collect();
    let report = evaluate(&preds, &gts, cfg.data.num_classes)?;
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    finish(&out, Outcome::pass(report.summary()))
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let out = prepare(cfg)?;
    let report = gradcheck::run_all(&cfg.gradcheck)?;
    fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    let mut text = report.table();
    let _ = writeln!(text, "overall: {}", if report.passed() { "PASS" } else { "FAIL" });
    finish(&out, Outcome { ok: report.passed(), report: text })
}

/// Random tree on `n` variables: node `i > 0` attaches to a uniformly chosen
/// earlier node. One unary factor per node, pairwise factors after them.
pub fn random_tree(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<FactorGraph> {
    let mut factors: Vec<Factor> = (0..n).map(|p| Factor { id: p, type_tag: FactorType::Unary, scope: vec![p] }).collect();
    for i in 1..n {
        let j = rng.random_range(0..i);
        factors.push(Factor { id: factors.len(), type_tag: FactorType::PairwiseSurround, scope: vec![j, i] });
    }
    let types = if n > 1 { vec![FactorType::Unary, FactorType::PairwiseSurround] } else { vec![FactorType::Unary] };
    Ok(FactorGraph::from_factors(n, k, types, factors)?)
}

pub fn random_tables(graph: &FactorGraph, scale: f64, rng: &mut ChaCha8Rng) -> Vec<PotentialTable> {
    let k = graph.num_classes();
    graph
        .factors()
        .iter()
        .map(|f| PotentialTable::new(f.id, (0..k.pow(f.order() as u32)).map(|_| rng.random_range(-scale..scale)).collect()))
        .collect()
}

fn divergence_row(out: &mut String, label: &str, t: usize, s: &DivergenceStats) {
    let _ = writeln!(out, "{label:<22} {t:>4} {:>14.6e} {:>14.6e} {:>14.6e}", s.mean_kl, s.max_kl, s.mean_tv);
}

/// Loopy-grid and tree BP against enumeration over a sweep of `T`, plus the
/// trained estimator against the exact marginals of a trained baseline CRF
/// when both `--checkpoint` and `--baseline` are given.
pub fn cmd_oracle_compare(cfg: &RunConfig, inputs: &Inputs) -> Result<Outcome> {
    let out = prepare(cfg)?;
    let oc = &cfg.oracle_compare;
    let oracle = ExactOracle::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "oracle_compare"));
    let mut text = format!("{:<22} {:>4} {:>14} {:>14} {:>14}\n", "case", "T", "mean_kl", "max_kl", "mean_tv");
    let mut ok = true;
    let mut csv = String::from("case,graph,rounds,mean_kl,max_kl,mean_tv\n");
    for g in 0..oc.graphs {
        let grid = build_grid_graph(oc.height, oc.width, oc.num_classes, &cfg.connectivity)?;
        let n = oc.height * oc.width;
        let tree = random_tree(n, oc.num_classes, &mut rng)?;
        for (label, graph) in [("bp/grid", &grid), ("bp/tree", &tree)] {
            let tables = random_tables(graph, oc.energy_scale, &mut rng);
            let exact = oracle.marginals(graph, &tables)?;
            for &t in &oc.rounds {
                let bp = run_sync_bp(graph, &tables, t)?;
                let stats = compare_marginals(&exact, &bp.marginals)?;
                divergence_row(&mut text, &format!("{label} #{g}"), t, &stats);
                let _ = writeln!(csv, "{label},{g},{t},{},{},{}", stats.mean_kl, stats.max_kl, stats.mean_tv);
                // n rounds always cover the tree's longest path.
                if label == "bp/tree" && t >= n && stats.mean_kl >= 1e-12 {
                    ok = false;
                    let _ = writeln!(text, "  FAIL: tree BP with T >= {n} should be exact");
                }
            }
        }
    }
    match (&inputs.checkpoint, &inputs.baseline) {
        (Some(ckpt), Some(base)) => {
            let crf: BaselineCrf = serde_json::from_str(&fs::read_to_string(base).with_context(|| format!("reading {}", base.display()))?)?;
            let r = cfg.architecture.trunk_widths.last().copied().unwrap_or(cfg.data.channels);
            let params = EstimatorParams::load_expecting(ckpt, cfg.data.num_classes, r)?;
            let ds = load_dataset(&default_input(&inputs.dataset, &out, "test.mcrf"), cfg)?;
            let crops = baseline_crops(&ds.samples, cfg.baseline.crop, derive_seed(cfg.seed, "oracle_compare/crop"))?;
            let graph = build_grid_graph(cfg.baseline.crop, cfg.baseline.crop, cfg.data.num_classes, &cfg.connectivity)?;
            let (mut kl, mut tv, mut max_kl) = (0.0, 0.0, 0.0f64);
            for s in crops.iter().take(oc.graphs.max(1)) {
                let exact = oracle.marginals(&graph, &crf.potentials(&graph, &s.image))?;
                let est = run_estimator_inference(&graph, &params, &s.image)?;
                let st = compare_marginals(&exact, &est)?;
                kl += st.mean_kl;
                tv += st.mean_tv;
                max_kl = max_kl.max(st.max_kl);
            }
            let m = crops.len().min(oc.graphs.max(1)) as f64;
            let stats = DivergenceStats { per_node_kl: Vec::new(), mean_kl: kl / m, max_kl, mean_tv: tv / m };
            divergence_row(&mut text, "estimator/baseline", params.architecture().rounds, &stats);
            let _ = writeln!(csv, "estimator/baseline,all,{},{},{},{}", params.architecture().rounds, stats.mean_kl, stats.max_kl, stats.mean_tv);
        }
        _ => {
            let _ = writeln!(text, "estimator rows skipped: pass --checkpoint and --baseline to compare a trained estimator");
        }
    }
    fs::write(out.join("metrics.csv"), csv)?;
    let _ = writeln!(text, "overall: {}", if ok { "PASS" } else { "FAIL" });
    finish(&out, Outcome { ok, report: text })
}
