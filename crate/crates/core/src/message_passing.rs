//! Synchronous loopy belief propagation in log-space.
//!
//! One round recomputes every variable-to-factor message from the previous
//! round's factor-to-variable messages and then every factor-to-variable
//! message from those. Factor-to-variable messages are kept unnormalized;
//! variable-to-factor messages are log-normalized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_oracle::{validate_tables, Marginals, OracleError, PotentialTable};
use crate::factor_graph::{FactorGraph, GraphError};
use crate::image::Image;
use crate::instrumentation;
use crate::message_estimator::{self, EstimatorError, EstimatorParams};
use crate::numerics::{log_softmax_in_place, LogSumExpAcc};

#[derive(Debug, Error)]
pub enum BpError {
    #[error("at least one round is required")]
    NoRounds,
    #[error("table has {got} entries but the factor needs {expected}")]
    TableSize { expected: usize, got: usize },
    #[error("expected {expected} incoming messages, got {got}")]
    IncomingCount { expected: usize, got: usize },
    #[error("message has {got} entries, expected {expected}")]
    MessageWidth { expected: usize, got: usize },
    #[error("message set has {got} slots but the graph has {expected}")]
    MissingMessages { expected: usize, got: usize },
    #[error("damping must lie in [0, 1), got {0}")]
    Damping(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tables(#[from] OracleError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// All messages of one inference round, indexed by graph slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageSet {
    num_classes: usize,
    factor_to_var: Vec<f64>,
    var_to_factor: Vec<f64>,
    iteration: usize,
}

impl MessageSet {
    /// All-zero messages (uniform), iteration 0.
    pub fn zeros(graph: &FactorGraph) -> Self {
        let len = graph.num_slots() * graph.num_classes();
        MessageSet {
            num_classes: graph.num_classes(),
            factor_to_var: vec![0.0; len],
            var_to_factor: vec![0.0; len],
            iteration: 0,
        }
    }

    /// Wraps factor-to-variable messages and derives the matching
    /// normalized variable-to-factor messages.
    pub fn from_factor_messages(graph: &FactorGraph, factor_to_var: Vec<f64>, iteration: usize) -> Self {
        let k = graph.num_classes();
        let mut set = MessageSet {
            num_classes: k,
            var_to_factor: vec![0.0; factor_to_var.len()],
            factor_to_var,
            iteration,
        };
        set.refresh_var_to_factor(graph);
        set
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn num_slots(&self) -> usize {
        self.factor_to_var.len() / self.num_classes
    }

    /// `beta_{F->p}` for the edge `slot`.
    pub fn factor_to_var(&self, slot: usize) -> &[f64] {
        &self.factor_to_var[slot * self.num_classes..(slot + 1) * self.num_classes]
    }

    pub fn factor_to_var_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.factor_to_var[slot * self.num_classes..(slot + 1) * self.num_classes]
    }

    /// `beta_{p->F}` for the edge `slot`.
    pub fn var_to_factor(&self, slot: usize) -> &[f64] {
        &self.var_to_factor[slot * self.num_classes..(slot + 1) * self.num_classes]
    }

    fn refresh_var_to_factor(&mut self, graph: &FactorGraph) {
        let k = self.num_classes;
        let mut total = vec![0.0; k];
        for p in 0..graph.num_variables() {
            total.iter_mut().for_each(|v| *v = 0.0);
            for &s in graph.slots_of(p) {
                for (t, m) in total.iter_mut().zip(self.factor_to_var(s)) {
                    *t += m;
                }
            }
            for &s in graph.slots_of(p) {
                let (start, end) = (s * k, (s + 1) * k);
                for c in 0..k {
                    self.var_to_factor[start + c] = total[c] - self.factor_to_var[start + c];
                }
                log_softmax_in_place(&mut self.var_to_factor[start..end]);
            }
        }
    }

    fn check(&self, graph: &FactorGraph) -> Result<(), BpError> {
        if self.num_slots() != graph.num_slots() || self.num_classes != graph.num_classes() {
            return Err(BpError::MissingMessages { expected: graph.num_slots(), got: self.num_slots() });
        }
        Ok(())
    }
}

/// `beta_{p->F} = log_softmax( sum_{F' in F_p \ F} beta_{F'->p} )`.
pub fn variable_to_factor(msgs: &MessageSet, graph: &FactorGraph, p: usize, factor: usize) -> Result<Vec<f64>, BpError> {
    msgs.check(graph)?;
    graph.slot_of(factor, p)?;
    let mut out = vec![0.0; graph.num_classes()];
    for (&f, &s) in graph.factors_of(p).iter().zip(graph.slots_of(p)) {
        if f != factor {
            for (o, m) in out.iter_mut().zip(msgs.factor_to_var(s)) {
                *o += m;
            }
        }
    }
    log_softmax_in_place(&mut out);
    Ok(out)
}

/// `beta_{F->p}(y_p) = log sum_{y_F : y_p fixed} exp(-E_F(y_F) + sum_{q != p} beta_{q->F}(y_q))`.
///
/// `incoming` holds one message per other scope position, in scope order.
pub fn factor_to_variable_from_potentials(
    table: &PotentialTable,
    order: usize,
    num_classes: usize,
    target_pos: usize,
    incoming: &[&[f64]],
) -> Result<Vec<f64>, BpError> {
    let k = num_classes;
    let expected = k.pow(order as u32);
    if table.energies.len() != expected {
        return Err(BpError::TableSize { expected, got: table.energies.len() });
    }
    if incoming.len() + 1 != order || target_pos >= order {
        return Err(BpError::IncomingCount { expected: order.saturating_sub(1), got: incoming.len() });
    }
    if let Some(m) = incoming.iter().find(|m| m.len() != k) {
        return Err(BpError::MessageWidth { expected: k, got: m.len() });
    }
    let mut accs = vec![LogSumExpAcc::default(); k];
    let mut digits = vec![0usize; order];
    for (idx, &energy) in table.energies.iter().enumerate() {
        let mut rest = idx;
        for d in digits.iter_mut().rev() {
            *d = rest % k;
            rest /= k;
        }
        let mut value = -energy;
        let mut j = 0;
        for (pos, &y) in digits.iter().enumerate() {
            if pos != target_pos {
                value += incoming[j][y];
                j += 1;
            }
        }
        accs[digits[target_pos]].add(value);
    }
    Ok(accs.iter().map(LogSumExpAcc::value).collect())
}

/// `P(y_p) = softmax( sum_{F in F_p} beta_{F->p} )`.
pub fn beliefs_from_messages(msgs: &MessageSet, graph: &FactorGraph) -> Result<Marginals, BpError> {
    msgs.check(graph)?;
    let k = graph.num_classes();
    let mut logits = vec![0.0; graph.num_variables() * k];
    for p in 0..graph.num_variables() {
        for &s in graph.slots_of(p) {
            for (a, m) in logits[p * k..(p + 1) * k].iter_mut().zip(msgs.factor_to_var(s)) {
                *a += m;
            }
        }
    }
    Ok(Marginals::from_logits(k, &logits))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BpOptions {
    /// New factor messages are `(1 - damping) * computed + damping * old`.
    pub damping: f64,
}

/// Per-round diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub max_abs_message: f64,
    pub mean_belief_entropy: f64,
    /// Largest absolute change of any belief entry since the previous round
    /// (round 1 compares against the uniform start).
    pub max_belief_change: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BpTrace {
    pub rounds: Vec<RoundStats>,
}

impl BpTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace is plain data")
    }
}

#[derive(Debug, Clone)]
pub struct BpOutcome {
    pub marginals: Marginals,
    pub messages: MessageSet,
    pub trace: BpTrace,
}

fn mean_entropy(m: &Marginals) -> f64 {
    let total: f64 = m
        .iter()
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    total / m.num_nodes() as f64
}

/// `iterations` synchronous BP rounds from all-zero messages.
pub fn run_sync_bp(
    graph: &FactorGraph,
    tables: &[PotentialTable],
    iterations: usize,
) -> Result<BpOutcome, BpError> {
    run_sync_bp_with(graph, tables, iterations, BpOptions::default())
}

pub fn run_sync_bp_with(
    graph: &FactorGraph,
    tables: &[PotentialTable],
    iterations: usize,
    options: BpOptions,
) -> Result<BpOutcome, BpError> {
    if iterations == 0 {
        return Err(BpError::NoRounds);
    }
    if !(0.0..1.0).contains(&options.damping) {
        return Err(BpError::Damping(options.damping));
    }
    validate_tables(graph, tables)?;
    instrumentation::record_potential_bp();

    let k = graph.num_classes();
    let mut msgs = MessageSet::zeros(graph);
    let mut trace = BpTrace::default();
    let mut prev_beliefs = Marginals::uniform(graph.num_variables(), k);
    for round in 1..=iterations {
        msgs.refresh_var_to_factor(graph);
        let mut next = vec![0.0; msgs.factor_to_var.len()];
        for f in graph.factors() {
            for pos in 0..f.order() {
                let incoming: Vec<&[f64]> = (0..f.order())
                    .filter(|&q| q != pos)
                    .map(|q| msgs.var_to_factor(graph.slot(f.id, q)))
                    .collect();
                let m = factor_to_variable_from_potentials(&tables[f.id], f.order(), k, pos, &incoming)?;
                let s = graph.slot(f.id, pos);
                next[s * k..(s + 1) * k].copy_from_slice(&m);
            }
        }
        if options.damping > 0.0 {
            for (n, o) in next.iter_mut().zip(&msgs.factor_to_var) {
                *n = (1.0 - options.damping) * *n + options.damping * o;
            }
        }
        msgs.factor_to_var = next;
        msgs.iteration = round;

        let beliefs = beliefs_from_messages(&msgs, graph)?;
        let change = beliefs
            .as_slice()
            .iter()
            .zip(prev_beliefs.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        trace.rounds.push(RoundStats {
            round,
            max_abs_message: msgs.factor_to_var.iter().map(|v| v.abs()).fold(0.0, f64::max),
            mean_belief_entropy: mean_entropy(&beliefs),
            max_belief_change: change,
        });
        prev_beliefs = beliefs;
    }
    msgs.refresh_var_to_factor(graph);
    Ok(BpOutcome { marginals: prev_beliefs, messages: msgs, trace })
}

/// Estimator-driven inference: `rounds` (the estimator architecture's `T`)
/// synchronous rounds of learned messages, then beliefs.
pub fn run_estimator_inference(
    graph: &FactorGraph,
    params: &EstimatorParams,
    image: &Image,
) -> Result<Marginals, BpError> {
    Ok(message_estimator::infer(params, graph, image)?)
}
