//! Exact inference by exhaustive enumeration of joint labelings.
//!
//! Only usable on tiny graphs; every approximate path in the crate is
//! checked against it. Joint states are visited depth-first in
//! lexicographic order (variable 0 most significant). The energy of a
//! labeling is accumulated per prefix: factors are grouped by the largest
//! variable in their scope and added once that variable is fixed, so every
//! state's energy is the same fixed-order sum regardless of visit path.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_graph::{FactorGraph, FactorType};
use crate::instrumentation;
use crate::numerics::LogSumExpAcc;

/// Default cap on the number of enumerated joint states.
pub const DEFAULT_MAX_STATES: u64 = 1 << 24;

pub const POTENTIALS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{states} joint states exceed the enumeration limit of {limit}")]
    LimitExceeded { states: f64, limit: u64 },
    #[error("no potential table for factor {0}")]
    MissingTable(usize),
    #[error("table for factor {factor} has {got} entries, expected {expected}")]
    TableSize { factor: usize, got: usize, expected: usize },
    #[error("table for factor {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("no tied table for factor type `{0}`")]
    MissingTiedTable(FactorType),
    #[error("unsupported potentials document version {0}")]
    Version(u32),
    #[error("potentials document: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Energies of one factor, one per joint assignment of its scope in
/// row-major order (first scope variable most significant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialTable {
    pub factor_id: usize,
    pub energies: Vec<f64>,
}

impl PotentialTable {
    pub fn new(factor_id: usize, energies: Vec<f64>) -> Self {
        PotentialTable { factor_id, energies }
    }
}

/// Row-major index of the joint assignment `labels[scope[..]]`.
#[inline]
pub fn joint_index(scope: &[usize], labels: &[usize], num_classes: usize) -> usize {
    scope.iter().fold(0, |acc, &v| acc * num_classes + labels[v])
}

/// Checks that `tables[f]` exists, belongs to factor `f`, has `K^order`
/// finite entries.
pub fn validate_tables(graph: &FactorGraph, tables: &[PotentialTable]) -> Result<(), OracleError> {
    let k = graph.num_classes();
    for f in graph.factors() {
        let table = tables
            .get(f.id)
            .filter(|t| t.factor_id == f.id)
            .ok_or(OracleError::MissingTable(f.id))?;
        let expected = k.pow(f.order() as u32);
        if table.energies.len() != expected {
            return Err(OracleError::TableSize {
                factor: f.id,
                got: table.energies.len(),
                expected,
            });
        }
        if table.energies.iter().any(|e| !e.is_finite()) {
            return Err(OracleError::NonFinite(f.id));
        }
    }
    Ok(())
}

/// Expands one shared table per factor type into per-factor tables.
pub fn expand_tied_tables(
    graph: &FactorGraph,
    tied: &BTreeMap<FactorType, Vec<f64>>,
) -> Result<Vec<PotentialTable>, OracleError> {
    graph
        .factors()
        .iter()
        .map(|f| {
            tied.get(&f.type_tag)
                .map(|e| PotentialTable::new(f.id, e.clone()))
                .ok_or_else(|| OracleError::MissingTiedTable(f.type_tag.clone()))
        })
        .collect()
}

/// Total energy `E(y) = sum_F E_F(y_F)`.
pub fn labeling_energy(graph: &FactorGraph, tables: &[PotentialTable], labels: &[usize]) -> f64 {
    let k = graph.num_classes();
    graph
        .factors()
        .iter()
        .map(|f| tables[f.id].energies[joint_index(&f.scope, labels, k)])
        .sum()
}

/// Per-variable label distributions, stored flat (`num_nodes x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    num_classes: usize,
    probs: Vec<f64>,
}

impl Marginals {
    pub fn new(num_classes: usize, probs: Vec<f64>) -> Self {
        assert!(num_classes > 0 && probs.len() % num_classes == 0);
        Marginals { num_classes, probs }
    }

    /// Row-wise softmax of unnormalized log scores.
    pub fn from_logits(num_classes: usize, logits: &[f64]) -> Self {
        let probs = logits
            .chunks(num_classes)
            .flat_map(crate::numerics::softmax)
            .collect();
        Marginals { num_classes, probs }
    }

    pub fn uniform(num_nodes: usize, num_classes: usize) -> Self {
        Marginals { num_classes, probs: vec![1.0 / num_classes as f64; num_nodes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_nodes(&self) -> usize {
        self.probs.len() / self.num_classes
    }

    pub fn node(&self, p: usize) -> &[f64] {
        &self.probs[p * self.num_classes..(p + 1) * self.num_classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.num_classes)
    }
}

/// Exact marginals of every factor's scope, parallel to `graph.factors()`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMarginals {
    pub tables: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactOracle {
    pub max_states: u64,
}

impl Default for ExactOracle {
    fn default() -> Self {
        ExactOracle { max_states: DEFAULT_MAX_STATES }
    }
}

trait StateVisitor: Send + Sized {
    fn visit(&mut self, labels: &[usize], neg_energy: f64);
    fn merge(&mut self, later: Self);
}

struct PartitionVisitor(LogSumExpAcc);

impl StateVisitor for PartitionVisitor {
    fn visit(&mut self, _: &[usize], neg_energy: f64) {
        self.0.add(neg_energy);
    }
    fn merge(&mut self, later: Self) {
        self.0.merge(&later.0);
    }
}

struct MarginalVisitor {
    num_classes: usize,
    z: LogSumExpAcc,
    per_label: Vec<LogSumExpAcc>,
}

impl StateVisitor for MarginalVisitor {
    fn visit(&mut self, labels: &[usize], neg_energy: f64) {
        self.z.add(neg_energy);
        for (p, &y) in labels.iter().enumerate() {
            self.per_label[p * self.num_classes + y].add(neg_energy);
        }
    }
    fn merge(&mut self, later: Self) {
        self.z.merge(&later.z);
        for (a, b) in self.per_label.iter_mut().zip(&later.per_label) {
            a.merge(b);
        }
    }
}

struct FactorMarginalVisitor<'g> {
    graph: &'g FactorGraph,
    z: LogSumExpAcc,
    per_entry: Vec<Vec<LogSumExpAcc>>,
}

impl StateVisitor for FactorMarginalVisitor<'_> {
    fn visit(&mut self, labels: &[usize], neg_energy: f64) {
        self.z.add(neg_energy);
        let k = self.graph.num_classes();
        for (f, acc) in self.graph.factors().iter().zip(self.per_entry.iter_mut()) {
            acc[joint_index(&f.scope, labels, k)].add(neg_energy);
        }
    }
    fn merge(&mut self, later: Self) {
        self.z.merge(&later.z);
        for (a, b) in self.per_entry.iter_mut().zip(&later.per_entry) {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        }
    }
}

struct MapVisitor {
    best: Option<(f64, Vec<usize>)>,
}

impl StateVisitor for MapVisitor {
    fn visit(&mut self, labels: &[usize], neg_energy: f64) {
        // Strict comparison keeps the first (lexicographically smallest) minimizer.
        match &self.best {
            Some((best, _)) if neg_energy <= *best => {}
            _ => self.best = Some((neg_energy, labels.to_vec())),
        }
    }
    fn merge(&mut self, later: Self) {
        if let Some((e, l)) = later.best {
            match &self.best {
                Some((best, _)) if e <= *best => {}
                _ => self.best = Some((e, l)),
            }
        }
    }
}

impl ExactOracle {
    pub fn new(max_states: u64) -> Self {
        ExactOracle { max_states }
    }

    fn check_limit(&self, graph: &FactorGraph) -> Result<(), OracleError> {
        let states = (graph.num_classes() as f64).powi(graph.num_variables() as i32);
        if states > self.max_states as f64 {
            return Err(OracleError::LimitExceeded { states, limit: self.max_states });
        }
        Ok(())
    }

    /// Runs `make()` visitors over fixed chunks of the state space in
    /// parallel and merges them in lexicographic chunk order, so results do
    /// not depend on the worker count.
    fn enumerate<V, M>(&self, graph: &FactorGraph, tables: &[PotentialTable], make: M) -> Result<V, OracleError>
    where
        V: StateVisitor,
        M: Fn() -> V + Sync,
    {
        self.check_limit(graph)?;
        validate_tables(graph, tables)?;
        instrumentation::record_exact_inference();

        let n = graph.num_variables();
        let k = graph.num_classes();
        // closing[v]: factors whose largest scope variable is v.
        let mut closing: Vec<Vec<usize>> = vec![Vec::new(); n];
        for f in graph.factors() {
            let last = *f.scope.iter().max().expect("non-empty scope");
            closing[last].push(f.id);
        }

        let mut prefix_len = 0;
        let mut chunks = 1usize;
        while prefix_len < n && chunks < 256 {
            prefix_len += 1;
            chunks *= k;
        }

        let parts: Vec<V> = (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut visitor = make();
                let mut labels = vec![0usize; n];
                let mut rest = chunk;
                for v in (0..prefix_len).rev() {
                    labels[v] = rest % k;
                    rest /= k;
                }
                let mut partial = vec![0.0f64; n + 1];
                let close = |v: usize, labels: &[usize], partial: &mut [f64]| {
                    let mut e = partial[v];
                    for &f in &closing[v] {
                        let factor = &graph.factors()[f];
                        e += tables[f].energies[joint_index(&factor.scope, labels, k)];
                    }
                    partial[v + 1] = e;
                };
                for v in 0..prefix_len {
                    close(v, &labels, &mut partial);
                }
                if prefix_len == n {
                    visitor.visit(&labels, -partial[n]);
                    return visitor;
                }
                // Depth-first odometer over the free variables.
                let mut depth = prefix_len;
                loop {
                    while depth < n {
                        close(depth, &labels, &mut partial);
                        depth += 1;
                    }
                    visitor.visit(&labels, -partial[n]);
                    // Advance the least significant free variable with carry.
                    let mut v = n;
                    loop {
                        if v == prefix_len {
                            return visitor;
                        }
                        v -= 1;
                        labels[v] += 1;
                        if labels[v] < k {
                            break;
                        }
                        labels[v] = 0;
                    }
                    depth = v;
                }
            })
            .collect();

        let mut iter = parts.into_iter();
        let mut acc = iter.next().expect("at least one chunk");
        for part in iter {
            acc.merge(part);
        }
        Ok(acc)
    }

    /// `log sum_y exp(-E(y))`.
    pub fn log_partition(&self, graph: &FactorGraph, tables: &[PotentialTable]) -> Result<f64, OracleError> {
        let v = self.enumerate(graph, tables, || PartitionVisitor(LogSumExpAcc::default()))?;
        Ok(v.0.value())
    }

    pub fn marginals(&self, graph: &FactorGraph, tables: &[PotentialTable]) -> Result<Marginals, OracleError> {
        let k = graph.num_classes();
        let n = graph.num_variables();
        let v = self.enumerate(graph, tables, || MarginalVisitor {
            num_classes: k,
            z: LogSumExpAcc::default(),
            per_label: vec![LogSumExpAcc::default(); n * k],
        })?;
        let log_z = v.z.value();
        let mut probs: Vec<f64> = v.per_label.iter().map(|a| (a.value() - log_z).exp()).collect();
        // Renormalize away the last-ulp drift of exp().
        for row in probs.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Ok(Marginals::new(k, probs))
    }

    /// Marginals of every factor scope plus `log Z`.
    pub fn factor_marginals(
        &self,
        graph: &FactorGraph,
        tables: &[PotentialTable],
    ) -> Result<(FactorMarginals, f64), OracleError> {
        let k = graph.num_classes();
        let v = self.enumerate(graph, tables, || FactorMarginalVisitor {
            graph,
            z: LogSumExpAcc::default(),
            per_entry: graph
                .factors()
                .iter()
                .map(|f| vec![LogSumExpAcc::default(); k.pow(f.order() as u32)])
                .collect(),
        })?;
        let log_z = v.z.value();
        let tables = v
            .per_entry
            .iter()
            .map(|accs| accs.iter().map(|a| (a.value() - log_z).exp()).collect())
            .collect();
        Ok((FactorMarginals { tables }, log_z))
    }

    /// Minimum-energy labeling; ties go to the lexicographically smallest.
    pub fn map(&self, graph: &FactorGraph, tables: &[PotentialTable]) -> Result<Vec<usize>, OracleError> {
        let v = self.enumerate(graph, tables, || MapVisitor { best: None })?;
        Ok(v.best.expect("non-empty state space").1)
    }
}

pub fn exact_log_partition(graph: &FactorGraph, tables: &[PotentialTable]) -> Result<f64, OracleError> {
    ExactOracle::default().log_partition(graph, tables)
}

pub fn exact_marginals(graph: &FactorGraph, tables: &[PotentialTable]) -> Result<Marginals, OracleError> {
    ExactOracle::default().marginals(graph, tables)
}

pub fn exact_map(graph: &FactorGraph, tables: &[PotentialTable]) -> Result<Vec<usize>, OracleError> {
    ExactOracle::default().map(graph, tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialsDocument {
    pub version: u32,
    pub num_classes: usize,
    pub tables: Vec<PotentialTable>,
}

pub fn save_potentials(path: &Path, num_classes: usize, tables: &[PotentialTable]) -> Result<(), OracleError> {
    let doc = PotentialsDocument {
        version: POTENTIALS_FORMAT_VERSION,
        num_classes,
        tables: tables.to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Loads tables and validates them against `graph`.
pub fn load_potentials(path: &Path, graph: &FactorGraph) -> Result<Vec<PotentialTable>, OracleError> {
    let doc: PotentialsDocument = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.version != POTENTIALS_FORMAT_VERSION {
        return Err(OracleError::Version(doc.version));
    }
    validate_tables(graph, &doc.tables)?;
    Ok(doc.tables)
}
