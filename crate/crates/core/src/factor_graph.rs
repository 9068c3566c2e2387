//! Bipartite factor graphs over discrete label variables, with builders for
//! pixel grids whose pairwise connectivity is described by range boxes.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version written into serialized graph documents.
pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("grid must have at least one row and one column (got {height}x{width})")]
    EmptyGrid { height: usize, width: usize },
    #[error("number of classes must be at least 2 (got {0})")]
    TooFewClasses(usize),
    #[error("range box for `{0}` contains only the zero offset")]
    ZeroOffset(FactorType),
    #[error("range box for `{0}` is inverted")]
    InvertedRange(FactorType),
    #[error("unknown factor id {0}")]
    UnknownFactor(usize),
    #[error("variable {node} is not in the scope of factor {factor}")]
    NotInScope { node: usize, factor: usize },
    #[error("factor {factor} has an empty scope")]
    EmptyScope { factor: usize },
    #[error("factor {factor} references variable {node} but the graph has {num_variables}")]
    VariableOutOfRange {
        factor: usize,
        node: usize,
        num_variables: usize,
    },
    #[error("factor {factor} repeats variable {node} in its scope")]
    DuplicateInScope { factor: usize, node: usize },
    #[error("factor {factor} has ids out of order (expected id {expected})")]
    NonSequentialId { factor: usize, expected: usize },
    #[error("factor {factor} has type `{tag}` which is not registered with the graph")]
    UnregisteredType { factor: usize, tag: FactorType },
    #[error("unsupported graph document version {0}")]
    Version(u32),
    #[error("graph document: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Factor type tag. Every tag gets its own estimator head or potential table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum FactorType {
    Unary,
    PairwiseSurround,
    PairwiseAbove,
    PairwiseBelow,
    Custom(String),
}

impl FactorType {
    pub fn as_str(&self) -> &str {
        match self {
            FactorType::Unary => "unary",
            FactorType::PairwiseSurround => "pairwise_surround",
            FactorType::PairwiseAbove => "pairwise_above",
            FactorType::PairwiseBelow => "pairwise_below",
            FactorType::Custom(s) => s,
        }
    }
}

impl From<String> for FactorType {
    fn from(s: String) -> Self {
        match s.as_str() {
            "unary" => FactorType::Unary,
            "pairwise_surround" => FactorType::PairwiseSurround,
            "pairwise_above" => FactorType::PairwiseAbove,
            "pairwise_below" => FactorType::PairwiseBelow,
            _ => FactorType::Custom(s),
        }
    }
}

impl From<&str> for FactorType {
    fn from(s: &str) -> Self {
        FactorType::from(s.to_owned())
    }
}

impl From<FactorType> for String {
    fn from(t: FactorType) -> Self {
        t.as_str().to_owned()
    }
}

impl fmt::Display for FactorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub id: usize,
    #[serde(rename = "type")]
    pub type_tag: FactorType,
    /// Ascending variable ids for builder-made factors.
    pub scope: Vec<usize>,
}

impl Factor {
    pub fn order(&self) -> usize {
        self.scope.len()
    }
}

/// Inclusive box of grid offsets `(dx, dy)`; `dy < 0` points up. The zero
/// offset is never connected, even when the box spans it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeBox {
    pub dx_min: i32,
    pub dx_max: i32,
    pub dy_min: i32,
    pub dy_max: i32,
}

impl RangeBox {
    pub fn is_zero_only(&self) -> bool {
        self.dx_min == 0 && self.dx_max == 0 && self.dy_min == 0 && self.dy_max == 0
    }

    /// Nonzero offsets in row-major order (dy outer, dx inner).
    pub fn offsets(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (self.dy_min..=self.dy_max)
            .flat_map(move |dy| (self.dx_min..=self.dx_max).map(move |dx| (dx, dy)))
            .filter(|&o| o != (0, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseRelation {
    #[serde(rename = "type")]
    pub type_tag: FactorType,
    pub range: RangeBox,
}

/// Pairwise connectivity of a grid graph, one range box per relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectivitySpec {
    pub relations: Vec<PairwiseRelation>,
}

impl Default for ConnectivitySpec {
    /// Surround = 8-neighborhood; above/below = the 3-wide, 2-tall boxes
    /// directly above and below a node.
    fn default() -> Self {
        ConnectivitySpec {
            relations: vec![
                PairwiseRelation {
                    type_tag: FactorType::PairwiseSurround,
                    range: RangeBox { dx_min: -1, dx_max: 1, dy_min: -1, dy_max: 1 },
                },
                PairwiseRelation {
                    type_tag: FactorType::PairwiseAbove,
                    range: RangeBox { dx_min: -1, dx_max: 1, dy_min: -2, dy_max: -1 },
                },
                PairwiseRelation {
                    type_tag: FactorType::PairwiseBelow,
                    range: RangeBox { dx_min: -1, dx_max: 1, dy_min: 1, dy_max: 2 },
                },
            ],
        }
    }
}

impl ConnectivitySpec {
    /// No pairwise factors at all: the unary-only ablation.
    pub fn unary_only() -> Self {
        ConnectivitySpec { relations: Vec::new() }
    }

    /// 4-neighborhood under the surround tag, as the union of a horizontal
    /// and a vertical box (duplicate pairs collapse).
    pub fn four_neighborhood() -> Self {
        let tag = FactorType::PairwiseSurround;
        ConnectivitySpec {
            relations: vec![
                PairwiseRelation {
                    type_tag: tag.clone(),
                    range: RangeBox { dx_min: -1, dx_max: 1, dy_min: 0, dy_max: 0 },
                },
                PairwiseRelation {
                    type_tag: tag,
                    range: RangeBox { dx_min: 0, dx_max: 0, dy_min: -1, dy_max: 1 },
                },
            ],
        }
    }

    /// Distinct pairwise tags in first-appearance order.
    pub fn pairwise_types(&self) -> Vec<FactorType> {
        let mut out: Vec<FactorType> = Vec::new();
        for r in &self.relations {
            if !out.contains(&r.type_tag) {
                out.push(r.type_tag.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

/// Bipartite graph of `num_variables` label variables and typed factors.
///
/// Besides the factor list the graph keeps, for every variable `p`, the
/// ordered list of factors touching it, and a flat "slot" numbering of the
/// (factor, scope position) edges. Message sets index their vectors by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    num_variables: usize,
    num_classes: usize,
    factor_types: Vec<FactorType>,
    factors: Vec<Factor>,
    grid: Option<GridShape>,
    connectivity: Option<ConnectivitySpec>,
    var_factors: Vec<Vec<usize>>,
    var_slots: Vec<Vec<usize>>,
    slot_offsets: Vec<usize>,
    slot_factor: Vec<usize>,
    slot_var: Vec<usize>,
    /// Position of each slot's factor type in `factor_types`.
    slot_type: Vec<usize>,
    /// Other slots of the same factor, flattened: slot `s` owns
    /// `comp_slot[comp_start[s]..comp_start[s + 1]]`.
    comp_start: Vec<usize>,
    comp_slot: Vec<usize>,
    comp_var: Vec<usize>,
}

impl FactorGraph {
    /// Builds a graph from an explicit factor list. Factor ids must be
    /// `0..factors.len()` in order.
    pub fn from_factors(
        num_variables: usize,
        num_classes: usize,
        factor_types: Vec<FactorType>,
        factors: Vec<Factor>,
    ) -> Result<Self, GraphError> {
        Self::assemble(num_variables, num_classes, factor_types, factors, None, None)
    }

    fn assemble(
        num_variables: usize,
        num_classes: usize,
        factor_types: Vec<FactorType>,
        factors: Vec<Factor>,
        grid: Option<GridShape>,
        connectivity: Option<ConnectivitySpec>,
    ) -> Result<Self, GraphError> {
        if num_classes < 2 {
            return Err(GraphError::TooFewClasses(num_classes));
        }
        let mut var_factors = vec![Vec::new(); num_variables];
        let mut var_slots = vec![Vec::new(); num_variables];
        let mut slot_offsets = Vec::with_capacity(factors.len());
        let mut slot_factor = Vec::new();
        let mut slot_var = Vec::new();
        for (expected, f) in factors.iter().enumerate() {
            if f.id != expected {
                return Err(GraphError::NonSequentialId { factor: f.id, expected });
            }
            if f.scope.is_empty() {
                return Err(GraphError::EmptyScope { factor: f.id });
            }
            if !factor_types.contains(&f.type_tag) {
                return Err(GraphError::UnregisteredType {
                    factor: f.id,
                    tag: f.type_tag.clone(),
                });
            }
            slot_offsets.push(slot_factor.len());
            for (i, &v) in f.scope.iter().enumerate() {
                if v >= num_variables {
                    return Err(GraphError::VariableOutOfRange {
                        factor: f.id,
                        node: v,
                        num_variables,
                    });
                }
                if f.scope[..i].contains(&v) {
                    return Err(GraphError::DuplicateInScope { factor: f.id, node: v });
                }
                var_factors[v].push(f.id);
                var_slots[v].push(slot_factor.len());
                slot_factor.push(f.id);
                slot_var.push(v);
            }
        }
        let type_pos: Vec<usize> = factors
            .iter()
            .map(|f| factor_types.iter().position(|t| *t == f.type_tag).expect("checked above"))
            .collect();
        let slots = slot_factor.len();
        let mut slot_type = Vec::with_capacity(slots);
        let mut comp_start = Vec::with_capacity(slots + 1);
        let mut comp_slot = Vec::new();
        for s in 0..slots {
            let f = slot_factor[s];
            slot_type.push(type_pos[f]);
            comp_start.push(comp_slot.len());
            let first = slot_offsets[f];
            comp_slot.extend((first..first + factors[f].scope.len()).filter(|&q| q != s));
        }
        comp_start.push(comp_slot.len());
        let comp_var = comp_slot.iter().map(|&q| slot_var[q]).collect();
        Ok(FactorGraph {
            num_variables,
            num_classes,
            factor_types,
            factors,
            grid,
            connectivity,
            var_factors,
            var_slots,
            slot_offsets,
            slot_factor,
            slot_var,
            slot_type,
            comp_start,
            comp_slot,
            comp_var,
        })
    }

    pub fn num_variables(&self) -> usize {
        self.num_variables
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, id: usize) -> Result<&Factor, GraphError> {
        self.factors.get(id).ok_or(GraphError::UnknownFactor(id))
    }

    pub fn factor_types(&self) -> &[FactorType] {
        &self.factor_types
    }

    pub fn grid(&self) -> Option<GridShape> {
        self.grid
    }

    pub fn connectivity(&self) -> Option<&ConnectivitySpec> {
        self.connectivity.as_ref()
    }

    /// Factors touching variable `p`, ascending by id.
    pub fn factors_of(&self, p: usize) -> &[usize] {
        &self.var_factors[p]
    }

    /// Message slots of the edges incident to `p`, parallel to `factors_of(p)`.
    pub fn slots_of(&self, p: usize) -> &[usize] {
        &self.var_slots[p]
    }

    pub fn num_slots(&self) -> usize {
        self.slot_factor.len()
    }

    /// Slot of the edge between factor `f` and the variable at scope position `pos`.
    pub fn slot(&self, f: usize, pos: usize) -> usize {
        self.slot_offsets[f] + pos
    }

    /// Slot of the edge (f, p), if `p` is in the scope of `f`.
    pub fn slot_of(&self, f: usize, p: usize) -> Result<usize, GraphError> {
        let factor = self.factor(f)?;
        factor
            .scope
            .iter()
            .position(|&v| v == p)
            .map(|pos| self.slot_offsets[f] + pos)
            .ok_or(GraphError::NotInScope { node: p, factor: f })
    }

    pub fn slot_factor(&self, slot: usize) -> usize {
        self.slot_factor[slot]
    }

    pub fn slot_variable(&self, slot: usize) -> usize {
        self.slot_var[slot]
    }

    /// Index into `factor_types()` of the factor owning `slot`.
    pub fn slot_type_index(&self, slot: usize) -> usize {
        self.slot_type[slot]
    }

    /// The other slots of the factor owning `slot`, in scope order.
    pub fn complement_slots(&self, slot: usize) -> &[usize] {
        &self.comp_slot[self.comp_start[slot]..self.comp_start[slot + 1]]
    }

    /// Variables of `complement_slots(slot)`.
    pub fn complement_variables(&self, slot: usize) -> &[usize] {
        &self.comp_var[self.comp_start[slot]..self.comp_start[slot + 1]]
    }

    pub fn factor_scope(&self, factor_id: usize) -> Result<&[usize], GraphError> {
        Ok(&self.factor(factor_id)?.scope)
    }

    /// Scope of `factor_id` without `p`, in stored order.
    pub fn neighbor_complement(&self, factor_id: usize, p: usize) -> Result<Vec<usize>, GraphError> {
        let scope = self.factor_scope(factor_id)?;
        if !scope.contains(&p) {
            return Err(GraphError::NotInScope { node: p, factor: factor_id });
        }
        Ok(scope.iter().copied().filter(|&v| v != p).collect())
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            version: GRAPH_FORMAT_VERSION,
            num_classes: self.num_classes,
            num_variables: self.num_variables,
            grid: self.grid,
            connectivity: self.connectivity.clone(),
            factor_types: self.factor_types.clone(),
            factors: self.factors.clone(),
        }
    }

    pub fn from_document(doc: GraphDocument) -> Result<Self, GraphError> {
        if doc.version != GRAPH_FORMAT_VERSION {
            return Err(GraphError::Version(doc.version));
        }
        Self::assemble(
            doc.num_variables,
            doc.num_classes,
            doc.factor_types,
            doc.factors,
            doc.grid,
            doc.connectivity,
        )
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Serialized form of a [`FactorGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub version: u32,
    pub num_classes: usize,
    pub num_variables: usize,
    #[serde(default)]
    pub grid: Option<GridShape>,
    #[serde(default)]
    pub connectivity: Option<ConnectivitySpec>,
    pub factor_types: Vec<FactorType>,
    pub factors: Vec<Factor>,
}

/// Builds a `height x width` grid graph: one unary factor per node (factor id
/// equals node id), then the pairwise factors of each relation in `spec`
/// order. Node ids are row-major.
pub fn build_grid_graph(
    height: usize,
    width: usize,
    num_classes: usize,
    spec: &ConnectivitySpec,
) -> Result<FactorGraph, GraphError> {
    if height == 0 || width == 0 {
        return Err(GraphError::EmptyGrid { height, width });
    }
    if num_classes < 2 {
        return Err(GraphError::TooFewClasses(num_classes));
    }
    for r in &spec.relations {
        if r.range.is_zero_only() {
            return Err(GraphError::ZeroOffset(r.type_tag.clone()));
        }
        if r.range.dx_min > r.range.dx_max || r.range.dy_min > r.range.dy_max {
            return Err(GraphError::InvertedRange(r.type_tag.clone()));
        }
    }

    let n = height * width;
    let mut factors: Vec<Factor> = (0..n)
        .map(|p| Factor { id: p, type_tag: FactorType::Unary, scope: vec![p] })
        .collect();
    let mut factor_types = vec![FactorType::Unary];
    factor_types.extend(spec.pairwise_types());

    let mut seen: HashSet<(usize, usize, FactorType)> = HashSet::new();
    for relation in &spec.relations {
        for p in 0..n {
            let (py, px) = ((p / width) as i64, (p % width) as i64);
            for (dx, dy) in relation.range.offsets() {
                let (qx, qy) = (px + dx as i64, py + dy as i64);
                if qx < 0 || qy < 0 || qx >= width as i64 || qy >= height as i64 {
                    continue;
                }
                let q = qy as usize * width + qx as usize;
                let (a, b) = if p < q { (p, q) } else { (q, p) };
                if seen.insert((a, b, relation.type_tag.clone())) {
                    factors.push(Factor {
                        id: factors.len(),
                        type_tag: relation.type_tag.clone(),
                        scope: vec![a, b],
                    });
                }
            }
        }
    }

    FactorGraph::assemble(
        n,
        num_classes,
        factor_types,
        factors,
        Some(GridShape { height, width }),
        Some(spec.clone()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count_type(g: &FactorGraph, t: &FactorType) -> usize {
        g.factors().iter().filter(|f| &f.type_tag == t).count()
    }

    #[test]
    fn three_by_three_four_neighborhood() {
        let g = build_grid_graph(3, 3, 3, &ConnectivitySpec::four_neighborhood()).unwrap();
        assert_eq!(count_type(&g, &FactorType::Unary), 9);
        assert_eq!(count_type(&g, &FactorType::PairwiseSurround), 12);
        assert_eq!(g.factors().len(), 21);
    }

    #[test]
    fn single_cell_has_no_pairwise() {
        let g = build_grid_graph(1, 1, 2, &ConnectivitySpec::default()).unwrap();
        assert_eq!(g.factors().len(), 1);
        assert_eq!(g.factor_scope(0).unwrap(), &[0]);
    }

    #[test]
    fn one_by_two_shares_pairwise() {
        let spec = ConnectivitySpec {
            relations: vec![PairwiseRelation {
                type_tag: FactorType::PairwiseSurround,
                range: RangeBox { dx_min: 1, dx_max: 1, dy_min: 0, dy_max: 0 },
            }],
        };
        let g = build_grid_graph(1, 2, 2, &spec).unwrap();
        assert_eq!(g.factors().len(), 3);
        assert_eq!(g.factors_of(0), &[0, 2]);
        assert_eq!(g.factors_of(1), &[1, 2]);
        assert_eq!(g.factor_scope(2).unwrap(), &[0, 1]);
    }

    #[test]
    fn scope_queries() {
        let g = build_grid_graph(3, 3, 2, &ConnectivitySpec::four_neighborhood()).unwrap();
        assert_eq!(g.factor_scope(5).unwrap(), &[5]);
        let f = g
            .factors()
            .iter()
            .find(|f| f.scope == vec![2usize, 5])
            .map(|f| f.id)
            .unwrap();
        assert_eq!(g.neighbor_complement(f, 2).unwrap(), vec![5]);
        assert_eq!(g.neighbor_complement(5, 5).unwrap(), Vec::<usize>::new());
        assert!(matches!(
            g.neighbor_complement(f, 7),
            Err(GraphError::NotInScope { node: 7, .. })
        ));
        assert!(matches!(g.factor_scope(10_000), Err(GraphError::UnknownFactor(10_000))));
    }

    #[test]
    fn pair_scope_example() {
        let g = FactorGraph::from_factors(
            4,
            2,
            vec![FactorType::PairwiseSurround],
            vec![Factor { id: 0, type_tag: FactorType::PairwiseSurround, scope: vec![2, 3] }],
        )
        .unwrap();
        assert_eq!(g.factor_scope(0).unwrap(), &[2, 3]);
        assert_eq!(g.neighbor_complement(0, 2).unwrap(), vec![3]);
    }

    #[test]
    fn rejects_bad_input() {
        let zero = ConnectivitySpec {
            relations: vec![PairwiseRelation {
                type_tag: FactorType::PairwiseSurround,
                range: RangeBox { dx_min: 0, dx_max: 0, dy_min: 0, dy_max: 0 },
            }],
        };
        assert!(matches!(build_grid_graph(2, 2, 2, &zero), Err(GraphError::ZeroOffset(_))));
        assert!(matches!(
            build_grid_graph(0, 3, 2, &ConnectivitySpec::default()),
            Err(GraphError::EmptyGrid { .. })
        ));
        assert!(matches!(
            build_grid_graph(2, 2, 1, &ConnectivitySpec::default()),
            Err(GraphError::TooFewClasses(1))
        ));
        let dup = FactorGraph::from_factors(
            3,
            2,
            vec![FactorType::PairwiseSurround],
            vec![Factor { id: 0, type_tag: FactorType::PairwiseSurround, scope: vec![1, 1] }],
        );
        assert!(matches!(dup, Err(GraphError::DuplicateInScope { .. })));
        let unregistered = FactorGraph::from_factors(
            3,
            2,
            vec![FactorType::Unary],
            vec![Factor { id: 0, type_tag: FactorType::PairwiseAbove, scope: vec![0, 1] }],
        );
        assert!(matches!(unregistered, Err(GraphError::UnregisteredType { .. })));
    }

    #[test]
    fn default_spec_surround_matches_lattice_count() {
        // 8-neighborhood on h x w: horizontal + vertical + two diagonal families.
        let (h, w) = (4, 5);
        let g = build_grid_graph(h, w, 2, &ConnectivitySpec::default()).unwrap();
        let expected = h * (w - 1) + (h - 1) * w + 2 * (h - 1) * (w - 1);
        assert_eq!(count_type(&g, &FactorType::PairwiseSurround), expected);
        // Above and below relate the same unordered pairs.
        let above: HashSet<_> = g
            .factors()
            .iter()
            .filter(|f| f.type_tag == FactorType::PairwiseAbove)
            .map(|f| f.scope.clone())
            .collect();
        let below: HashSet<_> = g
            .factors()
            .iter()
            .filter(|f| f.type_tag == FactorType::PairwiseBelow)
            .map(|f| f.scope.clone())
            .collect();
        assert_eq!(above, below);
    }

    fn check_structure(g: &FactorGraph) {
        let lhs: usize = (0..g.num_variables()).map(|p| g.factors_of(p).len()).sum();
        let rhs: usize = g.factors().iter().map(Factor::order).sum();
        assert_eq!(lhs, rhs);
        assert_eq!(rhs, g.num_slots());
        for f in g.factors() {
            assert!(f.scope.windows(2).all(|w| w[0] < w[1]));
            for (pos, &p) in f.scope.iter().enumerate() {
                assert!(g.factors_of(p).contains(&f.id));
                let s = g.slot(f.id, pos);
                assert_eq!(g.slot_factor(s), f.id);
                assert_eq!(g.slot_variable(s), p);
            }
        }
        for p in 0..g.num_variables() {
            for (&f, &s) in g.factors_of(p).iter().zip(g.slots_of(p)) {
                assert!(g.factor_scope(f).unwrap().contains(&p));
                assert_eq!(g.slot_variable(s), p);
            }
        }
    }

    proptest! {
        #[test]
        fn grid_invariants(h in 1usize..6, w in 1usize..6, k in 2usize..5,
                           ext in 1i32..3, up in 1i32..3) {
            let spec = ConnectivitySpec {
                relations: vec![
                    PairwiseRelation {
                        type_tag: FactorType::PairwiseSurround,
                        range: RangeBox { dx_min: -ext, dx_max: ext, dy_min: -ext, dy_max: ext },
                    },
                    PairwiseRelation {
                        type_tag: FactorType::PairwiseAbove,
                        range: RangeBox { dx_min: -1, dx_max: 1, dy_min: -up, dy_max: -1 },
                    },
                ],
            };
            let g = build_grid_graph(h, w, k, &spec).unwrap();
            check_structure(&g);

            // Symmetric box: count unordered lattice pairs by brute force.
            let mut pairs = 0;
            for a in 0..h * w {
                for b in a + 1..h * w {
                    let dy = (b / w) as i32 - (a / w) as i32;
                    let dx = (b % w) as i32 - (a % w) as i32;
                    if dx.abs() <= ext && dy.abs() <= ext {
                        pairs += 1;
                    }
                }
            }
            prop_assert_eq!(count_type(&g, &FactorType::PairwiseSurround), pairs);

            let back = FactorGraph::from_json(&g.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
