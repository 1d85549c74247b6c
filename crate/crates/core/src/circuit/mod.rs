//! Layered probabilistic circuits that exactly respect an md-vtree.
//!
//! A circuit stores one layer per vtree node. Layers at internal vtree nodes
//! are vectors of sum nodes wired by a sparse weight tensor over pairs of
//! child-layer nodes (the binary products are implicit in the tensor). Layers
//! at leaf vtree nodes are vectors of sum nodes mixing over leaf terms, where
//! a term is a product of single-variable factors covering the leaf scope.

pub mod raw;

use crate::error::{Error, Result};
use crate::label::Label;
use crate::mdvtree::MdVtree;
use crate::vars::{Assignment, DomainIndexer, VarId, VarSet};
use crate::vtree::VtreeNodeId;
use std::sync::atomic::{AtomicU64, Ordering};

/// Weights with magnitude below this are treated as exact zeros at load time,
/// so support is well-defined.
pub const WEIGHT_CLAMP: f64 = 1e-300;

/// Default cap on brute-force support enumeration (total assignments).
pub const DEFAULT_SUPPORT_BOUND: usize = 1 << 20;

static LAYER_ALLOCS: AtomicU64 = AtomicU64::new(0);

/// Number of layers constructed so far, across the process. Analyses that
/// promise not to materialize circuits are checked against this counter.
pub fn layer_alloc_count() -> u64 {
    LAYER_ALLOCS.load(Ordering::Relaxed)
}

/// A single-variable leaf function.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafFunction {
    Categorical { var: VarId, weights: Vec<f64> },
    Indicator { var: VarId, state: usize },
    ConstantOne { var: VarId },
}

impl LeafFunction {
    pub fn var(&self) -> VarId {
        match *self {
            LeafFunction::Categorical { var, .. }
            | LeafFunction::Indicator { var, .. }
            | LeafFunction::ConstantOne { var } => var,
        }
    }

    pub fn eval(&self, state: usize) -> f64 {
        match self {
            LeafFunction::Categorical { weights, .. } => weights[state],
            LeafFunction::Indicator { state: s, .. } => {
                if *s == state {
                    1.0
                } else {
                    0.0
                }
            }
            LeafFunction::ConstantOne { .. } => 1.0,
        }
    }

    /// Sum over all states of the variable.
    pub fn marginal(&self, card: usize) -> f64 {
        match self {
            LeafFunction::Categorical { weights, .. } => weights.iter().sum(),
            LeafFunction::Indicator { .. } => 1.0,
            LeafFunction::ConstantOne { .. } => card as f64,
        }
    }

    /// Restricted elementwise power (0 stays 0).
    pub fn pow(&self, alpha: f64) -> LeafFunction {
        match self {
            LeafFunction::Categorical { var, weights } => LeafFunction::Categorical {
                var: *var,
                weights: weights
                    .iter()
                    .map(|&w| if w == 0.0 { 0.0 } else { w.powf(alpha) })
                    .collect(),
            },
            other => other.clone(),
        }
    }

    pub fn weights_vec(&self, card: usize) -> Vec<f64> {
        match self {
            LeafFunction::Categorical { weights, .. } => weights.clone(),
            LeafFunction::Indicator { state, .. } => {
                let mut w = vec![0.0; card];
                w[*state] = 1.0;
                w
            }
            LeafFunction::ConstantOne { .. } => vec![1.0; card],
        }
    }
}

/// A product of single-variable factors over distinct variables: one child of
/// a leaf-layer sum node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LeafTerm {
    pub factors: Vec<LeafFunction>,
}

impl LeafTerm {
    pub fn new(mut factors: Vec<LeafFunction>) -> LeafTerm {
        factors.sort_by_key(|f| f.var());
        LeafTerm { factors }
    }

    pub fn vars(&self) -> VarSet {
        self.factors.iter().map(|f| f.var()).collect()
    }

    pub fn factor(&self, var: VarId) -> Option<&LeafFunction> {
        self.factors.iter().find(|f| f.var() == var)
    }
}

/// One sparse mixing entry of a leaf layer: sum `sum` has child term `term`
/// with weight `weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixEntry {
    pub sum: usize,
    pub term: usize,
    pub weight: f64,
}

/// One sparse tensor entry of an internal layer: sum `node` has the implicit
/// product of left child `left` and right child `right` with weight `weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightEntry {
    pub node: usize,
    pub left: usize,
    pub right: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Leaf {
        num_nodes: usize,
        terms: Vec<LeafTerm>,
        mix: Vec<MixEntry>,
    },
    Internal {
        num_nodes: usize,
        weights: Vec<WeightEntry>,
    },
}

impl Layer {
    pub fn leaf(num_nodes: usize, terms: Vec<LeafTerm>, mix: Vec<MixEntry>) -> Layer {
        LAYER_ALLOCS.fetch_add(1, Ordering::Relaxed);
        let mix = mix
            .into_iter()
            .map(|mut e| {
                if e.weight.abs() < WEIGHT_CLAMP {
                    e.weight = 0.0;
                }
                e
            })
            .filter(|e| e.weight != 0.0)
            .collect();
        Layer::Leaf { num_nodes, terms, mix }
    }

    pub fn internal(num_nodes: usize, weights: Vec<WeightEntry>) -> Layer {
        LAYER_ALLOCS.fetch_add(1, Ordering::Relaxed);
        let weights = weights
            .into_iter()
            .map(|mut e| {
                if e.weight.abs() < WEIGHT_CLAMP {
                    e.weight = 0.0;
                }
                e
            })
            .filter(|e| e.weight != 0.0)
            .collect();
        Layer::Internal { num_nodes, weights }
    }

    /// Like [`Layer::internal`] but keeping explicit zero entries (used by the
    /// log construction, whose additive weights are legitimately zero).
    pub fn internal_keep_zeros(num_nodes: usize, weights: Vec<WeightEntry>) -> Layer {
        LAYER_ALLOCS.fetch_add(1, Ordering::Relaxed);
        Layer::Internal { num_nodes, weights }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            Layer::Leaf { num_nodes, .. } | Layer::Internal { num_nodes, .. } => *num_nodes,
        }
    }
}

/// A layered circuit exactly respecting its md-vtree.
#[derive(Debug, Clone)]
pub struct Circuit {
    mdvtree: MdVtree,
    layers: Vec<Layer>,
    root_index: usize,
}

/// A structural violation found by [`Circuit::check_structure`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ShapeMismatch(String),
    NegativeWeight(String),
    NonFiniteWeight(String),
    BadLeafTerm(String),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::ShapeMismatch(s) => write!(f, "shape mismatch: {s}"),
            Violation::NegativeWeight(s) => write!(f, "negative weight at {s}"),
            Violation::NonFiniteWeight(s) => write!(f, "non-finite weight at {s}"),
            Violation::BadLeafTerm(s) => write!(f, "bad leaf term: {s}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StructureReport {
    pub violations: Vec<Violation>,
}

impl StructureReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

enum VarEval {
    State(usize),
    SumOut,
}

impl Circuit {
    /// Builds a circuit, validating shapes and index ranges (but not weight
    /// signs: log-transformed circuits legitimately carry negative weights).
    pub fn new(mdvtree: MdVtree, layers: Vec<Layer>, root_index: usize) -> Result<Circuit> {
        if layers.len() != mdvtree.vtree().len() {
            return Err(Error::InvalidCircuit(format!(
                "expected {} layers, got {}",
                mdvtree.vtree().len(),
                layers.len()
            )));
        }
        let c = Circuit { mdvtree, layers, root_index };
        c.validate_shapes()?;
        Ok(c)
    }

    fn validate_shapes(&self) -> Result<()> {
        let vt = self.mdvtree.vtree();
        for id in vt.node_ids() {
            let layer = &self.layers[id.index()];
            match (vt.children(id), layer) {
                (None, Layer::Leaf { num_nodes, terms, mix }) => {
                    let scope = vt.scope(id)?;
                    for t in terms {
                        let mut seen = VarSet::empty();
                        for f in &t.factors {
                            if seen.contains(f.var()) {
                                return Err(Error::InvalidCircuit(
                                    "duplicate factor variable in leaf term".into(),
                                ));
                            }
                            seen.insert(f.var());
                            if !scope.contains(f.var()) {
                                return Err(Error::InvalidCircuit(
                                    "leaf term factor outside leaf scope".into(),
                                ));
                            }
                            if let LeafFunction::Categorical { var, weights } = f {
                                if weights.len() != vt.space().card(*var) {
                                    return Err(Error::InvalidCircuit(
                                        "categorical weight length".into(),
                                    ));
                                }
                            }
                            if let LeafFunction::Indicator { var, state } = f {
                                if *state >= vt.space().card(*var) {
                                    return Err(Error::StateOutOfRange {
                                        var: vt.space().name(*var).to_string(),
                                        state: *state,
                                        card: vt.space().card(*var),
                                    });
                                }
                            }
                        }
                    }
                    for e in mix {
                        if e.sum >= *num_nodes || e.term >= terms.len() {
                            return Err(Error::InvalidCircuit("mix entry out of range".into()));
                        }
                    }
                }
                (Some((l, r)), Layer::Internal { num_nodes, weights }) => {
                    let kl = self.layers[l.index()].num_nodes();
                    let kr = self.layers[r.index()].num_nodes();
                    for e in weights {
                        if e.node >= *num_nodes || e.left >= kl || e.right >= kr {
                            return Err(Error::InvalidCircuit("weight entry out of range".into()));
                        }
                    }
                }
                _ => {
                    return Err(Error::InvalidCircuit(format!(
                        "layer kind does not match vtree node {}",
                        id.index()
                    )))
                }
            }
        }
        if self.root_index >= self.layers[vt.root().index()].num_nodes() {
            return Err(Error::InvalidCircuit("root index out of range".into()));
        }
        Ok(())
    }

    pub fn mdvtree(&self) -> &MdVtree {
        &self.mdvtree
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: VtreeNodeId) -> &Layer {
        &self.layers[id.index()]
    }

    pub fn layer_mut(&mut self, id: VtreeNodeId) -> &mut Layer {
        &mut self.layers[id.index()]
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn scope(&self) -> VarSet {
        self.mdvtree.scope()
    }

    /// Number of edges: mix entries plus, per tensor entry, the two implicit
    /// product edges and the sum edge.
    pub fn size(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Leaf { mix, .. } => mix.len(),
                Layer::Internal { weights, .. } => 3 * weights.len(),
            })
            .sum()
    }

    fn var_modes(&self, a: &Assignment, allow_partial: bool) -> Result<Vec<VarEval>> {
        let space = self.mdvtree.vtree().space();
        a.validate(space)?;
        let mut modes = Vec::with_capacity(space.len());
        for i in 0..space.len() {
            let v = VarId(i as u32);
            match a.get(v) {
                Some(s) => modes.push(VarEval::State(s)),
                None => {
                    if !allow_partial && self.scope().contains(v) {
                        return Err(Error::IncompleteAssignment(space.name(v).to_string()));
                    }
                    modes.push(VarEval::SumOut);
                }
            }
        }
        Ok(modes)
    }

    fn layer_values(&self, modes: &[VarEval]) -> Vec<Vec<f64>> {
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); vt.len()];
        for id in vt.reverse_topological() {
            match &self.layers[id.index()] {
                Layer::Leaf { num_nodes, terms, mix } => {
                    let term_vals: Vec<f64> = terms
                        .iter()
                        .map(|t| {
                            t.factors
                                .iter()
                                .map(|f| match modes[f.var().index()] {
                                    VarEval::State(s) => f.eval(s),
                                    VarEval::SumOut => f.marginal(space.card(f.var())),
                                })
                                .product()
                        })
                        .collect();
                    let mut out = vec![0.0; *num_nodes];
                    for e in mix {
                        out[e.sum] += e.weight * term_vals[e.term];
                    }
                    values[id.index()] = out;
                }
                Layer::Internal { num_nodes, weights } => {
                    let (l, r) = vt.children(id).expect("internal");
                    let mut out = vec![0.0; *num_nodes];
                    let lv = &values[l.index()];
                    let rv = &values[r.index()];
                    for e in weights {
                        out[e.node] += e.weight * lv[e.left] * rv[e.right];
                    }
                    values[id.index()] = out;
                }
            }
        }
        values
    }

    /// Evaluates the circuit at a full assignment of its scope.
    pub fn evaluate(&self, a: &Assignment) -> Result<f64> {
        let modes = self.var_modes(a, false)?;
        let values = self.layer_values(&modes);
        Ok(values[self.mdvtree.vtree().root().index()][self.root_index])
    }

    /// Per-layer sum values at a full assignment (indexed by vtree node,
    /// then sum). Used by the learners' expectation passes.
    pub fn point_values(&self, a: &Assignment) -> Result<Vec<Vec<f64>>> {
        let modes = self.var_modes(a, false)?;
        Ok(self.layer_values(&modes))
    }

    /// Sums the circuit over all variables not fixed by `evidence`.
    pub fn marginal_evaluate(&self, evidence: &Assignment) -> Result<f64> {
        let modes = self.var_modes(evidence, true)?;
        let values = self.layer_values(&modes);
        Ok(values[self.mdvtree.vtree().root().index()][self.root_index])
    }

    /// Log-space evaluation; returns `-inf` where the value is 0. Only valid
    /// for circuits with nonnegative weights.
    pub fn evaluate_log(&self, a: &Assignment) -> Result<f64> {
        let modes = self.var_modes(a, false)?;
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); vt.len()];
        for id in vt.reverse_topological() {
            match &self.layers[id.index()] {
                Layer::Leaf { num_nodes, terms, mix } => {
                    let term_vals: Vec<f64> = terms
                        .iter()
                        .map(|t| {
                            t.factors
                                .iter()
                                .map(|f| match modes[f.var().index()] {
                                    VarEval::State(s) => f.eval(s),
                                    VarEval::SumOut => f.marginal(space.card(f.var())),
                                })
                                .map(|v| v.ln())
                                .sum()
                        })
                        .collect();
                    let mut out = vec![f64::NEG_INFINITY; *num_nodes];
                    // Accumulate log-sum-exp incrementally per sum node.
                    for e in mix {
                        let term = e.weight.ln() + term_vals[e.term];
                        out[e.sum] = log_add(out[e.sum], term);
                    }
                    values[id.index()] = out;
                }
                Layer::Internal { num_nodes, weights } => {
                    let (l, r) = vt.children(id).expect("internal");
                    let mut out = vec![f64::NEG_INFINITY; *num_nodes];
                    let lv = &values[l.index()];
                    let rv = &values[r.index()];
                    for e in weights {
                        let term = e.weight.ln() + lv[e.left] + rv[e.right];
                        out[e.node] = log_add(out[e.node], term);
                    }
                    values[id.index()] = out;
                }
            }
        }
        Ok(values[vt.root().index()][self.root_index])
    }

    /// Total mass of the circuit (marginal of the empty assignment).
    pub fn total_mass(&self) -> f64 {
        self.marginal_evaluate(&Assignment::new()).expect("empty evidence")
    }

    /// Structural validation report: shape consistency, smoothness of leaf
    /// terms, weight finiteness and nonnegativity.
    pub fn check_structure(&self) -> StructureReport {
        let vt = self.mdvtree.vtree();
        let mut report = StructureReport::default();
        for id in vt.node_ids() {
            match (&self.layers[id.index()], vt.children(id)) {
                (Layer::Leaf { terms, mix, num_nodes }, None) => {
                    let scope = vt.scope(id).expect("node");
                    for (ti, t) in terms.iter().enumerate() {
                        if t.vars() != scope {
                            report.violations.push(Violation::BadLeafTerm(format!(
                                "term {ti} at node {} does not cover the leaf scope",
                                id.index()
                            )));
                        }
                        for f in &t.factors {
                            if let LeafFunction::Categorical { weights, .. } = f {
                                for (s, w) in weights.iter().enumerate() {
                                    if !w.is_finite() {
                                        report.violations.push(Violation::NonFiniteWeight(
                                            format!("leaf {}.{ti} state {s}", id.index()),
                                        ));
                                    } else if *w < 0.0 {
                                        report.violations.push(Violation::NegativeWeight(
                                            format!("leaf {}.{ti} state {s}", id.index()),
                                        ));
                                    }
                                }
                            }
                        }
                    }
                    for e in mix {
                        if e.sum >= *num_nodes || e.term >= terms.len() {
                            report.violations.push(Violation::ShapeMismatch(format!(
                                "mix entry ({}, {}) at node {}",
                                e.sum,
                                e.term,
                                id.index()
                            )));
                        }
                        if !e.weight.is_finite() {
                            report.violations.push(Violation::NonFiniteWeight(format!(
                                "mix ({}, {}) at node {}",
                                e.sum,
                                e.term,
                                id.index()
                            )));
                        } else if e.weight < 0.0 {
                            report.violations.push(Violation::NegativeWeight(format!(
                                "mix ({}, {}) at node {}",
                                e.sum,
                                e.term,
                                id.index()
                            )));
                        }
                    }
                }
                (Layer::Internal { weights, num_nodes }, Some((l, r))) => {
                    let kl = self.layers[l.index()].num_nodes();
                    let kr = self.layers[r.index()].num_nodes();
                    for e in weights {
                        if e.node >= *num_nodes || e.left >= kl || e.right >= kr {
                            report.violations.push(Violation::ShapeMismatch(format!(
                                "weight entry ({}, {}, {}) at node {}",
                                e.node,
                                e.left,
                                e.right,
                                id.index()
                            )));
                        }
                        if !e.weight.is_finite() {
                            report.violations.push(Violation::NonFiniteWeight(format!(
                                "({}, {}, {}) at node {}",
                                e.node,
                                e.left,
                                e.right,
                                id.index()
                            )));
                        } else if e.weight < 0.0 {
                            report.violations.push(Violation::NegativeWeight(format!(
                                "({}, {}, {}) at node {}",
                                e.node,
                                e.left,
                                e.right,
                                id.index()
                            )));
                        }
                    }
                }
                _ => report.violations.push(Violation::ShapeMismatch(format!(
                    "layer kind does not match vtree node {}",
                    id.index()
                ))),
            }
        }
        report
    }

    /// Per-node dense value tables over each node's scope domain:
    /// `tables[m][sum_index][assignment_index]`.
    pub fn dense_tables(&self, bound: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let total: usize = space.domain_size(self.scope());
        if total > bound {
            return Err(Error::EnumerationBound(self.scope().len(), bound.ilog2() as usize));
        }
        let indexers: Vec<DomainIndexer> = vt
            .node_ids()
            .map(|id| DomainIndexer::new(space, vt.scope(id).expect("node")))
            .collect();
        let mut tables: Vec<Vec<Vec<f64>>> = vec![Vec::new(); vt.len()];
        for id in vt.reverse_topological() {
            let dom = &indexers[id.index()];
            match &self.layers[id.index()] {
                Layer::Leaf { num_nodes, terms, mix } => {
                    let mut term_tables = vec![vec![0.0; dom.len()]; terms.len()];
                    for (idx, a) in (0..dom.len()).map(|i| (i, dom.assignment_of(i))) {
                        for (ti, t) in terms.iter().enumerate() {
                            term_tables[ti][idx] = t
                                .factors
                                .iter()
                                .map(|f| f.eval(a.get(f.var()).expect("covered")))
                                .product();
                        }
                    }
                    let mut out = vec![vec![0.0; dom.len()]; *num_nodes];
                    for e in mix {
                        for idx in 0..dom.len() {
                            out[e.sum][idx] += e.weight * term_tables[e.term][idx];
                        }
                    }
                    tables[id.index()] = out;
                }
                Layer::Internal { num_nodes, weights } => {
                    let (l, r) = vt.children(id).expect("internal");
                    let lmap = dom.project_map(&indexers[l.index()]);
                    let rmap = dom.project_map(&indexers[r.index()]);
                    let mut out = vec![vec![0.0; dom.len()]; *num_nodes];
                    for e in weights {
                        let lt = &tables[l.index()][e.left];
                        let rt = &tables[r.index()][e.right];
                        let row = &mut out[e.node];
                        for idx in 0..dom.len() {
                            row[idx] += e.weight * lt[lmap[idx]] * rt[rmap[idx]];
                        }
                    }
                    tables[id.index()] = out;
                }
            }
        }
        Ok(tables)
    }

    /// Brute-force marginal-determinism check: every sum node whose scope
    /// overlaps `q` must have children with pairwise-disjoint marginalized
    /// supports over `q`.
    pub fn check_qdet(&self, q: VarSet, bound: Option<usize>) -> Result<bool> {
        Ok(self.check_qdet_many(&[q], bound)?[0])
    }

    /// Batched version of [`Circuit::check_qdet`] sharing the support tables.
    pub fn check_qdet_many(&self, qs: &[VarSet], bound: Option<usize>) -> Result<Vec<bool>> {
        let bound = bound.unwrap_or(DEFAULT_SUPPORT_BOUND);
        let tables = self.dense_tables(bound)?;
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let indexers: Vec<DomainIndexer> = vt
            .node_ids()
            .map(|id| DomainIndexer::new(space, vt.scope(id).expect("node")))
            .collect();
        let mut results = vec![true; qs.len()];
        for (qi, &q) in qs.iter().enumerate() {
            'nodes: for id in vt.node_ids() {
                let scope = vt.scope(id)?;
                if !scope.overlaps(q) {
                    continue;
                }
                let dom = &indexers[id.index()];
                let qdom = DomainIndexer::new(space, scope.intersect(q));
                let qmap = dom.project_map(&qdom);
                match &self.layers[id.index()] {
                    Layer::Leaf { num_nodes, terms, mix } => {
                        // Child q-supports per sum node, checked incrementally.
                        let mut term_supp: Vec<Option<Vec<bool>>> = vec![None; terms.len()];
                        for sum in 0..*num_nodes {
                            let mut acc = vec![false; qdom.len()];
                            for e in mix.iter().filter(|e| e.sum == sum && e.weight != 0.0) {
                                let supp = term_supp[e.term].get_or_insert_with(|| {
                                    let mut s = vec![false; qdom.len()];
                                    for idx in 0..dom.len() {
                                        let a = dom.assignment_of(idx);
                                        let v: f64 = terms[e.term]
                                            .factors
                                            .iter()
                                            .map(|f| f.eval(a.get(f.var()).expect("covered")))
                                            .product();
                                        if v != 0.0 {
                                            s[qmap[idx]] = true;
                                        }
                                    }
                                    s
                                });
                                for (i, &bit) in supp.iter().enumerate() {
                                    if bit {
                                        if acc[i] {
                                            results[qi] = false;
                                            break 'nodes;
                                        }
                                        acc[i] = true;
                                    }
                                }
                            }
                        }
                    }
                    Layer::Internal { num_nodes, weights } => {
                        let (l, r) = vt.children(id).expect("internal");
                        let lmap = dom.project_map(&indexers[l.index()]);
                        let rmap = dom.project_map(&indexers[r.index()]);
                        for sum in 0..*num_nodes {
                            let mut acc = vec![false; qdom.len()];
                            for e in weights.iter().filter(|e| e.node == sum && e.weight != 0.0) {
                                let lt = &tables[l.index()][e.left];
                                let rt = &tables[r.index()][e.right];
                                let mut supp = vec![false; qdom.len()];
                                for idx in 0..dom.len() {
                                    if lt[lmap[idx]] != 0.0 && rt[rmap[idx]] != 0.0 {
                                        supp[qmap[idx]] = true;
                                    }
                                }
                                for (i, &bit) in supp.iter().enumerate() {
                                    if bit {
                                        if acc[i] {
                                            results[qi] = false;
                                            break 'nodes;
                                        }
                                        acc[i] = true;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(results)
    }

    /// Checks that every layer satisfies the marginal determinism its
    /// md-vtree label requires (universal labels require nothing).
    pub fn check_respects_labels(&self, bound: Option<usize>) -> Result<bool> {
        let vt = self.mdvtree.vtree();
        for id in vt.node_ids() {
            if let Label::Set(q) = self.mdvtree.label(id) {
                if q.is_empty() {
                    continue;
                }
                if !self.layer_is_qdet(id, q, bound)? {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Determinism of a single layer's sums with respect to `q`.
    pub fn layer_is_qdet(&self, id: VtreeNodeId, q: VarSet, bound: Option<usize>) -> Result<bool> {
        let bound = bound.unwrap_or(DEFAULT_SUPPORT_BOUND);
        let tables = self.dense_tables(bound)?;
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let scope = vt.scope(id)?;
        if !scope.overlaps(q) {
            return Ok(true);
        }
        let dom = DomainIndexer::new(space, scope);
        let qdom = DomainIndexer::new(space, scope.intersect(q));
        let qmap = dom.project_map(&qdom);
        let child_supports: Vec<(usize, Vec<bool>)> = match &self.layers[id.index()] {
            Layer::Leaf { terms, mix, .. } => mix
                .iter()
                .filter(|e| e.weight != 0.0)
                .map(|e| {
                    let mut s = vec![false; qdom.len()];
                    for idx in 0..dom.len() {
                        let a = dom.assignment_of(idx);
                        let v: f64 = terms[e.term]
                            .factors
                            .iter()
                            .map(|f| f.eval(a.get(f.var()).expect("covered")))
                            .product();
                        if v != 0.0 {
                            s[qmap[idx]] = true;
                        }
                    }
                    (e.sum, s)
                })
                .collect(),
            Layer::Internal { weights, .. } => {
                let (l, r) = vt.children(id).expect("internal");
                let lmap = dom.project_map(&DomainIndexer::new(space, vt.scope(l)?));
                let rmap = dom.project_map(&DomainIndexer::new(space, vt.scope(r)?));
                weights
                    .iter()
                    .filter(|e| e.weight != 0.0)
                    .map(|e| {
                        let lt = &tables[l.index()][e.left];
                        let rt = &tables[r.index()][e.right];
                        let mut s = vec![false; qdom.len()];
                        for idx in 0..dom.len() {
                            if lt[lmap[idx]] != 0.0 && rt[rmap[idx]] != 0.0 {
                                s[qmap[idx]] = true;
                            }
                        }
                        (e.node, s)
                    })
                    .collect()
            }
        };
        let num = self.layers[id.index()].num_nodes();
        for sum in 0..num {
            let mut acc = vec![false; qdom.len()];
            for (_, s) in child_supports.iter().filter(|(i, _)| *i == sum) {
                for (i, &bit) in s.iter().enumerate() {
                    if bit {
                        if acc[i] {
                            return Ok(false);
                        }
                        acc[i] = true;
                    }
                }
            }
        }
        Ok(true)
    }

    /// Number of full assignments in the circuit's support, computed
    /// structurally: factor supports multiply through products and add
    /// across sum children. Exact when the circuit is deterministic
    /// (children supports are disjoint); an upper bound otherwise.
    pub fn support_size(&self) -> f64 {
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let mut sizes: Vec<Vec<f64>> = vec![Vec::new(); vt.len()];
        for id in vt.reverse_topological() {
            match &self.layers[id.index()] {
                Layer::Leaf { num_nodes, terms, mix } => {
                    let scope = vt.scope(id).expect("node");
                    let tsize: Vec<f64> = terms
                        .iter()
                        .map(|t| {
                            let mut s = 1.0;
                            for f in &t.factors {
                                s *= match f {
                                    LeafFunction::Categorical { weights, .. } => {
                                        weights.iter().filter(|&&w| w != 0.0).count() as f64
                                    }
                                    LeafFunction::Indicator { .. } => 1.0,
                                    LeafFunction::ConstantOne { var } => {
                                        space.card(*var) as f64
                                    }
                                };
                            }
                            for miss in scope.difference(t.vars()).iter() {
                                s *= space.card(miss) as f64;
                            }
                            s
                        })
                        .collect();
                    let mut out = vec![0.0; *num_nodes];
                    for e in mix {
                        out[e.sum] += tsize[e.term];
                    }
                    sizes[id.index()] = out;
                }
                Layer::Internal { num_nodes, weights } => {
                    let (l, r) = vt.children(id).expect("internal");
                    let mut out = vec![0.0; *num_nodes];
                    for e in weights {
                        out[e.node] += sizes[l.index()][e.left] * sizes[r.index()][e.right];
                    }
                    sizes[id.index()] = out;
                }
            }
        }
        sizes[vt.root().index()][self.root_index]
    }

    /// Inserts constant-one factors so every leaf term covers its leaf scope.
    /// The encoded function over full assignments is unchanged.
    pub fn smooth(&self) -> Circuit {
        let vt = self.mdvtree.vtree();
        let layers = vt
            .node_ids()
            .map(|id| match &self.layers[id.index()] {
                Layer::Leaf { num_nodes, terms, mix } => {
                    let scope = vt.scope(id).expect("node");
                    let terms = terms
                        .iter()
                        .map(|t| {
                            let missing = scope.difference(t.vars());
                            if missing.is_empty() {
                                t.clone()
                            } else {
                                let mut factors = t.factors.clone();
                                for v in missing.iter() {
                                    factors.push(LeafFunction::ConstantOne { var: v });
                                }
                                LeafTerm::new(factors)
                            }
                        })
                        .collect();
                    Layer::leaf(*num_nodes, terms, mix.clone())
                }
                other => {
                    LAYER_ALLOCS.fetch_add(1, Ordering::Relaxed);
                    other.clone()
                }
            })
            .collect();
        Circuit {
            mdvtree: self.mdvtree.clone(),
            layers,
            root_index: self.root_index,
        }
    }

    /// Copies the circuit into `new_space`, mapping every variable through
    /// `idmap` (indexed by old variable id). Used for auxiliary-variable
    /// constructions, where a circuit is reused as the same function of
    /// fresh formal variables. Cardinalities must match.
    pub fn remap_vars(
        &self,
        new_space: std::sync::Arc<crate::vars::VariableSpace>,
        idmap: &[VarId],
    ) -> Result<Circuit> {
        use crate::vtree::{Vtree, VtreeNode};
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        for (i, &target) in idmap.iter().enumerate().take(space.len()) {
            if space.card(VarId(i as u32)) != new_space.card(target) {
                return Err(Error::InvalidCircuit("remap changes cardinality".into()));
            }
        }
        let rename_var = |v: VarId| -> VarId { idmap[v.index()] };
        let rename_set = |s: VarSet| -> VarSet { s.iter().map(rename_var).collect() };
        let nodes = vt
            .node_ids()
            .map(|id| match vt.node(id) {
                VtreeNode::Leaf { scope } => VtreeNode::Leaf { scope: rename_set(*scope) },
                VtreeNode::Internal { left, right } => {
                    VtreeNode::Internal { left: *left, right: *right }
                }
            })
            .collect();
        let new_vt = Vtree::new(new_space, nodes, vt.root())?;
        let labels = self
            .mdvtree
            .labels()
            .iter()
            .map(|l| match l {
                Label::Universal => Label::Universal,
                Label::Set(s) => Label::Set(rename_set(*s)),
            })
            .collect();
        let mdvtree = MdVtree::new(new_vt, labels)?;
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Leaf { num_nodes, terms, mix } => Layer::leaf(
                    *num_nodes,
                    terms
                        .iter()
                        .map(|t| {
                            LeafTerm::new(
                                t.factors
                                    .iter()
                                    .map(|f| match f {
                                        LeafFunction::Categorical { var, weights } => {
                                            LeafFunction::Categorical {
                                                var: rename_var(*var),
                                                weights: weights.clone(),
                                            }
                                        }
                                        LeafFunction::Indicator { var, state } => {
                                            LeafFunction::Indicator {
                                                var: rename_var(*var),
                                                state: *state,
                                            }
                                        }
                                        LeafFunction::ConstantOne { var } => {
                                            LeafFunction::ConstantOne { var: rename_var(*var) }
                                        }
                                    })
                                    .collect(),
                            )
                        })
                        .collect(),
                    mix.clone(),
                ),
                Layer::Internal { num_nodes, weights } => {
                    Layer::internal(*num_nodes, weights.clone())
                }
            })
            .collect();
        Circuit::new(mdvtree, layers, self.root_index)
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
