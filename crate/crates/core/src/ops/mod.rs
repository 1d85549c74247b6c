//! The basic circuit operations: marginalize, instantiate, product, power,
//! max and log, each propagating the md-vtree soundly alongside the layers.

pub mod plan;

use crate::circuit::{Circuit, Layer, LeafFunction, LeafTerm, MixEntry, WeightEntry};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::mdvtree::MdVtree;
use crate::vars::{Assignment, VarSet};
use crate::vtree::{Vtree, VtreeNode, VtreeNodeId};
use plan::{ProdPlan, RemovalPlan, Side};

/// How a deterministic operation certifies its input's determinism: from the
/// md-vtree labels (production mode) or by brute-force support enumeration
/// (debug, exponential).
#[derive(Debug, Clone, Copy, Default)]
pub enum DetCheck {
    #[default]
    FromLabels,
    BruteForce(usize),
}

fn certify_deterministic(c: &Circuit, check: DetCheck, op: &'static str) -> Result<()> {
    let scope = c.scope();
    match check {
        DetCheck::FromLabels => {
            if c.mdvtree().implies_qdet(scope) {
                Ok(())
            } else {
                Err(Error::DeterminismNotCertified(op))
            }
        }
        DetCheck::BruteForce(bound) => {
            if c.check_qdet(scope, Some(bound))? {
                Ok(())
            } else {
                Err(Error::DeterminismNotCertified(op))
            }
        }
    }
}

/// Result of an operation that may consume the whole scope.
#[derive(Debug, Clone)]
pub enum OpOutput {
    Circuit(Circuit),
    Scalar(f64),
}

impl OpOutput {
    pub fn circuit(self) -> Circuit {
        match self {
            OpOutput::Circuit(c) => c,
            OpOutput::Scalar(_) => panic!("expected a circuit output"),
        }
    }

    pub fn scalar(&self) -> Option<f64> {
        match self {
            OpOutput::Scalar(s) => Some(*s),
            OpOutput::Circuit(_) => None,
        }
    }
}

enum Removal<'a> {
    Marg,
    Inst(&'a Assignment),
}

impl Removal<'_> {
    fn factor_value(&self, f: &LeafFunction, card: usize) -> f64 {
        match self {
            Removal::Marg => f.marginal(card),
            Removal::Inst(a) => f.eval(a.get(f.var()).expect("instantiated var")),
        }
    }

    /// Value for a removed scope variable a term carries no factor for
    /// (implicitly constant one).
    fn missing_value(&self, card: usize) -> f64 {
        match self {
            Removal::Marg => card as f64,
            Removal::Inst(_) => 1.0,
        }
    }
}

/// Per-sum scalar values of a subtree whose entire scope is being removed.
fn subtree_values(c: &Circuit, node: VtreeNodeId, removal: &Removal) -> Vec<f64> {
    let vt = c.mdvtree().vtree();
    let space = vt.space();
    match c.layer(node) {
        Layer::Leaf { num_nodes, terms, mix } => {
            let scope = vt.scope(node).expect("node");
            let tv: Vec<f64> = terms
                .iter()
                .map(|t| {
                    let covered = t.vars();
                    let mut v: f64 = t
                        .factors
                        .iter()
                        .map(|f| removal.factor_value(f, space.card(f.var())))
                        .product();
                    for miss in scope.difference(covered).iter() {
                        v *= removal.missing_value(space.card(miss));
                    }
                    v
                })
                .collect();
            let mut out = vec![0.0; *num_nodes];
            for e in mix {
                out[e.sum] += e.weight * tv[e.term];
            }
            out
        }
        Layer::Internal { num_nodes, weights } => {
            let (l, r) = vt.children(node).expect("internal");
            let lv = subtree_values(c, l, removal);
            let rv = subtree_values(c, r, removal);
            let mut out = vec![0.0; *num_nodes];
            for e in weights {
                out[e.node] += e.weight * lv[e.left] * rv[e.right];
            }
            out
        }
    }
}

struct RemovalBuilder<'a> {
    c: &'a Circuit,
    removal: Removal<'a>,
    removed: VarSet,
    nodes: Vec<VtreeNode>,
    labels: Vec<Label>,
    layers: Vec<Layer>,
}

impl RemovalBuilder<'_> {
    fn build(&mut self, plan: &RemovalPlan) -> usize {
        match plan {
            RemovalPlan::Leaf { old, scope, label } => {
                let space = self.c.mdvtree().vtree().space();
                let old_scope = self.c.mdvtree().vtree().scope(*old).expect("node");
                let (num_nodes, terms, mix) = match self.c.layer(*old) {
                    Layer::Leaf { num_nodes, terms, mix } => (*num_nodes, terms, mix),
                    _ => unreachable!("leaf plan on internal layer"),
                };
                let mut new_terms = Vec::with_capacity(terms.len());
                let mut fold = Vec::with_capacity(terms.len());
                for t in terms {
                    let mut kept = Vec::new();
                    let mut factor_fold = 1.0;
                    for f in &t.factors {
                        if self.removed.contains(f.var()) {
                            factor_fold *= self.removal.factor_value(f, space.card(f.var()));
                        } else {
                            kept.push(f.clone());
                        }
                    }
                    for miss in old_scope.difference(t.vars()).iter() {
                        if self.removed.contains(miss) {
                            factor_fold *= self.removal.missing_value(space.card(miss));
                        } else {
                            kept.push(LeafFunction::ConstantOne { var: miss });
                        }
                    }
                    new_terms.push(LeafTerm::new(kept));
                    fold.push(factor_fold);
                }
                let new_mix = mix
                    .iter()
                    .map(|e| MixEntry {
                        sum: e.sum,
                        term: e.term,
                        weight: e.weight * fold[e.term],
                    })
                    .collect();
                self.nodes.push(VtreeNode::Leaf { scope: *scope });
                self.labels.push(*label);
                self.layers.push(Layer::leaf(num_nodes, new_terms, new_mix));
                self.nodes.len() - 1
            }
            RemovalPlan::Internal { old, label, left, right } => {
                let l = self.build(left);
                let r = self.build(right);
                let layer = match self.c.layer(*old) {
                    Layer::Internal { num_nodes, weights } => {
                        Layer::internal(*num_nodes, weights.clone())
                    }
                    _ => unreachable!("internal plan on leaf layer"),
                };
                self.nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l),
                    right: VtreeNodeId(r),
                });
                self.labels.push(*label);
                self.layers.push(layer);
                self.nodes.len() - 1
            }
            RemovalPlan::Collapse { old, label, dropped, dropped_side, kept } => {
                let kid = self.build(kept);
                let scalars = subtree_values(self.c, *dropped, &self.removal);
                let (num_old, old_weights) = match self.c.layer(*old) {
                    Layer::Internal { num_nodes, weights } => (*num_nodes, weights),
                    _ => unreachable!("collapse on leaf layer"),
                };
                // Fold the dropped side into per-(old sum, kept child) mixing
                // weights, then compose with the kept child's layer.
                let mut folded: Vec<(usize, usize, f64)> = Vec::new();
                for e in old_weights {
                    let (scalar, kept_idx) = match dropped_side {
                        Side::Left => (scalars[e.left], e.right),
                        Side::Right => (scalars[e.right], e.left),
                    };
                    if scalar != 0.0 {
                        folded.push((e.node, kept_idx, e.weight * scalar));
                    }
                }
                self.layers[kid] = compose_mixing(&folded, num_old, &self.layers[kid]);
                // Folding merges two sum levels; the union of both levels'
                // labels is what the flattened sums still satisfy.
                self.labels[kid] = label.union(self.labels[kid]);
                kid
            }
        }
    }
}

/// Composes a mixing matrix over a layer's sums: the result's node `i` is the
/// weighted combination of the layer's sums `k` with weights `w_(i,k)`,
/// flattened into a single layer (sums of sums collapse).
fn compose_mixing(mixing: &[(usize, usize, f64)], num_out: usize, layer: &Layer) -> Layer {
    match layer {
        Layer::Leaf { terms, mix, .. } => {
            let mut new_mix = Vec::new();
            for &(i, k, w) in mixing {
                for e in mix.iter().filter(|e| e.sum == k) {
                    new_mix.push(MixEntry { sum: i, term: e.term, weight: w * e.weight });
                }
            }
            Layer::leaf(num_out, terms.clone(), merge_mix(new_mix))
        }
        Layer::Internal { weights, .. } => {
            let mut new_weights = Vec::new();
            for &(i, k, w) in mixing {
                for e in weights.iter().filter(|e| e.node == k) {
                    new_weights.push(WeightEntry {
                        node: i,
                        left: e.left,
                        right: e.right,
                        weight: w * e.weight,
                    });
                }
            }
            Layer::internal(num_out, merge_weights(new_weights))
        }
    }
}

/// Collapses duplicate (sum, term) mix entries by adding weights.
fn merge_mix(mut entries: Vec<MixEntry>) -> Vec<MixEntry> {
    entries.sort_by_key(|e| (e.sum, e.term));
    let mut out: Vec<MixEntry> = Vec::with_capacity(entries.len());
    for e in entries {
        match out.last_mut() {
            Some(last) if last.sum == e.sum && last.term == e.term => last.weight += e.weight,
            _ => out.push(e),
        }
    }
    out
}

fn merge_weights(mut entries: Vec<WeightEntry>) -> Vec<WeightEntry> {
    entries.sort_by_key(|e| (e.node, e.left, e.right));
    let mut out: Vec<WeightEntry> = Vec::with_capacity(entries.len());
    for e in entries {
        match out.last_mut() {
            Some(last) if last.node == e.node && last.left == e.left && last.right == e.right => {
                last.weight += e.weight
            }
            _ => out.push(e),
        }
    }
    out
}

fn removal_output(
    c: &Circuit,
    plan: Option<RemovalPlan>,
    removal: Removal,
    removed: VarSet,
) -> Result<OpOutput> {
    match plan {
        None => {
            // The whole scope is consumed: a scalar remains.
            let root = c.mdvtree().vtree().root();
            let values = subtree_values(c, root, &removal);
            Ok(OpOutput::Scalar(values[c.root_index()]))
        }
        Some(plan) => {
            let mut b = RemovalBuilder {
                c,
                removal,
                removed,
                nodes: Vec::new(),
                labels: Vec::new(),
                layers: Vec::new(),
            };
            let root = b.build(&plan);
            let vt = Vtree::new(c.mdvtree().vtree().space().clone(), b.nodes, VtreeNodeId(root))?;
            let w = MdVtree::new(vt, b.labels)?;
            Ok(OpOutput::Circuit(Circuit::new(w, b.layers, c.root_index())?))
        }
    }
}

/// Marginalizes `removed` out of the circuit. Labels overlapping the removed
/// set become universal; subtrees losing their whole scope fold into their
/// parents as constants. Produces a scalar when the whole scope is summed.
pub fn marg(c: &Circuit, removed: VarSet) -> Result<OpOutput> {
    if !removed.is_subset(c.scope()) {
        return Err(Error::NotInScope);
    }
    if removed.is_empty() {
        return Ok(OpOutput::Circuit(c.clone()));
    }
    let plan = RemovalPlan::for_marg(c.mdvtree(), removed);
    removal_output(c, plan, Removal::Marg, removed)
}

/// Instantiates the assigned variables, slicing the circuit. Labels lose the
/// assigned variables; scope shrinks like marginalization.
pub fn inst(c: &Circuit, at: &Assignment) -> Result<OpOutput> {
    let removed = at.vars();
    if !removed.is_subset(c.scope()) {
        return Err(Error::NotInScope);
    }
    at.validate(c.mdvtree().vtree().space())?;
    if removed.is_empty() {
        return Ok(OpOutput::Circuit(c.clone()));
    }
    let plan = RemovalPlan::for_inst(c.mdvtree(), removed);
    removal_output(c, plan, Removal::Inst(at), removed)
}

struct ProdBuilder<'a> {
    c1: &'a Circuit,
    c2: &'a Circuit,
    nodes: Vec<VtreeNode>,
    labels: Vec<Label>,
    layers: Vec<Layer>,
}

impl ProdBuilder<'_> {
    fn copy(&mut self, first: bool, node: VtreeNodeId) -> usize {
        let c = if first { self.c1 } else { self.c2 };
        match c.mdvtree().vtree().node(node) {
            VtreeNode::Leaf { scope } => {
                self.nodes.push(VtreeNode::Leaf { scope: *scope });
                self.labels.push(c.mdvtree().label(node));
                self.layers.push(match c.layer(node) {
                    Layer::Leaf { num_nodes, terms, mix } => {
                        Layer::leaf(*num_nodes, terms.clone(), mix.clone())
                    }
                    _ => unreachable!(),
                });
                self.nodes.len() - 1
            }
            VtreeNode::Internal { left, right } => {
                let (left, right) = (*left, *right);
                let l = self.copy(first, left);
                let r = self.copy(first, right);
                self.nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l),
                    right: VtreeNodeId(r),
                });
                self.labels.push(c.mdvtree().label(node));
                self.layers.push(match c.layer(node) {
                    Layer::Internal { num_nodes, weights } => {
                        Layer::internal(*num_nodes, weights.clone())
                    }
                    _ => unreachable!(),
                });
                self.nodes.len() - 1
            }
        }
    }

    fn num1(&self, n: VtreeNodeId) -> usize {
        self.c1.layer(n).num_nodes()
    }

    fn num2(&self, n: VtreeNodeId) -> usize {
        self.c2.layer(n).num_nodes()
    }

    /// Builds the product layer for a plan node; returns the new node id.
    /// Output sums are pairs `(i1, i2)` flattened as `i1 * K2 + i2`, where
    /// `K2` is the second operand's sum count at the paired node.
    fn build(&mut self, plan: &ProdPlan) -> Result<usize> {
        match plan {
            ProdPlan::Disjoint { n1, n2 } => {
                let (k1, k2) = (self.num1(*n1), self.num2(*n2));
                let l = self.copy(true, *n1);
                let r = self.copy(false, *n2);
                let mut weights = Vec::with_capacity(k1 * k2);
                for i1 in 0..k1 {
                    for i2 in 0..k2 {
                        weights.push(WeightEntry {
                            node: i1 * k2 + i2,
                            left: i1,
                            right: i2,
                            weight: 1.0,
                        });
                    }
                }
                self.nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l),
                    right: VtreeNodeId(r),
                });
                self.labels.push(Label::Set(VarSet::empty()));
                self.layers.push(Layer::internal(k1 * k2, weights));
                Ok(self.nodes.len() - 1)
            }
            ProdPlan::LeafMerge { n1, n2 } => {
                let (k1, k2) = (self.num1(*n1), self.num2(*n2));
                let _ = k1;
                let space = self.c1.mdvtree().vtree().space().clone();
                let scope = self
                    .c1
                    .mdvtree()
                    .vtree()
                    .scope(*n1)?
                    .union(self.c2.mdvtree().vtree().scope(*n2)?);
                let (terms1, mix1) = match self.c1.layer(*n1) {
                    Layer::Leaf { terms, mix, .. } => (terms, mix),
                    _ => unreachable!(),
                };
                let (terms2, mix2) = match self.c2.layer(*n2) {
                    Layer::Leaf { terms, mix, .. } => (terms, mix),
                    _ => unreachable!(),
                };
                let mut pair_terms: std::collections::HashMap<(usize, usize), usize> =
                    std::collections::HashMap::new();
                let mut terms = Vec::new();
                let mut mix = Vec::new();
                for e1 in mix1 {
                    for e2 in mix2 {
                        let t = *pair_terms.entry((e1.term, e2.term)).or_insert_with(|| {
                            terms.push(merge_terms(&space, &terms1[e1.term], &terms2[e2.term]));
                            terms.len() - 1
                        });
                        mix.push(MixEntry {
                            sum: e1.sum * k2 + e2.sum,
                            term: t,
                            weight: e1.weight * e2.weight,
                        });
                    }
                }
                self.nodes.push(VtreeNode::Leaf { scope });
                self.labels
                    .push(self.c1.mdvtree().label(*n1).union(self.c2.mdvtree().label(*n2)));
                self.layers
                    .push(Layer::leaf(self.num1(*n1) * k2, terms, merge_mix(mix)));
                Ok(self.nodes.len() - 1)
            }
            ProdPlan::DeferFirst { n1, side, inner } => {
                let vt1 = self.c1.mdvtree().vtree();
                let (cl, cr) = vt1.children(*n1).expect("internal");
                let k1 = self.num1(*n1);
                let k2 = self.paired_num2(inner);
                let weights1 = match self.c1.layer(*n1) {
                    Layer::Internal { weights, .. } => weights.clone(),
                    _ => unreachable!(),
                };
                let (l_id, r_id, weights) = match side {
                    Side::Left => {
                        let il = self.build(inner)?;
                        let rc = self.copy(true, cr);
                        let w = weights1
                            .iter()
                            .flat_map(|e| {
                                (0..k2).map(move |i2| WeightEntry {
                                    node: e.node * k2 + i2,
                                    left: e.left * k2 + i2,
                                    right: e.right,
                                    weight: e.weight,
                                })
                            })
                            .collect();
                        (il, rc, w)
                    }
                    Side::Right => {
                        let lc = self.copy(true, cl);
                        let ir = self.build(inner)?;
                        let w = weights1
                            .iter()
                            .flat_map(|e| {
                                (0..k2).map(move |i2| WeightEntry {
                                    node: e.node * k2 + i2,
                                    left: e.left,
                                    right: e.right * k2 + i2,
                                    weight: e.weight,
                                })
                            })
                            .collect();
                        (lc, ir, w)
                    }
                };
                self.nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l_id),
                    right: VtreeNodeId(r_id),
                });
                self.labels.push(self.c1.mdvtree().label(*n1));
                self.layers.push(Layer::internal(k1 * k2, weights));
                Ok(self.nodes.len() - 1)
            }
            ProdPlan::DeferSecond { n2, side, inner } => {
                let vt2 = self.c2.mdvtree().vtree();
                let (cl, cr) = vt2.children(*n2).expect("internal");
                let k2 = self.num2(*n2);
                let k1 = self.paired_num1(inner);
                let weights2 = match self.c2.layer(*n2) {
                    Layer::Internal { weights, .. } => weights.clone(),
                    _ => unreachable!(),
                };
                let (l_id, r_id, weights) = match side {
                    Side::Left => {
                        let inner_k2 = self.num2(cl);
                        let il = self.build(inner)?;
                        let rc = self.copy(false, cr);
                        let w = weights2
                            .iter()
                            .flat_map(|e| {
                                (0..k1).map(move |i1| WeightEntry {
                                    node: i1 * k2 + e.node,
                                    left: i1 * inner_k2 + e.left,
                                    right: e.right,
                                    weight: e.weight,
                                })
                            })
                            .collect();
                        (il, rc, w)
                    }
                    Side::Right => {
                        let inner_k2 = self.num2(cr);
                        let lc = self.copy(false, cl);
                        let ir = self.build(inner)?;
                        let w = weights2
                            .iter()
                            .flat_map(|e| {
                                (0..k1).map(move |i1| WeightEntry {
                                    node: i1 * k2 + e.node,
                                    left: e.left,
                                    right: i1 * inner_k2 + e.right,
                                    weight: e.weight,
                                })
                            })
                            .collect();
                        (lc, ir, w)
                    }
                };
                self.nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l_id),
                    right: VtreeNodeId(r_id),
                });
                self.labels.push(self.c2.mdvtree().label(*n2));
                self.layers.push(Layer::internal(k1 * k2, weights));
                Ok(self.nodes.len() - 1)
            }
            ProdPlan::Match { n1, n2, crossed, left, right } => {
                let (l2, r2) = self.c2.mdvtree().vtree().children(*n2).expect("internal");
                let (k1, k2) = (self.num1(*n1), self.num2(*n2));
                let li = self.build(left)?;
                let ri = self.build(right)?;
                let weights1 = match self.c1.layer(*n1) {
                    Layer::Internal { weights, .. } => weights.clone(),
                    _ => unreachable!(),
                };
                let weights2 = match self.c2.layer(*n2) {
                    Layer::Internal { weights, .. } => weights.clone(),
                    _ => unreachable!(),
                };
                let (kl2, kr2) = (self.num2(l2), self.num2(r2));
                let mut weights = Vec::with_capacity(weights1.len() * weights2.len());
                for e1 in &weights1 {
                    for e2 in &weights2 {
                        let (left_idx, right_idx) = if !crossed {
                            (e1.left * kl2 + e2.left, e1.right * kr2 + e2.right)
                        } else {
                            (e1.left * kr2 + e2.right, e1.right * kl2 + e2.left)
                        };
                        weights.push(WeightEntry {
                            node: e1.node * k2 + e2.node,
                            left: left_idx,
                            right: right_idx,
                            weight: e1.weight * e2.weight,
                        });
                    }
                }
                self.nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(li),
                    right: VtreeNodeId(ri),
                });
                self.labels
                    .push(self.c1.mdvtree().label(*n1).union(self.c2.mdvtree().label(*n2)));
                self.layers.push(Layer::internal(k1 * k2, weights));
                Ok(self.nodes.len() - 1)
            }
        }
    }

    /// Number of second-operand sums the inner plan's pairs range over.
    fn paired_num2(&self, plan: &ProdPlan) -> usize {
        match plan {
            ProdPlan::Disjoint { n2, .. }
            | ProdPlan::LeafMerge { n2, .. }
            | ProdPlan::DeferSecond { n2, .. }
            | ProdPlan::Match { n2, .. } => self.num2(*n2),
            ProdPlan::DeferFirst { inner, .. } => self.paired_num2(inner),
        }
    }

    fn paired_num1(&self, plan: &ProdPlan) -> usize {
        match plan {
            ProdPlan::Disjoint { n1, .. }
            | ProdPlan::LeafMerge { n1, .. }
            | ProdPlan::DeferFirst { n1, .. }
            | ProdPlan::Match { n1, .. } => self.num1(*n1),
            ProdPlan::DeferSecond { inner, .. } => self.paired_num1(inner),
        }
    }
}

/// Pointwise product of two leaf terms: factors over distinct variables
/// concatenate, factors over a shared variable multiply elementwise.
fn merge_terms(space: &crate::vars::VariableSpace, t1: &LeafTerm, t2: &LeafTerm) -> LeafTerm {
    let mut factors: Vec<LeafFunction> = Vec::new();
    let shared = t1.vars().intersect(t2.vars());
    for f in t1.factors.iter().chain(t2.factors.iter()) {
        if !shared.contains(f.var()) {
            factors.push(f.clone());
        }
    }
    for v in shared.iter() {
        let card = space.card(v);
        let w1 = t1.factor(v).expect("shared").weights_vec(card);
        let w2 = t2.factor(v).expect("shared").weights_vec(card);
        let weights = w1.iter().zip(&w2).map(|(a, b)| a * b).collect();
        factors.push(LeafFunction::Categorical { var: v, weights });
    }
    LeafTerm::new(factors)
}

/// Product of two circuits over compatible vtrees. The output's sums form a
/// grid over pairs of input sums; nodes unreachable from the designated root
/// pair are pruned afterwards.
pub fn prod(c1: &Circuit, c2: &Circuit) -> Result<Circuit> {
    let plan = ProdPlan::build(c1.mdvtree(), c2.mdvtree())?;
    let mut b = ProdBuilder {
        c1,
        c2,
        nodes: Vec::new(),
        labels: Vec::new(),
        layers: Vec::new(),
    };
    let root = b.build(&plan)?;
    let vt = Vtree::new(c1.mdvtree().vtree().space().clone(), b.nodes, VtreeNodeId(root))?;
    let w = MdVtree::new(vt, b.labels)?;
    let k2 = c2.layer(c2.mdvtree().vtree().root()).num_nodes();
    let root_index = c1.root_index() * k2 + c2.root_index();
    let out = Circuit::new(w, b.layers, root_index)?;
    Ok(prune_unreachable(&out))
}

/// Drops sums (and leaf terms) unreachable from the designated root.
pub fn prune_unreachable(c: &Circuit) -> Circuit {
    let vt = c.mdvtree().vtree();
    let mut reach: Vec<Vec<bool>> = vt
        .node_ids()
        .map(|id| vec![false; c.layer(id).num_nodes()])
        .collect();
    reach[vt.root().index()][c.root_index()] = true;
    for id in vt.topological() {
        if let Layer::Internal { weights, .. } = c.layer(id) {
            let (l, r) = vt.children(id).expect("internal");
            for e in weights {
                if reach[id.index()][e.node] {
                    reach[l.index()][e.left] = true;
                    reach[r.index()][e.right] = true;
                }
            }
        }
    }
    let remap: Vec<Vec<Option<usize>>> = reach
        .iter()
        .map(|layer| {
            let mut next = 0;
            layer
                .iter()
                .map(|&keep| {
                    if keep {
                        next += 1;
                        Some(next - 1)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let layers = vt
        .node_ids()
        .map(|id| {
            let count = reach[id.index()].iter().filter(|&&b| b).count().max(1);
            match c.layer(id) {
                Layer::Leaf { terms, mix, .. } => {
                    let mut used = vec![false; terms.len()];
                    for e in mix {
                        if reach[id.index()][e.sum] {
                            used[e.term] = true;
                        }
                    }
                    let term_remap: Vec<Option<usize>> = {
                        let mut next = 0;
                        used.iter()
                            .map(|&u| {
                                if u {
                                    next += 1;
                                    Some(next - 1)
                                } else {
                                    None
                                }
                            })
                            .collect()
                    };
                    let new_terms = terms
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| used[*i])
                        .map(|(_, t)| t.clone())
                        .collect();
                    let new_mix = mix
                        .iter()
                        .filter_map(|e| {
                            remap[id.index()][e.sum].map(|s| MixEntry {
                                sum: s,
                                term: term_remap[e.term].expect("used term"),
                                weight: e.weight,
                            })
                        })
                        .collect();
                    Layer::leaf(count, new_terms, new_mix)
                }
                Layer::Internal { weights, .. } => {
                    let (l, r) = vt.children(id).expect("internal");
                    let new_weights = weights
                        .iter()
                        .filter_map(|e| {
                            remap[id.index()][e.node].map(|n| WeightEntry {
                                node: n,
                                left: remap[l.index()][e.left].expect("reachable child"),
                                right: remap[r.index()][e.right].expect("reachable child"),
                                weight: e.weight,
                            })
                        })
                        .collect();
                    Layer::internal(count, new_weights)
                }
            }
        })
        .collect();
    let root_index = remap[vt.root().index()][c.root_index()].expect("root reachable");
    Circuit::new(c.mdvtree().clone(), layers, root_index).expect("pruning preserves shape")
}

/// Restricted power of a deterministic circuit: all weights and categorical
/// leaf entries raised to `alpha`, zeros staying zero. Labels are unchanged.
pub fn pow(c: &Circuit, alpha: f64, check: DetCheck) -> Result<Circuit> {
    if !alpha.is_finite() {
        return Err(Error::InvalidCircuit("non-finite exponent".into()));
    }
    certify_deterministic(c, check, "pow")?;
    let vt = c.mdvtree().vtree();
    let layers = vt
        .node_ids()
        .map(|id| match c.layer(id) {
            Layer::Leaf { num_nodes, terms, mix } => {
                let terms = terms
                    .iter()
                    .map(|t| LeafTerm::new(t.factors.iter().map(|f| f.pow(alpha)).collect()))
                    .collect();
                let mix = mix
                    .iter()
                    .map(|e| MixEntry {
                        sum: e.sum,
                        term: e.term,
                        weight: restricted_pow(e.weight, alpha),
                    })
                    .collect();
                Layer::leaf(*num_nodes, terms, mix)
            }
            Layer::Internal { num_nodes, weights } => {
                let weights = weights
                    .iter()
                    .map(|e| WeightEntry {
                        node: e.node,
                        left: e.left,
                        right: e.right,
                        weight: restricted_pow(e.weight, alpha),
                    })
                    .collect();
                Layer::internal(*num_nodes, weights)
            }
        })
        .collect();
    Circuit::new(c.mdvtree().clone(), layers, c.root_index())
}

fn restricted_pow(w: f64, alpha: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w.powf(alpha)
    }
}

/// Maximum of the circuit over all completions of `evidence`, with one
/// maximizing completion. Ties resolve to the smallest child pair, then the
/// smallest leaf state.
pub fn max_query(
    c: &Circuit,
    evidence: &Assignment,
    check: DetCheck,
) -> Result<(f64, Assignment)> {
    certify_deterministic(c, check, "max")?;
    evidence.validate(c.mdvtree().vtree().space())?;
    let vt = c.mdvtree().vtree();
    let space = vt.space();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); vt.len()];
    let mut choices: Vec<Vec<Option<(usize, usize)>>> = vec![Vec::new(); vt.len()];
    for id in vt.reverse_topological() {
        match c.layer(id) {
            Layer::Leaf { num_nodes, terms, mix } => {
                let tmax: Vec<f64> = terms
                    .iter()
                    .map(|t| {
                        t.factors
                            .iter()
                            .map(|f| factor_max(f, evidence, space.card(f.var())).0)
                            .product()
                    })
                    .collect();
                let mut vals = vec![0.0; *num_nodes];
                let mut best = vec![None; *num_nodes];
                let mut entries: Vec<&MixEntry> = mix.iter().collect();
                entries.sort_by_key(|e| (e.sum, e.term));
                for e in entries {
                    let v = e.weight * tmax[e.term];
                    if best[e.sum].is_none() || v > vals[e.sum] {
                        vals[e.sum] = v;
                        best[e.sum] = Some((e.term, 0));
                    }
                }
                values[id.index()] = vals;
                choices[id.index()] = best;
            }
            Layer::Internal { num_nodes, weights } => {
                let (l, r) = vt.children(id).expect("internal");
                let mut vals = vec![0.0; *num_nodes];
                let mut best = vec![None; *num_nodes];
                let mut entries: Vec<&WeightEntry> = weights.iter().collect();
                entries.sort_by_key(|e| (e.node, e.left, e.right));
                for e in entries {
                    let v = e.weight * values[l.index()][e.left] * values[r.index()][e.right];
                    if best[e.node].is_none() || v > vals[e.node] {
                        vals[e.node] = v;
                        best[e.node] = Some((e.left, e.right));
                    }
                }
                values[id.index()] = vals;
                choices[id.index()] = best;
            }
        }
    }
    let root = vt.root();
    let best_value = values[root.index()]
        .get(c.root_index())
        .copied()
        .unwrap_or(0.0);
    let mut out = evidence.clone();
    trace_max(c, root, c.root_index(), evidence, &choices, &mut out);
    Ok((best_value, out))
}

fn factor_max(f: &LeafFunction, evidence: &Assignment, card: usize) -> (f64, usize) {
    match evidence.get(f.var()) {
        Some(s) => (f.eval(s), s),
        None => {
            let mut best = (f.eval(0), 0);
            for s in 1..card {
                let v = f.eval(s);
                if v > best.0 {
                    best = (v, s);
                }
            }
            best
        }
    }
}

fn trace_max(
    c: &Circuit,
    node: VtreeNodeId,
    sum: usize,
    evidence: &Assignment,
    choices: &[Vec<Option<(usize, usize)>>],
    out: &mut Assignment,
) {
    let vt = c.mdvtree().vtree();
    let space = vt.space();
    let choice = choices[node.index()].get(sum).copied().flatten();
    match c.layer(node) {
        Layer::Leaf { terms, .. } => {
            let scope = vt.scope(node).expect("node");
            for v in scope.iter() {
                if evidence.get(v).is_some() {
                    continue;
                }
                let state = choice
                    .and_then(|(term, _)| terms[term].factor(v))
                    .map(|f| factor_max(f, evidence, space.card(v)).1)
                    .unwrap_or(0);
                out.set(v, state);
            }
        }
        Layer::Internal { .. } => {
            let (l, r) = vt.children(node).expect("internal");
            match choice {
                Some((j, k)) => {
                    trace_max(c, l, j, evidence, choices, out);
                    trace_max(c, r, k, evidence, choices, out);
                }
                None => {
                    for v in vt.scope(node).expect("node").iter() {
                        if evidence.get(v).is_none() {
                            out.set(v, 0);
                        }
                    }
                }
            }
        }
    }
}

/// Builds a circuit encoding the restricted logarithm of a deterministic
/// circuit: `log p` on the support and 0 elsewhere. Every layer doubles into
/// a log half and a support-indicator half; additive contributions ride on
/// support gates. The output md-vtree keeps the vtree but drops all
/// determinism guarantees (universal labels), and its weights may be
/// negative.
pub fn log_circuit(c: &Circuit, check: DetCheck) -> Result<Circuit> {
    certify_deterministic(c, check, "log")?;
    let vt = c.mdvtree().vtree();
    let space = vt.space();
    let layers: Vec<Layer> = vt
        .node_ids()
        .map(|id| match c.layer(id) {
            Layer::Leaf { num_nodes, terms, mix } => {
                let k = *num_nodes;
                let mut new_terms: Vec<LeafTerm> = Vec::new();
                let mut log_terms: Vec<Vec<usize>> = Vec::new();
                let mut supp_terms: Vec<usize> = Vec::new();
                for t in terms {
                    let mut per_factor = Vec::new();
                    for (fi, _) in t.factors.iter().enumerate() {
                        let factors = t
                            .factors
                            .iter()
                            .enumerate()
                            .map(|(fj, g)| {
                                if fi == fj {
                                    log_factor(g, space.card(g.var()))
                                } else {
                                    supp_factor(g)
                                }
                            })
                            .collect();
                        new_terms.push(LeafTerm::new(factors));
                        per_factor.push(new_terms.len() - 1);
                    }
                    log_terms.push(per_factor);
                    let supp = t.factors.iter().map(supp_factor).collect();
                    new_terms.push(LeafTerm::new(supp));
                    supp_terms.push(new_terms.len() - 1);
                }
                let mut new_mix = Vec::new();
                for e in mix {
                    for &lt in &log_terms[e.term] {
                        new_mix.push(MixEntry { sum: e.sum, term: lt, weight: 1.0 });
                    }
                    let logw = e.weight.ln();
                    if logw != 0.0 {
                        new_mix.push(MixEntry {
                            sum: e.sum,
                            term: supp_terms[e.term],
                            weight: logw,
                        });
                    }
                    new_mix.push(MixEntry {
                        sum: k + e.sum,
                        term: supp_terms[e.term],
                        weight: 1.0,
                    });
                }
                Layer::leaf(2 * k, new_terms, new_mix)
            }
            Layer::Internal { num_nodes, weights } => {
                let k = *num_nodes;
                let (l, r) = vt.children(id).expect("internal");
                let kl = c.layer(l).num_nodes();
                let kr = c.layer(r).num_nodes();
                let mut new_weights = Vec::new();
                for e in weights {
                    // log(left) gated by supp(right), supp(left) gating
                    // log(right), the edge's own log-weight on the joint
                    // support, and the support half itself.
                    new_weights.push(WeightEntry {
                        node: e.node,
                        left: e.left,
                        right: kr + e.right,
                        weight: 1.0,
                    });
                    new_weights.push(WeightEntry {
                        node: e.node,
                        left: kl + e.left,
                        right: e.right,
                        weight: 1.0,
                    });
                    new_weights.push(WeightEntry {
                        node: e.node,
                        left: kl + e.left,
                        right: kr + e.right,
                        weight: e.weight.ln(),
                    });
                    new_weights.push(WeightEntry {
                        node: k + e.node,
                        left: kl + e.left,
                        right: kr + e.right,
                        weight: 1.0,
                    });
                }
                Layer::internal_keep_zeros(2 * k, new_weights)
            }
        })
        .collect();
    let w = MdVtree::all_universal(vt.clone());
    Circuit::new(w, layers, c.root_index())
}

fn log_factor(f: &LeafFunction, card: usize) -> LeafFunction {
    let weights = f
        .weights_vec(card)
        .iter()
        .map(|&w| if w > 0.0 { w.ln() } else { 0.0 })
        .collect();
    LeafFunction::Categorical { var: f.var(), weights }
}

fn supp_factor(f: &LeafFunction) -> LeafFunction {
    match f {
        LeafFunction::ConstantOne { .. } | LeafFunction::Indicator { .. } => f.clone(),
        LeafFunction::Categorical { var, weights } => {
            let supp = weights.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect();
            LeafFunction::Categorical { var: *var, weights: supp }
        }
    }
}

/// Md-vtree halves of the operations, for analyses that must not build
/// layers. `None` means the output is a scalar.
pub fn marg_mdvtree(w: &MdVtree, removed: VarSet) -> Result<Option<MdVtree>> {
    if !removed.is_subset(w.scope()) {
        return Err(Error::NotInScope);
    }
    if removed.is_empty() {
        return Ok(Some(w.clone()));
    }
    match RemovalPlan::for_marg(w, removed) {
        None => Ok(None),
        Some(p) => Ok(Some(p.to_mdvtree(w.vtree().space().clone())?)),
    }
}

pub fn inst_mdvtree(w: &MdVtree, removed: VarSet) -> Result<Option<MdVtree>> {
    if !removed.is_subset(w.scope()) {
        return Err(Error::NotInScope);
    }
    if removed.is_empty() {
        return Ok(Some(w.clone()));
    }
    match RemovalPlan::for_inst(w, removed) {
        None => Ok(None),
        Some(p) => Ok(Some(p.to_mdvtree(w.vtree().space().clone())?)),
    }
}

pub fn prod_mdvtree(w1: &MdVtree, w2: &MdVtree) -> Result<MdVtree> {
    ProdPlan::build(w1, w2)?.to_mdvtree(w1, w2)
}

pub fn log_mdvtree(w: &MdVtree) -> MdVtree {
    MdVtree::all_universal(w.vtree().clone())
}
