//! Raw nested circuits and their normalization into layered form.
//!
//! A raw circuit is a plain DAG of leaf / sum / product nodes. As long as
//! every sum and leaf node's scope coincides with some vtree node's scope,
//! it can be normalized into the layered representation: chains of nested
//! sums collapse (weights multiplying through) and bare products or leaves
//! in sum-child position get wrapped in single-child sums.

use super::{Circuit, Layer, LeafTerm, MixEntry, WeightEntry};
use crate::error::{Error, Result};
use crate::mdvtree::MdVtree;
use crate::vars::{Assignment, VarSet};
use crate::vtree::VtreeNodeId;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RawNodeId(pub usize);

#[derive(Debug, Clone)]
pub enum RawNode {
    Leaf(LeafTerm),
    Sum(Vec<(f64, RawNodeId)>),
    Product(RawNodeId, RawNodeId),
}

#[derive(Debug, Clone, Default)]
pub struct RawCircuit {
    nodes: Vec<RawNode>,
}

impl RawCircuit {
    pub fn new() -> RawCircuit {
        RawCircuit::default()
    }

    pub fn leaf(&mut self, term: LeafTerm) -> RawNodeId {
        self.nodes.push(RawNode::Leaf(term));
        RawNodeId(self.nodes.len() - 1)
    }

    pub fn sum(&mut self, children: Vec<(f64, RawNodeId)>) -> RawNodeId {
        self.nodes.push(RawNode::Sum(children));
        RawNodeId(self.nodes.len() - 1)
    }

    pub fn product(&mut self, left: RawNodeId, right: RawNodeId) -> RawNodeId {
        self.nodes.push(RawNode::Product(left, right));
        RawNodeId(self.nodes.len() - 1)
    }

    pub fn node(&self, id: RawNodeId) -> &RawNode {
        &self.nodes[id.0]
    }

    pub fn scope_of(&self, id: RawNodeId) -> VarSet {
        match self.node(id) {
            RawNode::Leaf(t) => t.vars(),
            RawNode::Sum(children) => children
                .iter()
                .map(|(_, c)| self.scope_of(*c))
                .fold(VarSet::empty(), VarSet::union),
            RawNode::Product(l, r) => self.scope_of(*l).union(self.scope_of(*r)),
        }
    }

    /// Direct recursive evaluation; the reference the normalized form is
    /// checked against.
    pub fn evaluate(&self, id: RawNodeId, a: &Assignment) -> f64 {
        match self.node(id) {
            RawNode::Leaf(t) => t
                .factors
                .iter()
                .map(|f| f.eval(a.get(f.var()).expect("full assignment")))
                .product(),
            RawNode::Sum(children) => children
                .iter()
                .map(|(w, c)| w * self.evaluate(*c, a))
                .sum(),
            RawNode::Product(l, r) => self.evaluate(*l, a) * self.evaluate(*r, a),
        }
    }
}

struct Normalizer<'a> {
    raw: &'a RawCircuit,
    mdvtree: &'a MdVtree,
    scope_to_node: HashMap<VarSet, VtreeNodeId>,
    terms: Vec<Vec<LeafTerm>>,
    mix: Vec<Vec<MixEntry>>,
    weights: Vec<Vec<WeightEntry>>,
    counts: Vec<usize>,
    memo: HashMap<RawNodeId, (VtreeNodeId, usize)>,
}

impl<'a> Normalizer<'a> {
    /// Returns the layer position of `id` as a sum node, wrapping leaves and
    /// products in single-child sums.
    fn as_sum(&mut self, id: RawNodeId) -> Result<(VtreeNodeId, usize)> {
        if let Some(&hit) = self.memo.get(&id) {
            return Ok(hit);
        }
        let out = match self.raw.node(id) {
            RawNode::Sum(_) => {
                let scope = self.raw.scope_of(id);
                let m = self.vtree_node_for(scope)?;
                let children = self.flatten_sum(id, 1.0)?;
                let sum_idx = self.counts[m.index()];
                self.counts[m.index()] += 1;
                for (w, child) in children {
                    self.attach(m, sum_idx, w, child)?;
                }
                (m, sum_idx)
            }
            RawNode::Leaf(_) | RawNode::Product(_, _) => {
                let scope = self.raw.scope_of(id);
                let m = self.vtree_node_for(scope)?;
                let sum_idx = self.counts[m.index()];
                self.counts[m.index()] += 1;
                self.attach(m, sum_idx, 1.0, id)?;
                (m, sum_idx)
            }
        };
        self.memo.insert(id, out);
        Ok(out)
    }

    /// Collapses nested sums into a flat weighted list of non-sum children.
    fn flatten_sum(&self, id: RawNodeId, mult: f64) -> Result<Vec<(f64, RawNodeId)>> {
        let mut out = Vec::new();
        match self.raw.node(id) {
            RawNode::Sum(children) => {
                for (w, c) in children {
                    match self.raw.node(*c) {
                        RawNode::Sum(_) => out.extend(self.flatten_sum(*c, mult * w)?),
                        _ => out.push((mult * w, *c)),
                    }
                }
            }
            _ => out.push((mult, id)),
        }
        Ok(out)
    }

    /// Attaches a non-sum child to sum `sum_idx` of layer `m`.
    fn attach(&mut self, m: VtreeNodeId, sum_idx: usize, weight: f64, child: RawNodeId) -> Result<()> {
        let vt = self.mdvtree.vtree();
        match self.raw.node(child) {
            RawNode::Leaf(t) => {
                if vt.children(m).is_some() {
                    return Err(Error::InvalidCircuit(
                        "leaf child under a sum with internal-node scope".into(),
                    ));
                }
                let term_idx = self.terms[m.index()].len();
                self.terms[m.index()].push(t.clone());
                self.mix[m.index()].push(MixEntry { sum: sum_idx, term: term_idx, weight });
                Ok(())
            }
            RawNode::Product(l, r) => {
                let (ml, mr) = vt.children(m).ok_or_else(|| {
                    Error::InvalidCircuit("product child under a leaf-scope sum".into())
                })?;
                let ls = self.raw.scope_of(*l);
                let (li, ri) = if ls == vt.scope(ml)? {
                    (self.as_sum(*l)?, self.as_sum(*r)?)
                } else {
                    (self.as_sum(*r)?, self.as_sum(*l)?)
                };
                if li.0 != ml || ri.0 != mr {
                    return Err(Error::InvalidCircuit(
                        "product does not decompose along the vtree".into(),
                    ));
                }
                self.weights[m.index()].push(WeightEntry {
                    node: sum_idx,
                    left: li.1,
                    right: ri.1,
                    weight,
                });
                Ok(())
            }
            RawNode::Sum(_) => unreachable!("sums were flattened"),
        }
    }

    fn vtree_node_for(&self, scope: VarSet) -> Result<VtreeNodeId> {
        self.scope_to_node.get(&scope).copied().ok_or_else(|| {
            Error::InvalidCircuit("node scope does not match any vtree node".into())
        })
    }
}

/// Normalizes a raw circuit rooted at `root` into layered form over
/// `mdvtree`. The encoded function is unchanged; nested sums collapse with
/// weights multiplied through, and product-of-product children acquire
/// single-child sum wrappers.
pub fn normalize_exact(raw: &RawCircuit, mdvtree: &MdVtree, root: RawNodeId) -> Result<Circuit> {
    let vt = mdvtree.vtree();
    let scope_to_node: HashMap<VarSet, VtreeNodeId> = vt
        .node_ids()
        .map(|id| (vt.scope(id).expect("node"), id))
        .collect();
    let mut norm = Normalizer {
        raw,
        mdvtree,
        scope_to_node,
        terms: vec![Vec::new(); vt.len()],
        mix: vec![Vec::new(); vt.len()],
        weights: vec![Vec::new(); vt.len()],
        counts: vec![0; vt.len()],
        memo: HashMap::new(),
    };
    let (root_node, root_idx) = norm.as_sum(root)?;
    if root_node != vt.root() {
        return Err(Error::InvalidCircuit("root scope does not match vtree root".into()));
    }
    let layers = vt
        .node_ids()
        .map(|id| {
            if vt.is_leaf(id) {
                Layer::leaf(
                    norm.counts[id.index()].max(1),
                    std::mem::take(&mut norm.terms[id.index()]),
                    std::mem::take(&mut norm.mix[id.index()]),
                )
            } else {
                Layer::internal(
                    norm.counts[id.index()].max(1),
                    std::mem::take(&mut norm.weights[id.index()]),
                )
            }
        })
        .collect();
    Circuit::new(mdvtree.clone(), layers, root_idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::LeafFunction;
    use crate::vars::{assignments, VariableSpace};
    use crate::vtree::Vtree;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use std::sync::Arc;

    #[test]
    fn nested_sum_weights_multiply_through() {
        // sum(0.5 * sum(0.4 L1, 0.6 L2), 0.5 L3) flattens to
        // sum(0.2 L1, 0.3 L2, 0.5 L3).
        let space = VariableSpace::from_pairs(vec![("X", 3)]).unwrap();
        let x = space.lookup("X").unwrap();
        let vt = Vtree::leaf(space.clone(), VarSet::singleton(x)).unwrap();
        let w = MdVtree::all_universal(vt);
        let mut raw = RawCircuit::new();
        let l1 = raw.leaf(LeafTerm::new(vec![LeafFunction::Indicator { var: x, state: 0 }]));
        let l2 = raw.leaf(LeafTerm::new(vec![LeafFunction::Indicator { var: x, state: 1 }]));
        let l3 = raw.leaf(LeafTerm::new(vec![LeafFunction::Indicator { var: x, state: 2 }]));
        let inner = raw.sum(vec![(0.4, l1), (0.6, l2)]);
        let outer = raw.sum(vec![(0.5, inner), (0.5, l3)]);
        let c = normalize_exact(&raw, &w, outer).unwrap();
        match c.layer(VtreeNodeId(0)) {
            Layer::Leaf { mix, .. } => {
                let mut weights: Vec<f64> = mix.iter().map(|e| e.weight).collect();
                weights.sort_by(f64::total_cmp);
                assert_eq!(weights, vec![0.2, 0.3, 0.5]);
            }
            _ => panic!("expected leaf layer"),
        }
        for s in 0..3 {
            let a = Assignment::from_pairs(&[(x, s)]);
            assert!((c.evaluate(&a).unwrap() - raw.evaluate(outer, &a)).abs() < 1e-15);
        }
    }

    fn random_raw(
        raw: &mut RawCircuit,
        vt: &Arc<Vtree>,
        id: VtreeNodeId,
        rng: &mut ChaCha12Rng,
    ) -> RawNodeId {
        let space = vt.space();
        match vt.children(id) {
            None => {
                let scope = vt.scope(id).unwrap();
                let mk_leaf = |raw: &mut RawCircuit, rng: &mut ChaCha12Rng| {
                    let factors = scope
                        .iter()
                        .map(|v| LeafFunction::Categorical {
                            var: v,
                            weights: (0..space.card(v))
                                .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.1..1.0) })
                                .collect(),
                        })
                        .collect();
                    raw.leaf(LeafTerm::new(factors))
                };
                let n = rng.random_range(1..3);
                let children: Vec<(f64, RawNodeId)> = (0..n)
                    .map(|_| (rng.random_range(0.1..1.0), mk_leaf(raw, rng)))
                    .collect();
                raw.sum(children)
            }
            Some((l, r)) => {
                let n = rng.random_range(1..3);
                let mut children = Vec::new();
                for _ in 0..n {
                    let cl = random_raw(raw, vt, l, rng);
                    let cr = random_raw(raw, vt, r, rng);
                    let p = raw.product(cl, cr);
                    children.push((rng.random_range(0.1..1.0), p));
                }
                let inner = raw.sum(children);
                // Occasionally wrap in an extra sum to exercise collapsing.
                if rng.random_bool(0.4) {
                    raw.sum(vec![(rng.random_range(0.5..2.0), inner)])
                } else {
                    inner
                }
            }
        }
    }

    #[test]
    fn normalization_preserves_function_on_random_nested_circuits() {
        for seed in 0..25u64 {
            let n = 2 + (seed as usize % 5);
            let space = VariableSpace::binary("x", n);
            let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
            let w = MdVtree::all_universal(vt.clone());
            let mut rng = ChaCha12Rng::seed_from_u64(seed + 77);
            let mut raw = RawCircuit::new();
            let root = random_raw(&mut raw, &vt, vt.root(), &mut rng);
            let c = normalize_exact(&raw, &w, root).unwrap();
            for a in assignments(&space, space.all()) {
                let expect = raw.evaluate(root, &a);
                let got = c.evaluate(&a).unwrap();
                assert!(
                    (expect - got).abs() <= 1e-12 * expect.abs().max(1.0),
                    "seed {seed}: {expect} vs {got}"
                );
            }
            // Idempotence through a smooth pass as well.
            let smoothed = c.smooth();
            for a in assignments(&space, space.all()) {
                assert_eq!(smoothed.evaluate(&a).unwrap(), c.evaluate(&a).unwrap());
            }
        }
    }
}
