//! Md-vtrees: vtrees labelled with marginal-determinism requirements.
//!
//! The label of a node records the set of variables every sum layer at that
//! node must be marginally deterministic with respect to. From the labels one
//! can read off the *implied* determinisms: all sets `Q` such that any circuit
//! respecting the md-vtree is guaranteed to be `Q`-deterministic.

use crate::error::{Error, Result};
use crate::label::Label;
use crate::vars::VarSet;
use crate::vtree::{Vtree, VtreeNodeId};
use std::sync::Arc;

/// Default cap on exhaustive implied-determinism enumeration (2^bound checks).
pub const DEFAULT_ENUM_BOUND: usize = 20;

/// A vtree together with a per-node marginal-determinism label.
#[derive(Debug, Clone)]
pub struct MdVtree {
    vtree: Arc<Vtree>,
    labels: Vec<Label>,
}

impl MdVtree {
    /// Builds an md-vtree, checking that concrete labels are contained in
    /// their node's scope.
    pub fn new(vtree: Arc<Vtree>, labels: Vec<Label>) -> Result<MdVtree> {
        if labels.len() != vtree.len() {
            return Err(Error::InvalidLabel(format!(
                "expected {} labels, got {}",
                vtree.len(),
                labels.len()
            )));
        }
        for id in vtree.node_ids() {
            if let Label::Set(s) = labels[id.index()] {
                if !s.is_subset(vtree.scope(id)?) {
                    return Err(Error::InvalidLabel(format!(
                        "label of node {} is not contained in its scope",
                        id.index()
                    )));
                }
            }
        }
        Ok(MdVtree { vtree, labels })
    }

    /// All labels universal: a plain vtree with no determinism guarantees.
    pub fn all_universal(vtree: Arc<Vtree>) -> MdVtree {
        let labels = vec![Label::Universal; vtree.len()];
        MdVtree { vtree, labels }
    }

    /// Every label equal to the node's full scope: plain determinism at every
    /// layer.
    pub fn fully_deterministic(vtree: Arc<Vtree>) -> MdVtree {
        let labels = vtree
            .node_ids()
            .map(|id| Label::Set(vtree.scope(id).expect("valid node")))
            .collect();
        MdVtree { vtree, labels }
    }

    pub fn vtree(&self) -> &Arc<Vtree> {
        &self.vtree
    }

    pub fn label(&self, id: VtreeNodeId) -> Label {
        self.labels[id.index()]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn with_label(&self, id: VtreeNodeId, label: Label) -> MdVtree {
        let mut labels = self.labels.clone();
        labels[id.index()] = label;
        MdVtree { vtree: self.vtree.clone(), labels }
    }

    pub fn scope(&self) -> VarSet {
        self.vtree.scope(self.vtree.root()).expect("root")
    }

    /// Does this md-vtree imply `Q`-determinism? True iff every node whose
    /// scope overlaps `Q` has its label contained in `Q`. A universal label is
    /// never contained in a concrete set, so it fails the test whenever it
    /// overlaps.
    pub fn implies_qdet(&self, q: VarSet) -> bool {
        self.vtree.node_ids().all(|id| {
            let scope = self.vtree.scope(id).expect("valid node");
            !scope.overlaps(q) || self.labels[id.index()].subset_of(q)
        })
    }

    /// Enumerates all nonempty `Q ⊆ V` whose determinism this md-vtree
    /// implies. Exponential in `|V|`; refuses beyond `bound` variables
    /// (default [`DEFAULT_ENUM_BOUND`]).
    pub fn enumerate_implied(&self, bound: Option<usize>) -> Result<Vec<VarSet>> {
        let full = self.scope();
        let bound = bound.unwrap_or(DEFAULT_ENUM_BOUND);
        if full.len() > bound {
            return Err(Error::EnumerationBound(full.len(), bound));
        }
        Ok(full
            .subsets()
            .filter(|q| !q.is_empty() && self.implies_qdet(*q))
            .collect())
    }

    /// Per-node regularity: each internal label equals one child's label or
    /// the union of both.
    pub fn is_regular(&self) -> bool {
        self.vtree.node_ids().all(|id| match self.vtree.children(id) {
            None => true,
            Some((l, r)) => {
                let pm = self.label(id);
                let pl = self.label(l);
                let pr = self.label(r);
                pm == pl || pm == pr || pm == pl.union(pr)
            }
        })
    }

    /// Expand-child-label transform: replaces the child's label with
    /// `ψ(child) ∪ (ψ(parent) ∩ φ(child))`. Preserves the implied
    /// determinisms and can only grow the label.
    pub fn expand_child_label(
        &self,
        parent: VtreeNodeId,
        child: VtreeNodeId,
    ) -> Result<MdVtree> {
        match self.vtree.children(parent) {
            Some((l, r)) if l == child || r == child => {}
            _ => return Err(Error::NotParentChild(parent.index(), child.index())),
        }
        let scope_ch = self.vtree.scope(child)?;
        let pushed = match self.label(parent) {
            Label::Universal => Label::Set(scope_ch),
            Label::Set(p) => Label::Set(p.intersect(scope_ch)),
        };
        let new = self.label(child).union(pushed);
        Ok(self.with_label(child, new))
    }

    /// Expand-parent-label transform: replaces a non-leaf node's label with
    /// the union of its children's labels over the *active* children (those
    /// whose label intersects the parent's).
    ///
    /// Universal labels need care: a universal parent already blocks every
    /// overlapping implied set, so it stays universal; a universal child
    /// blocks everything overlapping its scope, so the parent may go
    /// universal too when its label reaches into that child, and otherwise
    /// simply adopts the other child's label.
    ///
    /// Precondition (established by a prior expand-child sweep): every
    /// parent-label element inside a child's scope already sits in that
    /// child's label.
    pub fn expand_parent_label(&self, parent: VtreeNodeId) -> Result<MdVtree> {
        let (l, r) = self
            .vtree
            .children(parent)
            .ok_or_else(|| Error::ExpandPrecondition(parent.index()))?;
        for ch in [l, r] {
            if !self.expand_precondition_holds(parent, ch) {
                return Err(Error::ExpandPrecondition(parent.index()));
            }
        }
        let new = match self.label(parent) {
            Label::Universal => Label::Universal,
            Label::Set(p) => {
                let mut universal_side = false;
                for ch in [l, r] {
                    if self.label(ch).is_universal()
                        && p.overlaps(self.vtree.scope(ch).expect("child"))
                    {
                        universal_side = true;
                    }
                }
                if universal_side {
                    // Everything the parent could still imply is already
                    // blocked through that child.
                    Label::Universal
                } else if self.label(l).is_universal() || self.label(r).is_universal() {
                    // The parent's demands live entirely on the concrete
                    // side; implied sets never reach the universal side.
                    if self.label(l).is_universal() {
                        self.label(r)
                    } else {
                        self.label(l)
                    }
                } else {
                    let mut new = Label::empty();
                    for ch in [l, r] {
                        if let Label::Set(c) = self.label(ch) {
                            if p.overlaps(c) {
                                new = new.union(self.label(ch));
                            }
                        }
                    }
                    new
                }
            }
        };
        Ok(self.with_label(parent, new))
    }

    /// "Every parent-label element inside the child's scope is in the child's
    /// label," read under the universal-set algebra.
    fn expand_precondition_holds(&self, parent: VtreeNodeId, child: VtreeNodeId) -> bool {
        let scope_ch = self.vtree.scope(child).expect("valid node");
        match (self.label(parent), self.label(child)) {
            (_, Label::Universal) => true,
            (Label::Universal, Label::Set(c)) => c == scope_ch,
            (Label::Set(p), Label::Set(c)) => p.intersect(scope_ch).is_subset(c),
        }
    }

    /// Regularizes the md-vtree: expand-child sweeps root-down over every
    /// parent/child pair, then expand-parent sweeps leaves-up. The output
    /// implies exactly the same determinisms and every label is a pointwise
    /// superset of the input's; it is regular except below internal
    /// empty-set labels over nonempty-labelled children, where no regular
    /// md-vtree with the same implied sets exists.
    ///
    /// Universal labels cascade to their whole subtree in the downward sweep:
    /// anything overlapping the subtree is already blocked at its root, so
    /// raising the descendants to universal changes no implied set while
    /// strictly enlarging the circuit class.
    pub fn regularize(&self) -> MdVtree {
        let mut w = self.clone();
        for id in self.vtree.topological() {
            if let Some((l, r)) = self.vtree.children(id) {
                if w.label(id).is_universal() {
                    w = w.with_label(l, Label::Universal);
                    w = w.with_label(r, Label::Universal);
                } else {
                    w = w.expand_child_label(id, l).expect("parent/child");
                    w = w.expand_child_label(id, r).expect("parent/child");
                }
            }
        }
        for id in self.vtree.reverse_topological() {
            if !self.vtree.is_leaf(id) {
                w = w.expand_parent_label(id).expect("precondition by sweep");
            }
        }
        w
    }
}

/// Chooses the most expressive labelling of `vtree` that still implies
/// `Q`-determinism for every `Q` in `requirements`: each node starts
/// universal, is intersected with every overlapping requirement, and finally
/// clipped to its scope if anything fired.
pub fn optimal_labelling(vtree: &Arc<Vtree>, requirements: &[VarSet]) -> Result<MdVtree> {
    if requirements.iter().any(|q| q.is_empty()) {
        return Err(Error::EmptyRequirement);
    }
    let mut labels = Vec::with_capacity(vtree.len());
    for id in vtree.node_ids() {
        let scope = vtree.scope(id)?;
        let mut label = Label::Universal;
        for &q in requirements {
            if q.overlaps(scope) {
                label = label.intersect(Label::Set(q));
            }
        }
        if !label.is_universal() {
            label = label.intersect(Label::Set(scope));
        }
        labels.push(label);
    }
    MdVtree::new(vtree.clone(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vars::VariableSpace;
    use crate::vtree::VtreeNode;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    pub fn space4() -> Arc<VariableSpace> {
        VariableSpace::from_pairs(vec![("V1", 2), ("V2", 2), ("V3", 2), ("V4", 2)]).unwrap()
    }

    /// The vtree ((V1 V2)(V3 V4)) with nodes 0..=3 the leaves, 4 = (V1 V2),
    /// 5 = (V3 V4), 6 = root.
    pub fn two_by_two(space: &Arc<VariableSpace>) -> Arc<Vtree> {
        let v = |n: &str| VarSet::singleton(space.lookup(n).unwrap());
        Vtree::new(
            space.clone(),
            vec![
                VtreeNode::Leaf { scope: v("V1") },
                VtreeNode::Leaf { scope: v("V2") },
                VtreeNode::Leaf { scope: v("V3") },
                VtreeNode::Leaf { scope: v("V4") },
                VtreeNode::Internal { left: VtreeNodeId(0), right: VtreeNodeId(1) },
                VtreeNode::Internal { left: VtreeNodeId(2), right: VtreeNodeId(3) },
                VtreeNode::Internal { left: VtreeNodeId(4), right: VtreeNodeId(5) },
            ],
            VtreeNodeId(6),
        )
        .unwrap()
    }

    fn set(space: &VariableSpace, names: &[&str]) -> VarSet {
        space.set_of(names).unwrap()
    }

    /// Strong-determinism labelling: each internal node labelled with its
    /// left child's scope, leaves with their own variable.
    pub fn psdd_style(space: &Arc<VariableSpace>, vtree: &Arc<Vtree>) -> MdVtree {
        let _ = space;
        let labels = vtree
            .node_ids()
            .map(|id| match vtree.children(id) {
                None => Label::Set(vtree.scope(id).unwrap()),
                Some((l, _)) => Label::Set(vtree.scope(l).unwrap()),
            })
            .collect();
        MdVtree::new(vtree.clone(), labels).unwrap()
    }

    #[test]
    fn implied_sets_for_strong_determinism_labelling() {
        let space = space4();
        let vt = two_by_two(&space);
        let w = psdd_style(&space, &vt);
        assert!(w.implies_qdet(set(&space, &["V1", "V2"])));
        assert!(!MdVtree::fully_deterministic(vt.clone()).implies_qdet(set(&space, &["V1", "V2"])));
        let mut implied = w.enumerate_implied(None).unwrap();
        implied.sort();
        let mut expected = vec![
            set(&space, &["V1", "V2"]),
            set(&space, &["V1", "V2", "V3"]),
            set(&space, &["V1", "V2", "V3", "V4"]),
        ];
        expected.sort();
        assert_eq!(implied, expected);
    }

    #[test]
    fn implied_sets_for_plain_determinism_labelling() {
        let space = space4();
        let vt = two_by_two(&space);
        let w = MdVtree::fully_deterministic(vt);
        let implied = w.enumerate_implied(None).unwrap();
        assert_eq!(implied, vec![space.all()]);
    }

    #[test]
    fn all_universal_implies_nothing() {
        let space = space4();
        let vt = two_by_two(&space);
        let w = MdVtree::all_universal(vt);
        assert!(w.enumerate_implied(None).unwrap().is_empty());
    }

    #[test]
    fn full_set_implied_when_labels_concrete() {
        let space = space4();
        let vt = two_by_two(&space);
        let w = MdVtree::fully_deterministic(vt);
        assert!(w.implies_qdet(space.all()));
    }

    #[test]
    fn optimal_labelling_reproduces_expected_labels() {
        let space = space4();
        let vt = two_by_two(&space);
        let reqs = vec![
            set(&space, &["V1", "V2"]),
            set(&space, &["V1", "V2", "V3"]),
            set(&space, &["V1", "V2", "V3", "V4"]),
        ];
        let w = optimal_labelling(&vt, &reqs).unwrap();
        assert_eq!(w.label(VtreeNodeId(6)), Label::Set(set(&space, &["V1", "V2"])));
        assert_eq!(w.label(VtreeNodeId(4)), Label::Set(set(&space, &["V1", "V2"])));
        assert_eq!(w.label(VtreeNodeId(5)), Label::Set(set(&space, &["V3"])));
        assert_eq!(w.label(VtreeNodeId(0)), Label::Set(set(&space, &["V1"])));
        assert_eq!(w.label(VtreeNodeId(1)), Label::Set(set(&space, &["V2"])));
        assert_eq!(w.label(VtreeNodeId(2)), Label::Set(set(&space, &["V3"])));
        assert_eq!(w.label(VtreeNodeId(3)), Label::Set(set(&space, &["V4"])));
        assert!(w.is_regular());
        for q in &reqs {
            assert!(w.implies_qdet(*q));
        }
    }

    #[test]
    fn optimal_labelling_with_no_requirements_is_universal() {
        let space = space4();
        let vt = two_by_two(&space);
        let w = optimal_labelling(&vt, &[]).unwrap();
        assert!(w.labels().iter().all(|l| l.is_universal()));
    }

    #[test]
    fn optimal_labelling_rejects_empty_requirement() {
        let space = space4();
        let vt = two_by_two(&space);
        assert!(matches!(
            optimal_labelling(&vt, &[VarSet::empty()]),
            Err(Error::EmptyRequirement)
        ));
    }

    #[test]
    fn regularity_checks() {
        let space = space4();
        let vt = two_by_two(&space);
        assert!(!psdd_style(&space, &vt).is_regular());
        let reqs = vec![
            set(&space, &["V1", "V2"]),
            set(&space, &["V1", "V2", "V3"]),
            space.all(),
        ];
        assert!(optimal_labelling(&vt, &reqs).unwrap().is_regular());
        assert!(MdVtree::all_universal(vt).is_regular());
    }

    #[test]
    fn expand_child_label_formula() {
        let space = VariableSpace::from_pairs(vec![("A", 2), ("B", 2), ("C", 2)]).unwrap();
        let v = |n: &str| VarSet::singleton(space.lookup(n).unwrap());
        let vt = Vtree::new(
            space.clone(),
            vec![
                VtreeNode::Leaf { scope: v("A").union(v("B")) },
                VtreeNode::Leaf { scope: v("C") },
                VtreeNode::Internal { left: VtreeNodeId(0), right: VtreeNodeId(1) },
            ],
            VtreeNodeId(2),
        )
        .unwrap();
        let w = MdVtree::new(
            vt.clone(),
            vec![
                Label::Set(v("B")),
                Label::Set(v("C")),
                Label::Set(v("A").union(v("C"))),
            ],
        )
        .unwrap();
        let w2 = w.expand_child_label(VtreeNodeId(2), VtreeNodeId(0)).unwrap();
        assert_eq!(w2.label(VtreeNodeId(0)), Label::Set(v("A").union(v("B"))));
        // Empty parent label leaves the child untouched.
        let w3 = w.with_label(VtreeNodeId(2), Label::empty());
        let w4 = w3.expand_child_label(VtreeNodeId(2), VtreeNodeId(0)).unwrap();
        assert_eq!(w4.label(VtreeNodeId(0)), w.label(VtreeNodeId(0)));
        // Universal parent label expands the child to its full scope.
        let w5 = w.with_label(VtreeNodeId(2), Label::Universal);
        let w6 = w5.expand_child_label(VtreeNodeId(2), VtreeNodeId(0)).unwrap();
        assert_eq!(w6.label(VtreeNodeId(0)), Label::Set(v("A").union(v("B"))));
        assert!(matches!(
            w.expand_child_label(VtreeNodeId(0), VtreeNodeId(1)),
            Err(Error::NotParentChild(_, _))
        ));
    }

    #[test]
    fn expand_parent_label_formula() {
        let space = VariableSpace::from_pairs(vec![("A", 2), ("B", 2), ("C", 2)]).unwrap();
        let v = |n: &str| VarSet::singleton(space.lookup(n).unwrap());
        let vt = Vtree::new(
            space.clone(),
            vec![
                VtreeNode::Leaf { scope: v("A").union(v("B")) },
                VtreeNode::Leaf { scope: v("C") },
                VtreeNode::Internal { left: VtreeNodeId(0), right: VtreeNodeId(1) },
            ],
            VtreeNodeId(2),
        )
        .unwrap();
        // Parent {A, C} with children {A, B} and {C}: both children active.
        let w = MdVtree::new(
            vt.clone(),
            vec![
                Label::Set(v("A").union(v("B"))),
                Label::Set(v("C")),
                Label::Set(v("A").union(v("C"))),
            ],
        )
        .unwrap();
        let w2 = w.expand_parent_label(VtreeNodeId(2)).unwrap();
        assert_eq!(
            w2.label(VtreeNodeId(2)),
            Label::Set(v("A").union(v("B")).union(v("C")))
        );
        // Empty parent label: no active children, so the union is empty.
        let w3 = w.with_label(VtreeNodeId(2), Label::empty());
        let w4 = w3.expand_parent_label(VtreeNodeId(2)).unwrap();
        assert_eq!(w4.label(VtreeNodeId(2)), Label::empty());
        assert!(w.expand_parent_label(VtreeNodeId(0)).is_err());
    }

    #[test]
    fn regularize_matches_optimal_labelling_on_strong_det_example() {
        let space = space4();
        let vt = two_by_two(&space);
        let w = psdd_style(&space, &vt);
        let reg = w.regularize();
        assert!(reg.is_regular());
        let reqs = vec![
            set(&space, &["V1", "V2"]),
            set(&space, &["V1", "V2", "V3"]),
            space.all(),
        ];
        let opt = optimal_labelling(&vt, &reqs).unwrap();
        assert_eq!(reg.labels(), opt.labels());
        assert_eq!(
            reg.enumerate_implied(None).unwrap(),
            w.enumerate_implied(None).unwrap()
        );
    }

    #[test]
    fn regularize_is_identity_on_all_universal() {
        let space = space4();
        let vt = two_by_two(&space);
        let w = MdVtree::all_universal(vt);
        let reg = w.regularize();
        assert_eq!(reg.labels(), w.labels());
    }

    /// Random labelling with universal and nonempty set labels. Internal
    /// empty-set labels are excluded: over nonempty-labelled children they
    /// admit no regular md-vtree with the same implied sets.
    pub fn random_labelling(vtree: &Arc<Vtree>, seed: u64) -> MdVtree {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let labels = vtree
            .node_ids()
            .map(|id| {
                let scope = vtree.scope(id).unwrap();
                if rng.random_bool(0.2) {
                    Label::Universal
                } else {
                    let mut s = VarSet::empty();
                    for v in scope.iter() {
                        if rng.random_bool(0.6) {
                            s.insert(v);
                        }
                    }
                    if s.is_empty() {
                        let vars: Vec<_> = scope.iter().collect();
                        s.insert(vars[rng.random_range(0..vars.len())]);
                    }
                    Label::Set(s)
                }
            })
            .collect();
        MdVtree::new(vtree.clone(), labels).unwrap()
    }

    #[test]
    fn regularize_preserves_implied_and_grows_labels() {
        for seed in 0..60u64 {
            let n = 3 + (seed as usize % 6);
            let space = VariableSpace::binary("x", n);
            let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
            let w = random_labelling(&vt, seed.wrapping_mul(97).wrapping_add(1));
            let reg = w.regularize();
            assert!(reg.is_regular(), "seed {seed}");
            for id in vt.node_ids() {
                assert!(
                    reg.label(id).contains_label(w.label(id)),
                    "label shrank at node {} (seed {seed})",
                    id.index()
                );
            }
            assert_eq!(
                reg.enumerate_implied(None).unwrap(),
                w.enumerate_implied(None).unwrap(),
                "implied determinisms changed (seed {seed})"
            );
        }
    }

    #[test]
    fn optimal_labelling_on_nested_requirements_is_regular() {
        // For requirement sets forming a chain the output labelling is
        // regular; incomparable requirements can force empty internal labels,
        // which have no regular shape.
        for seed in 0..30u64 {
            let n = 4 + (seed as usize % 5);
            let space = VariableSpace::binary("x", n);
            let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed + 9000);
            let mut chain: Vec<VarSet> = Vec::new();
            let mut cur = VarSet::empty();
            for v in space.all().iter() {
                if rng.random_bool(0.5) {
                    cur.insert(v);
                }
            }
            if cur.is_empty() {
                cur = VarSet::singleton(space.all().iter().next().unwrap());
            }
            chain.push(cur);
            for _ in 0..2 {
                for v in space.all().iter() {
                    if rng.random_bool(0.3) {
                        cur.insert(v);
                    }
                }
                chain.push(cur);
            }
            let w = optimal_labelling(&vt, &chain).unwrap();
            assert!(w.is_regular(), "seed {seed}");
            for q in &chain {
                assert!(w.implies_qdet(*q), "seed {seed}");
            }
        }
    }

    #[test]
    fn regularize_with_empty_internal_label_still_preserves_implied() {
        // An empty internal label over nonempty-labelled children has no
        // regular equivalent; the transform still preserves the implied sets
        // and never shrinks a label.
        let space = VariableSpace::from_pairs(vec![("A", 2), ("B", 2)]).unwrap();
        let vt = Vtree::balanced(
            space.clone(),
            &[space.lookup("A").unwrap(), space.lookup("B").unwrap()],
        )
        .unwrap();
        let a = VarSet::singleton(space.lookup("A").unwrap());
        let b = VarSet::singleton(space.lookup("B").unwrap());
        let w = MdVtree::new(
            vt.clone(),
            vec![Label::Set(a), Label::Set(b), Label::Set(VarSet::empty())],
        )
        .unwrap();
        let reg = w.regularize();
        assert_eq!(
            reg.enumerate_implied(None).unwrap(),
            w.enumerate_implied(None).unwrap()
        );
        for id in vt.node_ids() {
            assert!(reg.label(id).contains_label(w.label(id)));
        }
    }

    #[test]
    fn generality_tradeoff_pointwise_supersets() {
        // Growing labels pointwise can only shrink the implied set.
        for seed in 0..40u64 {
            let n = 3 + (seed as usize % 5);
            let space = VariableSpace::binary("x", n);
            let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
            let w = random_labelling(&vt, seed + 1000);
            let mut rng = ChaCha12Rng::seed_from_u64(seed + 2000);
            let grown: Vec<Label> = vt
                .node_ids()
                .map(|id| {
                    let l = w.label(id);
                    if rng.random_bool(0.3) {
                        Label::Universal
                    } else {
                        match l {
                            Label::Universal => Label::Universal,
                            Label::Set(s) => {
                                let mut s = s;
                                for v in vt.scope(id).unwrap().iter() {
                                    if rng.random_bool(0.3) {
                                        s.insert(v);
                                    }
                                }
                                Label::Set(s)
                            }
                        }
                    }
                })
                .collect();
            let wg = MdVtree::new(vt.clone(), grown).unwrap();
            let implied_w = w.enumerate_implied(None).unwrap();
            let implied_g = wg.enumerate_implied(None).unwrap();
            for q in &implied_g {
                assert!(implied_w.contains(q), "seed {seed}");
            }
        }
    }

    #[test]
    fn optimal_labelling_is_maximal() {
        // Adding any single variable to a concrete label breaks some
        // requirement that overlaps the node's scope.
        for seed in 0..30u64 {
            let n = 4 + (seed as usize % 5);
            let space = VariableSpace::binary("x", n);
            let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed + 500);
            let reqs: Vec<VarSet> = (0..3)
                .map(|_| {
                    let mut s = VarSet::empty();
                    while s.is_empty() {
                        for v in space.all().iter() {
                            if rng.random_bool(0.4) {
                                s.insert(v);
                            }
                        }
                    }
                    s
                })
                .collect();
            let w = optimal_labelling(&vt, &reqs).unwrap();
            for q in &reqs {
                assert!(w.implies_qdet(*q), "seed {seed}");
            }
            for id in vt.node_ids() {
                let scope = vt.scope(id).unwrap();
                if let Label::Set(current) = w.label(id) {
                    for x in scope.difference(current).iter() {
                        let mut bigger = current;
                        bigger.insert(x);
                        let wx = w.with_label(id, Label::Set(bigger));
                        let broke = reqs
                            .iter()
                            .any(|q| q.overlaps(scope) && !wx.implies_qdet(*q));
                        assert!(broke, "adding a variable kept all requirements (seed {seed})");
                    }
                }
            }
        }
    }
}
