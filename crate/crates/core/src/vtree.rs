//! Vtrees: rooted binary trees whose leaf scopes partition the variables.

use crate::error::{Error, Result};
use crate::vars::{VarId, VarSet, VariableSpace};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

/// Index of a node within a [`Vtree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VtreeNodeId(pub usize);

impl VtreeNodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VtreeNode {
    Leaf { scope: VarSet },
    Internal { left: VtreeNodeId, right: VtreeNodeId },
}

/// A rooted binary tree over disjoint leaf scopes. Internal node scopes are
/// derived (and cached) as the union of their children's scopes.
#[derive(Debug, Clone)]
pub struct Vtree {
    space: Arc<VariableSpace>,
    nodes: Vec<VtreeNode>,
    scopes: Vec<VarSet>,
    parents: Vec<Option<VtreeNodeId>>,
    root: VtreeNodeId,
}

impl Vtree {
    /// Builds a vtree from explicit nodes. Validates tree shape and leaf-scope
    /// disjointness.
    pub fn new(
        space: Arc<VariableSpace>,
        nodes: Vec<VtreeNode>,
        root: VtreeNodeId,
    ) -> Result<Arc<Vtree>> {
        if root.index() >= nodes.len() {
            return Err(Error::UnknownNode(root.index()));
        }
        let n = nodes.len();
        let mut parents: Vec<Option<VtreeNodeId>> = vec![None; n];
        for (i, node) in nodes.iter().enumerate() {
            if let VtreeNode::Internal { left, right } = node {
                for &c in [left, right] {
                    if c.index() >= n {
                        return Err(Error::UnknownNode(c.index()));
                    }
                    if c.index() == i {
                        return Err(Error::InvalidVtree("self-loop".into()));
                    }
                    if parents[c.index()].is_some() {
                        return Err(Error::InvalidVtree(format!(
                            "node {} has two parents",
                            c.index()
                        )));
                    }
                    parents[c.index()] = Some(VtreeNodeId(i));
                }
            }
        }
        if parents[root.index()].is_some() {
            return Err(Error::InvalidVtree("root has a parent".into()));
        }
        for (i, p) in parents.iter().enumerate() {
            if p.is_none() && i != root.index() {
                return Err(Error::InvalidVtree(format!("node {i} unreachable from root")));
            }
        }
        let mut scopes = vec![VarSet::empty(); n];
        let mut seen = VarSet::empty();
        // Leaves first, then a post-order pass for internal scopes.
        for (i, node) in nodes.iter().enumerate() {
            if let VtreeNode::Leaf { scope } = node {
                if scope.is_empty() {
                    return Err(Error::InvalidVtree(format!("leaf {i} has empty scope")));
                }
                if seen.overlaps(*scope) {
                    return Err(Error::InvalidVtree(format!("leaf {i} overlaps another leaf")));
                }
                seen = seen.union(*scope);
                scopes[i] = *scope;
            }
        }
        fn fill(nodes: &[VtreeNode], scopes: &mut [VarSet], id: VtreeNodeId) -> VarSet {
            match nodes[id.index()] {
                VtreeNode::Leaf { scope } => scope,
                VtreeNode::Internal { left, right } => {
                    let s = fill(nodes, scopes, left).union(fill(nodes, scopes, right));
                    scopes[id.index()] = s;
                    s
                }
            }
        }
        fill(&nodes, &mut scopes, root);
        Ok(Arc::new(Vtree { space, nodes, scopes, parents, root }))
    }

    /// Single-leaf vtree over `scope`.
    pub fn leaf(space: Arc<VariableSpace>, scope: VarSet) -> Result<Arc<Vtree>> {
        Vtree::new(space, vec![VtreeNode::Leaf { scope }], VtreeNodeId(0))
    }

    /// A balanced vtree with singleton leaves over the given variables, in the
    /// given order.
    pub fn balanced(space: Arc<VariableSpace>, order: &[VarId]) -> Result<Arc<Vtree>> {
        let mut nodes = Vec::new();
        let root = build_balanced(&mut nodes, order);
        Vtree::new(space, nodes, root)
    }

    /// A right-linear vtree with singleton leaves over the given variables.
    pub fn right_linear(space: Arc<VariableSpace>, order: &[VarId]) -> Result<Arc<Vtree>> {
        let mut nodes = Vec::new();
        let root = build_right_linear(&mut nodes, order);
        Vtree::new(space, nodes, root)
    }

    /// A random vtree with singleton leaves over `vars`, seeded.
    pub fn random(space: Arc<VariableSpace>, vars: VarSet, seed: u64) -> Result<Arc<Vtree>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut nodes = Vec::new();
        let order: Vec<VarId> = vars.iter().collect();
        let root = build_random(&mut nodes, &order, &mut rng);
        Vtree::new(space, nodes, root)
    }

    /// A vtree whose root splits `left_vars` from the rest, with both sides
    /// random below the root. Used for requirement-separating vtrees.
    pub fn root_split(
        space: Arc<VariableSpace>,
        full: VarSet,
        left_vars: VarSet,
        seed: u64,
    ) -> Result<Arc<Vtree>> {
        let rest = full.difference(left_vars);
        if left_vars.is_empty() || rest.is_empty() {
            return Vtree::random(space, full, seed);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut nodes = Vec::new();
        let lo: Vec<VarId> = left_vars.iter().collect();
        let ro: Vec<VarId> = rest.iter().collect();
        let l = build_random(&mut nodes, &lo, &mut rng);
        let r = build_random(&mut nodes, &ro, &mut rng);
        let root = VtreeNodeId(nodes.len());
        nodes.push(VtreeNode::Internal { left: l, right: r });
        Vtree::new(space, nodes, root)
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn root(&self) -> VtreeNodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: VtreeNodeId) -> &VtreeNode {
        &self.nodes[id.index()]
    }

    pub fn is_leaf(&self, id: VtreeNodeId) -> bool {
        matches!(self.nodes[id.index()], VtreeNode::Leaf { .. })
    }

    pub fn children(&self, id: VtreeNodeId) -> Option<(VtreeNodeId, VtreeNodeId)> {
        match self.nodes[id.index()] {
            VtreeNode::Internal { left, right } => Some((left, right)),
            VtreeNode::Leaf { .. } => None,
        }
    }

    pub fn parent(&self, id: VtreeNodeId) -> Option<VtreeNodeId> {
        self.parents.get(id.index()).copied().flatten()
    }

    /// The scope φ of a node.
    pub fn scope(&self, id: VtreeNodeId) -> Result<VarSet> {
        self.scopes
            .get(id.index())
            .copied()
            .ok_or(Error::UnknownNode(id.index()))
    }

    fn scope_unchecked(&self, id: VtreeNodeId) -> VarSet {
        self.scopes[id.index()]
    }

    /// Restricted scope: φ(m) ∩ restriction.
    pub fn restricted_scope(&self, id: VtreeNodeId, restriction: VarSet) -> Result<VarSet> {
        Ok(self.scope(id)?.intersect(restriction))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = VtreeNodeId> {
        (0..self.nodes.len()).map(VtreeNodeId)
    }

    /// Node ids in a parents-before-children order starting at the root.
    pub fn topological(&self) -> Vec<VtreeNodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some((l, r)) = self.children(id) {
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }

    /// Node ids children-before-parents.
    pub fn reverse_topological(&self) -> Vec<VtreeNodeId> {
        let mut out = self.topological();
        out.reverse();
        out
    }

    /// Structural compatibility of two vtrees: whether they have the same
    /// shape when projected onto their common variables. The recursion mirrors
    /// how the product operation pairs nodes: disjoint scopes and leaf pairs
    /// are base cases, otherwise one root is deferred into a child of the
    /// other, or both roots' children match up.
    pub fn compatible(a: &Vtree, b: &Vtree) -> bool {
        compatible_at(a, a.root, b, b.root)
    }
}

pub(crate) fn compatible_at(a: &Vtree, ma: VtreeNodeId, b: &Vtree, mb: VtreeNodeId) -> bool {
    let common = a.scope_unchecked(ma).intersect(b.scope_unchecked(mb));
    if common.is_empty() {
        return true;
    }
    let a_leaf = a.is_leaf(ma);
    let b_leaf = b.is_leaf(mb);
    if a_leaf && b_leaf {
        return true;
    }
    let rb = b.scope_unchecked(mb).intersect(common);
    if let Some((l, r)) = a.children(ma) {
        // Deferral: b's root matches one of a's children on the common vars.
        if a.scope_unchecked(l).intersect(common) == rb && compatible_at(a, l, b, mb) {
            return true;
        }
        if a.scope_unchecked(r).intersect(common) == rb && compatible_at(a, r, b, mb) {
            return true;
        }
    }
    let ra = a.scope_unchecked(ma).intersect(common);
    if let Some((l, r)) = b.children(mb) {
        if b.scope_unchecked(l).intersect(common) == ra && compatible_at(a, ma, b, l) {
            return true;
        }
        if b.scope_unchecked(r).intersect(common) == ra && compatible_at(a, ma, b, r) {
            return true;
        }
    }
    if let (Some((al, ar)), Some((bl, br))) = (a.children(ma), b.children(mb)) {
        let straight = a.scope_unchecked(al).intersect(common) == b.scope_unchecked(bl).intersect(common)
            && a.scope_unchecked(ar).intersect(common) == b.scope_unchecked(br).intersect(common)
            && compatible_at(a, al, b, bl)
            && compatible_at(a, ar, b, br);
        if straight {
            return true;
        }
        let crossed = a.scope_unchecked(al).intersect(common) == b.scope_unchecked(br).intersect(common)
            && a.scope_unchecked(ar).intersect(common) == b.scope_unchecked(bl).intersect(common)
            && compatible_at(a, al, b, br)
            && compatible_at(a, ar, b, bl);
        if crossed {
            return true;
        }
    }
    false
}

fn build_balanced(nodes: &mut Vec<VtreeNode>, order: &[VarId]) -> VtreeNodeId {
    if order.len() == 1 {
        nodes.push(VtreeNode::Leaf { scope: VarSet::singleton(order[0]) });
        return VtreeNodeId(nodes.len() - 1);
    }
    let (l, r) = order.split_at(order.len() / 2);
    let li = build_balanced(nodes, l);
    let ri = build_balanced(nodes, r);
    nodes.push(VtreeNode::Internal { left: li, right: ri });
    VtreeNodeId(nodes.len() - 1)
}

fn build_right_linear(nodes: &mut Vec<VtreeNode>, order: &[VarId]) -> VtreeNodeId {
    if order.len() == 1 {
        nodes.push(VtreeNode::Leaf { scope: VarSet::singleton(order[0]) });
        return VtreeNodeId(nodes.len() - 1);
    }
    nodes.push(VtreeNode::Leaf { scope: VarSet::singleton(order[0]) });
    let li = VtreeNodeId(nodes.len() - 1);
    let ri = build_right_linear(nodes, &order[1..]);
    nodes.push(VtreeNode::Internal { left: li, right: ri });
    VtreeNodeId(nodes.len() - 1)
}

fn build_random(nodes: &mut Vec<VtreeNode>, order: &[VarId], rng: &mut ChaCha12Rng) -> VtreeNodeId {
    if order.len() == 1 {
        nodes.push(VtreeNode::Leaf { scope: VarSet::singleton(order[0]) });
        return VtreeNodeId(nodes.len() - 1);
    }
    let mut shuffled = order.to_vec();
    shuffled.shuffle(rng);
    let cut = rng.random_range(1..shuffled.len());
    let (l, r) = shuffled.split_at(cut);
    let l = l.to_vec();
    let r = r.to_vec();
    let li = build_random(nodes, &l, rng);
    let ri = build_random(nodes, &r, rng);
    nodes.push(VtreeNode::Internal { left: li, right: ri });
    VtreeNodeId(nodes.len() - 1)
}
