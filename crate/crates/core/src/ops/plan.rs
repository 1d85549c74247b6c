//! Structural plans for the circuit operations.
//!
//! Marginalization/instantiation and products transform the vtree itself:
//! scopes shrink (with empty subtrees pruned and single-child chains spliced
//! out) or two vtrees get woven together. These plans capture that structure
//! once, so the md-vtree propagation used by pipeline analysis and the
//! layer-building used by the actual circuit operations cannot drift apart.
//! Building a plan never allocates layers.

use crate::error::{Error, Result};
use crate::label::Label;
use crate::mdvtree::MdVtree;
use crate::vars::VarSet;
use crate::vtree::{Vtree, VtreeNode, VtreeNodeId};
use std::sync::Arc;

/// Which child of an internal node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Plan for removing variables (marginalization or instantiation).
#[derive(Debug)]
pub enum RemovalPlan {
    /// Surviving leaf with reduced scope.
    Leaf {
        old: VtreeNodeId,
        scope: VarSet,
        label: Label,
    },
    /// Surviving internal node with both children intact.
    Internal {
        old: VtreeNodeId,
        label: Label,
        left: Box<RemovalPlan>,
        right: Box<RemovalPlan>,
    },
    /// Internal node one of whose sides vanished entirely: the node's sums
    /// fold into the kept child's position, carrying this node's label.
    Collapse {
        old: VtreeNodeId,
        label: Label,
        dropped: VtreeNodeId,
        dropped_side: Side,
        kept: Box<RemovalPlan>,
    },
}

impl RemovalPlan {
    /// The label rule applied per node: marginalization turns labels
    /// overlapping the removed set universal, instantiation subtracts it.
    pub fn for_marg(w: &MdVtree, removed: VarSet) -> Option<RemovalPlan> {
        Self::build(w, w.vtree().root(), removed, &|l| {
            if l.overlaps(removed) {
                Label::Universal
            } else {
                l
            }
        })
    }

    pub fn for_inst(w: &MdVtree, removed: VarSet) -> Option<RemovalPlan> {
        Self::build(w, w.vtree().root(), removed, &|l| l.difference(removed))
    }

    fn build(
        w: &MdVtree,
        node: VtreeNodeId,
        removed: VarSet,
        rule: &dyn Fn(Label) -> Label,
    ) -> Option<RemovalPlan> {
        let vt = w.vtree();
        let scope = vt.scope(node).expect("node");
        if scope.is_subset(removed) {
            return None;
        }
        match vt.children(node) {
            None => Some(RemovalPlan::Leaf {
                old: node,
                scope: scope.difference(removed),
                label: rule(w.label(node)),
            }),
            Some((l, r)) => {
                let lp = Self::build(w, l, removed, rule);
                let rp = Self::build(w, r, removed, rule);
                match (lp, rp) {
                    (Some(a), Some(b)) => Some(RemovalPlan::Internal {
                        old: node,
                        label: rule(w.label(node)),
                        left: Box::new(a),
                        right: Box::new(b),
                    }),
                    (Some(a), None) => Some(RemovalPlan::Collapse {
                        old: node,
                        label: rule(w.label(node)),
                        dropped: r,
                        dropped_side: Side::Right,
                        kept: Box::new(a),
                    }),
                    (None, Some(b)) => Some(RemovalPlan::Collapse {
                        old: node,
                        label: rule(w.label(node)),
                        dropped: l,
                        dropped_side: Side::Left,
                        kept: Box::new(b),
                    }),
                    (None, None) => None,
                }
            }
        }
    }

    /// Builds the output md-vtree (fresh node ids) without touching layers.
    pub fn to_mdvtree(&self, space: Arc<crate::vars::VariableSpace>) -> Result<MdVtree> {
        let mut nodes = Vec::new();
        let mut labels = Vec::new();
        let root = self.push_nodes(&mut nodes, &mut labels);
        let vt = Vtree::new(space, nodes, VtreeNodeId(root))?;
        MdVtree::new(vt, labels)
    }

    pub(crate) fn push_nodes(&self, nodes: &mut Vec<VtreeNode>, labels: &mut Vec<Label>) -> usize {
        match self {
            RemovalPlan::Leaf { scope, label, .. } => {
                nodes.push(VtreeNode::Leaf { scope: *scope });
                labels.push(*label);
                nodes.len() - 1
            }
            RemovalPlan::Internal { label, left, right, .. } => {
                let l = left.push_nodes(nodes, labels);
                let r = right.push_nodes(nodes, labels);
                nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l),
                    right: VtreeNodeId(r),
                });
                labels.push(*label);
                nodes.len() - 1
            }
            RemovalPlan::Collapse { label, kept, .. } => {
                // The kept child's structure survives, but the sums that end
                // up there are this node's with the kept child's sums folded
                // through. The fold merges two sum levels, so only the union
                // of both levels' labels is guaranteed to hold.
                let n = kept.push_nodes(nodes, labels);
                labels[n] = label.union(labels[n]);
                n
            }
        }
    }
}

/// Plan for the product of two circuits over compatible vtrees. Each node
/// records which case of the recursion applies.
#[derive(Debug)]
pub enum ProdPlan {
    /// No shared variables: a fresh internal node pairs the two inputs.
    Disjoint { n1: VtreeNodeId, n2: VtreeNodeId },
    /// Both leaves: merge leaf functions pairwise.
    LeafMerge { n1: VtreeNodeId, n2: VtreeNodeId },
    /// The second operand matches one child of the first operand's root; the
    /// product defers into that child while the other child is copied.
    DeferFirst {
        n1: VtreeNodeId,
        side: Side,
        inner: Box<ProdPlan>,
    },
    /// Symmetric deferral into a child of the second operand's root.
    DeferSecond {
        n2: VtreeNodeId,
        side: Side,
        inner: Box<ProdPlan>,
    },
    /// Both roots' children match up pairwise (possibly crossed).
    Match {
        n1: VtreeNodeId,
        n2: VtreeNodeId,
        crossed: bool,
        left: Box<ProdPlan>,
        right: Box<ProdPlan>,
    },
}

impl ProdPlan {
    /// Builds the product plan, which doubles as the compatibility check.
    /// Case precedence: disjoint, leaf pair, deferral into the first operand
    /// (left child then right), deferral into the second, then matched
    /// children (straight then crossed).
    pub fn build(w1: &MdVtree, w2: &MdVtree) -> Result<ProdPlan> {
        let common = w1.scope().intersect(w2.scope());
        Self::build_at(w1, w1.vtree().root(), w2, w2.vtree().root(), common)
    }

    fn build_at(
        w1: &MdVtree,
        n1: VtreeNodeId,
        w2: &MdVtree,
        n2: VtreeNodeId,
        global_common: VarSet,
    ) -> Result<ProdPlan> {
        let v1 = w1.vtree();
        let v2 = w2.vtree();
        let s1 = v1.scope(n1)?;
        let s2 = v2.scope(n2)?;
        // The paired nodes always agree on the global common variables; the
        // recursion below maintains this.
        debug_assert_eq!(s1.intersect(global_common), s2.intersect(global_common));
        let common = s1.intersect(s2);
        if common.is_empty() {
            return Ok(ProdPlan::Disjoint { n1, n2 });
        }
        if v1.is_leaf(n1) && v2.is_leaf(n2) {
            return Ok(ProdPlan::LeafMerge { n1, n2 });
        }
        if let Some((l, r)) = v1.children(n1) {
            let target = s2.intersect(common);
            if v1.scope(l)?.intersect(common) == target {
                if let Ok(inner) = Self::build_at(w1, l, w2, n2, global_common) {
                    return Ok(ProdPlan::DeferFirst { n1, side: Side::Left, inner: Box::new(inner) });
                }
            }
            if v1.scope(r)?.intersect(common) == target {
                if let Ok(inner) = Self::build_at(w1, r, w2, n2, global_common) {
                    return Ok(ProdPlan::DeferFirst { n1, side: Side::Right, inner: Box::new(inner) });
                }
            }
        }
        if let Some((l, r)) = v2.children(n2) {
            let target = s1.intersect(common);
            if v2.scope(l)?.intersect(common) == target {
                if let Ok(inner) = Self::build_at(w1, n1, w2, l, global_common) {
                    return Ok(ProdPlan::DeferSecond { n2, side: Side::Left, inner: Box::new(inner) });
                }
            }
            if v2.scope(r)?.intersect(common) == target {
                if let Ok(inner) = Self::build_at(w1, n1, w2, r, global_common) {
                    return Ok(ProdPlan::DeferSecond { n2, side: Side::Right, inner: Box::new(inner) });
                }
            }
        }
        if let (Some((l1, r1)), Some((l2, r2))) = (v1.children(n1), v2.children(n2)) {
            let straight = v1.scope(l1)?.intersect(common) == v2.scope(l2)?.intersect(common)
                && v1.scope(r1)?.intersect(common) == v2.scope(r2)?.intersect(common);
            if straight {
                let left = Self::build_at(w1, l1, w2, l2, global_common);
                let right = Self::build_at(w1, r1, w2, r2, global_common);
                if let (Ok(a), Ok(b)) = (left, right) {
                    return Ok(ProdPlan::Match {
                        n1,
                        n2,
                        crossed: false,
                        left: Box::new(a),
                        right: Box::new(b),
                    });
                }
            }
            let crossed = v1.scope(l1)?.intersect(common) == v2.scope(r2)?.intersect(common)
                && v1.scope(r1)?.intersect(common) == v2.scope(l2)?.intersect(common);
            if crossed {
                let left = Self::build_at(w1, l1, w2, r2, global_common);
                let right = Self::build_at(w1, r1, w2, l2, global_common);
                if let (Ok(a), Ok(b)) = (left, right) {
                    return Ok(ProdPlan::Match {
                        n1,
                        n2,
                        crossed: true,
                        left: Box::new(a),
                        right: Box::new(b),
                    });
                }
            }
        }
        Err(Error::Incompatible)
    }

    /// Builds the output md-vtree without layers: label rules per case are
    /// empty set (disjoint pairing), first operand's label (deferral), and
    /// union (leaf merge and matched children).
    pub fn to_mdvtree(&self, w1: &MdVtree, w2: &MdVtree) -> Result<MdVtree> {
        let mut nodes = Vec::new();
        let mut labels = Vec::new();
        let root = self.push_nodes(w1, w2, &mut nodes, &mut labels)?;
        let vt = Vtree::new(w1.vtree().space().clone(), nodes, VtreeNodeId(root))?;
        MdVtree::new(vt, labels)
    }

    pub(crate) fn push_nodes(
        &self,
        w1: &MdVtree,
        w2: &MdVtree,
        nodes: &mut Vec<VtreeNode>,
        labels: &mut Vec<Label>,
    ) -> Result<usize> {
        Ok(match self {
            ProdPlan::Disjoint { n1, n2 } => {
                let l = copy_subtree(w1, *n1, nodes, labels);
                let r = copy_subtree(w2, *n2, nodes, labels);
                nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l),
                    right: VtreeNodeId(r),
                });
                labels.push(Label::Set(VarSet::empty()));
                nodes.len() - 1
            }
            ProdPlan::LeafMerge { n1, n2 } => {
                let scope = w1.vtree().scope(*n1)?.union(w2.vtree().scope(*n2)?);
                nodes.push(VtreeNode::Leaf { scope });
                labels.push(w1.label(*n1).union(w2.label(*n2)));
                nodes.len() - 1
            }
            ProdPlan::DeferFirst { n1, side, inner } => {
                let (l, r) = w1.vtree().children(*n1).expect("internal");
                let (new_l, new_r) = match side {
                    Side::Left => {
                        let il = inner.push_nodes(w1, w2, nodes, labels)?;
                        let cr = copy_subtree(w1, r, nodes, labels);
                        (il, cr)
                    }
                    Side::Right => {
                        let cl = copy_subtree(w1, l, nodes, labels);
                        let ir = inner.push_nodes(w1, w2, nodes, labels)?;
                        (cl, ir)
                    }
                };
                nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(new_l),
                    right: VtreeNodeId(new_r),
                });
                labels.push(w1.label(*n1));
                nodes.len() - 1
            }
            ProdPlan::DeferSecond { n2, side, inner } => {
                let (l, r) = w2.vtree().children(*n2).expect("internal");
                let (new_l, new_r) = match side {
                    Side::Left => {
                        let il = inner.push_nodes(w1, w2, nodes, labels)?;
                        let cr = copy_subtree(w2, r, nodes, labels);
                        (il, cr)
                    }
                    Side::Right => {
                        let cl = copy_subtree(w2, l, nodes, labels);
                        let ir = inner.push_nodes(w1, w2, nodes, labels)?;
                        (cl, ir)
                    }
                };
                nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(new_l),
                    right: VtreeNodeId(new_r),
                });
                labels.push(w2.label(*n2));
                nodes.len() - 1
            }
            ProdPlan::Match { n1, n2, left, right, .. } => {
                let l = left.push_nodes(w1, w2, nodes, labels)?;
                let r = right.push_nodes(w1, w2, nodes, labels)?;
                nodes.push(VtreeNode::Internal {
                    left: VtreeNodeId(l),
                    right: VtreeNodeId(r),
                });
                labels.push(w1.label(*n1).union(w2.label(*n2)));
                nodes.len() - 1
            }
        })
    }
}

/// Copies a subtree of `w` into the node/label accumulators, returning the
/// new root index.
pub(crate) fn copy_subtree(
    w: &MdVtree,
    node: VtreeNodeId,
    nodes: &mut Vec<VtreeNode>,
    labels: &mut Vec<Label>,
) -> usize {
    match w.vtree().node(node) {
        VtreeNode::Leaf { scope } => {
            nodes.push(VtreeNode::Leaf { scope: *scope });
            labels.push(w.label(node));
            nodes.len() - 1
        }
        VtreeNode::Internal { left, right } => {
            let l = copy_subtree(w, *left, nodes, labels);
            let r = copy_subtree(w, *right, nodes, labels);
            nodes.push(VtreeNode::Internal {
                left: VtreeNodeId(l),
                right: VtreeNodeId(r),
            });
            labels.push(w.label(node));
            nodes.len() - 1
        }
    }
}
