//! Marginal-determinism labels and their universal-set algebra.
//!
//! A label is either a concrete variable set or the universal set, which
//! stands for "no marginal determinism guaranteed". All set algebra involving
//! labels goes through this module so the universal-set axioms (`U ⊇ S`,
//! `U ∩ S = S`, `U ∪ S = U`, `U ⊄ S` unless `S = U`) live in one place.

use crate::vars::VarSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// A concrete set of variables the corresponding sum layer is marginally
    /// deterministic with respect to.
    Set(VarSet),
    /// The universal set: no determinism guarantee at all.
    Universal,
}

impl Label {
    pub fn empty() -> Label {
        Label::Set(VarSet::empty())
    }

    pub fn is_universal(self) -> bool {
        matches!(self, Label::Universal)
    }

    /// The concrete set, if any.
    pub fn as_set(self) -> Option<VarSet> {
        match self {
            Label::Set(s) => Some(s),
            Label::Universal => None,
        }
    }

    /// `self ∩ other`.
    pub fn intersect(self, other: Label) -> Label {
        match (self, other) {
            (Label::Universal, x) | (x, Label::Universal) => x,
            (Label::Set(a), Label::Set(b)) => Label::Set(a.intersect(b)),
        }
    }

    /// `self ∩ s` for a concrete set.
    pub fn intersect_set(self, s: VarSet) -> VarSet {
        match self {
            Label::Universal => s,
            Label::Set(a) => a.intersect(s),
        }
    }

    /// `self ∪ other`.
    pub fn union(self, other: Label) -> Label {
        match (self, other) {
            (Label::Universal, _) | (_, Label::Universal) => Label::Universal,
            (Label::Set(a), Label::Set(b)) => Label::Set(a.union(b)),
        }
    }

    /// `self ∖ s` (removing concrete variables; U absorbs).
    pub fn difference(self, s: VarSet) -> Label {
        match self {
            Label::Universal => Label::Universal,
            Label::Set(a) => Label::Set(a.difference(s)),
        }
    }

    /// Is the concrete set `q` a superset of this label? Always false for the
    /// universal label: no finite set contains U.
    pub fn subset_of(self, q: VarSet) -> bool {
        match self {
            Label::Universal => false,
            Label::Set(a) => a.is_subset(q),
        }
    }

    /// Does the label overlap `s`? `U ∩ S = S`, so U overlaps any nonempty set.
    pub fn overlaps(self, s: VarSet) -> bool {
        match self {
            Label::Universal => !s.is_empty(),
            Label::Set(a) => a.overlaps(s),
        }
    }

    /// Pointwise containment `self ⊇ other` under the U axioms.
    pub fn contains_label(self, other: Label) -> bool {
        match (self, other) {
            (Label::Universal, _) => true,
            (Label::Set(_), Label::Universal) => false,
            (Label::Set(a), Label::Set(b)) => b.is_subset(a),
        }
    }
}
