//! Discrete variables, variable sets and (partial) assignments.
//!
//! A [`VariableSpace`] interns every variable that participates in a model or
//! pipeline and fixes its cardinality. [`VarSet`] is a bitmask over that
//! space, which keeps the heavy subset/superset churn of label propagation
//! and implied-determinism enumeration cheap. The 64-variable cap this
//! imposes is far beyond anything the exhaustive oracle can check anyway.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// Index of a variable within its [`VariableSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
struct VariableDef {
    name: String,
    card: usize,
}

/// The set of named discrete variables a model is defined over.
#[derive(Debug, Clone, Default)]
pub struct VariableSpace {
    defs: Vec<VariableDef>,
    by_name: BTreeMap<String, VarId>,
}

impl VariableSpace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a space from `(name, cardinality)` pairs.
    pub fn from_pairs<S: Into<String>>(pairs: Vec<(S, usize)>) -> Result<Arc<Self>> {
        let mut space = Self::new();
        for (name, card) in pairs {
            space.add(name.into(), card)?;
        }
        Ok(Arc::new(space))
    }

    /// Convenience constructor: `n` binary variables named `prefix0..`.
    pub fn binary(prefix: &str, n: usize) -> Arc<Self> {
        let mut space = Self::new();
        for i in 0..n {
            space.add(format!("{prefix}{i}"), 2).expect("fresh names");
        }
        Arc::new(space)
    }

    pub fn add(&mut self, name: String, card: usize) -> Result<VarId> {
        if self.defs.len() >= 64 {
            return Err(Error::TooManyVariables);
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateVariable(name));
        }
        if card < 1 {
            return Err(Error::Parse(format!("variable `{name}` has cardinality 0")));
        }
        let id = VarId(self.defs.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.defs.push(VariableDef { name, card });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn name(&self, v: VarId) -> &str {
        &self.defs[v.index()].name
    }

    pub fn card(&self, v: VarId) -> usize {
        self.defs[v.index()].card
    }

    pub fn lookup(&self, name: &str) -> Result<VarId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// The set of all variables in the space.
    pub fn all(&self) -> VarSet {
        if self.defs.is_empty() {
            VarSet::empty()
        } else {
            VarSet {
                bits: (!0u64) >> (64 - self.defs.len()),
            }
        }
    }

    /// Resolves a list of names into a set.
    pub fn set_of(&self, names: &[&str]) -> Result<VarSet> {
        let mut s = VarSet::empty();
        for n in names {
            s.insert(self.lookup(n)?);
        }
        Ok(s)
    }

    /// Number of joint assignments of `set`.
    pub fn domain_size(&self, set: VarSet) -> usize {
        set.iter().map(|v| self.card(v)).product()
    }
}

/// A finite set of variables, represented as a bitmask over a
/// [`VariableSpace`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VarSet {
    bits: u64,
}

impl VarSet {
    pub fn empty() -> Self {
        VarSet { bits: 0 }
    }

    pub fn singleton(v: VarId) -> Self {
        VarSet { bits: 1 << v.0 }
    }

    pub fn from_bits(bits: u64) -> Self {
        VarSet { bits }
    }

    pub fn bits(self) -> u64 {
        self.bits
    }

    pub fn insert(&mut self, v: VarId) {
        self.bits |= 1 << v.0;
    }

    pub fn remove(&mut self, v: VarId) {
        self.bits &= !(1 << v.0);
    }

    pub fn contains(self, v: VarId) -> bool {
        self.bits & (1 << v.0) != 0
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn union(self, other: VarSet) -> VarSet {
        VarSet { bits: self.bits | other.bits }
    }

    pub fn intersect(self, other: VarSet) -> VarSet {
        VarSet { bits: self.bits & other.bits }
    }

    pub fn difference(self, other: VarSet) -> VarSet {
        VarSet { bits: self.bits & !other.bits }
    }

    pub fn is_subset(self, other: VarSet) -> bool {
        self.bits & !other.bits == 0
    }

    pub fn overlaps(self, other: VarSet) -> bool {
        self.bits & other.bits != 0
    }

    pub fn iter(self) -> impl Iterator<Item = VarId> {
        let mut bits = self.bits;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let i = bits.trailing_zeros();
                bits &= bits - 1;
                Some(VarId(i))
            }
        })
    }

    /// All subsets of `self`, including the empty set.
    pub fn subsets(self) -> impl Iterator<Item = VarSet> {
        let mask = self.bits;
        let mut cur = 0u64;
        let mut done = false;
        std::iter::from_fn(move || {
            if done {
                return None;
            }
            let out = VarSet { bits: cur };
            if cur == mask {
                done = true;
            } else {
                cur = (cur.wrapping_sub(mask)) & mask;
            }
            Some(out)
        })
    }

    pub fn names(self, space: &VariableSpace) -> Vec<String> {
        self.iter().map(|v| space.name(v).to_string()).collect()
    }
}

impl fmt::Debug for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VarSet({:b})", self.bits)
    }
}

impl FromIterator<VarId> for VarSet {
    fn from_iter<T: IntoIterator<Item = VarId>>(iter: T) -> Self {
        let mut s = VarSet::empty();
        for v in iter {
            s.insert(v);
        }
        s
    }
}

/// A (possibly partial) assignment of states to variables.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    states: BTreeMap<VarId, usize>,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: &[(VarId, usize)]) -> Self {
        Assignment {
            states: pairs.iter().copied().collect(),
        }
    }

    pub fn set(&mut self, v: VarId, state: usize) {
        self.states.insert(v, state);
    }

    pub fn get(&self, v: VarId) -> Option<usize> {
        self.states.get(&v).copied()
    }

    pub fn vars(&self) -> VarSet {
        self.states.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, usize)> + '_ {
        self.states.iter().map(|(&v, &s)| (v, s))
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Restriction of the assignment to `set`.
    pub fn restrict(&self, set: VarSet) -> Assignment {
        Assignment {
            states: self
                .states
                .iter()
                .filter(|(v, _)| set.contains(**v))
                .map(|(&v, &s)| (v, s))
                .collect(),
        }
    }

    /// Merges two assignments; later values win on overlap.
    pub fn merged(&self, other: &Assignment) -> Assignment {
        let mut states = self.states.clone();
        for (&v, &s) in &other.states {
            states.insert(v, s);
        }
        Assignment { states }
    }

    /// Checks all states are within their variables' cardinalities.
    pub fn validate(&self, space: &VariableSpace) -> Result<()> {
        for (&v, &s) in &self.states {
            if s >= space.card(v) {
                return Err(Error::StateOutOfRange {
                    var: space.name(v).to_string(),
                    state: s,
                    card: space.card(v),
                });
            }
        }
        Ok(())
    }
}

/// Row-major indexing of the joint domain of a variable set (ascending id
/// order, last variable fastest). Used by the dense oracle and the
/// brute-force support computations.
#[derive(Debug, Clone)]
pub struct DomainIndexer {
    vars: Vec<VarId>,
    cards: Vec<usize>,
    len: usize,
}

impl DomainIndexer {
    pub fn new(space: &VariableSpace, set: VarSet) -> DomainIndexer {
        let vars: Vec<VarId> = set.iter().collect();
        let cards: Vec<usize> = vars.iter().map(|&v| space.card(v)).collect();
        let len = cards.iter().product();
        DomainIndexer { vars, cards, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vars(&self) -> &[VarId] {
        &self.vars
    }

    pub fn var_set(&self) -> VarSet {
        self.vars.iter().copied().collect()
    }

    pub fn index_of(&self, a: &Assignment) -> usize {
        let mut idx = 0;
        for (i, &v) in self.vars.iter().enumerate() {
            idx = idx * self.cards[i] + a.get(v).expect("assignment covers domain");
        }
        idx
    }

    pub fn assignment_of(&self, mut idx: usize) -> Assignment {
        let mut a = Assignment::new();
        for i in (0..self.vars.len()).rev() {
            a.set(self.vars[i], idx % self.cards[i]);
            idx /= self.cards[i];
        }
        a
    }

    /// For each index of `self`, the corresponding index in `sub` (whose
    /// variables must be a subset of `self`'s).
    pub fn project_map(&self, sub: &DomainIndexer) -> Vec<usize> {
        // Multiplier of each of our positions in the sub index (0 if absent).
        let mut mult = vec![0usize; self.vars.len()];
        let mut in_sub = vec![false; self.vars.len()];
        for (j, &sv) in sub.vars.iter().enumerate() {
            let pos = self
                .vars
                .iter()
                .position(|&v| v == sv)
                .expect("sub vars must be contained");
            let m: usize = sub.cards[j + 1..].iter().product();
            mult[pos] = m;
            in_sub[pos] = true;
        }
        let mut map = vec![0usize; self.len.max(1)];
        for (idx, slot) in map.iter_mut().enumerate() {
            let mut rem = idx;
            let mut out = 0;
            for i in (0..self.vars.len()).rev() {
                let s = rem % self.cards[i];
                rem /= self.cards[i];
                if in_sub[i] {
                    out += s * mult[i];
                }
            }
            *slot = out;
        }
        map
    }
}

/// Iterates over all joint assignments of `set`, in row-major order with the
/// highest-id variable varying fastest.
pub fn assignments(space: &VariableSpace, set: VarSet) -> AssignmentIter {
    let vars: Vec<VarId> = set.iter().collect();
    let cards: Vec<usize> = vars.iter().map(|&v| space.card(v)).collect();
    let total = cards.iter().product();
    AssignmentIter { vars, cards, next: 0, total }
}

pub struct AssignmentIter {
    vars: Vec<VarId>,
    cards: Vec<usize>,
    next: usize,
    total: usize,
}

impl Iterator for AssignmentIter {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        if self.next >= self.total {
            return None;
        }
        let mut rem = self.next;
        self.next += 1;
        let mut a = Assignment::new();
        for i in (0..self.vars.len()).rev() {
            a.set(self.vars[i], rem % self.cards[i]);
            rem /= self.cards[i];
        }
        Some(a)
    }
}

impl ExactSizeIterator for AssignmentIter {
    fn len(&self) -> usize {
        self.total - self.next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_algebra_roundtrips() {
        let space = VariableSpace::binary("v", 5);
        let a = space.set_of(&["v0", "v2"]).unwrap();
        let b = space.set_of(&["v2", "v4"]).unwrap();
        assert_eq!(a.union(b).len(), 3);
        assert_eq!(a.intersect(b).len(), 1);
        assert!(a.intersect(b).is_subset(a));
        assert_eq!(a.difference(b), space.set_of(&["v0"]).unwrap());
        assert!(VarSet::empty().is_subset(a));
    }

    #[test]
    fn subsets_enumerates_power_set() {
        let space = VariableSpace::binary("v", 4);
        let s = space.set_of(&["v0", "v1", "v3"]).unwrap();
        let subs: Vec<_> = s.subsets().collect();
        assert_eq!(subs.len(), 8);
        assert!(subs.iter().all(|t| t.is_subset(s)));
    }

    #[test]
    fn assignment_iteration_covers_domain() {
        let space = VariableSpace::from_pairs(vec![("a", 2), ("b", 3)]).unwrap();
        let all: Vec<_> = assignments(&space, space.all()).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(all[0].get(space.lookup("b").unwrap()), Some(0));
        assert_eq!(all[1].get(space.lookup("b").unwrap()), Some(1));
    }

    #[test]
    fn duplicate_variables_rejected() {
        let mut space = VariableSpace::new();
        space.add("x".into(), 2).unwrap();
        assert!(matches!(space.add("x".into(), 2), Err(Error::DuplicateVariable(_))));
    }
}
