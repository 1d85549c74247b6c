//! Bridges between circuits and dense tables: exhaustive evaluation of a
//! circuit into a table, and compilation of a table into a circuit that
//! exactly respects a given md-vtree.

use super::JointTable;
use crate::circuit::{Circuit, Layer, LeafFunction, LeafTerm, MixEntry, WeightEntry};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::mdvtree::MdVtree;
use crate::vars::{assignments, Assignment, DomainIndexer, VarSet};
use crate::vtree::VtreeNodeId;
use std::collections::HashMap;

/// Default cap on exhaustive circuit-to-table evaluation (total assignments).
pub const DEFAULT_TABLE_BOUND: usize = 1 << 22;

/// Factorization residual above which a conditional slice is rejected as not
/// decomposable along the vtree split.
const FACTOR_TOL: f64 = 1e-9;

/// Evaluates a circuit at every assignment of its scope.
pub fn table_from_circuit(c: &Circuit, bound: Option<usize>) -> Result<JointTable> {
    let bound = bound.unwrap_or(DEFAULT_TABLE_BOUND);
    let space = c.mdvtree().vtree().space().clone();
    let scope = c.scope();
    if space.domain_size(scope) > bound {
        return Err(Error::EnumerationBound(scope.len(), bound.ilog2() as usize));
    }
    let tables = c.dense_tables(bound)?;
    let root = c.mdvtree().vtree().root();
    let values = tables[root.index()][c.root_index()].clone();
    JointTable::new(space, scope, values)
}

struct Compiler<'a> {
    mdvtree: &'a MdVtree,
    terms: Vec<Vec<LeafTerm>>,
    mix: Vec<Vec<MixEntry>>,
    weights: Vec<Vec<WeightEntry>>,
    counts: Vec<usize>,
    memo: HashMap<(usize, Vec<u64>), usize>,
    budget: usize,
    spent: usize,
}

impl<'a> Compiler<'a> {
    /// Compiles the function `f` over `scope(m)` into a sum node of layer `m`
    /// and returns its index within the layer.
    fn compile(&mut self, m: VtreeNodeId, f: &[f64]) -> Result<usize> {
        let key = (m.index(), f.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if let Some(&hit) = self.memo.get(&key) {
            return Ok(hit);
        }
        self.spent += 1;
        if self.spent > self.budget {
            return Err(Error::CompilationBound(self.spent));
        }
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let scope = vt.scope(m)?;
        let dom = DomainIndexer::new(space, scope);
        let sum_idx = self.counts[m.index()];
        self.counts[m.index()] += 1;
        match vt.children(m) {
            None => self.compile_leaf(m, &dom, f, sum_idx)?,
            Some((l, r)) => {
                let ldom = DomainIndexer::new(space, vt.scope(l)?);
                let rdom = DomainIndexer::new(space, vt.scope(r)?);
                let lmap = dom.project_map(&ldom);
                let rmap = dom.project_map(&rdom);
                match self.mdvtree.label(m) {
                    Label::Set(q) => {
                        // One product child per positive-mass assignment of
                        // the label set; each conditional slice must factor
                        // across the split.
                        let qdom = DomainIndexer::new(space, q.intersect(scope));
                        let qmap = dom.project_map(&qdom);
                        for qi in 0..qdom.len() {
                            let slice: Vec<f64> = (0..dom.len())
                                .map(|i| if qmap[i] == qi { f[i] } else { 0.0 })
                                .collect();
                            let mass: f64 = slice.iter().sum();
                            if mass <= 0.0 {
                                continue;
                            }
                            let (g, h) =
                                split_slice(m, &slice, mass, &lmap, &rmap, ldom.len(), rdom.len())?;
                            let li = self.compile(l, &g)?;
                            let ri = self.compile(r, &h)?;
                            self.weights[m.index()].push(WeightEntry {
                                node: sum_idx,
                                left: li,
                                right: ri,
                                weight: 1.0,
                            });
                        }
                    }
                    Label::Universal => {
                        // No determinism to honor: expand over the smaller
                        // side, pairing a point indicator with the matching
                        // slice of the other side.
                        let expand_left = ldom.len() <= rdom.len();
                        for ei in 0..if expand_left { ldom.len() } else { rdom.len() } {
                            let (emap, omap, olen) = if expand_left {
                                (&lmap, &rmap, rdom.len())
                            } else {
                                (&rmap, &lmap, ldom.len())
                            };
                            let mut other = vec![0.0; olen];
                            let mut any = false;
                            for (i, &fv) in f.iter().enumerate() {
                                if emap[i] == ei && fv != 0.0 {
                                    other[omap[i]] = fv;
                                    any = true;
                                }
                            }
                            if !any {
                                continue;
                            }
                            let mut point = vec![0.0; if expand_left { ldom.len() } else { rdom.len() }];
                            point[ei] = 1.0;
                            let (li, ri) = if expand_left {
                                (self.compile(l, &point)?, self.compile(r, &other)?)
                            } else {
                                (self.compile(l, &other)?, self.compile(r, &point)?)
                            };
                            self.weights[m.index()].push(WeightEntry {
                                node: sum_idx,
                                left: li,
                                right: ri,
                                weight: 1.0,
                            });
                        }
                    }
                }
            }
        }
        self.memo.insert(key, sum_idx);
        Ok(sum_idx)
    }

    fn compile_leaf(
        &mut self,
        m: VtreeNodeId,
        dom: &DomainIndexer,
        f: &[f64],
        sum_idx: usize,
    ) -> Result<()> {
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let scope = vt.scope(m)?;
        let q = match self.mdvtree.label(m) {
            Label::Universal => scope,
            Label::Set(q) => q,
        };
        let qdom = DomainIndexer::new(space, q);
        let qmap = dom.project_map(&qdom);
        for qi in 0..qdom.len() {
            let slice: Vec<f64> = (0..dom.len())
                .map(|i| if qmap[i] == qi { f[i] } else { 0.0 })
                .collect();
            if slice.iter().all(|&v| v == 0.0) {
                continue;
            }
            let qa = qdom.assignment_of(qi);
            let term = self.leaf_term_for(m, dom, &slice, &qa, q)?;
            let term_idx = self.terms[m.index()].len();
            self.terms[m.index()].push(term);
            self.mix[m.index()].push(MixEntry { sum: sum_idx, term: term_idx, weight: 1.0 });
        }
        Ok(())
    }

    /// Builds a single product-of-factors term encoding `slice`, supported
    /// only where the label variables equal `qa`. Free variables must be
    /// mutually independent within the slice (checked when there is more than
    /// one of them).
    fn leaf_term_for(
        &self,
        m: VtreeNodeId,
        dom: &DomainIndexer,
        slice: &[f64],
        qa: &Assignment,
        q: VarSet,
    ) -> Result<LeafTerm> {
        let vt = self.mdvtree.vtree();
        let space = vt.space();
        let scope = vt.scope(m)?;
        let mass: f64 = slice.iter().sum();
        let free = scope.difference(q);
        let mut factors: Vec<LeafFunction> = Vec::new();
        let mut carried_mass = false;
        for v in scope.iter() {
            if q.contains(v) {
                factors.push(LeafFunction::Indicator { var: v, state: qa.get(v).expect("q var") });
                continue;
            }
            let vdom = DomainIndexer::new(space, VarSet::singleton(v));
            let vmap = dom.project_map(&vdom);
            let mut marg = vec![0.0; space.card(v)];
            for i in 0..dom.len() {
                marg[vmap[i]] += slice[i];
            }
            let weights: Vec<f64> = if carried_mass {
                marg.iter().map(|&x| x / mass).collect()
            } else {
                marg
            };
            carried_mass = true;
            factors.push(LeafFunction::Categorical { var: v, weights });
        }
        if free.is_empty() {
            // Pure point indicator: fold the mass into the first factor.
            let first = factors.first_mut().expect("nonempty scope");
            let v = first.var();
            let mut weights = vec![0.0; space.card(v)];
            weights[qa.get(v).expect("q var")] = mass;
            *first = LeafFunction::Categorical { var: v, weights };
        }
        let term = LeafTerm::new(factors);
        if free.len() >= 2 {
            let mut residual: f64 = 0.0;
            for (i, &sv) in slice.iter().enumerate() {
                let a = dom.assignment_of(i);
                let got: f64 = term
                    .factors
                    .iter()
                    .map(|f| f.eval(a.get(f.var()).expect("covered")))
                    .product();
                residual = residual.max((got - sv).abs());
            }
            if residual > FACTOR_TOL * mass.max(1.0) {
                return Err(Error::NotFactorizable { node: m.index(), residual });
            }
        }
        Ok(term)
    }
}

fn split_slice(
    m: VtreeNodeId,
    slice: &[f64],
    mass: f64,
    lmap: &[usize],
    rmap: &[usize],
    llen: usize,
    rlen: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = vec![0.0; llen];
    let mut h = vec![0.0; rlen];
    for (i, &v) in slice.iter().enumerate() {
        g[lmap[i]] += v;
        h[rmap[i]] += v;
    }
    for x in h.iter_mut() {
        *x /= mass;
    }
    let mut residual: f64 = 0.0;
    for (i, &v) in slice.iter().enumerate() {
        residual = residual.max((g[lmap[i]] * h[rmap[i]] - v).abs());
    }
    if residual > FACTOR_TOL * mass.max(1.0) {
        return Err(Error::NotFactorizable { node: m.index(), residual });
    }
    Ok((g, h))
}

/// Compiles a dense table into a circuit exactly respecting `mdvtree`, by
/// recursive conditioning on each node's label set. Zero-mass conditioning
/// branches produce no child.
pub fn compile_table(t: &JointTable, mdvtree: &MdVtree, budget: Option<usize>) -> Result<Circuit> {
    if t.total() <= 0.0 {
        return Err(Error::ZeroMassTable);
    }
    let vt = mdvtree.vtree();
    let space = vt.space();
    if t.var_set() != mdvtree.scope() {
        return Err(Error::DatasetMismatch(
            "table variables do not match the vtree scope".into(),
        ));
    }
    let root_dom = DomainIndexer::new(space, mdvtree.scope());
    let mut f = vec![0.0; root_dom.len()];
    for a in assignments(space, mdvtree.scope()) {
        f[root_dom.index_of(&a)] = t.at(&a);
    }
    let mut compiler = Compiler {
        mdvtree,
        terms: vec![Vec::new(); vt.len()],
        mix: vec![Vec::new(); vt.len()],
        weights: vec![Vec::new(); vt.len()],
        counts: vec![0; vt.len()],
        memo: HashMap::new(),
        budget: budget.unwrap_or(200_000),
        spent: 0,
    };
    let root_idx = compiler.compile(vt.root(), &f)?;
    let layers = vt
        .node_ids()
        .map(|id| {
            if vt.is_leaf(id) {
                Layer::leaf(
                    compiler.counts[id.index()].max(1),
                    std::mem::take(&mut compiler.terms[id.index()]),
                    std::mem::take(&mut compiler.mix[id.index()]),
                )
            } else {
                Layer::internal(
                    compiler.counts[id.index()].max(1),
                    std::mem::take(&mut compiler.weights[id.index()]),
                )
            }
        })
        .collect();
    Circuit::new(mdvtree.clone(), layers, root_idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdvtree::optimal_labelling;
    use crate::vars::VariableSpace;
    use crate::vtree::Vtree;

    #[test]
    fn single_indicator_yields_one_hot_table() {
        let space = VariableSpace::from_pairs(vec![("X", 3)]).unwrap();
        let x = space.lookup("X").unwrap();
        let vt = Vtree::leaf(space.clone(), VarSet::singleton(x)).unwrap();
        let w = MdVtree::all_universal(vt);
        let terms = vec![LeafTerm::new(vec![LeafFunction::Indicator { var: x, state: 2 }])];
        let layer = Layer::leaf(1, terms, vec![MixEntry { sum: 0, term: 0, weight: 1.0 }]);
        let c = Circuit::new(w, vec![layer], 0).unwrap();
        let t = table_from_circuit(&c, None).unwrap();
        assert_eq!(t.values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn table_total_matches_marginal_of_nothing() {
        for seed in 0..10u64 {
            let space = VariableSpace::binary("x", 4);
            let t = JointTable::random_positive(space.clone(), space.all(), seed);
            let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
            let w = MdVtree::fully_deterministic(vt);
            let c = compile_table(&t, &w, None).unwrap();
            let total = table_from_circuit(&c, None).unwrap().total();
            assert!((total - c.total_mass()).abs() < 1e-12);
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compiled_circuit_reproduces_table_and_determinisms() {
        for seed in 0..12u64 {
            let n = 4 + (seed as usize % 4);
            let space = VariableSpace::binary("x", n);
            let t = JointTable::random_positive(space.clone(), space.all(), seed + 100);
            // Requirement: a random nonempty subset, separated at the root.
            let mut req = VarSet::empty();
            for (i, v) in space.all().iter().enumerate() {
                if (seed + i as u64).is_multiple_of(3) {
                    req.insert(v);
                }
            }
            if req.is_empty() || req == space.all() {
                let mut it = space.all().iter();
                req = VarSet::singleton(it.next().unwrap());
            }
            let vt = Vtree::root_split(space.clone(), space.all(), req, seed).unwrap();
            let w = optimal_labelling(&vt, &[req]).unwrap();
            let c = compile_table(&t, &w, None).unwrap();
            let back = table_from_circuit(&c, None).unwrap();
            for a in t.assignments() {
                let expect = t.at(&a);
                let got = back.at(&a);
                assert!(
                    (expect - got).abs() <= 1e-12 * expect.max(1e-30),
                    "seed {seed}: {expect} vs {got}"
                );
            }
            assert!(c.check_structure().is_clean());
            assert!(c.check_qdet(req, None).unwrap(), "seed {seed}");
            for q in w.enumerate_implied(None).unwrap() {
                assert!(c.check_qdet(q, None).unwrap(), "seed {seed} implied q");
            }
        }
    }

    #[test]
    fn factorized_label_detects_correlation() {
        let space = VariableSpace::binary("x", 2);
        let vt = Vtree::random(space.clone(), space.all(), 3).unwrap();
        let labels = vt.node_ids().map(|_| Label::Set(VarSet::empty())).collect();
        let w = MdVtree::new(vt.clone(), labels).unwrap();
        // Independent table compiles fine.
        let mut indep = JointTable::zeros(space.clone(), space.all());
        let a_var = space.lookup("x0").unwrap();
        let b_var = space.lookup("x1").unwrap();
        for a in assignments(&space, space.all()) {
            let pa = if a.get(a_var) == Some(0) { 0.3 } else { 0.7 };
            let pb = if a.get(b_var) == Some(0) { 0.9 } else { 0.1 };
            indep.set_at(&a, pa * pb);
        }
        assert!(compile_table(&indep, &w, None).is_ok());
        // A correlated table must be rejected.
        let mut corr = JointTable::zeros(space.clone(), space.all());
        for a in assignments(&space, space.all()) {
            let same = a.get(a_var) == a.get(b_var);
            corr.set_at(&a, if same { 0.45 } else { 0.05 });
        }
        assert!(matches!(
            compile_table(&corr, &w, None),
            Err(Error::NotFactorizable { .. })
        ));
    }

    #[test]
    fn fully_expanded_compile_has_one_path_per_assignment() {
        let space = VariableSpace::binary("x", 3);
        let t = JointTable::random_positive(space.clone(), space.all(), 5);
        let vt = Vtree::random(space.clone(), space.all(), 5).unwrap();
        let w = MdVtree::fully_deterministic(vt.clone());
        let c = compile_table(&t, &w, None).unwrap();
        // The root layer's sum has one child per positive-mass assignment.
        match c.layer(vt.root()) {
            Layer::Internal { weights, .. } => {
                let children = weights.iter().filter(|e| e.node == c.root_index()).count();
                assert_eq!(children, 8);
            }
            _ => panic!("root should be internal"),
        }
        assert!(c.check_qdet(space.all(), None).unwrap());
    }
}
