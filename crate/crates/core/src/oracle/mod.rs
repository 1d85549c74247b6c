//! Brute-force reference implementations over dense joint tables.
//!
//! Everything in here is deliberately naive: dense arrays indexed by full
//! variable assignments, direct summation of every formula. The engine is
//! checked against these oracles by exhaustive enumeration at desk scale.

mod compile;

pub use compile::{compile_table, table_from_circuit, DEFAULT_TABLE_BOUND};

use crate::error::{Error, Result};
use crate::vars::{assignments, Assignment, VarId, VarSet, VariableSpace};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

/// A dense nonnegative table over the joint domain of a variable set.
/// Addressing is row-major over the variables in ascending id order, with the
/// last variable varying fastest. A table over zero variables is a scalar.
#[derive(Debug, Clone)]
pub struct JointTable {
    space: Arc<VariableSpace>,
    vars: Vec<VarId>,
    cards: Vec<usize>,
    values: Vec<f64>,
}

impl JointTable {
    pub fn new(space: Arc<VariableSpace>, set: VarSet, values: Vec<f64>) -> Result<JointTable> {
        let vars: Vec<VarId> = set.iter().collect();
        let cards: Vec<usize> = vars.iter().map(|&v| space.card(v)).collect();
        let expect: usize = cards.iter().product();
        if values.len() != expect {
            return Err(Error::Parse(format!(
                "table size {} does not match domain size {}",
                values.len(),
                expect
            )));
        }
        Ok(JointTable { space, vars, cards, values })
    }

    pub fn zeros(space: Arc<VariableSpace>, set: VarSet) -> JointTable {
        let vars: Vec<VarId> = set.iter().collect();
        let cards: Vec<usize> = vars.iter().map(|&v| space.card(v)).collect();
        let n: usize = cards.iter().product();
        JointTable { space, vars, cards, values: vec![0.0; n] }
    }

    pub fn scalar(space: Arc<VariableSpace>, value: f64) -> JointTable {
        JointTable { space, vars: vec![], cards: vec![], values: vec![value] }
    }

    /// A strictly positive random distribution over `set`, normalized.
    pub fn random_positive(space: Arc<VariableSpace>, set: VarSet, seed: u64) -> JointTable {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut t = JointTable::zeros(space, set);
        for v in t.values.iter_mut() {
            *v = rng.random_range(0.05..1.0);
        }
        let total: f64 = t.values.iter().sum();
        for v in t.values.iter_mut() {
            *v /= total;
        }
        t
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn var_set(&self) -> VarSet {
        self.vars.iter().copied().collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_scalar(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn scalar_value(&self) -> f64 {
        self.values[0]
    }

    fn index_of(&self, a: &Assignment) -> usize {
        let mut idx = 0;
        for (i, &v) in self.vars.iter().enumerate() {
            let s = a.get(v).expect("assignment must cover table variables");
            idx = idx * self.cards[i] + s;
        }
        idx
    }

    pub fn at(&self, a: &Assignment) -> f64 {
        self.values[self.index_of(a)]
    }

    pub fn set_at(&mut self, a: &Assignment, value: f64) {
        let idx = self.index_of(a);
        self.values[idx] = value;
    }

    pub fn assignments(&self) -> impl Iterator<Item = Assignment> + '_ {
        assignments(&self.space, self.var_set())
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn normalized(&self) -> JointTable {
        let total = self.total();
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v /= total;
        }
        out
    }

    /// Marginal mass of a partial assignment: sums all consistent entries.
    pub fn marginal(&self, partial: &Assignment) -> f64 {
        let free = self.var_set().difference(partial.vars());
        assignments(&self.space, free)
            .map(|rest| self.at(&partial.merged(&rest)))
            .sum()
    }

    /// Sums out `w`, producing a table over the remaining variables.
    pub fn marg(&self, w: VarSet) -> JointTable {
        let keep = self.var_set().difference(w);
        let mut out = JointTable::zeros(self.space.clone(), keep);
        for a in self.assignments() {
            let idx = out.index_of(&a.restrict(keep));
            out.values[idx] += self.at(&a);
        }
        out
    }

    /// Slices at a full assignment of some subset of the variables.
    pub fn inst(&self, at: &Assignment) -> JointTable {
        let fixed = at.vars().intersect(self.var_set());
        let keep = self.var_set().difference(fixed);
        let mut out = JointTable::zeros(self.space.clone(), keep);
        for rest in assignments(&self.space, keep) {
            let full = at.restrict(fixed).merged(&rest);
            let idx = out.index_of(&rest);
            out.values[idx] = self.at(&full);
        }
        out
    }

    /// Pointwise product over the union of the variable sets.
    pub fn product(&self, other: &JointTable) -> JointTable {
        let union = self.var_set().union(other.var_set());
        let mut out = JointTable::zeros(self.space.clone(), union);
        for a in assignments(&self.space, union) {
            let v = self.at(&a.restrict(self.var_set())) * other.at(&a.restrict(other.var_set()));
            let idx = out.index_of(&a);
            out.values[idx] = v;
        }
        out
    }

    /// Restricted power: `0^alpha` is defined as 0.
    pub fn pow(&self, alpha: f64) -> JointTable {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v = if *v == 0.0 { 0.0 } else { v.powf(alpha) };
        }
        out
    }

    /// Restricted log: 0 off support.
    pub fn log(&self) -> JointTable {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v = if *v == 0.0 { 0.0 } else { v.ln() };
        }
        out
    }

    /// Maximum entry and the first assignment attaining it (row-major order).
    pub fn max(&self) -> (f64, Assignment) {
        let mut best = f64::NEG_INFINITY;
        let mut best_a = Assignment::new();
        for a in self.assignments() {
            let v = self.at(&a);
            if v > best {
                best = v;
                best_a = a;
            }
        }
        (best, best_a)
    }

    /// Maximum over completions of `evidence`.
    pub fn max_given(&self, evidence: &Assignment) -> (f64, Assignment) {
        let free = self.var_set().difference(evidence.vars());
        let mut best = f64::NEG_INFINITY;
        let mut best_a = Assignment::new();
        for rest in assignments(&self.space, free) {
            let full = evidence.merged(&rest);
            let v = self.at(&full);
            if v > best {
                best = v;
                best_a = full;
            }
        }
        (best, best_a)
    }
}

/// Backdoor adjustment evaluated by direct summation:
/// `sum_z p(z) * p(y, x, z) / p(x, z)`, with a zero denominator contributing
/// zero. Output is a table over `x_set ∪ y_set`, or over `y_set` when an
/// intervention assignment is given.
pub fn backdoor_estimand(
    joint: &JointTable,
    x_set: VarSet,
    y_set: VarSet,
    z_set: VarSet,
    x_val: Option<&Assignment>,
) -> JointTable {
    let space = joint.space().clone();
    let out_vars = match x_val {
        Some(_) => y_set,
        None => x_set.union(y_set),
    };
    let mut out = JointTable::zeros(space.clone(), out_vars);
    for mut ctx in assignments(&space, out_vars) {
        if let Some(xa) = x_val {
            ctx = ctx.merged(xa);
        }
        let mut total = 0.0;
        for z in assignments(&space, z_set) {
            let pz = joint.marginal(&z);
            let pxz = joint.marginal(&ctx.restrict(x_set).merged(&z));
            let pyxz = joint.marginal(&ctx.merged(&z));
            if pxz > 0.0 {
                total += pz * pyxz / pxz;
            }
        }
        let idx = out.index_of(&ctx.restrict(out_vars));
        out.values[idx] = total;
    }
    out
}

/// Frontdoor adjustment by direct summation:
/// `sum_z p(z | x) sum_x' p(x') p(y | x', z)`.
pub fn frontdoor_estimand(
    joint: &JointTable,
    x_set: VarSet,
    y_set: VarSet,
    z_set: VarSet,
    x_val: Option<&Assignment>,
) -> JointTable {
    let space = joint.space().clone();
    let out_vars = match x_val {
        Some(_) => y_set,
        None => x_set.union(y_set),
    };
    let mut out = JointTable::zeros(space.clone(), out_vars);
    for ctx in assignments(&space, out_vars) {
        let full_ctx = match x_val {
            Some(xa) => ctx.merged(xa),
            None => ctx.clone(),
        };
        let x_here = full_ctx.restrict(x_set);
        let y_here = full_ctx.restrict(y_set);
        let px_here = joint.marginal(&x_here);
        let mut total = 0.0;
        for z in assignments(&space, z_set) {
            let pzx = joint.marginal(&x_here.merged(&z));
            if px_here == 0.0 || pzx == 0.0 {
                continue;
            }
            let p_z_given_x = pzx / px_here;
            let mut inner = 0.0;
            for xp in assignments(&space, x_set) {
                let pxp = joint.marginal(&xp);
                let pxpz = joint.marginal(&xp.merged(&z));
                if pxpz == 0.0 {
                    continue;
                }
                let pyxpz = joint.marginal(&y_here.merged(&xp).merged(&z));
                inner += pxp * pyxpz / pxpz;
            }
            total += p_z_given_x * inner;
        }
        let idx = out.index_of(&ctx);
        out.values[idx] = total;
    }
    out
}

/// Extended-napkin estimand by direct summation of the full display:
/// an outer sum over `k` of the leading normalizing factor times the ratio of
/// the `w`-summed conditional numerator and denominator, all at a fixed
/// instantiation `z_val` of `z_set` and `x_val` of `x_set`.
pub fn napkin_estimand(
    joint: &JointTable,
    x_val: &Assignment,
    y_set: VarSet,
    z_val: &Assignment,
    w_set: VarSet,
    k_set: VarSet,
) -> JointTable {
    let space = joint.space().clone();
    let x_set = x_val.vars();
    let mut out = JointTable::zeros(space.clone(), y_set);
    for y in assignments(&space, y_set) {
        let mut total = 0.0;
        for k in assignments(&space, k_set) {
            let mut lead = 0.0;
            let mut num = 0.0;
            let mut den = 0.0;
            for w in assignments(&space, w_set) {
                let base = k.merged(z_val).merged(&w);
                let p_base = joint.marginal(&base);
                let p_wk = joint.marginal(&w.merged(&k));
                if p_base == 0.0 {
                    continue;
                }
                // sum_{x', y'} p(x', y' | k, z, w) — written out rather than
                // simplified to keep this a literal transcription.
                let mut sum_xy = 0.0;
                for xp in assignments(&space, x_set) {
                    for yp in assignments(&space, y_set) {
                        sum_xy += joint.marginal(&base.merged(&xp).merged(&yp));
                    }
                }
                lead += (sum_xy / p_base) * p_wk;
                num += (joint.marginal(&base.merged(x_val).merged(&y)) / p_base) * p_wk;
                den += (joint.marginal(&base.merged(x_val)) / p_base) * p_wk;
            }
            if den > 0.0 {
                total += lead * num / den;
            }
        }
        let idx = out.index_of(&y);
        out.values[idx] = total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space3() -> Arc<VariableSpace> {
        VariableSpace::from_pairs(vec![("Z", 2), ("X", 2), ("Y", 2)]).unwrap()
    }

    /// p(z, x, y) = p(z) p(x|z) p(y|x,z) with the CPTs spelled out.
    fn backdoor_joint(space: &Arc<VariableSpace>) -> JointTable {
        let z = space.lookup("Z").unwrap();
        let x = space.lookup("X").unwrap();
        let y = space.lookup("Y").unwrap();
        let pz = [0.5, 0.5];
        let px_given_z = [[0.7, 0.3], [0.3, 0.7]]; // [z][x]
        let py1 = |x: usize, z: usize| match (x, z) {
            (0, 0) => 0.2,
            (0, 1) => 0.4,
            (1, 0) => 0.6,
            (1, 1) => 0.8,
            _ => unreachable!(),
        };
        let mut t = JointTable::zeros(space.clone(), space.all());
        for a in assignments(space, space.all()) {
            let (zs, xs, ys) = (a.get(z).unwrap(), a.get(x).unwrap(), a.get(y).unwrap());
            let py = if ys == 1 { py1(xs, zs) } else { 1.0 - py1(xs, zs) };
            t.set_at(&a, pz[zs] * px_given_z[zs][xs] * py);
        }
        t
    }

    #[test]
    fn marg_of_normalized_table_is_one() {
        let space = space3();
        let t = backdoor_joint(&space);
        let all = t.marg(space.all());
        assert!(all.is_scalar());
        assert!((all.scalar_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn product_with_ones_is_identity() {
        let space = space3();
        let t = backdoor_joint(&space);
        let ones = JointTable::new(
            space.clone(),
            space.set_of(&["X"]).unwrap(),
            vec![1.0, 1.0],
        )
        .unwrap();
        let p = t.product(&ones);
        for a in t.assignments() {
            assert_eq!(p.at(&a), t.at(&a));
        }
    }

    #[test]
    fn marg_then_inst_match_direct_marginals() {
        let space = space3();
        let t = backdoor_joint(&space);
        let x = space.lookup("X").unwrap();
        let tx = t.marg(space.set_of(&["Z", "Y"]).unwrap());
        let a = Assignment::from_pairs(&[(x, 1)]);
        assert!((tx.at(&a) - t.marginal(&a)).abs() < 1e-12);
        let sliced = t.inst(&a);
        assert_eq!(sliced.var_set(), space.set_of(&["Z", "Y"]).unwrap());
        let z = space.lookup("Z").unwrap();
        let y = space.lookup("Y").unwrap();
        let b = Assignment::from_pairs(&[(z, 0), (y, 1)]);
        assert!((sliced.at(&b) - t.at(&b.merged(&a))).abs() < 1e-12);
    }

    #[test]
    fn restricted_power_and_log_keep_zeros() {
        let space = space3();
        let mut t = JointTable::zeros(space.clone(), space.set_of(&["X"]).unwrap());
        t.values_mut()[1] = 4.0;
        let inv = t.pow(-1.0);
        assert_eq!(inv.values()[0], 0.0);
        assert!((inv.values()[1] - 0.25).abs() < 1e-15);
        let lg = t.log();
        assert_eq!(lg.values()[0], 0.0);
        assert!((lg.values()[1] - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backdoor_matches_hand_computed_sum() {
        // p_{x=1}(y=1) = 0.5 * 0.6 + 0.5 * 0.8 = 0.7 by hand.
        let space = space3();
        let t = backdoor_joint(&space);
        let x = space.set_of(&["X"]).unwrap();
        let y = space.set_of(&["Y"]).unwrap();
        let z = space.set_of(&["Z"]).unwrap();
        let out = backdoor_estimand(&t, x, y, z, None);
        let xv = space.lookup("X").unwrap();
        let yv = space.lookup("Y").unwrap();
        let q = Assignment::from_pairs(&[(xv, 1), (yv, 1)]);
        assert!((out.at(&q) - 0.7).abs() < 1e-12);
        let q0 = Assignment::from_pairs(&[(xv, 1), (yv, 0)]);
        assert!((out.at(&q0) - 0.3).abs() < 1e-12);
        // Instantiated form agrees with the circuit-valued one at x.
        let xa = Assignment::from_pairs(&[(xv, 1)]);
        let inst = backdoor_estimand(&t, x, y, z, Some(&xa));
        let qy = Assignment::from_pairs(&[(yv, 1)]);
        assert!((inst.at(&qy) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn backdoor_with_empty_adjustment_is_conditional() {
        let space = space3();
        let t = backdoor_joint(&space);
        let x = space.set_of(&["X"]).unwrap();
        let y = space.set_of(&["Y"]).unwrap();
        let out = backdoor_estimand(&t, x, y, VarSet::empty(), None);
        let xv = space.lookup("X").unwrap();
        let yv = space.lookup("Y").unwrap();
        for a in assignments(&space, x.union(y)) {
            let px = t.marginal(&a.restrict(x));
            let pxy = t.marginal(&a);
            assert!((out.at(&a) - pxy / px).abs() < 1e-12, "at {:?}", (a.get(xv), a.get(yv)));
        }
    }

    #[test]
    fn estimands_are_invariant_under_variable_order() {
        // Same distribution with the variables declared in a different order.
        let s1 = space3();
        let s2 = VariableSpace::from_pairs(vec![("Y", 2), ("Z", 2), ("X", 2)]).unwrap();
        let t1 = backdoor_joint(&s1);
        let mut t2 = JointTable::zeros(s2.clone(), s2.all());
        for a1 in t1.assignments() {
            let mut a2 = Assignment::new();
            for (v, s) in a1.iter() {
                a2.set(s2.lookup(s1.name(v)).unwrap(), s);
            }
            t2.set_at(&a2, t1.at(&a1));
        }
        let o1 = backdoor_estimand(
            &t1,
            s1.set_of(&["X"]).unwrap(),
            s1.set_of(&["Y"]).unwrap(),
            s1.set_of(&["Z"]).unwrap(),
            None,
        );
        let o2 = backdoor_estimand(
            &t2,
            s2.set_of(&["X"]).unwrap(),
            s2.set_of(&["Y"]).unwrap(),
            s2.set_of(&["Z"]).unwrap(),
            None,
        );
        for (xs, ys) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let a1 = Assignment::from_pairs(&[
                (s1.lookup("X").unwrap(), xs),
                (s1.lookup("Y").unwrap(), ys),
            ]);
            let a2 = Assignment::from_pairs(&[
                (s2.lookup("X").unwrap(), xs),
                (s2.lookup("Y").unwrap(), ys),
            ]);
            assert!((o1.at(&a1) - o2.at(&a2)).abs() < 1e-12);
        }
    }

    #[test]
    fn max_given_respects_evidence() {
        let space = space3();
        let t = backdoor_joint(&space);
        let z = space.lookup("Z").unwrap();
        let ev = Assignment::from_pairs(&[(z, 0)]);
        let (best, arg) = t.max_given(&ev);
        assert_eq!(arg.get(z), Some(0));
        assert!((t.at(&arg) - best).abs() < 1e-15);
        let (global, _) = t.max();
        assert!(global >= best);
    }
}
