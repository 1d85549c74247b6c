//! Discrete Bayesian networks: CPT validation, ancestral sampling with
//! hidden-variable dropping, and exact joint tables for ground truth.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::oracle::JointTable;
use crate::vars::{assignments, Assignment, VarId, VarSet, VariableSpace};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct Cpt {
    pub var: VarId,
    pub parents: Vec<VarId>,
    /// One row per parent assignment (row-major in declared parent order),
    /// each row a distribution over the variable's states.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BayesNet {
    space: Arc<VariableSpace>,
    hidden: VarSet,
    cpts: Vec<Cpt>,
    /// Topological order over variables (parents first).
    order: Vec<VarId>,
}

impl BayesNet {
    pub fn new(space: Arc<VariableSpace>, hidden: VarSet, cpts: Vec<Cpt>) -> Result<BayesNet> {
        if cpts.len() != space.len() {
            return Err(Error::Parse(format!(
                "expected {} CPTs, got {}",
                space.len(),
                cpts.len()
            )));
        }
        let mut by_var: Vec<Option<usize>> = vec![None; space.len()];
        for (i, cpt) in cpts.iter().enumerate() {
            if by_var[cpt.var.index()].is_some() {
                return Err(Error::Parse(format!(
                    "duplicate CPT for `{}`",
                    space.name(cpt.var)
                )));
            }
            by_var[cpt.var.index()] = Some(i);
            let rows_expect: usize = cpt.parents.iter().map(|&p| space.card(p)).product();
            if cpt.rows.len() != rows_expect {
                return Err(Error::Parse(format!(
                    "CPT for `{}` has {} rows, expected {rows_expect}",
                    space.name(cpt.var),
                    cpt.rows.len()
                )));
            }
            for row in &cpt.rows {
                if row.len() != space.card(cpt.var) {
                    return Err(Error::Parse(format!(
                        "CPT row width for `{}`",
                        space.name(cpt.var)
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::UnnormalizedCpt(space.name(cpt.var).to_string()));
                }
            }
        }
        // Kahn's algorithm for a topological order; a leftover means a cycle.
        let mut indeg = vec![0usize; space.len()];
        for cpt in &cpts {
            indeg[cpt.var.index()] = cpt.parents.len();
        }
        let mut order = Vec::with_capacity(space.len());
        let mut ready: Vec<VarId> = (0..space.len() as u32)
            .map(VarId)
            .filter(|v| indeg[v.index()] == 0)
            .collect();
        let mut done = vec![false; space.len()];
        while let Some(v) = ready.pop() {
            order.push(v);
            done[v.index()] = true;
            for cpt in &cpts {
                if !done[cpt.var.index()]
                    && indeg[cpt.var.index()] > 0
                    && cpt.parents.contains(&v)
                {
                    indeg[cpt.var.index()] -= 1;
                    if indeg[cpt.var.index()] == 0 {
                        ready.push(cpt.var);
                    }
                }
            }
        }
        if order.len() != space.len() {
            return Err(Error::CyclicNetwork);
        }
        let mut sorted_cpts: Vec<Cpt> = Vec::with_capacity(cpts.len());
        let mut tmp: Vec<Option<Cpt>> = cpts.into_iter().map(Some).collect();
        for &v in &order {
            let i = by_var[v.index()].expect("validated");
            sorted_cpts.push(tmp[i].take().expect("unique"));
        }
        Ok(BayesNet { space, hidden, cpts: sorted_cpts, order })
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn hidden(&self) -> VarSet {
        self.hidden
    }

    pub fn visible(&self) -> VarSet {
        self.space.all().difference(self.hidden)
    }

    pub fn cpts(&self) -> &[Cpt] {
        &self.cpts
    }

    fn row_index(&self, cpt: &Cpt, a: &Assignment) -> usize {
        let mut idx = 0;
        for &p in &cpt.parents {
            idx = idx * self.space.card(p) + a.get(p).expect("parents assigned");
        }
        idx
    }

    /// Probability of a full assignment over all (visible and hidden)
    /// variables: the product of CPT entries.
    pub fn probability(&self, a: &Assignment) -> f64 {
        self.cpts
            .iter()
            .map(|cpt| cpt.rows[self.row_index(cpt, a)][a.get(cpt.var).expect("assigned")])
            .product()
    }

    /// Exact joint over the visible variables (hidden summed out).
    pub fn joint_table(&self) -> Result<JointTable> {
        let mut t = JointTable::zeros(self.space.clone(), self.visible());
        for a in assignments(&self.space, self.space.all()) {
            let p = self.probability(&a);
            let vis = a.restrict(self.visible());
            let old = t.at(&vis);
            t.set_at(&vis, old + p);
        }
        Ok(t)
    }

    /// Ancestral sampling of `n` rows over the visible variables, seeded.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let visible: Vec<VarId> = self.visible().iter().collect();
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut a = Assignment::new();
            for (oi, &v) in self.order.iter().enumerate() {
                let cpt = &self.cpts[oi];
                debug_assert_eq!(cpt.var, v);
                let row = &cpt.rows[self.row_index(cpt, &a)];
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                let mut state = row.len() - 1;
                for (s, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        state = s;
                        break;
                    }
                }
                a.set(v, state);
            }
            rows.push(visible.iter().map(|&v| a.get(v).expect("sampled")).collect());
        }
        Dataset::new(self.space.clone(), visible, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_bn() -> BayesNet {
        // A -> B -> C, all binary and fully visible.
        let space = VariableSpace::from_pairs(vec![("A", 2), ("B", 2), ("C", 2)]).unwrap();
        let a = space.lookup("A").unwrap();
        let b = space.lookup("B").unwrap();
        let c = space.lookup("C").unwrap();
        BayesNet::new(
            space.clone(),
            VarSet::empty(),
            vec![
                Cpt { var: a, parents: vec![], rows: vec![vec![0.6, 0.4]] },
                Cpt {
                    var: b,
                    parents: vec![a],
                    rows: vec![vec![0.8, 0.2], vec![0.3, 0.7]],
                },
                Cpt {
                    var: c,
                    parents: vec![b],
                    rows: vec![vec![0.9, 0.1], vec![0.25, 0.75]],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn joint_table_sums_to_one() {
        let bn = chain_bn();
        let t = bn.joint_table().unwrap();
        assert!((t.total() - 1.0).abs() < 1e-12);
        // Hand value: p(A=1, B=1, C=1) = 0.4 * 0.7 * 0.75.
        let space = bn.space();
        let q = Assignment::from_pairs(&[
            (space.lookup("A").unwrap(), 1),
            (space.lookup("B").unwrap(), 1),
            (space.lookup("C").unwrap(), 1),
        ]);
        assert!((t.at(&q) - 0.4 * 0.7 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn deterministic_cpts_force_one_sample() {
        let space = VariableSpace::from_pairs(vec![("A", 2), ("B", 2)]).unwrap();
        let a = space.lookup("A").unwrap();
        let b = space.lookup("B").unwrap();
        let bn = BayesNet::new(
            space.clone(),
            VarSet::empty(),
            vec![
                Cpt { var: a, parents: vec![], rows: vec![vec![0.0, 1.0]] },
                Cpt {
                    var: b,
                    parents: vec![a],
                    rows: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
                },
            ],
        )
        .unwrap();
        let data = bn.sample(25, 3).unwrap();
        for row in data.rows() {
            assert_eq!(row, &vec![1, 0]);
        }
    }

    #[test]
    fn bernoulli_mean_inside_binomial_bound() {
        let space = VariableSpace::from_pairs(vec![("A", 2)]).unwrap();
        let a = space.lookup("A").unwrap();
        let bn = BayesNet::new(
            space.clone(),
            VarSet::empty(),
            vec![Cpt { var: a, parents: vec![], rows: vec![vec![0.5, 0.5]] }],
        )
        .unwrap();
        let n = 10_000;
        let data = bn.sample(n, 7).unwrap();
        let ones: usize = data.rows().iter().map(|r| r[0]).sum();
        let mean = ones as f64 / n as f64;
        let sigma = (0.25f64 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn empirical_joint_near_exact_joint() {
        let bn = chain_bn();
        let t = bn.joint_table().unwrap();
        let n = 10_000;
        let data = bn.sample(n, 11).unwrap();
        let mut l1 = 0.0;
        for a in t.assignments() {
            let emp = data.count_matching(&a) as f64 / n as f64;
            l1 += (emp - t.at(&a)).abs();
        }
        assert!(l1 < 0.05, "L1 distance {l1}");
    }

    #[test]
    fn hidden_variables_dropped_from_samples() {
        let space = VariableSpace::from_pairs(vec![("U", 2), ("X", 2)]).unwrap();
        let u = space.lookup("U").unwrap();
        let x = space.lookup("X").unwrap();
        let bn = BayesNet::new(
            space.clone(),
            VarSet::singleton(u),
            vec![
                Cpt { var: u, parents: vec![], rows: vec![vec![0.5, 0.5]] },
                Cpt {
                    var: x,
                    parents: vec![u],
                    rows: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
                },
            ],
        )
        .unwrap();
        let data = bn.sample(10, 1).unwrap();
        assert_eq!(data.vars(), &[x]);
        let t = bn.joint_table().unwrap();
        assert_eq!(t.var_set(), VarSet::singleton(x));
        assert!((t.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_detected() {
        let space = VariableSpace::from_pairs(vec![("A", 2), ("B", 2)]).unwrap();
        let a = space.lookup("A").unwrap();
        let b = space.lookup("B").unwrap();
        let err = BayesNet::new(
            space.clone(),
            VarSet::empty(),
            vec![
                Cpt {
                    var: a,
                    parents: vec![b],
                    rows: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                },
                Cpt {
                    var: b,
                    parents: vec![a],
                    rows: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                },
            ],
        );
        assert!(matches!(err, Err(Error::CyclicNetwork)));
    }

    #[test]
    fn unnormalized_cpt_rejected() {
        let space = VariableSpace::from_pairs(vec![("A", 2)]).unwrap();
        let a = space.lookup("A").unwrap();
        let err = BayesNet::new(
            space.clone(),
            VarSet::empty(),
            vec![Cpt { var: a, parents: vec![], rows: vec![vec![0.5, 0.6]] }],
        );
        assert!(matches!(err, Err(Error::UnnormalizedCpt(_))));
    }
}
