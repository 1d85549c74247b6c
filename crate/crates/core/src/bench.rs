//! Desk-scale backdoor-estimation benchmark: learn a randomly structured
//! circuit enforcing the backdoor requirement, run the adjustment pipeline,
//! and compare against the cell-counting estimator and exact ground truth.

use crate::bn::BayesNet;
use crate::calculus::Value;
use crate::causal::backdoor_pipeline;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mdnet::{build_random, fit_em, EmConfig, StructureConfig};
use crate::mdvtree::optimal_labelling;
use crate::oracle::{backdoor_estimand, table_from_circuit, JointTable};
use crate::vars::{assignments, DomainIndexer, VarSet, VariableSpace};
use crate::vtree::{Vtree, VtreeNode, VtreeNodeId};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub groups_per_layer: usize,
    pub nodes_per_group: usize,
    pub em_iters: usize,
    pub em_tol: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: 1000,
            runs: 10,
            seed: 7,
            groups_per_layer: 2,
            nodes_per_group: 8,
            em_iters: 25,
            em_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub md_error: f64,
    pub counting_error: f64,
    pub md_learn_secs: f64,
    pub md_query_secs: f64,
    pub counting_secs: f64,
    pub zero_divisions: u64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub runs: Vec<BenchRun>,
    pub mean_md_error: f64,
    pub mean_counting_error: f64,
    pub mean_md_secs: f64,
    pub mean_counting_secs: f64,
}

/// Mean absolute error of an estimated interventional table against the
/// exact one, over all treatment/outcome assignments.
fn mean_abs_error(est: &JointTable, truth: &JointTable) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in truth.assignments() {
        total += (est.at(&a) - truth.at(&a)).abs();
        count += 1;
    }
    total / count as f64
}

/// The counting estimator: `p(z)` from cell frequencies and
/// `p(y | x, z) = N(y,x,z) / N(x,z)`, taken as zero when the conditioning
/// cell is empty.
fn counting_estimate(
    data: &Dataset,
    x: VarSet,
    y: VarSet,
    z: VarSet,
) -> Result<JointTable> {
    let space = data.space().clone();
    let cells = DomainIndexer::new(&space, x.union(y).union(z));
    let mut counts = vec![0usize; cells.len()];
    for row in 0..data.len() {
        let a = data.assignment(row).restrict(x.union(y).union(z));
        counts[cells.index_of(&a)] += 1;
    }
    let full = JointTable::new(
        space.clone(),
        x.union(y).union(z),
        counts.iter().map(|&c| c as f64).collect(),
    )?;
    let n = data.len() as f64;
    let mut out = JointTable::zeros(space.clone(), x.union(y));
    for ctx in assignments(&space, x.union(y)) {
        let mut total = 0.0;
        for za in assignments(&space, z) {
            let nz = full.marginal(&za);
            let nxz = full.marginal(&ctx.restrict(x).merged(&za));
            let nyxz = full.marginal(&ctx.merged(&za));
            if nxz > 0.0 {
                total += (nz / n) * (nyxz / nxz);
            }
        }
        out.set_at(&ctx, total);
    }
    Ok(out)
}

/// Runs the backdoor benchmark: per run, sample a dataset, learn a circuit
/// whose md-vtree enforces the backdoor requirement (root split between the
/// treatment-plus-adjustment block and the rest), execute the adjustment
/// pipeline, and score both estimators against the exact interventional
/// distribution. Per-run seeds are `seed + run`.
pub fn backdoor_bench(
    bn: &BayesNet,
    x: VarSet,
    y: VarSet,
    z: VarSet,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if !bn.hidden().is_empty() {
        return Err(Error::Parse(
            "backdoor benchmark expects a fully observed network".into(),
        ));
    }
    let space = bn.space().clone();
    let truth_joint = bn.joint_table()?;
    let truth = backdoor_estimand(&truth_joint, x, y, z, None);
    let query = backdoor_pipeline(&space, x, y, z, None)?;
    let requirement = query
        .requirements()?
        .map_err(|i| Error::AnalysisFailure(i.to_string()))?;
    let demanded = requirement.determinism_sets();
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let run_seed = cfg.seed + run as u64;
        let data = bn.sample(cfg.n, run_seed)?;
        // Learn.
        let t0 = Instant::now();
        let vt = bench_vtree(&space, x, z, run_seed)?;
        let w = optimal_labelling(&vt, &demanded)?;
        let net = build_random(
            &w,
            &StructureConfig {
                groups_per_layer: cfg.groups_per_layer,
                nodes_per_group: cfg.nodes_per_group,
                seed: run_seed,
            },
        )?;
        let (model, _trace) = fit_em(
            &net.circuit,
            &data,
            &EmConfig { max_iters: cfg.em_iters, tol: cfg.em_tol, floor: Some(crate::mdnet::SMOOTHING) },
        )?;
        let md_learn_secs = t0.elapsed().as_secs_f64();
        // Query.
        let t1 = Instant::now();
        let (value, diag) = query.run(&model)?;
        let est = match value {
            Value::Circuit(c) => table_from_circuit(&c, None)?,
            Value::Scalar(_) => return Err(Error::AnalysisFailure("scalar estimand".into())),
        };
        let md_query_secs = t1.elapsed().as_secs_f64();
        let md_error = mean_abs_error(&est, &truth);
        // Counting baseline.
        let t2 = Instant::now();
        let counting = counting_estimate(&data, x, y, z)?;
        let counting_secs = t2.elapsed().as_secs_f64();
        let counting_error = mean_abs_error(&counting, &truth);
        runs.push(BenchRun {
            md_error,
            counting_error,
            md_learn_secs,
            md_query_secs,
            counting_secs,
            zero_divisions: diag.zero_divisions,
        });
    }
    let mean = |f: &dyn Fn(&BenchRun) -> f64| -> f64 {
        runs.iter().map(f).sum::<f64>() / runs.len() as f64
    };
    Ok(BenchReport {
        mean_md_error: mean(&|r| r.md_error),
        mean_counting_error: mean(&|r| r.counting_error),
        mean_md_secs: mean(&|r| r.md_learn_secs + r.md_query_secs),
        mean_counting_secs: mean(&|r| r.counting_secs),
        runs,
    })
}

/// The benchmark vtree: the root separates the treatment-plus-adjustment
/// block from the rest, and that block splits the treatment from the
/// adjustment set, so learned structures resolve the conditional's
/// treatment-dependence. Below those splits the shape is random, seeded.
fn bench_vtree(
    space: &Arc<VariableSpace>,
    x: VarSet,
    z: VarSet,
    seed: u64,
) -> Result<Arc<Vtree>> {
    let rest = space.all().difference(x.union(z));
    if z.is_empty() || rest.is_empty() {
        return Vtree::root_split(space.clone(), space.all(), x.union(z), seed);
    }
    let mut nodes: Vec<VtreeNode> = Vec::new();
    let copy_sub = |sub: &Arc<Vtree>, nodes: &mut Vec<VtreeNode>| -> VtreeNodeId {
        let offset = nodes.len();
        for id in 0..sub.len() {
            nodes.push(match sub.node(VtreeNodeId(id)) {
                VtreeNode::Leaf { scope } => VtreeNode::Leaf { scope: *scope },
                VtreeNode::Internal { left, right } => VtreeNode::Internal {
                    left: VtreeNodeId(left.index() + offset),
                    right: VtreeNodeId(right.index() + offset),
                },
            });
        }
        VtreeNodeId(sub.root().index() + offset)
    };
    let xs = copy_sub(&Vtree::random(space.clone(), x, seed)?, &mut nodes);
    let zs = copy_sub(&Vtree::random(space.clone(), z, seed.wrapping_add(1))?, &mut nodes);
    nodes.push(VtreeNode::Internal { left: xs, right: zs });
    let xz = VtreeNodeId(nodes.len() - 1);
    let rs = copy_sub(&Vtree::random(space.clone(), rest, seed.wrapping_add(2))?, &mut nodes);
    nodes.push(VtreeNode::Internal { left: xz, right: rs });
    let root = VtreeNodeId(nodes.len() - 1);
    Vtree::new(space.clone(), nodes, root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bn::Cpt;
    use crate::vars::{Assignment, VariableSpace};

    #[test]
    fn counting_estimator_zero_rule() {
        // A dataset that never realizes X=1 with Z=1: that cell contributes
        // zero to the adjusted estimate.
        let space =
            VariableSpace::from_pairs(vec![("X", 2), ("Y", 2), ("Z", 2)]).unwrap();
        let x = space.lookup("X").unwrap();
        let y = space.lookup("Y").unwrap();
        let z = space.lookup("Z").unwrap();
        let rows = vec![
            vec![0, 0, 0],
            vec![0, 1, 1],
            vec![1, 1, 0],
            vec![1, 0, 0],
        ];
        let data = Dataset::new(space.clone(), vec![x, y, z], rows).unwrap();
        let est = counting_estimate(
            &data,
            VarSet::singleton(x),
            VarSet::singleton(y),
            VarSet::singleton(z),
        )
        .unwrap();
        // p_{x=1}(y=1): z=0 cell has N(x=1,z=0)=2, N(y=1,x=1,z=0)=1, p(z=0)=3/4;
        // z=1 cell is empty for x=1 and contributes 0.
        let a = Assignment::from_pairs(&[(x, 1), (y, 1)]);
        assert!((est.at(&a) - 0.75 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn bench_runs_and_improves_on_counting_when_cells_are_sparse() {
        // Toy network with a three-variable adjustment set: enough cells to
        // starve the counting estimator at a small sample size.
        let space = VariableSpace::from_pairs(vec![
            ("Z0", 2),
            ("Z1", 2),
            ("Z2", 2),
            ("X", 2),
            ("Y", 2),
        ])
        .unwrap();
        let zv: Vec<_> = (0..3).map(|i| space.lookup(&format!("Z{i}")).unwrap()).collect();
        let xv = space.lookup("X").unwrap();
        let yv = space.lookup("Y").unwrap();
        let mut cpts: Vec<Cpt> = zv
            .iter()
            .map(|&v| Cpt { var: v, parents: vec![], rows: vec![vec![0.5, 0.5]] })
            .collect();
        // X strongly driven by the adjustment set.
        let x_rows: Vec<Vec<f64>> = (0..8)
            .map(|cell| {
                let bias = 0.08 + 0.84 * ((cell % 2) as f64);
                vec![1.0 - bias, bias]
            })
            .collect();
        cpts.push(Cpt { var: xv, parents: zv.clone(), rows: x_rows });
        // Y depends on X strongly and the first adjustment variable weakly.
        let y_rows: Vec<Vec<f64>> = (0..4)
            .map(|cell| {
                let xs = cell % 2;
                let z0 = cell / 2;
                let p1 = 0.2 + 0.5 * xs as f64 + 0.1 * z0 as f64;
                vec![1.0 - p1, p1]
            })
            .collect();
        cpts.push(Cpt { var: yv, parents: vec![xv, zv[0]], rows: y_rows });
        let bn = BayesNet::new(space.clone(), VarSet::empty(), cpts).unwrap();
        let x = VarSet::singleton(xv);
        let y = VarSet::singleton(yv);
        let z: VarSet = zv.iter().copied().collect();
        let cfg = BenchConfig {
            n: 300,
            runs: 3,
            seed: 11,
            groups_per_layer: 2,
            nodes_per_group: 8,
            em_iters: 15,
            em_tol: 1e-6,
        };
        let report = backdoor_bench(&bn, x, y, z, &cfg).unwrap();
        assert!(report.mean_md_error.is_finite());
        assert!(report.mean_counting_error.is_finite());
        assert!(report.runs.len() == 3);
    }
}
