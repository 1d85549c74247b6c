//! Causal estimands as ready-made operation pipelines.
//!
//! Each constructor spells out a do-calculus formula — backdoor adjustment,
//! frontdoor adjustment, or the extended napkin display — as a composition
//! of marginalizations, instantiations, products and reciprocal powers over
//! a single observational circuit. The backward analysis of the resulting
//! pipeline yields the marginal determinisms the circuit must be trained
//! with; execution evaluates the estimand exactly.
//!
//! The frontdoor formula reuses the circuit as a function of fresh formal
//! copies of the treatment variables; those copies live in an extended
//! variable space with the original variables' ids preserved.

use crate::calculus::{
    backward_analyze, execute, BackwardResult, Demand, ExecDiagnostics, Infeasibility, PipeNode,
    PipeOp, Pipeline, Requirement, Value,
};
use crate::circuit::Circuit;
use crate::error::{Error, Result};
use crate::vars::{assignments, Assignment, VarId, VarSet, VariableSpace};
use std::collections::BTreeMap;
use std::sync::Arc;

pub const PRIMARY_INPUT: &str = "C";
pub const AUX_INPUT: &str = "C_dup";

/// A causal query packaged as a pipeline plus the bookkeeping needed to
/// relate auxiliary-variable demands back to the primary input.
pub struct CausalQuery {
    /// Space the pipeline runs in (extended with formal copies if needed).
    space: Arc<VariableSpace>,
    /// Space the model is expected to live in.
    model_space: Arc<VariableSpace>,
    pipeline: Pipeline,
    /// Identity into the extended space for the primary input.
    primary_map: Vec<VarId>,
    /// Treatment-variable copies: (original, copy) pairs, when present.
    aux_map: Option<Vec<(VarId, VarId)>>,
}

impl CausalQuery {
    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    /// Backward-derived marginal determinisms for the observational circuit,
    /// with auxiliary-variable demands folded back onto the original
    /// variables. Demands are sorted by inclusion (smallest first).
    pub fn requirements(&self) -> Result<std::result::Result<Requirement, Infeasibility>> {
        let reqs = match backward_analyze(&self.pipeline)? {
            BackwardResult::Requirements(r) => r,
            BackwardResult::Infeasible(i) => return Ok(Err(i)),
        };
        let mut demands: Vec<Demand> = Vec::new();
        for req in reqs {
            let back = |s: VarSet| -> VarSet {
                match &self.aux_map {
                    None => s,
                    Some(pairs) => s
                        .iter()
                        .map(|v| {
                            pairs
                                .iter()
                                .find(|(_, copy)| *copy == v)
                                .map(|(orig, _)| *orig)
                                .unwrap_or(v)
                        })
                        .collect(),
                }
            };
            for d in req.demands {
                demands.push(Demand { q: back(d.q), slack: back(d.slack) });
            }
        }
        demands.sort();
        demands.dedup();
        // Merge equal sets (alternative slacks intersect); the set is kept
        // unminimized otherwise, since the optimal labelling absorbs
        // redundant supersets.
        let mut kept: Vec<Demand> = Vec::new();
        for d in demands {
            match kept.iter_mut().find(|m| m.q == d.q) {
                Some(m) => m.slack = m.slack.intersect(d.slack),
                None => kept.push(d),
            }
        }
        for a in &kept {
            for b in &kept {
                if !a.q.is_subset(b.q) && !b.q.is_subset(a.q) {
                    return Ok(Err(Infeasibility::ConflictingDemands {
                        input_name: PRIMARY_INPUT.into(),
                        a: a.q,
                        b: b.q,
                    }));
                }
            }
        }
        kept.sort_by_key(|d| (d.q.len(), d.q));
        Ok(Ok(Requirement { input_name: PRIMARY_INPUT.into(), demands: kept }))
    }

    /// Runs the pipeline on a model circuit over the original space. The
    /// returned value is the pipeline's output; diagnostics carry the
    /// restricted-division count.
    pub fn run(&self, model: &Circuit) -> Result<(Value, ExecDiagnostics)> {
        if model.mdvtree().vtree().space().len() != self.model_space.len() {
            return Err(Error::DatasetMismatch(
                "model space does not match the query".into(),
            ));
        }
        let mut inputs: BTreeMap<String, Circuit> = BTreeMap::new();
        let primary = model.remap_vars(self.space.clone(), &self.primary_map)?;
        inputs.insert(PRIMARY_INPUT.into(), primary);
        if let Some(pairs) = &self.aux_map {
            let mut idmap = self.primary_map.clone();
            for (orig, copy) in pairs {
                idmap[orig.index()] = *copy;
            }
            inputs.insert(AUX_INPUT.into(), model.remap_vars(self.space.clone(), &idmap)?);
        }
        let (values, diag) = execute(&self.pipeline, &inputs)?;
        Ok((values[self.pipeline.output()].clone(), diag))
    }
}

fn check_disjoint(sets: &[VarSet]) -> Result<()> {
    for (i, a) in sets.iter().enumerate() {
        for b in sets.iter().skip(i + 1) {
            if a.overlaps(*b) {
                return Err(Error::OverlappingSets);
            }
        }
    }
    Ok(())
}

fn check_total(val: Option<&Assignment>, set: VarSet, what: &str) -> Result<()> {
    if let Some(a) = val {
        if a.vars() != set {
            return Err(Error::MissingInstantiation(what.into()));
        }
    }
    Ok(())
}

/// Backdoor adjustment `sum_Z p(Z) p(Y, X, Z) / p(X, Z)` over the full-scope
/// circuit. With an intervention value the treatment is instantiated before
/// the reciprocal branch and the output ranges over the outcome only.
pub fn backdoor_pipeline(
    space: &Arc<VariableSpace>,
    x: VarSet,
    y: VarSet,
    z: VarSet,
    x_val: Option<&Assignment>,
) -> Result<CausalQuery> {
    check_disjoint(&[x, y, z])?;
    check_total(x_val, x, "treatment value must cover the treatment set")?;
    let all = space.all();
    let rest = all.difference(x.union(y).union(z));
    let mut nodes = vec![PipeNode { op: PipeOp::Input(PRIMARY_INPUT.into(), all), inputs: vec![] }];
    let input = 0;
    // p(Z); a scalar total when Z is empty.
    nodes.push(PipeNode { op: PipeOp::Marg(all.difference(z)), inputs: vec![input] });
    let p_z = nodes.len() - 1;
    // p(X, Y, Z)
    nodes.push(PipeNode { op: PipeOp::Marg(rest), inputs: vec![input] });
    let mut joint = nodes.len() - 1;
    if let Some(xa) = x_val {
        nodes.push(PipeNode { op: PipeOp::Inst(xa.clone()), inputs: vec![joint] });
        joint = nodes.len() - 1;
    }
    // Denominator: marginalize the outcome, then invert.
    nodes.push(PipeNode { op: PipeOp::Marg(y), inputs: vec![joint] });
    let den = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Pow(-1.0), inputs: vec![den] });
    let den_inv = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![joint, den_inv] });
    let cond = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_z, cond] });
    let weighted = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(z), inputs: vec![weighted] });
    let out = nodes.len() - 1;
    let pipeline = Pipeline::build(space.clone(), nodes, out)?;
    Ok(CausalQuery {
        space: space.clone(),
        model_space: space.clone(),
        pipeline,
        primary_map: (0..space.len() as u32).map(VarId).collect(),
        aux_map: None,
    })
}

/// Frontdoor adjustment `sum_Z p(Z|X) sum_X' p(X') p(Y|X', Z)`. The `X'`
/// factors reuse the circuit as a function of fresh copies of the treatment
/// variables, which the query adds to an extended space (original ids are
/// preserved).
pub fn frontdoor_pipeline(
    space: &Arc<VariableSpace>,
    x: VarSet,
    y: VarSet,
    z: VarSet,
    x_val: Option<&Assignment>,
) -> Result<CausalQuery> {
    check_disjoint(&[x, y, z])?;
    check_total(x_val, x, "treatment value must cover the treatment set")?;
    // Extended space: originals in order, then one copy per treatment var.
    let mut ext = VariableSpace::new();
    for i in 0..space.len() {
        let v = VarId(i as u32);
        ext.add(space.name(v).to_string(), space.card(v))?;
    }
    let mut aux_pairs = Vec::new();
    for v in x.iter() {
        let copy = ext.add(format!("{}__dup", space.name(v)), space.card(v))?;
        aux_pairs.push((v, copy));
    }
    let ext = Arc::new(ext);
    let all = space.all();
    let x_dup: VarSet = aux_pairs.iter().map(|(_, c)| *c).collect();
    let aux_all = all.difference(x).union(x_dup);
    let aux_rest = aux_all.difference(x_dup.union(y).union(z));

    let mut nodes = vec![
        PipeNode { op: PipeOp::Input(PRIMARY_INPUT.into(), all), inputs: vec![] },
        PipeNode { op: PipeOp::Input(AUX_INPUT.into(), aux_all), inputs: vec![] },
    ];
    let (c, c_dup) = (0, 1);
    // p(Z | X) branch on the primary input.
    nodes.push(PipeNode { op: PipeOp::Marg(all.difference(x.union(z))), inputs: vec![c] });
    let mut p_xz = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(all.difference(x)), inputs: vec![c] });
    let mut p_x = nodes.len() - 1;
    if let Some(xa) = x_val {
        nodes.push(PipeNode { op: PipeOp::Inst(xa.clone()), inputs: vec![p_xz] });
        p_xz = nodes.len() - 1;
        nodes.push(PipeNode { op: PipeOp::Inst(xa.clone()), inputs: vec![p_x] });
        p_x = nodes.len() - 1;
    }
    nodes.push(PipeNode { op: PipeOp::Pow(-1.0), inputs: vec![p_x] });
    let p_x_inv = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_xz, p_x_inv] });
    let p_z_given_x = nodes.len() - 1;
    // sum_X' p(X') p(Y | X', Z) branch on the copy input.
    nodes.push(PipeNode { op: PipeOp::Marg(aux_all.difference(x_dup)), inputs: vec![c_dup] });
    let p_xd = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(aux_rest), inputs: vec![c_dup] });
    let p_xyz_d = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(y), inputs: vec![p_xyz_d] });
    let p_xz_d = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Pow(-1.0), inputs: vec![p_xz_d] });
    let p_xz_d_inv = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_xyz_d, p_xz_d_inv] });
    let p_y_given_xz = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_xd, p_y_given_xz] });
    let weighted_inner = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(x_dup), inputs: vec![weighted_inner] });
    let inner = nodes.len() - 1;
    // Combine and sum out the mediator.
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_z_given_x, inner] });
    let combined = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(z), inputs: vec![combined] });
    let out = nodes.len() - 1;
    let pipeline = Pipeline::build(ext.clone(), nodes, out)?;
    Ok(CausalQuery {
        space: ext,
        model_space: space.clone(),
        pipeline,
        primary_map: (0..space.len() as u32).map(VarId).collect(),
        aux_map: Some(aux_pairs),
    })
}

/// Extended-napkin estimand at a fixed conditioning value `z_val`: the outer
/// sum over `k` of the normalizing factor times the ratio of the `w`-summed
/// conditional numerator and denominator. Pass `x_val: None` for the
/// circuit-valued form, whose backward analysis reports infeasibility at
/// the denominator's product split.
#[allow(clippy::too_many_arguments)]
pub fn napkin_pipeline(
    space: &Arc<VariableSpace>,
    x: VarSet,
    y: VarSet,
    z: VarSet,
    w: VarSet,
    k: VarSet,
    x_val: Option<&Assignment>,
    z_val: &Assignment,
) -> Result<CausalQuery> {
    check_disjoint(&[x, y, z, w, k])?;
    check_total(x_val, x, "treatment value must cover the treatment set")?;
    check_total(Some(z_val), z, "conditioning value must cover its set")?;
    let all = space.all();
    let rest = all.difference(x.union(y).union(z).union(w).union(k));
    let mut nodes = vec![PipeNode { op: PipeOp::Input(PRIMARY_INPUT.into(), all), inputs: vec![] }];
    let input = 0;
    // base = p(K, z, W) as a function of (K, W).
    nodes.push(PipeNode {
        op: PipeOp::Marg(all.difference(k.union(z).union(w))),
        inputs: vec![input],
    });
    let p_kzw = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Inst(z_val.clone()), inputs: vec![p_kzw] });
    let base = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Pow(-1.0), inputs: vec![base] });
    let base_inv = nodes.len() - 1;
    // cond = p(X, Y | K, z, W) as a function of (X, Y, K, W).
    nodes.push(PipeNode { op: PipeOp::Marg(rest), inputs: vec![input] });
    let p_all = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Inst(z_val.clone()), inputs: vec![p_all] });
    let p_xykzw = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_xykzw, base_inv] });
    let cond = nodes.len() - 1;
    // p(W, K).
    nodes.push(PipeNode { op: PipeOp::Marg(all.difference(w.union(k))), inputs: vec![input] });
    let p_wk = nodes.len() - 1;
    // Leading factor: sum over W and the conditional's X, Y arguments.
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![cond, p_wk] });
    let lead_in = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(x.union(y).union(w)), inputs: vec![lead_in] });
    let lead = nodes.len() - 1;
    // Numerator: sum over W of cond (at x when given) times p(W, K).
    let mut num_cond = cond;
    if let Some(xa) = x_val {
        nodes.push(PipeNode { op: PipeOp::Inst(xa.clone()), inputs: vec![cond] });
        num_cond = nodes.len() - 1;
    }
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![num_cond, p_wk] });
    let num_in = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(w), inputs: vec![num_in] });
    let num = nodes.len() - 1;
    // Denominator: the conditional marginalized over Y (at x when given),
    // weighted, summed over W, inverted.
    nodes.push(PipeNode { op: PipeOp::Marg(y), inputs: vec![cond] });
    let mut den_cond = nodes.len() - 1;
    if let Some(xa) = x_val {
        nodes.push(PipeNode { op: PipeOp::Inst(xa.clone()), inputs: vec![den_cond] });
        den_cond = nodes.len() - 1;
    }
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![den_cond, p_wk] });
    let den_in = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(w), inputs: vec![den_in] });
    let den = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Pow(-1.0), inputs: vec![den] });
    let den_inv = nodes.len() - 1;
    // Combine: lead * num * den^{-1}, summed over K.
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![num, den_inv] });
    let ratio = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![lead, ratio] });
    let total = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(k), inputs: vec![total] });
    let out = nodes.len() - 1;
    let pipeline = Pipeline::build(space.clone(), nodes, out)?;
    Ok(CausalQuery {
        space: space.clone(),
        model_space: space.clone(),
        pipeline,
        primary_map: (0..space.len() as u32).map(VarId).collect(),
        aux_map: None,
    })
}

/// Mutual-information pipeline between two disjoint sets (an intentionally
/// infeasible composition: it demands incomparable determinisms).
pub fn mutual_information_pipeline(
    space: &Arc<VariableSpace>,
    x: VarSet,
    y: VarSet,
) -> Result<CausalQuery> {
    check_disjoint(&[x, y])?;
    let all = space.all();
    let mut nodes = vec![PipeNode { op: PipeOp::Input(PRIMARY_INPUT.into(), all), inputs: vec![] }];
    let input = 0;
    nodes.push(PipeNode { op: PipeOp::Marg(all.difference(x.union(y))), inputs: vec![input] });
    let p_xy = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(y), inputs: vec![p_xy] });
    let p_x = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Pow(-1.0), inputs: vec![p_x] });
    let p_x_inv = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(x), inputs: vec![p_xy] });
    let p_y = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Pow(-1.0), inputs: vec![p_y] });
    let p_y_inv = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_xy, p_x_inv] });
    let t1 = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![t1, p_y_inv] });
    let ratio = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Log, inputs: vec![ratio] });
    let lg = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Prod, inputs: vec![p_xy, lg] });
    let integrand = nodes.len() - 1;
    nodes.push(PipeNode { op: PipeOp::Marg(x.union(y)), inputs: vec![integrand] });
    let out = nodes.len() - 1;
    let pipeline = Pipeline::build(space.clone(), nodes, out)?;
    Ok(CausalQuery {
        space: space.clone(),
        model_space: space.clone(),
        pipeline,
        primary_map: (0..space.len() as u32).map(VarId).collect(),
        aux_map: None,
    })
}

/// The assignment of `set` with the highest marginal mass under the model
/// (the default conditioning value for the napkin query).
pub fn most_likely_assignment(model: &Circuit, set: VarSet) -> Result<Assignment> {
    let space = model.mdvtree().vtree().space().clone();
    let mut best: Option<(f64, Assignment)> = None;
    for a in assignments(&space, set) {
        let v = model.marginal_evaluate(&a)?;
        if best.as_ref().map(|(b, _)| v > *b).unwrap_or(true) {
            best = Some((v, a));
        }
    }
    Ok(best.expect("nonempty domain").1)
}

/// A vtree that separates a chain of demanded sets hierarchically: the root
/// splits off the smallest demand, the next level the increment to the
/// second demand, and so on, with the leftover variables last. Under the
/// optimal labelling of the chain, conditioning slices factor exactly at
/// every level, so exact compilation of arbitrary positive tables succeeds.
pub fn chain_split_vtree(
    space: &Arc<VariableSpace>,
    full: VarSet,
    chain: &[VarSet],
    seed: u64,
) -> Result<Arc<crate::vtree::Vtree>> {
    use crate::vtree::{Vtree, VtreeNode, VtreeNodeId};
    let mut groups: Vec<VarSet> = Vec::new();
    let mut covered = VarSet::empty();
    let mut sorted = chain.to_vec();
    sorted.sort_by_key(|q| q.len());
    for q in sorted {
        let inc = q.intersect(full).difference(covered);
        if !inc.is_empty() {
            groups.push(inc);
            covered = covered.union(inc);
        }
    }
    let rest = full.difference(covered);
    if !rest.is_empty() {
        groups.push(rest);
    }
    if groups.len() == 1 {
        return Vtree::random(space.clone(), full, seed);
    }
    // Right comb over the groups, each group a random subtree.
    let mut nodes: Vec<VtreeNode> = Vec::new();
    let mut sub_roots = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let sub = Vtree::random(space.clone(), *g, seed.wrapping_add(i as u64))?;
        let offset = nodes.len();
        for id in 0..sub.len() {
            let n = match sub.node(VtreeNodeId(id)) {
                VtreeNode::Leaf { scope } => VtreeNode::Leaf { scope: *scope },
                VtreeNode::Internal { left, right } => VtreeNode::Internal {
                    left: VtreeNodeId(left.index() + offset),
                    right: VtreeNodeId(right.index() + offset),
                },
            };
            nodes.push(n);
        }
        sub_roots.push(VtreeNodeId(sub.root().index() + offset));
    }
    let mut right = sub_roots[sub_roots.len() - 1];
    for &left in sub_roots.iter().rev().skip(1) {
        nodes.push(VtreeNode::Internal { left, right });
        right = VtreeNodeId(nodes.len() - 1);
    }
    Vtree::new(space.clone(), nodes, right)
}
