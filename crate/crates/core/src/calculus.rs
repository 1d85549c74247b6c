//! Compositional inference pipelines and their tractability analysis.
//!
//! A pipeline is a DAG of basic operations over named circuit inputs. The
//! *forward* analysis propagates md-vtrees through the operations' label
//! rules (never building layers) and checks each deterministic operation's
//! requirement along the way. The *backward* analysis starts from those
//! requirements and derives, per input, a sufficient set of marginal
//! determinisms — the demands one then hands to the optimal labelling to
//! pick a circuit class before learning.

use crate::circuit::Circuit;
use crate::error::{Error, Result};
use crate::mdvtree::MdVtree;
use crate::ops::{self, DetCheck, OpOutput};
use crate::vars::{Assignment, VarSet, VariableSpace};
use std::collections::BTreeMap;
use std::sync::Arc;

/// A pipeline node id (operation nodes reference earlier nodes only).
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum PipeOp {
    /// Named circuit input over the given variables.
    Input(String, VarSet),
    Marg(VarSet),
    Inst(Assignment),
    Prod,
    Pow(f64),
    Max,
    Log,
}

#[derive(Debug, Clone)]
pub struct PipeNode {
    pub op: PipeOp,
    pub inputs: Vec<NodeId>,
}

/// A DAG of basic operations over named circuit inputs.
#[derive(Debug, Clone)]
pub struct Pipeline {
    space: Arc<VariableSpace>,
    nodes: Vec<PipeNode>,
    output: NodeId,
    /// Scope of each node's value; empty means scalar.
    scopes: Vec<VarSet>,
    /// Whether the node's value is a scalar (scope consumed entirely).
    scalar: Vec<bool>,
}

impl Pipeline {
    pub fn build(
        space: Arc<VariableSpace>,
        nodes: Vec<PipeNode>,
        output: NodeId,
    ) -> Result<Pipeline> {
        if output >= nodes.len() {
            return Err(Error::InvalidPipeline("output id out of range".into()));
        }
        let mut scopes = vec![VarSet::empty(); nodes.len()];
        let mut scalar = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            for &inp in &node.inputs {
                if inp >= i {
                    return Err(Error::InvalidPipeline(format!(
                        "node {i} references later node {inp}"
                    )));
                }
            }
            let arity = match node.op {
                PipeOp::Input(_, _) => 0,
                PipeOp::Prod => 2,
                _ => 1,
            };
            if node.inputs.len() != arity {
                return Err(Error::InvalidPipeline(format!(
                    "node {i} has {} inputs, expected {arity}",
                    node.inputs.len()
                )));
            }
            match &node.op {
                PipeOp::Input(_, vars) => {
                    if vars.is_empty() {
                        return Err(Error::InvalidPipeline(format!("input {i} has empty scope")));
                    }
                    scopes[i] = *vars;
                }
                PipeOp::Marg(w) => {
                    let s = scopes[node.inputs[0]];
                    if scalar[node.inputs[0]] || !w.is_subset(s) {
                        return Err(Error::InvalidPipeline(format!(
                            "node {i} marginalizes outside its input scope"
                        )));
                    }
                    scopes[i] = s.difference(*w);
                    scalar[i] = scopes[i].is_empty();
                }
                PipeOp::Inst(a) => {
                    let s = scopes[node.inputs[0]];
                    if scalar[node.inputs[0]] || !a.vars().is_subset(s) {
                        return Err(Error::InvalidPipeline(format!(
                            "node {i} instantiates outside its input scope"
                        )));
                    }
                    a.validate(&space)?;
                    scopes[i] = s.difference(a.vars());
                    scalar[i] = scopes[i].is_empty();
                }
                PipeOp::Prod => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    scopes[i] = scopes[a].union(scopes[b]);
                    scalar[i] = scalar[a] && scalar[b];
                }
                PipeOp::Pow(alpha) => {
                    if !alpha.is_finite() {
                        return Err(Error::InvalidPipeline(format!(
                            "node {i} has a non-finite exponent"
                        )));
                    }
                    scopes[i] = scopes[node.inputs[0]];
                    scalar[i] = scalar[node.inputs[0]];
                }
                PipeOp::Max => {
                    scopes[i] = VarSet::empty();
                    scalar[i] = true;
                }
                PipeOp::Log => {
                    scopes[i] = scopes[node.inputs[0]];
                    scalar[i] = scalar[node.inputs[0]];
                }
            }
        }
        Ok(Pipeline { space, nodes, output, scopes, scalar })
    }

    pub fn space(&self) -> &Arc<VariableSpace> {
        &self.space
    }

    pub fn nodes(&self) -> &[PipeNode] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn scope(&self, id: NodeId) -> VarSet {
        self.scopes[id]
    }

    pub fn is_scalar(&self, id: NodeId) -> bool {
        self.scalar[id]
    }

    pub fn input_names(&self) -> Vec<(String, VarSet)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                PipeOp::Input(name, vars) => Some((name.clone(), *vars)),
                _ => None,
            })
            .collect()
    }
}

/// One per-node state of the forward analysis: an md-vtree, or a scalar slot
/// for fully-consumed values.
#[derive(Debug, Clone)]
pub enum NodeState {
    Circuit(MdVtree),
    Scalar,
}

/// A failure discovered by the forward analysis.
#[derive(Debug, Clone)]
pub struct ForwardFailure {
    pub node: NodeId,
    pub reason: String,
}

#[derive(Debug)]
pub struct ForwardReport {
    pub tractable: bool,
    pub states: Vec<Option<NodeState>>,
    pub failures: Vec<ForwardFailure>,
}

/// Propagates md-vtrees through the pipeline using the operations' label
/// rules only (no layers are built), checking at each power/max/log node
/// that the incoming md-vtree implies determinism of the node's input scope
/// and at each product node that the vtrees are compatible.
pub fn forward_analyze(
    pipeline: &Pipeline,
    inputs: &BTreeMap<String, MdVtree>,
) -> Result<ForwardReport> {
    let mut states: Vec<Option<NodeState>> = vec![None; pipeline.nodes.len()];
    let mut failures = Vec::new();
    for (i, node) in pipeline.nodes.iter().enumerate() {
        let state = match &node.op {
            PipeOp::Input(name, vars) => {
                let w = inputs.get(name).ok_or_else(|| {
                    Error::AnalysisFailure(format!("missing md-vtree for input `{name}`"))
                })?;
                if w.scope() != *vars {
                    return Err(Error::AnalysisFailure(format!(
                        "md-vtree scope for `{name}` does not match the pipeline input"
                    )));
                }
                Some(NodeState::Circuit(w.clone()))
            }
            PipeOp::Marg(w_set) => match &states[node.inputs[0]] {
                Some(NodeState::Circuit(w)) => match ops::marg_mdvtree(w, *w_set)? {
                    Some(out) => Some(NodeState::Circuit(out)),
                    None => Some(NodeState::Scalar),
                },
                Some(NodeState::Scalar) => {
                    failures.push(ForwardFailure {
                        node: i,
                        reason: "marginalization of a scalar".into(),
                    });
                    None
                }
                None => None,
            },
            PipeOp::Inst(a) => match &states[node.inputs[0]] {
                Some(NodeState::Circuit(w)) => match ops::inst_mdvtree(w, a.vars())? {
                    Some(out) => Some(NodeState::Circuit(out)),
                    None => Some(NodeState::Scalar),
                },
                Some(NodeState::Scalar) => {
                    failures.push(ForwardFailure {
                        node: i,
                        reason: "instantiation of a scalar".into(),
                    });
                    None
                }
                None => None,
            },
            PipeOp::Prod => {
                let a = &states[node.inputs[0]];
                let b = &states[node.inputs[1]];
                match (a, b) {
                    (Some(NodeState::Circuit(wa)), Some(NodeState::Circuit(wb))) => {
                        match ops::prod_mdvtree(wa, wb) {
                            Ok(out) => Some(NodeState::Circuit(out)),
                            Err(Error::Incompatible) => {
                                failures.push(ForwardFailure {
                                    node: i,
                                    reason: "incompatible vtrees at product".into(),
                                });
                                None
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    (Some(NodeState::Scalar), Some(NodeState::Circuit(w)))
                    | (Some(NodeState::Circuit(w)), Some(NodeState::Scalar)) => {
                        // Scaling by a scalar preserves the md-vtree.
                        Some(NodeState::Circuit(w.clone()))
                    }
                    (Some(NodeState::Scalar), Some(NodeState::Scalar)) => Some(NodeState::Scalar),
                    _ => None,
                }
            }
            PipeOp::Pow(_) => match &states[node.inputs[0]] {
                Some(NodeState::Circuit(w)) => {
                    if w.implies_qdet(w.scope()) {
                        Some(NodeState::Circuit(w.clone()))
                    } else {
                        failures.push(ForwardFailure {
                            node: i,
                            reason: "power requires a deterministic input".into(),
                        });
                        None
                    }
                }
                Some(NodeState::Scalar) => Some(NodeState::Scalar),
                None => None,
            },
            PipeOp::Max => match &states[node.inputs[0]] {
                Some(NodeState::Circuit(w)) => {
                    if w.implies_qdet(w.scope()) {
                        Some(NodeState::Scalar)
                    } else {
                        failures.push(ForwardFailure {
                            node: i,
                            reason: "max requires a deterministic input".into(),
                        });
                        None
                    }
                }
                Some(NodeState::Scalar) => Some(NodeState::Scalar),
                None => None,
            },
            PipeOp::Log => match &states[node.inputs[0]] {
                Some(NodeState::Circuit(w)) => {
                    if w.implies_qdet(w.scope()) {
                        Some(NodeState::Circuit(ops::log_mdvtree(w)))
                    } else {
                        failures.push(ForwardFailure {
                            node: i,
                            reason: "log requires a deterministic input".into(),
                        });
                        None
                    }
                }
                Some(NodeState::Scalar) => Some(NodeState::Scalar),
                None => None,
            },
        };
        states[i] = state;
    }
    Ok(ForwardReport {
        tractable: failures.is_empty(),
        states,
        failures,
    })
}

/// One marginal-determinism demand on a node's value: the value must be
/// `q`-deterministic; `q` extended by any subset of `slack` also suffices
/// (the existential left behind by instantiations along the path).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Demand {
    pub q: VarSet,
    pub slack: VarSet,
}

/// Sufficient marginal determinisms for one named input.
#[derive(Debug, Clone)]
pub struct Requirement {
    pub input_name: String,
    pub demands: Vec<Demand>,
}

impl Requirement {
    pub fn determinism_sets(&self) -> Vec<VarSet> {
        self.demands.iter().map(|d| d.q).collect()
    }
}

/// Why the backward analysis could not derive requirements.
#[derive(Debug, Clone)]
pub enum Infeasibility {
    /// A product node admits neither split rule for a demand.
    ProductSplit { node: NodeId, demand: VarSet },
    /// A demand reached the output of a log node, which yields no marginal
    /// determinism to propagate through.
    LogOutput { node: NodeId, demand: VarSet },
    /// The demands accumulated on one input contain an incomparable pair,
    /// which only support-restricted circuits can satisfy.
    ConflictingDemands { input_name: String, a: VarSet, b: VarSet },
}

impl std::fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Infeasibility::ProductSplit { node, .. } => {
                write!(f, "no product split rule applies at node {node}")
            }
            Infeasibility::LogOutput { node, .. } => {
                write!(f, "determinism demanded of a log output at node {node}")
            }
            Infeasibility::ConflictingDemands { input_name, .. } => write!(
                f,
                "input `{input_name}` would need incomparable marginal determinisms \
                 (impossible without restricting support)"
            ),
        }
    }
}

#[derive(Debug)]
pub enum BackwardResult {
    Requirements(Vec<Requirement>),
    Infeasible(Infeasibility),
}

/// Derives sufficient marginal-determinism requirements on the pipeline's
/// inputs. Each power/max/log node seeds a full-scope determinism demand on
/// its input; demands then flow backward: marginalization keeps a demand as
/// is, instantiation keeps the weakest form while recording the allowed
/// slack, and products split a demand by the shared-scope rules. Demands on
/// one input must form a chain under inclusion.
pub fn backward_analyze(pipeline: &Pipeline) -> Result<BackwardResult> {
    // Demands indexed by the node whose *value* must satisfy them.
    let mut demands: Vec<Vec<Demand>> = vec![Vec::new(); pipeline.nodes.len()];
    for node in pipeline.nodes.iter() {
        match node.op {
            PipeOp::Pow(_) | PipeOp::Max | PipeOp::Log => {
                let src = node.inputs[0];
                let scope = pipeline.scope(src);
                if !scope.is_empty() {
                    demands[src].push(Demand { q: scope, slack: VarSet::empty() });
                }
            }
            _ => {}
        }
    }
    // Process nodes in reverse order, pushing each node's demands onto its
    // inputs.
    for i in (0..pipeline.nodes.len()).rev() {
        let node = pipeline.nodes[i].clone();
        let node_demands = std::mem::take(&mut demands[i]);
        if node_demands.is_empty() {
            continue;
        }
        match &node.op {
            PipeOp::Input(_, _) => {
                demands[i] = node_demands;
            }
            PipeOp::Marg(_) => {
                for d in node_demands {
                    demands[node.inputs[0]].push(d);
                }
            }
            PipeOp::Inst(a) => {
                // Any (q ∪ w')-determinism for w' inside the instantiated set
                // suffices; record the weakest demand and carry the slack.
                for d in node_demands {
                    demands[node.inputs[0]].push(Demand {
                        q: d.q,
                        slack: d.slack.union(a.vars()),
                    });
                }
            }
            PipeOp::Prod => {
                let (ia, ib) = (node.inputs[0], node.inputs[1]);
                let (sa, sb) = (pipeline.scope(ia), pipeline.scope(ib));
                let shared = sa.intersect(sb);
                for d in node_demands {
                    if d.q.is_subset(shared) {
                        // Both factors carry the same demand.
                        if !pipeline.is_scalar(ia) {
                            demands[ia].push(d);
                        }
                        if !pipeline.is_scalar(ib) {
                            demands[ib].push(d);
                        }
                    } else if shared.is_subset(d.q) {
                        // Split the demand along the factor scopes.
                        let qa = d.q.intersect(sa);
                        let qb = d.q.intersect(sb);
                        if !qa.is_empty() && !pipeline.is_scalar(ia) {
                            demands[ia].push(Demand { q: qa, slack: d.slack });
                        }
                        if !qb.is_empty() && !pipeline.is_scalar(ib) {
                            demands[ib].push(Demand { q: qb, slack: d.slack });
                        }
                    } else {
                        return Ok(BackwardResult::Infeasible(Infeasibility::ProductSplit {
                            node: i,
                            demand: d.q,
                        }));
                    }
                }
            }
            PipeOp::Pow(_) => {
                for d in node_demands {
                    demands[node.inputs[0]].push(d);
                }
            }
            PipeOp::Max => {
                // Scalar output: no demands can reach it.
            }
            PipeOp::Log => {
                // No marginal determinism survives a log.
                let d = node_demands[0];
                return Ok(BackwardResult::Infeasible(Infeasibility::LogOutput {
                    node: i,
                    demand: d.q,
                }));
            }
        }
    }
    // Gather per-input requirement sets and check chain structure.
    let mut out = Vec::new();
    for (i, node) in pipeline.nodes.iter().enumerate() {
        if let PipeOp::Input(name, _) = &node.op {
            let mut ds = demands[i].clone();
            ds.sort();
            ds.dedup();
            // Demands are kept unminimized (redundant supersets are harmless
            // to the optimal labelling); equal sets merge on common slack.
            let mut kept: Vec<Demand> = Vec::new();
            for d in ds {
                match kept.iter_mut().find(|m| m.q == d.q) {
                    Some(m) => m.slack = m.slack.intersect(d.slack),
                    None => kept.push(d),
                }
            }
            kept.sort_by_key(|d| (d.q.len(), d.q));
            for a in &kept {
                for b in &kept {
                    if !a.q.is_subset(b.q) && !b.q.is_subset(a.q) {
                        return Ok(BackwardResult::Infeasible(
                            Infeasibility::ConflictingDemands {
                                input_name: name.clone(),
                                a: a.q,
                                b: b.q,
                            },
                        ));
                    }
                }
            }
            out.push(Requirement {
                input_name: name.clone(),
                demands: kept,
            });
        }
    }
    Ok(BackwardResult::Requirements(out))
}

/// A pipeline value: a circuit or a scalar.
#[derive(Debug, Clone)]
pub enum Value {
    Circuit(Circuit),
    Scalar(f64),
}

impl Value {
    pub fn circuit(self) -> Circuit {
        match self {
            Value::Circuit(c) => c,
            Value::Scalar(_) => panic!("expected circuit value"),
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            Value::Circuit(_) => None,
        }
    }
}

/// Execution diagnostics: count of exact-zero parameters hit by reciprocal
/// powers (restricted division contexts, which contribute zero).
#[derive(Debug, Clone, Default)]
pub struct ExecDiagnostics {
    pub zero_divisions: u64,
}

/// Executes the pipeline on concrete circuits. Forward analysis must succeed
/// on the inputs' md-vtrees first; deterministic operations then certify
/// their requirement from the propagated labels.
pub fn execute(
    pipeline: &Pipeline,
    inputs: &BTreeMap<String, Circuit>,
) -> Result<(Vec<Value>, ExecDiagnostics)> {
    let in_mdvtrees: BTreeMap<String, MdVtree> = inputs
        .iter()
        .map(|(k, v)| (k.clone(), v.mdvtree().clone()))
        .collect();
    let report = forward_analyze(pipeline, &in_mdvtrees)?;
    if !report.tractable {
        let f = &report.failures[0];
        return Err(Error::AnalysisFailure(format!(
            "pipeline not tractable: {} (node {})",
            f.reason, f.node
        )));
    }
    let mut diag = ExecDiagnostics::default();
    let mut values: Vec<Option<Value>> = vec![None; pipeline.nodes.len()];
    for (i, node) in pipeline.nodes.iter().enumerate() {
        let value = match &node.op {
            PipeOp::Input(name, vars) => {
                let c = inputs.get(name).ok_or_else(|| {
                    Error::AnalysisFailure(format!("missing circuit for input `{name}`"))
                })?;
                if c.scope() != *vars {
                    return Err(Error::AnalysisFailure(format!(
                        "circuit scope for `{name}` does not match the pipeline input"
                    )));
                }
                Value::Circuit(c.clone())
            }
            PipeOp::Marg(w) => match values[node.inputs[0]].as_ref().expect("topological") {
                Value::Circuit(c) => match ops::marg(c, *w)? {
                    OpOutput::Circuit(out) => Value::Circuit(out),
                    OpOutput::Scalar(s) => Value::Scalar(s),
                },
                Value::Scalar(_) => return Err(Error::InvalidPipeline("marg of a scalar".into())),
            },
            PipeOp::Inst(a) => match values[node.inputs[0]].as_ref().expect("topological") {
                Value::Circuit(c) => match ops::inst(c, a)? {
                    OpOutput::Circuit(out) => Value::Circuit(out),
                    OpOutput::Scalar(s) => Value::Scalar(s),
                },
                Value::Scalar(_) => return Err(Error::InvalidPipeline("inst of a scalar".into())),
            },
            PipeOp::Prod => {
                let a = values[node.inputs[0]].as_ref().expect("topological");
                let b = values[node.inputs[1]].as_ref().expect("topological");
                match (a, b) {
                    (Value::Circuit(ca), Value::Circuit(cb)) => Value::Circuit(ops::prod(ca, cb)?),
                    (Value::Scalar(s), Value::Circuit(c))
                    | (Value::Circuit(c), Value::Scalar(s)) => Value::Circuit(scale(c, *s)),
                    (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(a * b),
                }
            }
            PipeOp::Pow(alpha) => match values[node.inputs[0]].as_ref().expect("topological") {
                Value::Circuit(c) => {
                    if *alpha < 0.0 {
                        // Assignments the reciprocal maps to zero: the
                        // denominator's off-support points.
                        let space = c.mdvtree().vtree().space();
                        let domain = space.domain_size(c.scope()) as f64;
                        let off = (domain - c.support_size()).max(0.0);
                        diag.zero_divisions += off as u64;
                    }
                    Value::Circuit(ops::pow(c, *alpha, DetCheck::FromLabels)?)
                }
                Value::Scalar(s) => {
                    if *s == 0.0 {
                        if *alpha < 0.0 {
                            diag.zero_divisions += 1;
                        }
                        Value::Scalar(0.0)
                    } else {
                        Value::Scalar(s.powf(*alpha))
                    }
                }
            },
            PipeOp::Max => match values[node.inputs[0]].as_ref().expect("topological") {
                Value::Circuit(c) => {
                    let (v, _) = ops::max_query(c, &Assignment::new(), DetCheck::FromLabels)?;
                    Value::Scalar(v)
                }
                Value::Scalar(s) => Value::Scalar(*s),
            },
            PipeOp::Log => match values[node.inputs[0]].as_ref().expect("topological") {
                Value::Circuit(c) => Value::Circuit(ops::log_circuit(c, DetCheck::FromLabels)?),
                Value::Scalar(s) => Value::Scalar(if *s == 0.0 { 0.0 } else { s.ln() }),
            },
        };
        values[i] = Some(value);
    }
    Ok((values.into_iter().map(|v| v.expect("filled")).collect(), diag))
}

/// Multiplies a circuit by a scalar (folded into the root layer's weights).
fn scale(c: &Circuit, s: f64) -> Circuit {
    use crate::circuit::{Layer, MixEntry, WeightEntry};
    let vt = c.mdvtree().vtree();
    let root = vt.root();
    let layers = vt
        .node_ids()
        .map(|id| {
            let factor = if id == root { s } else { 1.0 };
            match c.layer(id) {
                Layer::Leaf { num_nodes, terms, mix } => Layer::leaf(
                    *num_nodes,
                    terms.clone(),
                    mix.iter()
                        .map(|e| MixEntry {
                            sum: e.sum,
                            term: e.term,
                            weight: e.weight * factor,
                        })
                        .collect(),
                ),
                Layer::Internal { num_nodes, weights } => Layer::internal(
                    *num_nodes,
                    weights
                        .iter()
                        .map(|e| WeightEntry {
                            node: e.node,
                            left: e.left,
                            right: e.right,
                            weight: e.weight * factor,
                        })
                        .collect(),
                ),
            }
        })
        .collect();
    Circuit::new(c.mdvtree().clone(), layers, c.root_index()).expect("same shape")
}


/// Checks an input md-vtree against a requirement. A demand passes when the
/// md-vtree implies the weakest set or a slack-extended variant: the slack
/// variables occurring in labels of overlapping nodes, then the full slack,
/// are tried before giving up.
pub fn satisfies_requirement(w: &MdVtree, req: &Requirement) -> bool {
    req.demands.iter().all(|d| {
        if w.implies_qdet(d.q) {
            return true;
        }
        if d.slack.is_empty() {
            return false;
        }
        let mut label_slack = VarSet::empty();
        for id in w.vtree().node_ids() {
            let scope = w.vtree().scope(id).expect("node");
            if scope.overlaps(d.q.union(d.slack)) {
                label_slack = label_slack.union(w.label(id).intersect_set(d.slack));
            }
        }
        w.implies_qdet(d.q.union(label_slack)) || w.implies_qdet(d.q.union(d.slack))
    })
}
