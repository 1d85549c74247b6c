//! JSON file formats for md-vtrees, circuits, pipelines, Bayesian networks
//! and query specifications.
//!
//! Md-vtree files carry their own variable declarations; a plain-vtree file
//! is the same format with every label `"U"`. Circuit files embed their
//! md-vtree. Serialization is deterministic: equal in-memory values produce
//! byte-identical files.

use crate::bn::{BayesNet, Cpt};
use crate::calculus::{PipeNode, PipeOp, Pipeline};
use crate::circuit::{Circuit, Layer, LeafFunction, LeafTerm, MixEntry, WeightEntry};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::mdvtree::MdVtree;
use crate::vars::{Assignment, VarId, VarSet, VariableSpace};
use crate::vtree::{Vtree, VtreeNode, VtreeNodeId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Serialize, Deserialize)]
struct VariableJson {
    name: String,
    card: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LabelJson {
    Universal(String),
    Set(Vec<String>),
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeJson {
    id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    leaf: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    left: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    right: Option<usize>,
    label: LabelJson,
}

#[derive(Debug, Serialize, Deserialize)]
struct MdVtreeJson {
    variables: Vec<VariableJson>,
    nodes: Vec<NodeJson>,
    root: usize,
}

fn label_to_json(space: &VariableSpace, label: Label) -> LabelJson {
    match label {
        Label::Universal => LabelJson::Universal("U".to_string()),
        Label::Set(s) => LabelJson::Set(s.names(space)),
    }
}

fn label_from_json(space: &VariableSpace, j: &LabelJson) -> Result<Label> {
    match j {
        LabelJson::Universal(s) if s == "U" => Ok(Label::Universal),
        LabelJson::Universal(s) => Err(Error::Parse(format!("unknown label `{s}`"))),
        LabelJson::Set(names) => {
            let mut set = VarSet::empty();
            for n in names {
                set.insert(space.lookup(n)?);
            }
            Ok(Label::Set(set))
        }
    }
}

fn mdvtree_json(w: &MdVtree) -> MdVtreeJson {
    let vt = w.vtree();
    let space = vt.space();
    let variables = (0..space.len())
        .map(|i| {
            let v = VarId(i as u32);
            VariableJson { name: space.name(v).to_string(), card: space.card(v) }
        })
        .collect();
    let nodes = vt
        .node_ids()
        .map(|id| match vt.node(id) {
            VtreeNode::Leaf { scope } => NodeJson {
                id: id.index(),
                leaf: Some(scope.names(space)),
                left: None,
                right: None,
                label: label_to_json(space, w.label(id)),
            },
            VtreeNode::Internal { left, right } => NodeJson {
                id: id.index(),
                leaf: None,
                left: Some(left.index()),
                right: Some(right.index()),
                label: label_to_json(space, w.label(id)),
            },
        })
        .collect();
    MdVtreeJson { variables, nodes, root: vt.root().index() }
}

fn mdvtree_from_json(j: &MdVtreeJson) -> Result<MdVtree> {
    let mut space = VariableSpace::new();
    for v in &j.variables {
        space.add(v.name.clone(), v.card)?;
    }
    let space = Arc::new(space);
    // File node ids may be sparse; map them to dense indices.
    let mut id_map: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, n) in j.nodes.iter().enumerate() {
        if id_map.insert(n.id, i).is_some() {
            return Err(Error::Parse(format!("duplicate node id {}", n.id)));
        }
    }
    let lookup = |id: usize| -> Result<VtreeNodeId> {
        id_map
            .get(&id)
            .map(|&i| VtreeNodeId(i))
            .ok_or(Error::UnknownNode(id))
    };
    let mut nodes = Vec::with_capacity(j.nodes.len());
    let mut labels = Vec::with_capacity(j.nodes.len());
    for n in &j.nodes {
        let node = match (&n.leaf, n.left, n.right) {
            (Some(names), None, None) => {
                let mut scope = VarSet::empty();
                for nm in names {
                    scope.insert(space.lookup(nm)?);
                }
                VtreeNode::Leaf { scope }
            }
            (None, Some(l), Some(r)) => VtreeNode::Internal {
                left: lookup(l)?,
                right: lookup(r)?,
            },
            _ => {
                return Err(Error::Parse(format!(
                    "node {} must have either a leaf scope or two children",
                    n.id
                )))
            }
        };
        nodes.push(node);
        labels.push(label_from_json(&space, &n.label)?);
    }
    let vt = Vtree::new(space, nodes, lookup(j.root)?)?;
    MdVtree::new(vt, labels)
}

pub fn mdvtree_to_string(w: &MdVtree) -> String {
    serde_json::to_string_pretty(&mdvtree_json(w)).expect("serializable")
}

pub fn mdvtree_from_str(text: &str) -> Result<MdVtree> {
    let j: MdVtreeJson =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("md-vtree: {e}")))?;
    mdvtree_from_json(&j)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum FactorJson {
    Categorical { cat: String, w: Vec<f64> },
    Indicator { ind: String, state: usize },
    One { one: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LeafJson {
    Single(FactorJson),
    Term(Vec<FactorJson>),
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerJson {
    vtree_node: usize,
    num_nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    leaves: Option<Vec<LeafJson>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mix: Option<Vec<(usize, usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<(usize, usize, usize, f64)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CircuitJson {
    mdvtree: MdVtreeJson,
    layers: Vec<LayerJson>,
    root_index: usize,
}

fn factor_to_json(space: &VariableSpace, f: &LeafFunction) -> FactorJson {
    match f {
        LeafFunction::Categorical { var, weights } => FactorJson::Categorical {
            cat: space.name(*var).to_string(),
            w: weights.clone(),
        },
        LeafFunction::Indicator { var, state } => FactorJson::Indicator {
            ind: space.name(*var).to_string(),
            state: *state,
        },
        LeafFunction::ConstantOne { var } => FactorJson::One { one: space.name(*var).to_string() },
    }
}

fn factor_from_json(space: &VariableSpace, j: &FactorJson) -> Result<LeafFunction> {
    Ok(match j {
        FactorJson::Categorical { cat, w } => LeafFunction::Categorical {
            var: space.lookup(cat)?,
            weights: w.clone(),
        },
        FactorJson::Indicator { ind, state } => LeafFunction::Indicator {
            var: space.lookup(ind)?,
            state: *state,
        },
        FactorJson::One { one } => LeafFunction::ConstantOne { var: space.lookup(one)? },
    })
}

pub fn circuit_to_string(c: &Circuit) -> String {
    let space = c.mdvtree().vtree().space();
    let layers = c
        .mdvtree()
        .vtree()
        .node_ids()
        .map(|id| match c.layer(id) {
            Layer::Leaf { num_nodes, terms, mix } => LayerJson {
                vtree_node: id.index(),
                num_nodes: *num_nodes,
                leaves: Some(
                    terms
                        .iter()
                        .map(|t| {
                            if t.factors.len() == 1 {
                                LeafJson::Single(factor_to_json(space, &t.factors[0]))
                            } else {
                                LeafJson::Term(
                                    t.factors.iter().map(|f| factor_to_json(space, f)).collect(),
                                )
                            }
                        })
                        .collect(),
                ),
                mix: Some(mix.iter().map(|e| (e.sum, e.term, e.weight)).collect()),
                weights: None,
            },
            Layer::Internal { num_nodes, weights } => LayerJson {
                vtree_node: id.index(),
                num_nodes: *num_nodes,
                leaves: None,
                mix: None,
                weights: Some(
                    weights
                        .iter()
                        .map(|e| (e.node, e.left, e.right, e.weight))
                        .collect(),
                ),
            },
        })
        .collect();
    let j = CircuitJson {
        mdvtree: mdvtree_json(c.mdvtree()),
        layers,
        root_index: c.root_index(),
    };
    serde_json::to_string_pretty(&j).expect("serializable")
}

pub fn circuit_from_str(text: &str) -> Result<Circuit> {
    let j: CircuitJson =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("circuit: {e}")))?;
    let w = mdvtree_from_json(&j.mdvtree)?;
    let space = w.vtree().space().clone();
    let mut layers: Vec<Option<Layer>> = (0..w.vtree().len()).map(|_| None).collect();
    for lj in &j.layers {
        if lj.vtree_node >= layers.len() {
            return Err(Error::UnknownNode(lj.vtree_node));
        }
        let layer = match (&lj.leaves, &lj.mix, &lj.weights) {
            (Some(leaves), Some(mix), None) => {
                let terms = leaves
                    .iter()
                    .map(|l| {
                        Ok(LeafTerm::new(match l {
                            LeafJson::Single(f) => vec![factor_from_json(&space, f)?],
                            LeafJson::Term(fs) => fs
                                .iter()
                                .map(|f| factor_from_json(&space, f))
                                .collect::<Result<_>>()?,
                        }))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Layer::leaf(
                    lj.num_nodes,
                    terms,
                    mix.iter()
                        .map(|&(sum, term, weight)| MixEntry { sum, term, weight })
                        .collect(),
                )
            }
            (None, None, Some(weights)) => Layer::internal(
                lj.num_nodes,
                weights
                    .iter()
                    .map(|&(node, left, right, weight)| WeightEntry { node, left, right, weight })
                    .collect(),
            ),
            _ => {
                return Err(Error::Parse(format!(
                    "layer {} must be either a leaf layer or an internal layer",
                    lj.vtree_node
                )))
            }
        };
        layers[lj.vtree_node] = Some(layer);
    }
    let layers = layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or(Error::Parse(format!("missing layer for node {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Circuit::new(w, layers, j.root_index)
}

#[derive(Debug, Serialize, Deserialize)]
struct PipelineInputJson {
    name: String,
    vars: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PipelineNodeJson {
    id: usize,
    op: String,
    #[serde(rename = "in")]
    inputs: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vars: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assign: Option<BTreeMap<String, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PipelineJson {
    inputs: Vec<PipelineInputJson>,
    nodes: Vec<PipelineNodeJson>,
    output: usize,
}

/// Parses a pipeline over an existing variable space. Input nodes take ids
/// `0..inputs.len()` in order; operation nodes carry explicit ids.
pub fn pipeline_from_str(space: &Arc<VariableSpace>, text: &str) -> Result<Pipeline> {
    let j: PipelineJson =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("pipeline: {e}")))?;
    let mut nodes: Vec<PipeNode> = Vec::new();
    let mut id_map: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, inp) in j.inputs.iter().enumerate() {
        let mut vars = VarSet::empty();
        for n in &inp.vars {
            vars.insert(space.lookup(n)?);
        }
        nodes.push(PipeNode { op: PipeOp::Input(inp.name.clone(), vars), inputs: vec![] });
        id_map.insert(i, i);
    }
    for nj in &j.nodes {
        let inputs = nj
            .inputs
            .iter()
            .map(|i| {
                id_map
                    .get(i)
                    .copied()
                    .ok_or(Error::InvalidPipeline(format!("unknown node id {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let var_set = |names: &Option<Vec<String>>| -> Result<VarSet> {
            let mut s = VarSet::empty();
            for n in names.as_deref().unwrap_or(&[]) {
                s.insert(space.lookup(n)?);
            }
            Ok(s)
        };
        let op = match nj.op.as_str() {
            "marg" => PipeOp::Marg(var_set(&nj.vars)?),
            "inst" => {
                let mut a = Assignment::new();
                for (name, &state) in nj.assign.as_ref().ok_or_else(|| {
                    Error::InvalidPipeline("inst node needs an `assign` map".into())
                })? {
                    a.set(space.lookup(name)?, state);
                }
                PipeOp::Inst(a)
            }
            "prod" => PipeOp::Prod,
            "pow" => PipeOp::Pow(nj.alpha.ok_or_else(|| {
                Error::InvalidPipeline("pow node needs an `alpha`".into())
            })?),
            "max" => PipeOp::Max,
            "log" => PipeOp::Log,
            other => return Err(Error::InvalidPipeline(format!("unknown op `{other}`"))),
        };
        if id_map.insert(nj.id, nodes.len()).is_some() {
            return Err(Error::InvalidPipeline(format!("duplicate node id {}", nj.id)));
        }
        nodes.push(PipeNode { op, inputs });
    }
    let output = *id_map
        .get(&j.output)
        .ok_or(Error::InvalidPipeline("unknown output id".into()))?;
    Pipeline::build(space.clone(), nodes, output)
}

#[derive(Debug, Serialize, Deserialize)]
struct BnVarJson {
    name: String,
    card: usize,
    #[serde(default)]
    hidden: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnCptJson {
    var: String,
    parents: Vec<String>,
    table: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnJson {
    vars: Vec<BnVarJson>,
    cpts: Vec<BnCptJson>,
}

pub fn bn_from_str(text: &str) -> Result<BayesNet> {
    let j: BnJson = serde_json::from_str(text).map_err(|e| Error::Parse(format!("bn: {e}")))?;
    let mut space = VariableSpace::new();
    let mut hidden = VarSet::empty();
    for v in &j.vars {
        let id = space.add(v.name.clone(), v.card)?;
        if v.hidden {
            hidden.insert(id);
        }
    }
    let space = Arc::new(space);
    let cpts = j
        .cpts
        .iter()
        .map(|c| {
            Ok(Cpt {
                var: space.lookup(&c.var)?,
                parents: c
                    .parents
                    .iter()
                    .map(|p| space.lookup(p))
                    .collect::<Result<_>>()?,
                rows: c.table.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BayesNet::new(space, hidden, cpts)
}

pub fn bn_to_string(bn: &BayesNet) -> String {
    let space = bn.space();
    let vars = (0..space.len())
        .map(|i| {
            let v = VarId(i as u32);
            BnVarJson {
                name: space.name(v).to_string(),
                card: space.card(v),
                hidden: bn.hidden().contains(v),
            }
        })
        .collect();
    let cpts = bn
        .cpts()
        .iter()
        .map(|c| BnCptJson {
            var: space.name(c.var).to_string(),
            parents: c.parents.iter().map(|&p| space.name(p).to_string()).collect(),
            table: c.rows.clone(),
        })
        .collect();
    serde_json::to_string_pretty(&BnJson { vars, cpts }).expect("serializable")
}

/// CLI-facing causal-query specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<BTreeMap<String, usize>>,
    /// Treatment variables for circuit-valued queries (when `x` is null);
    /// ignored when `x` gives an instantiation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub xvars: Vec<String>,
    pub y: Vec<String>,
    #[serde(default)]
    pub z: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub k: Vec<String>,
    /// Conditioning instantiation for the napkin query; defaults to the
    /// model's most likely assignment of `z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zval: Option<BTreeMap<String, usize>>,
}

pub fn query_spec_from_str(text: &str) -> Result<QuerySpec> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("query spec: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdnet::{build_random, StructureConfig};
    use crate::mdvtree::optimal_labelling;
    use proptest::prelude::*;

    fn sample_mdvtree(seed: u64) -> MdVtree {
        let space = VariableSpace::binary("v", 5);
        let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
        let req = space.set_of(&["v0", "v3"]).unwrap();
        optimal_labelling(&vt, &[req]).unwrap()
    }

    #[test]
    fn mdvtree_roundtrip_preserves_structure() {
        let w = sample_mdvtree(4);
        let text = mdvtree_to_string(&w);
        let back = mdvtree_from_str(&text).unwrap();
        assert_eq!(back.vtree().len(), w.vtree().len());
        for id in w.vtree().node_ids() {
            assert_eq!(back.label(id), w.label(id));
            assert_eq!(
                back.vtree().scope(id).unwrap().names(back.vtree().space()),
                w.vtree().scope(id).unwrap().names(w.vtree().space())
            );
        }
        assert_eq!(mdvtree_to_string(&back), text);
    }

    #[test]
    fn circuit_roundtrip_preserves_function_and_bytes() {
        let w = sample_mdvtree(9);
        let net = build_random(
            &w,
            &StructureConfig { groups_per_layer: 2, nodes_per_group: 2, seed: 7 },
        )
        .unwrap();
        let text = circuit_to_string(&net.circuit);
        let back = circuit_from_str(&text).unwrap();
        assert_eq!(circuit_to_string(&back), text);
        let ta = crate::oracle::table_from_circuit(&net.circuit, None).unwrap();
        let tb = crate::oracle::table_from_circuit(&back, None).unwrap();
        for (x, y) in ta.values().iter().zip(tb.values()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn pipeline_json_parses_ops() {
        let space = VariableSpace::from_pairs(vec![("X", 2), ("Y", 2), ("Z", 2)]).unwrap();
        let text = r#"{
            "inputs": [{"name": "C", "vars": ["X", "Y", "Z"]}],
            "nodes": [
                {"id": 1, "op": "marg", "in": [0], "vars": ["Y"]},
                {"id": 2, "op": "pow", "in": [1], "alpha": -1},
                {"id": 3, "op": "prod", "in": [0, 2]},
                {"id": 4, "op": "inst", "in": [3], "assign": {"X": 1}},
                {"id": 5, "op": "max", "in": [4]}
            ],
            "output": 5
        }"#;
        let p = pipeline_from_str(&space, text).unwrap();
        assert_eq!(p.nodes().len(), 6);
        assert!(p.is_scalar(p.output()));
    }

    #[test]
    fn bn_roundtrip() {
        let text = r#"{
            "vars": [
                {"name": "Z", "card": 2, "hidden": false},
                {"name": "X", "card": 2, "hidden": true}
            ],
            "cpts": [
                {"var": "Z", "parents": [], "table": [[0.6, 0.4]]},
                {"var": "X", "parents": ["Z"], "table": [[0.9, 0.1], [0.2, 0.8]]}
            ]
        }"#;
        let bn = bn_from_str(text).unwrap();
        let again = bn_from_str(&bn_to_string(&bn)).unwrap();
        assert_eq!(bn_to_string(&bn), bn_to_string(&again));
        assert_eq!(again.hidden().len(), 1);
    }

    #[test]
    fn query_spec_parses() {
        let text = r#"{"query": "backdoor", "x": {"X": 1}, "y": ["Y"], "z": ["Z1", "Z2"]}"#;
        let q = query_spec_from_str(text).unwrap();
        assert_eq!(q.query, "backdoor");
        assert_eq!(q.x.unwrap()["X"], 1);
        assert!(q.w.is_empty());
    }

    proptest! {
        #[test]
        fn mdvtree_roundtrip_is_identity(seed in 0u64..500) {
            let w = sample_mdvtree(seed);
            let text = mdvtree_to_string(&w);
            let back = mdvtree_from_str(&text).unwrap();
            prop_assert_eq!(mdvtree_to_string(&back), text);
            prop_assert_eq!(
                back.enumerate_implied(None).unwrap().len(),
                w.enumerate_implied(None).unwrap().len()
            );
        }
    }
}
