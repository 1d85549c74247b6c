//! MDNet: randomly wired layered circuits that conform to a regular
//! md-vtree by construction, plus maximum-likelihood and EM parameter
//! learning.
//!
//! The building block is the *node group*: a vector of sums with the same
//! scope whose marginalized supports over the node's label are pairwise
//! disjoint, jointly partitioning the label's domain. Internal layers come
//! in two shapes. When the node's label equals one child's label, a *mixing*
//! layer copies that child's determinism: across one group's products the
//! copied-side children are distinct members of a single child group, while
//! the other side mixes freely. When the label is the union of both
//! children's labels, a *synthesizing* layer pairs one group from each side
//! and gives every product a unique combination of their members.

use crate::circuit::{Circuit, Layer, LeafFunction, LeafTerm, MixEntry, WeightEntry};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::mdvtree::MdVtree;
use crate::vars::{assignments, DomainIndexer, VarSet};
use crate::vtree::VtreeNodeId;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct StructureConfig {
    pub groups_per_layer: usize,
    pub nodes_per_group: usize,
    pub seed: u64,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig { groups_per_layer: 2, nodes_per_group: 4, seed: 0 }
    }
}

/// A built MDNet: the circuit plus the per-layer group structure.
#[derive(Debug, Clone)]
pub struct MdNet {
    pub circuit: Circuit,
    /// Per vtree node: groups as lists of sum indices.
    pub groups: Vec<Vec<Vec<usize>>>,
}

fn random_categorical(rng: &mut ChaCha12Rng, card: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..card).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
    w
}

fn normalize_per_sum_mix(mix: &mut [MixEntry], num: usize) {
    let mut totals = vec![0.0; num];
    for e in mix.iter() {
        totals[e.sum] += e.weight;
    }
    for e in mix.iter_mut() {
        if totals[e.sum] > 0.0 {
            e.weight /= totals[e.sum];
        }
    }
}

fn normalize_per_sum(weights: &mut [WeightEntry], num: usize) {
    let mut totals = vec![0.0; num];
    for e in weights.iter() {
        totals[e.node] += e.weight;
    }
    for e in weights.iter_mut() {
        if totals[e.node] > 0.0 {
            e.weight /= totals[e.node];
        }
    }
}

/// Builds a random MDNet conforming to a regular md-vtree. Leaf groups
/// partition the label's domain into contiguous blocks backed by indicator
/// terms, with free categorical factors on the unconstrained scope
/// variables; universal labels get unconstrained full-support nodes. The
/// root layer is a single sum mixing over everything its wiring shape
/// permits, so the circuit encodes one distribution. Weights are seeded
/// random positives, locally normalized.
pub fn build_random(w: &MdVtree, cfg: &StructureConfig) -> Result<MdNet> {
    if !w.is_regular() {
        return Err(Error::NotRegular("random structure needs a regular md-vtree".into()));
    }
    if cfg.groups_per_layer < 1 || cfg.nodes_per_group < 1 {
        return Err(Error::Parse("structure counts must be at least 1".into()));
    }
    let vt = w.vtree();
    let space = vt.space();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut layers: Vec<Option<Layer>> = vec![None; vt.len()];
    let mut groups: Vec<Vec<Vec<usize>>> = vec![Vec::new(); vt.len()];
    for id in vt.reverse_topological() {
        let is_root = id == vt.root();
        let g_target = if is_root { 1 } else { cfg.groups_per_layer };
        match vt.children(id) {
            None => {
                let scope = vt.scope(id)?;
                let (layer, gs) = build_leaf_layer(
                    space,
                    scope,
                    w.label(id),
                    g_target,
                    if is_root { 1 } else { cfg.nodes_per_group },
                    &mut rng,
                );
                layers[id.index()] = Some(layer);
                groups[id.index()] = gs;
            }
            Some((l, r)) => {
                let label = w.label(id);
                let (layer, gs) = if label.is_universal() {
                    build_free_layer(
                        w, l, r, &groups, &layers, g_target,
                        if is_root { 1 } else { cfg.nodes_per_group },
                        &mut rng,
                    )
                } else if label == w.label(l) {
                    build_mixing_layer(
                        l, r, true, &groups, &layers, g_target,
                        if is_root { 1 } else { cfg.nodes_per_group },
                        &mut rng,
                    )
                } else if label == w.label(r) {
                    build_mixing_layer(
                        l, r, false, &groups, &layers, g_target,
                        if is_root { 1 } else { cfg.nodes_per_group },
                        &mut rng,
                    )
                } else if label == w.label(l).union(w.label(r)) {
                    build_synth_layer(
                        l, r, &groups, &layers, g_target,
                        if is_root { 1 } else { cfg.nodes_per_group },
                        &mut rng,
                    )
                } else {
                    return Err(Error::NotRegular(format!(
                        "label case at node {} matches neither mixing nor synthesizing",
                        id.index()
                    )));
                };
                layers[id.index()] = Some(layer);
                groups[id.index()] = gs;
            }
        }
    }
    let circuit = Circuit::new(
        w.clone(),
        layers.into_iter().map(|l| l.expect("filled")).collect(),
        0,
    )?;
    Ok(MdNet { circuit, groups })
}

fn build_leaf_layer(
    space: &crate::vars::VariableSpace,
    scope: VarSet,
    label: Label,
    g_target: usize,
    nodes_per_group: usize,
    rng: &mut ChaCha12Rng,
) -> (Layer, Vec<Vec<usize>>) {
    let mut terms: Vec<LeafTerm> = Vec::new();
    let mut mix: Vec<MixEntry> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut sum_count = 0;
    match label {
        Label::Universal => {
            // Unconstrained: singleton groups of full-support mixtures. The
            // group count scales with the layer budget so unconstrained
            // regions do not bottleneck the mixtures above them.
            for _ in 0..(g_target * nodes_per_group.min(64)).max(1) {
                let term_idx = terms.len();
                terms.push(LeafTerm::new(
                    scope
                        .iter()
                        .map(|v| LeafFunction::Categorical {
                            var: v,
                            weights: random_categorical(rng, space.card(v)),
                        })
                        .collect(),
                ));
                mix.push(MixEntry { sum: sum_count, term: term_idx, weight: 1.0 });
                groups.push(vec![sum_count]);
                sum_count += 1;
            }
        }
        Label::Set(q) => {
            let qdom = DomainIndexer::new(space, q);
            let cells = qdom.len();
            let free = scope.difference(q);
            for _ in 0..g_target {
                let n = nodes_per_group.min(cells).max(1);
                let mut group = Vec::with_capacity(n);
                for b in 0..n {
                    let lo = b * cells / n;
                    let hi = (b + 1) * cells / n;
                    let sum = sum_count;
                    sum_count += 1;
                    group.push(sum);
                    for cell in lo..hi {
                        let qa = qdom.assignment_of(cell);
                        let mut factors: Vec<LeafFunction> = q
                            .iter()
                            .map(|v| LeafFunction::Indicator {
                                var: v,
                                state: qa.get(v).expect("cell"),
                            })
                            .collect();
                        for v in free.iter() {
                            factors.push(LeafFunction::Categorical {
                                var: v,
                                weights: random_categorical(rng, space.card(v)),
                            });
                        }
                        let term_idx = terms.len();
                        terms.push(LeafTerm::new(factors));
                        mix.push(MixEntry {
                            sum,
                            term: term_idx,
                            weight: rng.random_range(0.1..1.0),
                        });
                    }
                }
                groups.push(group);
            }
        }
    }
    normalize_per_sum_mix(&mut mix, sum_count);
    (Layer::leaf(sum_count.max(1), terms, mix), groups)
}

/// Mixing layer: the copied side's children are distinct members of one of
/// its groups (one product each), the mixed side is free.
#[allow(clippy::too_many_arguments)]
fn build_mixing_layer(
    l: VtreeNodeId,
    r: VtreeNodeId,
    copy_left: bool,
    groups: &[Vec<Vec<usize>>],
    layers: &[Option<Layer>],
    g_target: usize,
    nodes_per_group: usize,
    rng: &mut ChaCha12Rng,
) -> (Layer, Vec<Vec<usize>>) {
    let copied_groups = if copy_left { &groups[l.index()] } else { &groups[r.index()] };
    let mixed_num = layers[if copy_left { r.index() } else { l.index() }]
        .as_ref()
        .expect("child built")
        .num_nodes();
    let mut weights: Vec<WeightEntry> = Vec::new();
    let mut out_groups: Vec<Vec<usize>> = Vec::new();
    let mut sum_count = 0;
    for _ in 0..g_target {
        let src = &copied_groups[rng.random_range(0..copied_groups.len())];
        let n = nodes_per_group.min(src.len()).max(1);
        let mut group = Vec::with_capacity(n);
        for _ in 0..n {
            group.push(sum_count);
            sum_count += 1;
        }
        // Mixed-side choices drawn without replacement while they last, so
        // distinct copied members keep distinct free-side partners.
        let mut pool: Vec<usize> = (0..mixed_num).collect();
        pool.shuffle(rng);
        for (pos, &member) in src.iter().enumerate() {
            // Contiguous chunks keep structured supports together.
            let sum = group[(pos * n) / src.len()];
            let other = if pool.is_empty() {
                rng.random_range(0..mixed_num)
            } else {
                pool.remove(pool.len() - 1)
            };
            let (left, right) = if copy_left { (member, other) } else { (other, member) };
            weights.push(WeightEntry {
                node: sum,
                left,
                right,
                weight: rng.random_range(0.1..1.0),
            });
        }
        out_groups.push(group);
    }
    normalize_per_sum(&mut weights, sum_count);
    (Layer::internal(sum_count.max(1), weights), out_groups)
}

/// Synthesizing layer: one group from each side, every product a unique
/// member pair.
fn build_synth_layer(
    l: VtreeNodeId,
    r: VtreeNodeId,
    groups: &[Vec<Vec<usize>>],
    _layers: &[Option<Layer>],
    g_target: usize,
    nodes_per_group: usize,
    rng: &mut ChaCha12Rng,
) -> (Layer, Vec<Vec<usize>>) {
    let gl = &groups[l.index()];
    let gr = &groups[r.index()];
    let g_out = g_target.min(gl.len() * gr.len()).max(1);
    // Seeded round-robin over side-group pairs.
    let mut pairs: Vec<(usize, usize)> = (0..gl.len())
        .flat_map(|a| (0..gr.len()).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(rng);
    let mut weights: Vec<WeightEntry> = Vec::new();
    let mut out_groups: Vec<Vec<usize>> = Vec::new();
    let mut sum_count = 0;
    for gi in 0..g_out {
        let (a, b) = pairs[gi % pairs.len()];
        let (src_l, src_r) = (&gl[a], &gr[b]);
        let combos = src_l.len() * src_r.len();
        let n = nodes_per_group.min(combos).max(1);
        let mut group = Vec::with_capacity(n);
        for _ in 0..n {
            group.push(sum_count);
            sum_count += 1;
        }
        for (pos, (ml, mr)) in src_l
            .iter()
            .flat_map(|&ml| src_r.iter().map(move |&mr| (ml, mr)))
            .enumerate()
        {
            weights.push(WeightEntry {
                node: group[(pos * n) / combos],
                left: ml,
                right: mr,
                weight: rng.random_range(0.1..1.0),
            });
        }
        out_groups.push(group);
    }
    normalize_per_sum(&mut weights, sum_count);
    (Layer::internal(sum_count.max(1), weights), out_groups)
}

/// Unconstrained layer under a universal label. To keep full support, any
/// set-labelled side contributes a whole group (covering its domain) per
/// sum; fully universal sides pair freely.
#[allow(clippy::too_many_arguments)]
fn build_free_layer(
    w: &MdVtree,
    l: VtreeNodeId,
    r: VtreeNodeId,
    groups: &[Vec<Vec<usize>>],
    layers: &[Option<Layer>],
    g_target: usize,
    nodes_per_group: usize,
    rng: &mut ChaCha12Rng,
) -> (Layer, Vec<Vec<usize>>) {
    let l_num = layers[l.index()].as_ref().expect("child built").num_nodes();
    let r_num = layers[r.index()].as_ref().expect("child built").num_nodes();
    let l_set = !w.label(l).is_universal();
    let r_set = !w.label(r).is_universal();
    let mut weights: Vec<WeightEntry> = Vec::new();
    let mut out_groups: Vec<Vec<usize>> = Vec::new();
    let mut sum_count = 0;
    for _ in 0..g_target {
        let mut group = Vec::new();
        for _ in 0..nodes_per_group {
            let sum = sum_count;
            sum_count += 1;
            group.push(sum);
            if l_set {
                // Cover the left domain with one full left group.
                let src = &groups[l.index()][rng.random_range(0..groups[l.index()].len())];
                for &ml in src {
                    weights.push(WeightEntry {
                        node: sum,
                        left: ml,
                        right: rng.random_range(0..r_num),
                        weight: rng.random_range(0.1..1.0),
                    });
                }
            } else if r_set {
                let src = &groups[r.index()][rng.random_range(0..groups[r.index()].len())];
                for &mr in src {
                    weights.push(WeightEntry {
                        node: sum,
                        left: rng.random_range(0..l_num),
                        right: mr,
                        weight: rng.random_range(0.1..1.0),
                    });
                }
            } else {
                // Both sides unconstrained and full-support: a couple of
                // random pairings suffice.
                let fanin = 2.min(l_num * r_num);
                for _ in 0..fanin {
                    weights.push(WeightEntry {
                        node: sum,
                        left: rng.random_range(0..l_num),
                        right: rng.random_range(0..r_num),
                        weight: rng.random_range(0.1..1.0),
                    });
                }
            }
        }
        out_groups.push(group);
    }
    // Merge accidental duplicate pairings.
    weights.sort_by_key(|e| (e.node, e.left, e.right));
    weights.dedup_by(|a, b| {
        if a.node == b.node && a.left == b.left && a.right == b.right {
            b.weight += a.weight;
            true
        } else {
            false
        }
    });
    normalize_per_sum(&mut weights, sum_count);
    (Layer::internal(sum_count.max(1), weights), out_groups)
}

/// Brute-force check of the group invariant: within every group of a
/// set-labelled layer, the members' marginalized supports over the label
/// are pairwise disjoint.
pub fn check_group_invariant(net: &MdNet, bound: Option<usize>) -> Result<bool> {
    let c = &net.circuit;
    let vt = c.mdvtree().vtree();
    let space = vt.space();
    let tables = c.dense_tables(bound.unwrap_or(crate::circuit::DEFAULT_SUPPORT_BOUND))?;
    for id in vt.node_ids() {
        let q = match c.mdvtree().label(id) {
            Label::Universal => continue,
            Label::Set(q) if q.is_empty() => continue,
            Label::Set(q) => q,
        };
        let dom = DomainIndexer::new(space, vt.scope(id)?);
        let qdom = DomainIndexer::new(space, q);
        let qmap = dom.project_map(&qdom);
        for group in &net.groups[id.index()] {
            let mut acc = vec![false; qdom.len()];
            for &member in group {
                let mut supp = vec![false; qdom.len()];
                for (i, &v) in tables[id.index()][member].iter().enumerate() {
                    if v != 0.0 {
                        supp[qmap[i]] = true;
                    }
                }
                for (i, &bit) in supp.iter().enumerate() {
                    if bit {
                        if acc[i] {
                            return Ok(false);
                        }
                        acc[i] = true;
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Laplace pseudo-count used by the closed-form estimator and the optional
/// post-EM support floor.
pub const SMOOTHING: f64 = 0.01;

/// Single-pass maximum-likelihood estimation on a circuit whose md-vtree
/// implies full determinism: each datapoint routes to its unique support
/// path; weights become smoothed, normalized path counts and categorical
/// leaves smoothed state counts. The output is normalized.
pub fn fit_mle(c: &Circuit, data: &Dataset) -> Result<Circuit> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !c.mdvtree().implies_qdet(c.scope()) {
        return Err(Error::DeterminismNotCertified("mle"));
    }
    check_columns(c, data)?;
    let vt = c.mdvtree().vtree();
    let space = vt.space();
    let mut counts = ParamCounts::zeros(c);
    for row in 0..data.len() {
        let a = data.assignment(row);
        let values = c.point_values(&a)?;
        // Route top-down along the unique positive path.
        let mut stack = vec![(vt.root(), c.root_index())];
        while let Some((node, sum)) = stack.pop() {
            match c.layer(node) {
                Layer::Leaf { terms, mix, .. } => {
                    for (ei, e) in mix.iter().enumerate() {
                        if e.sum != sum {
                            continue;
                        }
                        let tv: f64 = terms[e.term]
                            .factors
                            .iter()
                            .map(|f| f.eval(a.get(f.var()).expect("complete data")))
                            .product();
                        if e.weight * tv > 0.0 {
                            counts.mix[node.index()][ei] += 1.0;
                            for (fi, f) in terms[e.term].factors.iter().enumerate() {
                                if let LeafFunction::Categorical { var, .. } = f {
                                    counts.leaf_states[node.index()][e.term][fi]
                                        [a.get(*var).expect("complete")] += 1.0;
                                }
                            }
                            break;
                        }
                    }
                }
                Layer::Internal { weights, .. } => {
                    let (l, r) = vt.children(node).expect("internal");
                    for (ei, e) in weights.iter().enumerate() {
                        if e.node != sum {
                            continue;
                        }
                        let v = e.weight
                            * values[l.index()][e.left]
                            * values[r.index()][e.right];
                        if v > 0.0 {
                            counts.weights[node.index()][ei] += 1.0;
                            stack.push((l, e.left));
                            stack.push((r, e.right));
                            break;
                        }
                    }
                }
            }
        }
    }
    let _ = space;
    Ok(counts.normalized_circuit(c, SMOOTHING))
}

/// EM stopping and flooring configuration.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which iteration stops.
    pub tol: f64,
    /// Pseudo-count floor applied to all parameters after the final
    /// iteration, restoring full support without touching the trace.
    pub floor: Option<f64>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iters: 50, tol: 1e-6, floor: Some(SMOOTHING) }
    }
}

/// Expectation-maximization on sum weights and categorical leaves. Returns
/// the fitted circuit and the per-iteration training log-likelihood trace,
/// which is non-decreasing; the optional support floor is applied after the
/// trace completes. Datapoints with zero probability under the current
/// model are skipped (their count is not surfaced here; the support floor
/// exists to avoid them in subsequent runs).
pub fn fit_em(c: &Circuit, data: &Dataset, cfg: &EmConfig) -> Result<(Circuit, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.max_iters < 1 {
        return Err(Error::Parse("EM needs at least one iteration".into()));
    }
    check_columns(c, data)?;
    let vt = c.mdvtree().vtree();
    let mut current = c.clone();
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iters {
        let mut counts = ParamCounts::zeros(&current);
        let mut ll = 0.0;
        for row in 0..data.len() {
            let a = data.assignment(row);
            let values = current.point_values(&a)?;
            let p = values[vt.root().index()][current.root_index()];
            if p <= 0.0 {
                continue;
            }
            ll += p.ln();
            // Top-down expected flows.
            let mut flows: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
            flows[vt.root().index()][current.root_index()] = 1.0;
            for id in vt.topological() {
                match current.layer(id) {
                    Layer::Leaf { terms, mix, .. } => {
                        for (ei, e) in mix.iter().enumerate() {
                            let f = flows[id.index()][e.sum];
                            if f == 0.0 {
                                continue;
                            }
                            let tv: f64 = terms[e.term]
                                .factors
                                .iter()
                                .map(|g| g.eval(a.get(g.var()).expect("complete")))
                                .product();
                            let denom = values[id.index()][e.sum];
                            if denom <= 0.0 {
                                continue;
                            }
                            let share = f * e.weight * tv / denom;
                            if share == 0.0 {
                                continue;
                            }
                            counts.mix[id.index()][ei] += share;
                            for (fi, g) in terms[e.term].factors.iter().enumerate() {
                                if let LeafFunction::Categorical { var, .. } = g {
                                    counts.leaf_states[id.index()][e.term][fi]
                                        [a.get(*var).expect("complete")] += share;
                                }
                            }
                        }
                    }
                    Layer::Internal { weights, .. } => {
                        let (l, r) = vt.children(id).expect("internal");
                        for (ei, e) in weights.iter().enumerate() {
                            let f = flows[id.index()][e.node];
                            if f == 0.0 {
                                continue;
                            }
                            let denom = values[id.index()][e.node];
                            if denom <= 0.0 {
                                continue;
                            }
                            let share = f
                                * e.weight
                                * values[l.index()][e.left]
                                * values[r.index()][e.right]
                                / denom;
                            if share == 0.0 {
                                continue;
                            }
                            counts.weights[id.index()][ei] += share;
                            flows[l.index()][e.left] += share;
                            flows[r.index()][e.right] += share;
                        }
                    }
                }
            }
        }
        trace.push(ll);
        let next = counts.normalized_circuit(&current, 0.0);
        let converged = trace.len() >= 2 && {
            let prev = trace[trace.len() - 2];
            (ll - prev) < cfg.tol * prev.abs().max(1.0)
        };
        current = next;
        if converged {
            break;
        }
    }
    if let Some(alpha) = cfg.floor {
        current = apply_floor(&current, alpha);
    }
    Ok((current, trace))
}

/// Adds a pseudo-count to every parameter and renormalizes per sum and per
/// categorical factor, restoring full support over the structural wiring.
pub fn apply_floor(c: &Circuit, alpha: f64) -> Circuit {
    let counts = ParamCounts::from_weights(c);
    counts.normalized_circuit(c, alpha)
}

fn check_columns(c: &Circuit, data: &Dataset) -> Result<()> {
    let scope = c.scope();
    let have: VarSet = data.vars().iter().copied().collect();
    if !scope.is_subset(have) {
        return Err(Error::DatasetMismatch(
            "dataset does not cover the circuit scope".into(),
        ));
    }
    Ok(())
}

/// Accumulated parameter statistics, shaped like a circuit's parameters.
struct ParamCounts {
    weights: Vec<Vec<f64>>,
    mix: Vec<Vec<f64>>,
    /// Per leaf node, per term, per factor: state counts (empty for
    /// non-categorical factors).
    leaf_states: Vec<Vec<Vec<Vec<f64>>>>,
}

impl ParamCounts {
    fn zeros(c: &Circuit) -> ParamCounts {
        let space = c.mdvtree().vtree().space();
        let mut weights = Vec::new();
        let mut mix = Vec::new();
        let mut leaf_states = Vec::new();
        for layer in c.layers() {
            match layer {
                Layer::Leaf { terms, mix: m, .. } => {
                    weights.push(Vec::new());
                    mix.push(vec![0.0; m.len()]);
                    leaf_states.push(
                        terms
                            .iter()
                            .map(|t| {
                                t.factors
                                    .iter()
                                    .map(|f| match f {
                                        LeafFunction::Categorical { var, .. } => {
                                            vec![0.0; space.card(*var)]
                                        }
                                        _ => Vec::new(),
                                    })
                                    .collect()
                            })
                            .collect(),
                    );
                }
                Layer::Internal { weights: w, .. } => {
                    weights.push(vec![0.0; w.len()]);
                    mix.push(Vec::new());
                    leaf_states.push(Vec::new());
                }
            }
        }
        ParamCounts { weights, mix, leaf_states }
    }

    /// Counts equal to the current parameters (identity M-step input).
    fn from_weights(c: &Circuit) -> ParamCounts {
        let mut counts = ParamCounts::zeros(c);
        for (ni, layer) in c.layers().iter().enumerate() {
            match layer {
                Layer::Leaf { terms, mix, .. } => {
                    for (ei, e) in mix.iter().enumerate() {
                        counts.mix[ni][ei] = e.weight;
                    }
                    for (ti, t) in terms.iter().enumerate() {
                        for (fi, f) in t.factors.iter().enumerate() {
                            if let LeafFunction::Categorical { weights, .. } = f {
                                counts.leaf_states[ni][ti][fi] = weights.clone();
                            }
                        }
                    }
                }
                Layer::Internal { weights, .. } => {
                    for (ei, e) in weights.iter().enumerate() {
                        counts.weights[ni][ei] = e.weight;
                    }
                }
            }
        }
        counts
    }

    /// Normalizes the counts (plus `alpha` pseudo-counts) into a circuit with
    /// the same structure. Sums with no mass keep their previous weights.
    fn normalized_circuit(&self, c: &Circuit, alpha: f64) -> Circuit {
        let layers = c
            .layers()
            .iter()
            .enumerate()
            .map(|(ni, layer)| match layer {
                Layer::Leaf { num_nodes, terms, mix } => {
                    let mut totals = vec![0.0; *num_nodes];
                    for (ei, e) in mix.iter().enumerate() {
                        totals[e.sum] += self.mix[ni][ei] + alpha;
                    }
                    let new_mix: Vec<MixEntry> = mix
                        .iter()
                        .enumerate()
                        .map(|(ei, e)| MixEntry {
                            sum: e.sum,
                            term: e.term,
                            weight: if totals[e.sum] > 0.0 {
                                (self.mix[ni][ei] + alpha) / totals[e.sum]
                            } else {
                                e.weight
                            },
                        })
                        .collect();
                    let new_terms: Vec<LeafTerm> = terms
                        .iter()
                        .enumerate()
                        .map(|(ti, t)| {
                            LeafTerm::new(
                                t.factors
                                    .iter()
                                    .enumerate()
                                    .map(|(fi, f)| match f {
                                        LeafFunction::Categorical { var, weights } => {
                                            let counts = &self.leaf_states[ni][ti][fi];
                                            let total: f64 = counts.iter().sum::<f64>()
                                                + alpha * counts.len() as f64;
                                            if total > 0.0 {
                                                LeafFunction::Categorical {
                                                    var: *var,
                                                    weights: counts
                                                        .iter()
                                                        .map(|&x| (x + alpha) / total)
                                                        .collect(),
                                                }
                                            } else {
                                                LeafFunction::Categorical {
                                                    var: *var,
                                                    weights: weights.clone(),
                                                }
                                            }
                                        }
                                        other => other.clone(),
                                    })
                                    .collect(),
                            )
                        })
                        .collect();
                    Layer::leaf(*num_nodes, new_terms, new_mix)
                }
                Layer::Internal { num_nodes, weights } => {
                    let mut totals = vec![0.0; *num_nodes];
                    for (ei, e) in weights.iter().enumerate() {
                        totals[e.node] += self.weights[ni][ei] + alpha;
                    }
                    let new_weights = weights
                        .iter()
                        .enumerate()
                        .map(|(ei, e)| WeightEntry {
                            node: e.node,
                            left: e.left,
                            right: e.right,
                            weight: if totals[e.node] > 0.0 {
                                (self.weights[ni][ei] + alpha) / totals[e.node]
                            } else {
                                e.weight
                            },
                        })
                        .collect();
                    Layer::internal(*num_nodes, new_weights)
                }
            })
            .collect();
        Circuit::new(c.mdvtree().clone(), layers, c.root_index()).expect("same shape")
    }
}

/// Training log-likelihood of a dataset under a circuit (zero-probability
/// rows contribute negative infinity).
pub fn log_likelihood(c: &Circuit, data: &Dataset) -> Result<f64> {
    let mut ll = 0.0;
    for row in 0..data.len() {
        let p = c.evaluate(&data.assignment(row))?;
        if p <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        ll += p.ln();
    }
    Ok(ll)
}

/// Draws a dataset of `n` rows from a circuit by enumerating its
/// distribution (test helper; desk scale only).
pub fn sample_from_table(
    t: &crate::oracle::JointTable,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let space = t.space().clone();
    let vars: Vec<_> = t.var_set().iter().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let total = t.total();
    let mut rows = Vec::with_capacity(n);
    let assigns: Vec<_> = assignments(&space, t.var_set()).collect();
    let cum: Vec<f64> = assigns
        .iter()
        .scan(0.0, |acc, a| {
            *acc += t.at(a) / total;
            Some(*acc)
        })
        .collect();
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..1.0);
        let idx = cum.partition_point(|&c| c < u).min(assigns.len() - 1);
        let a = &assigns[idx];
        rows.push(vars.iter().map(|&v| a.get(v).expect("covered")).collect());
    }
    Dataset::new(space, vars, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdvtree::optimal_labelling;
    use crate::oracle::{table_from_circuit, JointTable};
    use crate::vars::VariableSpace;
    use crate::vtree::Vtree;
    use std::sync::Arc;

    fn random_regular_mdvtree(n: usize, seed: u64) -> (Arc<VariableSpace>, MdVtree) {
        let space = VariableSpace::binary("x", n);
        let vt = Vtree::random(space.clone(), space.all(), seed).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
        // A chain of one or two nested requirements keeps the labelling
        // regular and the groups well-defined.
        let mut q1 = VarSet::empty();
        for v in space.all().iter() {
            if rng.random_bool(0.5) {
                q1.insert(v);
            }
        }
        if q1.is_empty() {
            q1 = VarSet::singleton(space.all().iter().next().unwrap());
        }
        let mut q2 = q1;
        for v in space.all().iter() {
            if rng.random_bool(0.3) {
                q2.insert(v);
            }
        }
        let reqs = if rng.random_bool(0.5) { vec![q1] } else { vec![q1, q2] };
        let w = optimal_labelling(&vt, &reqs).unwrap();
        (space, w)
    }

    #[test]
    fn factorized_labels_give_single_child_sums() {
        let space = VariableSpace::binary("x", 3);
        let vt = Vtree::random(space.clone(), space.all(), 1).unwrap();
        let labels = vt.node_ids().map(|_| Label::Set(VarSet::empty())).collect();
        let w = MdVtree::new(vt.clone(), labels).unwrap();
        let net = build_random(&w, &StructureConfig { groups_per_layer: 2, nodes_per_group: 3, seed: 4 })
            .unwrap();
        // Every sum has exactly one effective child: the joint factorizes.
        let t = table_from_circuit(&net.circuit, None).unwrap();
        let total = t.total();
        for a in t.assignments() {
            let mut prod = total;
            for v in space.all().iter() {
                let ma = crate::vars::Assignment::from_pairs(&[(v, a.get(v).unwrap())]);
                prod *= t.marg(space.all().difference(VarSet::singleton(v))).at(&ma) / total;
            }
            assert!((t.at(&a) - prod).abs() < 1e-9);
        }
    }

    #[test]
    fn build_random_is_seed_deterministic() {
        let (_, w) = random_regular_mdvtree(5, 3);
        let cfg = StructureConfig { groups_per_layer: 2, nodes_per_group: 2, seed: 42 };
        let a = build_random(&w, &cfg).unwrap();
        let b = build_random(&w, &cfg).unwrap();
        let ta = table_from_circuit(&a.circuit, None).unwrap();
        let tb = table_from_circuit(&b.circuit, None).unwrap();
        for (x, y) in ta.values().iter().zip(tb.values()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn build_random_respects_labels_and_groups() {
        for seed in 0..20u64 {
            let n = 4 + (seed as usize % 4);
            let (_, w) = random_regular_mdvtree(n, seed);
            let cfg = StructureConfig {
                groups_per_layer: 1 + (seed as usize % 3),
                nodes_per_group: 1 + (seed as usize % 4),
                seed,
            };
            let net = build_random(&w, &cfg).unwrap();
            assert!(net.circuit.check_structure().is_clean(), "seed {seed}");
            assert!(net.circuit.check_respects_labels(None).unwrap(), "seed {seed}");
            for q in w.enumerate_implied(None).unwrap() {
                assert!(net.circuit.check_qdet(q, None).unwrap(), "seed {seed}");
            }
            assert!(check_group_invariant(&net, None).unwrap(), "seed {seed}");
            assert!((net.circuit.total_mass() - 1.0).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn build_random_rejects_non_regular() {
        let space = VariableSpace::binary("x", 4);
        let vt = Vtree::random(space.clone(), space.all(), 9).unwrap();
        let mut w = MdVtree::fully_deterministic(vt.clone());
        // Shrink the root label to break regularity.
        let root = vt.root();
        let first = VarSet::singleton(space.all().iter().next().unwrap());
        w = w.with_label(root, Label::Set(first));
        if !w.is_regular() {
            assert!(matches!(
                build_random(&w, &StructureConfig::default()),
                Err(Error::NotRegular(_))
            ));
        }
    }

    #[test]
    fn mle_on_fully_expanded_circuit_matches_smoothed_frequencies() {
        let space = VariableSpace::binary("x", 3);
        let vt = Vtree::random(space.clone(), space.all(), 5).unwrap();
        let w = MdVtree::fully_deterministic(vt.clone());
        let cfg = StructureConfig { groups_per_layer: 1, nodes_per_group: 64, seed: 5 };
        let net = build_random(&w, &cfg).unwrap();
        let t = JointTable::random_positive(space.clone(), space.all(), 6);
        let data = sample_from_table(&t, 500, 7).unwrap();
        let fitted = fit_mle(&net.circuit, &data).unwrap();
        assert!((fitted.total_mass() - 1.0).abs() < 1e-9);
        // Closed form from raw counts: every assignment's probability is its
        // smoothed relative frequency.
        let table = table_from_circuit(&fitted, None).unwrap();
        let k = 8.0;
        for a in table.assignments() {
            let count = data.count_matching(&a) as f64;
            let expect = (count + SMOOTHING) / (data.len() as f64 + k * SMOOTHING);
            assert!(
                (table.at(&a) - expect).abs() < 1e-9,
                "{} vs {expect}",
                table.at(&a)
            );
        }
        // The sampled mode is the distribution's mode.
        let single_row = Dataset::new(
            space.clone(),
            data.vars().to_vec(),
            vec![data.rows()[0].clone(); 10],
        )
        .unwrap();
        let concentrated = fit_mle(&net.circuit, &single_row).unwrap();
        let ct = table_from_circuit(&concentrated, None).unwrap();
        let (_, argmax) = ct.max();
        assert_eq!(ct.at(&argmax), ct.at(&single_row.assignment(0)));
    }

    #[test]
    fn em_trace_is_monotone() {
        for seed in 0..10u64 {
            let n = 4 + (seed as usize % 3);
            let (space, w) = random_regular_mdvtree(n, seed + 200);
            let cfg = StructureConfig { groups_per_layer: 2, nodes_per_group: 2, seed };
            let net = build_random(&w, &cfg).unwrap();
            let t = JointTable::random_positive(space.clone(), space.all(), seed + 50);
            let data = sample_from_table(&t, 300, seed + 99).unwrap();
            let (_, trace) = fit_em(
                &net.circuit,
                &data,
                &EmConfig { max_iters: 30, tol: 0.0, floor: None },
            )
            .unwrap();
            for pair in trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "seed {seed}: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn em_fixed_point_after_mle() {
        let space = VariableSpace::binary("x", 3);
        let vt = Vtree::random(space.clone(), space.all(), 15).unwrap();
        let w = MdVtree::fully_deterministic(vt.clone());
        let net = build_random(
            &w,
            &StructureConfig { groups_per_layer: 1, nodes_per_group: 64, seed: 15 },
        )
        .unwrap();
        let t = JointTable::random_positive(space.clone(), space.all(), 16);
        let data = sample_from_table(&t, 400, 17).unwrap();
        let fitted = fit_mle(&net.circuit, &data).unwrap();
        // A deterministic circuit at its smoothed MLE moves negligibly in one
        // EM step (exactly so with the same smoothing folded in).
        let (stepped, _) = fit_em(
            &fitted,
            &data,
            &EmConfig { max_iters: 1, tol: 0.0, floor: None },
        )
        .unwrap();
        let ta = table_from_circuit(&fitted, None).unwrap();
        let tb = table_from_circuit(&stepped, None).unwrap();
        for a in ta.assignments() {
            assert!((ta.at(&a) - tb.at(&a)).abs() < 2e-3);
        }
        // And the MLE's likelihood is at least the one-step-EM likelihood
        // from the same initialization.
        let (one_step, _) = fit_em(
            &net.circuit,
            &data,
            &EmConfig { max_iters: 1, tol: 0.0, floor: None },
        )
        .unwrap();
        let ll_mle = log_likelihood(&fitted, &data).unwrap();
        let ll_em = log_likelihood(&one_step, &data).unwrap();
        assert!(ll_mle >= ll_em - 0.5, "{ll_mle} vs {ll_em}");
    }

    #[test]
    fn em_recovers_balanced_mixture() {
        // Two separated indicator blocks with balanced data: the mixture
        // weights converge to one half each.
        let space = VariableSpace::from_pairs(vec![("X", 2), ("Y", 2)]).unwrap();
        let x = space.lookup("X").unwrap();
        let y = space.lookup("Y").unwrap();
        let vt = Vtree::balanced(space.clone(), &[x, y]).unwrap();
        let w = optimal_labelling(&vt, &[VarSet::singleton(x)]).unwrap();
        let net = build_random(
            &w,
            &StructureConfig { groups_per_layer: 1, nodes_per_group: 2, seed: 21 },
        )
        .unwrap();
        let rows: Vec<Vec<usize>> = (0..400)
            .map(|i| vec![i % 2, (i / 2) % 2])
            .collect();
        let data = Dataset::new(space.clone(), vec![x, y], rows).unwrap();
        let (fitted, _) = fit_em(
            &net.circuit,
            &data,
            &EmConfig { max_iters: 60, tol: 0.0, floor: None },
        )
        .unwrap();
        let t = table_from_circuit(&fitted, None).unwrap();
        let m = t.marg(VarSet::singleton(y));
        for s in 0..2 {
            let a = crate::vars::Assignment::from_pairs(&[(x, s)]);
            assert!((m.at(&a) - 0.5).abs() < 1e-6, "{}", m.at(&a));
        }
    }
}
