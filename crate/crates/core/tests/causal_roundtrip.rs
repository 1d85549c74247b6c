//! Requirement round-trips and estimand consistency across query forms.

use mdpc::calculus::forward_analyze;
use mdpc::causal::{
    backdoor_pipeline, chain_split_vtree, frontdoor_pipeline, napkin_pipeline, AUX_INPUT,
    PRIMARY_INPUT,
};
use mdpc::label::Label;
use mdpc::mdvtree::optimal_labelling;
use mdpc::oracle::{compile_table, frontdoor_estimand, table_from_circuit, JointTable};
use mdpc::vars::{Assignment, VarSet, VariableSpace};
use mdpc::{MdVtree, Vtree};
use std::collections::BTreeMap;
use std::sync::Arc;

#[test]
fn backdoor_roundtrip_over_root_split_vtrees() {
    // Enforcing the derived requirement on any vtree whose root split
    // separates the demanded block makes the forward analysis accept.
    for seed in 0..12u64 {
        let space = VariableSpace::from_pairs(vec![
            ("X", 2),
            ("Y", 2),
            ("Z1", 2),
            ("Z2", 2),
            ("E", 2),
        ])
        .unwrap();
        let x = space.set_of(&["X"]).unwrap();
        let y = space.set_of(&["Y"]).unwrap();
        let z = space.set_of(&["Z1", "Z2"]).unwrap();
        let q = backdoor_pipeline(&space, x, y, z, None).unwrap();
        let req = q.requirements().unwrap().unwrap();
        let demanded = req.determinism_sets();
        let vt = Vtree::root_split(space.clone(), space.all(), demanded[0], seed).unwrap();
        let w = optimal_labelling(&vt, &demanded).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert(PRIMARY_INPUT.to_string(), w);
        let report = forward_analyze(q.pipeline(), &inputs).unwrap();
        assert!(report.tractable, "seed {seed}: {:?}", report.failures);
    }
}

#[test]
fn napkin_roundtrip_over_root_split_vtrees() {
    for seed in 0..12u64 {
        let space = VariableSpace::from_pairs(vec![
            ("W", 2),
            ("Z", 2),
            ("K", 2),
            ("X", 2),
            ("Y", 2),
        ])
        .unwrap();
        let x = space.set_of(&["X"]).unwrap();
        let y = space.set_of(&["Y"]).unwrap();
        let z = space.set_of(&["Z"]).unwrap();
        let w_set = space.set_of(&["W"]).unwrap();
        let k = space.set_of(&["K"]).unwrap();
        let xa = Assignment::from_pairs(&[(space.lookup("X").unwrap(), 0)]);
        let za = Assignment::from_pairs(&[(space.lookup("Z").unwrap(), 1)]);
        let q = napkin_pipeline(&space, x, y, z, w_set, k, Some(&xa), &za).unwrap();
        let req = q.requirements().unwrap().unwrap();
        let demanded = req.determinism_sets();
        // Split the largest demanded block at the root.
        let block = *demanded.last().unwrap();
        let vt = Vtree::root_split(space.clone(), space.all(), block, seed).unwrap();
        let w = optimal_labelling(&vt, &demanded).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert(PRIMARY_INPUT.to_string(), w);
        let report = forward_analyze(q.pipeline(), &inputs).unwrap();
        assert!(report.tractable, "seed {seed}: {:?}", report.failures);
    }
}

#[test]
fn frontdoor_roundtrip_with_aux_input() {
    // The auxiliary input reuses the primary labelling with the treatment
    // variables renamed; both md-vtrees together satisfy the analysis.
    let space = VariableSpace::from_pairs(vec![("X", 2), ("Z", 2), ("Y", 2)]).unwrap();
    let x = space.set_of(&["X"]).unwrap();
    let y = space.set_of(&["Y"]).unwrap();
    let z = space.set_of(&["Z"]).unwrap();
    let q = frontdoor_pipeline(&space, x, y, z, None).unwrap();
    let req = q.requirements().unwrap().unwrap();
    let demanded = req.determinism_sets();
    let t = JointTable::random_positive(space.clone(), space.all(), 5);
    let vt = chain_split_vtree(&space, space.all(), &demanded, 5).unwrap();
    let w = optimal_labelling(&vt, &demanded).unwrap();
    let model = compile_table(&t, &w, None).unwrap();
    // Run checks the analysis internally; a tractable run is the round-trip.
    let (value, _) = q.run(&model).unwrap();
    let got = table_from_circuit(&value.circuit(), None).unwrap();
    let expect = frontdoor_estimand(&t, x, y, z, None);
    for a in expect.assignments() {
        assert!((got.at(&a) - expect.at(&a)).abs() <= 1e-8 * expect.at(&a).max(1e-12));
    }
    let _ = AUX_INPUT;
}

#[test]
fn instantiated_frontdoor_execution_matches_circuit_valued_slice() {
    let space = VariableSpace::from_pairs(vec![("X", 2), ("Z", 2), ("Y", 2), ("E", 2)]).unwrap();
    let x = space.set_of(&["X"]).unwrap();
    let y = space.set_of(&["Y"]).unwrap();
    let z = space.set_of(&["Z"]).unwrap();
    let xv = space.lookup("X").unwrap();
    let yv = space.lookup("Y").unwrap();
    let t = JointTable::random_positive(space.clone(), space.all(), 17);
    // The circuit-valued requirement covers the instantiated one, so one
    // model serves both query forms.
    let qc = frontdoor_pipeline(&space, x, y, z, None).unwrap();
    let req = qc.requirements().unwrap().unwrap();
    let vt = chain_split_vtree(&space, space.all(), &req.determinism_sets(), 2).unwrap();
    let w = optimal_labelling(&vt, &req.determinism_sets()).unwrap();
    let model = compile_table(&t, &w, None).unwrap();
    let (cv, _) = qc.run(&model).unwrap();
    let cv_table = table_from_circuit(&cv.circuit(), None).unwrap();
    for xs in 0..2 {
        let xa = Assignment::from_pairs(&[(xv, xs)]);
        let qi = frontdoor_pipeline(&space, x, y, z, Some(&xa)).unwrap();
        let (iv, diag) = qi.run(&model).unwrap();
        assert_eq!(diag.zero_divisions, 0, "positive table divides cleanly");
        let iv_table = table_from_circuit(&iv.circuit(), None).unwrap();
        let oracle = frontdoor_estimand(&t, x, y, z, Some(&xa));
        for ys in 0..2 {
            let ya = Assignment::from_pairs(&[(yv, ys)]);
            let full = ya.merged(&xa);
            assert!(
                (iv_table.at(&ya) - cv_table.at(&full)).abs()
                    <= 1e-9 * cv_table.at(&full).max(1e-12),
                "forms disagree at x={xs}, y={ys}"
            );
            assert!(
                (iv_table.at(&ya) - oracle.at(&ya)).abs() <= 1e-8 * oracle.at(&ya).max(1e-12),
                "oracle disagrees at x={xs}, y={ys}"
            );
        }
    }
}

#[test]
fn dense_two_component_mixture_is_not_fully_deterministic() {
    // Two overlapping full-support components: deterministic for no set.
    use mdpc::circuit::raw::{normalize_exact, RawCircuit};
    use mdpc::circuit::{LeafFunction, LeafTerm};
    let space = VariableSpace::binary("x", 2);
    let x0 = space.lookup("x0").unwrap();
    let x1 = space.lookup("x1").unwrap();
    let vt = Vtree::balanced(space.clone(), &[x0, x1]).unwrap();
    let w = MdVtree::all_universal(vt.clone());
    let mut raw = RawCircuit::new();
    let comp = |raw: &mut RawCircuit, w0: f64, w1: f64| {
        let a = raw.leaf(LeafTerm::new(vec![LeafFunction::Categorical {
            var: x0,
            weights: vec![w0, 1.0 - w0],
        }]));
        let b = raw.leaf(LeafTerm::new(vec![LeafFunction::Categorical {
            var: x1,
            weights: vec![w1, 1.0 - w1],
        }]));
        raw.product(a, b)
    };
    let c1 = comp(&mut raw, 0.3, 0.6);
    let c2 = comp(&mut raw, 0.8, 0.2);
    let root = raw.sum(vec![(0.5, c1), (0.5, c2)]);
    let mixture = normalize_exact(&raw, &w, root).unwrap();
    for q in space.all().subsets().filter(|q| !q.is_empty()) {
        assert!(!mixture.check_qdet(q, None).unwrap(), "q = {q:?}");
    }
    // A single-child root (trivial sum) is deterministic for every set.
    let point = {
        let mut t = JointTable::zeros(space.clone(), space.all());
        t.values_mut()[0] = 1.0;
        compile_table(&t, &MdVtree::fully_deterministic(vt), None).unwrap()
    };
    for q in space.all().subsets().filter(|q| !q.is_empty()) {
        assert!(point.check_qdet(q, None).unwrap());
    }
    let _: VarSet = space.all();
}
