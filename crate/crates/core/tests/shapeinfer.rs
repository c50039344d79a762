use std::collections::HashMap;

use dynlite::graphir::{
    build_toy_decoder, fixtures, AttrValue, DType, Dim, Graph, GraphBuilder, Op, ToyConfig,
};
use dynlite::graphir::weights::WeightStore;
use dynlite::shapeinfer::*;
use dynlite::symexpr::{Bindings, SymExpr};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn e(s: &str) -> SymExpr {
    s.parse().unwrap()
}

fn shape(strs: &[&str]) -> Vec<SymExpr> {
    strs.iter().map(|s| e(s)).collect()
}

fn bindings(pairs: &[(&str, i64)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn toy() -> (Graph, WeightStore) {
    build_toy_decoder(&ToyConfig::default()).unwrap()
}

#[test]
fn concat_of_cache_and_new_tokens() {
    let mut b = GraphBuilder::new();
    b.symbol("N", None).symbol("sumN", None);
    b.input("past", DType::F16, vec![Dim::sym("sumN - N"), Dim::Lit(1), Dim::Lit(2), Dim::Lit(128)]);
    b.input("new", DType::F16, vec![Dim::sym("N"), Dim::Lit(1), Dim::Lit(2), Dim::Lit(128)]);
    b.node(Op::Concat, &["past", "new"], "present", DType::F16).attr("axis", AttrValue::Int(0));
    let d = derive_shapes(&b.finish().unwrap()).unwrap();
    assert_eq!(d.shapes["present"], shape(&["sumN", "1", "2", "128"]));
}

#[test]
fn reshape_resolves_minus_one_by_exact_division() {
    let mut b = GraphBuilder::new();
    b.symbol("N", None);
    b.input("x", DType::F16, vec![Dim::Lit(1), Dim::sym("N"), Dim::Lit(4096)]);
    b.constant("target", &[4], vec![1, -1, 32, 128]);
    b.node(Op::Reshape, &["x", "target"], "y", DType::F16).attr("allowzero", AttrValue::Int(0));
    let d = derive_shapes(&b.finish().unwrap()).unwrap();
    assert_eq!(d.shapes["y"], shape(&["1", "N", "32", "128"]));
}

#[test]
fn reshape_errors() {
    let mut b = GraphBuilder::new();
    b.symbol("N", None);
    b.input("x", DType::F32, vec![Dim::Lit(1), Dim::sym("N"), Dim::Lit(100)]);
    b.constant("target", &[2], vec![-1, 64]);
    b.node(Op::Reshape, &["x", "target"], "y", DType::F32).attr("allowzero", AttrValue::Int(0));
    assert!(matches!(derive_shapes(&b.finish().unwrap()), Err(ShapeError::NonDivisibleReshape { node: 0, .. })));

    let mut b = GraphBuilder::new();
    b.symbol("N", None);
    b.input("x", DType::F32, vec![Dim::sym("N"), Dim::Lit(4)]);
    b.input("t", DType::I64, vec![Dim::Lit(2)]);
    b.node(Op::Reshape, &["x", "t"], "y", DType::F32).attr("allowzero", AttrValue::Int(0));
    assert!(matches!(derive_shapes(&b.finish().unwrap()), Err(ShapeError::UnsupportedDynamicAttr { .. })));
}

#[test]
fn matmul_and_broadcast_rules() {
    let mut b = GraphBuilder::new();
    b.symbol("N", None).symbol("M", None);
    b.input("x", DType::F32, vec![Dim::Lit(1), Dim::sym("N"), Dim::Lit(64)]);
    b.weight("w", DType::F32, &[64, 256]);
    b.node(Op::MatMul, &["x", "w"], "y", DType::F32);
    b.input("z", DType::F32, vec![Dim::Lit(1), Dim::sym("M"), Dim::Lit(256)]);
    let g = b.finish().unwrap();
    let d = derive_shapes(&g).unwrap();
    assert_eq!(d.shapes["y"], shape(&["1", "N", "256"]));

    let mut bad = g.clone();
    bad.tensors.insert(
        "s".into(),
        dynlite::graphir::TensorInfo::new("s", DType::F32, None, dynlite::graphir::TensorKind::Activation),
    );
    bad.nodes.push(dynlite::graphir::NodeSpec::new(9, Op::Add, &["y", "z"], "s"));
    assert!(matches!(derive_shapes(&bad), Err(ShapeError::BroadcastError { node: 9, .. })));
}

#[test]
fn toy_decoder_shapes() {
    let (g, _) = toy();
    let d = derive_shapes(&g).unwrap();
    assert_eq!(d.shapes["l0.present_kv"], shape(&["sumN", "1", "8", "16"]));
    assert_eq!(d.shapes["l0.q3"], shape(&["N", "4", "16"]));
    assert_eq!(d.shapes["l0.scores"], shape(&["4", "N", "sumN"]));
    assert_eq!(d.shapes["logits"], shape(&["1", "N", "97"]));
    assert_eq!(d.values["l0.t_n1hd"], shape(&["N", "1", "4", "16"]));
}

fn shape_chain_graph() -> Graph {
    let mut b = GraphBuilder::new();
    b.symbol("N", None);
    b.input("x", DType::F32, vec![Dim::Lit(1), Dim::sym("N"), Dim::Lit(8)]);
    b.node(Op::Shape, &["x"], "s", DType::I64);
    b.constant("i1", &[1], vec![1]);
    b.constant("i2", &[1], vec![2]);
    b.node(Op::Gather, &["s", "i1"], "n", DType::I64).attr("axis", AttrValue::Int(0));
    b.node(Op::Gather, &["s", "i2"], "w", DType::I64).attr("axis", AttrValue::Int(0));
    b.constant("two", &[], vec![2]);
    b.node(Op::Mul, &["w", "two"], "w2", DType::I64);
    b.node(Op::Add, &["n", "w"], "nw", DType::I64);
    b.constant("half", &[1], vec![4]);
    b.node(Op::Concat, &["n", "half", "w2"], "t", DType::I64).attr("axis", AttrValue::Int(0));
    b.constant("one", &[1], vec![1]);
    b.node(Op::Concat, &["one", "t"], "t4", DType::I64).attr("axis", AttrValue::Int(0));
    b.input("z", DType::F32, vec![Dim::Lit(1), Dim::sym("N"), Dim::Lit(4), Dim::Lit(16)]);
    b.node(Op::Reshape, &["z", "t4"], "zr", DType::F32).attr("allowzero", AttrValue::Int(0));
    b.node(Op::Neg, &["x"], "xn", DType::F32);
    b.mark_output("zr").mark_output("xn");
    b.finish().unwrap()
}

/// Independent statement of the rule: recursive over producers.
fn oracle_classes(g: &Graph) -> HashMap<i64, NodeClass> {
    fn visit(g: &Graph, i: usize, memo: &mut HashMap<usize, bool>) -> bool {
        if let Some(&v) = memo.get(&i) {
            return v;
        }
        let n = &g.nodes[i];
        let v = n.op == Op::Shape
            || n.inputs.iter().enumerate().filter(|(k, _)| n.op.is_data_input(*k)).all(|(_, inp)| {
                if g.tensor(inp).unwrap().is_constant() {
                    return true;
                }
                match g.nodes.iter().position(|m| m.outputs.contains(inp)) {
                    Some(p) => visit(g, p, memo),
                    None => false,
                }
            });
        memo.insert(i, v);
        v
    }
    let mut memo = HashMap::new();
    (0..g.nodes.len())
        .map(|i| {
            let s = visit(g, i, &mut memo);
            (g.nodes[i].id, if s { NodeClass::ShapeComputing } else { NodeClass::TensorComputing })
        })
        .collect()
}

fn classes_by_id(g: &Graph) -> HashMap<i64, NodeClass> {
    g.nodes.iter().zip(classify(g)).map(|(n, c)| (n.id, c)).collect()
}

#[test]
fn classification_examples() {
    let g = shape_chain_graph();
    let c = classes_by_id(&g);
    let class_of = |out: &str| c[&g.nodes.iter().find(|n| n.output() == out).unwrap().id];
    for t in ["s", "n", "w", "w2", "nw", "t", "t4"] {
        assert_eq!(class_of(t), NodeClass::ShapeComputing, "{t}");
    }
    assert_eq!(class_of("zr"), NodeClass::TensorComputing);
    assert_eq!(class_of("xn"), NodeClass::TensorComputing);

    let (g, _) = fixtures::elementwise_chain();
    assert!(classify(&g).iter().all(|c| *c == NodeClass::TensorComputing));
}

#[test]
fn classification_matches_oracle_under_any_node_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let graphs = [shape_chain_graph(), fixtures::two_shape_chains(), fixtures::shape_of_matmul().0, toy().0];
    for g in graphs {
        let expected = oracle_classes(&g);
        assert_eq!(classes_by_id(&g), expected);
        for _ in 0..5 {
            let mut shuffled = g.clone();
            shuffled.nodes.shuffle(&mut rng);
            assert_eq!(classes_by_id(&shuffled), expected);
        }
    }
}

#[test]
fn toy_decoder_folds_completely() {
    let (g, w) = toy();
    for opts in [CompileOptions::default(), CompileOptions { fuse: false, fold: true }] {
        let plan = compile(&g, Some(&w), opts).unwrap();
        assert_eq!(plan.shape_ops_retained(), 0);
        assert_eq!(plan.sync_points, 1);
        assert!(plan.shape_program.is_empty());
        assert!(plan.baked.is_empty());
        assert!(plan.tensor_program.iter().all(|&i| !plan.is_shape_node(i)));
    }
}

#[test]
fn folding_fixtures() {
    let plan = compile(&fixtures::two_shape_chains(), None, CompileOptions::default()).unwrap();
    assert_eq!(plan.summary(), PlanSummary { shape_ops_retained: 0, sync_points: 1, fused_nodes: 0 });
    assert_eq!(plan.shape_of("x3").unwrap(), shape(&["N", "8", "8"]).as_slice());
    assert_eq!(plan.shape_of("y2").unwrap(), shape(&["2*M", "16"]).as_slice());

    let plan = compile(&fixtures::shape_as_output(), None, CompileOptions::default()).unwrap();
    assert_eq!(plan.shape_ops_retained(), 1);
    assert_eq!(plan.shape_program.len(), 1);
    assert_eq!(plan.sync_points, 1);
}

#[test]
fn shape_of_tensor_result_costs_a_sync_point() {
    let (g, w) = fixtures::shape_of_matmul();
    let plan = compile(&g, Some(&w), CompileOptions::default()).unwrap();
    assert_eq!(plan.sync_points, 2);
    assert_eq!(plan.shape_ops_retained(), 2);
    assert!(plan.shape_program.is_empty());
    // Both retained nodes moved behind the MatMul.
    let order: Vec<Op> = plan.tensor_program.iter().map(|&i| plan.graph.nodes[i].op).collect();
    assert_eq!(order, vec![Op::MatMul, Op::Shape, Op::Gather, Op::Neg]);

    let plan = compile(&fixtures::elementwise_chain().0, None, CompileOptions::default()).unwrap();
    assert_eq!(plan.sync_points, 1);
}

#[test]
fn unfolded_plans_count_every_transition() {
    let (g, w) = toy();
    let plan = compile(&g, Some(&w), CompileOptions { fuse: false, fold: false }).unwrap();
    assert_eq!(plan.tensor_program.len(), g.nodes.len());
    // Each layer interleaves a shape chain between tensor work.
    assert!(plan.sync_points > 2, "{}", plan.sync_points);
    assert!(plan.shape_ops_retained() > 0);
}

#[test]
fn rms_norm_collapses_and_fusion_is_idempotent() {
    let (g, w) = toy();
    let (fused, stats) = fuse(&g, &w);
    let cfg = ToyConfig::default();
    assert_eq!(stats.rms_norm, 2 * cfg.layers + 1);
    // scale→mask per layer and silu→mul per layer
    assert_eq!(stats.elementwise, 2 * cfg.layers);
    assert_eq!(g.nodes.len() - fused.nodes.len(), 5 * stats.rms_norm + stats.elementwise);
    assert!(fused.validate().is_ok());
    let (again, stats2) = fuse(&fused, &w);
    assert_eq!(again, fused);
    assert_eq!(stats2, FusionStats::default());

    let norm: Vec<_> = fused.nodes.iter().filter(|n| n.op == Op::RMSNorm).collect();
    assert_eq!(norm[0].inputs, vec!["embed.out", "l0.attn_norm.weight"]);
    assert_eq!(norm[0].output(), "l0.attn_norm.out");
    assert!((norm[0].attr_f64("eps").unwrap() - 1e-5).abs() < 1e-12);
}

#[test]
fn layer_norm_and_chain_fusion() {
    let (g, w) = fixtures::layer_norm();
    let (fused, stats) = fuse(&g, &w);
    assert_eq!(stats.layer_norm, 1);
    assert_eq!(fused.nodes.len(), 1);
    assert_eq!(fused.nodes[0].op, Op::LayerNorm);
    assert_eq!(fused.nodes[0].inputs, vec!["x", "ln.weight", "ln.bias"]);

    let (g, w) = fixtures::elementwise_chain();
    let (fused, stats) = fuse(&g, &w);
    assert_eq!(stats.elementwise, 1);
    assert_eq!(fused.nodes.len(), 1);
    let n = &fused.nodes[0];
    assert_eq!(n.op, Op::FusedElementwise);
    assert_eq!(n.inputs, vec!["x", "y", "s"]);
    assert_eq!(n.attr_str("steps"), Some("Add(i0,i1);Mul(s0,i2);Silu(s1)"));
    let steps = parse_steps(n.attr_str("steps").unwrap()).unwrap();
    assert_eq!(steps.len(), 3);
    assert_eq!(steps[2].args, vec![StepArg::Step(1)]);
}

#[test]
fn fusion_leaves_shared_intermediates_alone() {
    let (mut g, w) = fixtures::elementwise_chain();
    // `sum` now also escapes as an output, so nothing may absorb it.
    g.tensors.get_mut("sum").unwrap().kind = dynlite::graphir::TensorKind::GraphOutput;
    let (fused, stats) = fuse(&g, &w);
    assert_eq!(stats.elementwise, 1);
    assert!(fused.tensors.contains_key("sum"));
    assert_eq!(fused.nodes.len(), 2);
}

#[test]
fn binding_examples() {
    let (g, w) = toy();
    let plan = compile(&g, Some(&w), CompileOptions::default()).unwrap();
    let r = bind_symbols(&plan, &bindings(&[("N", 64), ("sumN", 64)])).unwrap();
    assert_eq!(r.shape(&plan, "logits").unwrap(), &[1, 64, 97]);
    assert_eq!(r.shape(&plan, "l0.past_kv").unwrap(), &[0, 1, 8, 16]);
    assert!(r.shapes.iter().flatten().all(|&d| d <= 256 * 256));

    assert!(matches!(
        bind_symbols(&plan, &bindings(&[("N", 1), ("sumN", 0)])),
        Err(ShapeError::NonPositiveDim { .. })
    ));
    assert_eq!(
        bind_symbols(&plan, &bindings(&[("N", 1), ("sumN", 257)])),
        Err(ShapeError::ExceedsPreallocation { symbol: "sumN".into(), value: 257, max: 256 })
    );
    assert_eq!(bind_symbols(&plan, &bindings(&[("N", 1)])), Err(ShapeError::UnboundSymbol("sumN".into())));
    assert!(matches!(
        bind_symbols(&plan, &bindings(&[("N", 5), ("sumN", 3)])),
        Err(ShapeError::NonPositiveDim { .. })
    ));
    assert!(bind_symbols(&plan, &bindings(&[("N", 256), ("sumN", 256)])).is_ok());
}

/// Replaces every declared symbolic dim with its value under `b`.
fn concretize(g: &Graph, b: &Bindings) -> Graph {
    let mut out = g.clone();
    out.symbols.clear();
    for t in out.tensors.values_mut() {
        if let Some(shape) = &mut t.shape {
            for d in shape.iter_mut() {
                *d = Dim::Lit(d.to_expr().evaluate(b).unwrap() as u64);
            }
        }
    }
    out
}

#[test]
fn derivation_commutes_with_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (g, _) = toy();
    let graphs = [g, fixtures::two_shape_chains(), shape_chain_graph(), fixtures::layer_norm().0];
    for g in graphs {
        let symbolic = derive_shapes(&g).unwrap();
        for _ in 0..50 {
            let mut b = Bindings::new();
            for s in &g.symbols {
                b.insert(s.name.clone(), rng.gen_range(1..=40));
            }
            if b.contains_key("sumN") {
                let total = b["N"] + rng.gen_range(1..=40);
                b.insert("sumN".into(), total);
            }
            let concrete = derive_shapes(&concretize(&g, &b)).unwrap();
            for (name, dims) in &symbolic.shapes {
                let evaluated: Vec<i64> = dims.iter().map(|d| d.evaluate(&b).unwrap()).collect();
                let literal: Vec<i64> = concrete.shapes[name].iter().map(|d| d.as_constant().unwrap()).collect();
                assert_eq!(evaluated, literal, "{name} under {b:?}");
            }
        }
    }
}

#[test]
fn dump_lists_every_tensor() {
    let (g, w) = toy();
    let plan = compile(&g, Some(&w), CompileOptions::default()).unwrap();
    let dump = plan.dump();
    assert_eq!(dump.lines().count(), plan.graph.tensors.len());
    assert!(dump.contains("l0.past_kv : f32 [sumN - N, 1, 8, 16] class=T\n"));
    assert!(dump.contains("logits : f32 [1, N, 97] class=T\n"));
    let plan = compile(&g, Some(&w), CompileOptions { fuse: false, fold: true }).unwrap();
    assert!(plan.dump().contains("l0.seq.shape : i64 [3] class=S\n"));
}
