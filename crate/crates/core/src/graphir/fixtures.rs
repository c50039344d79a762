//! Small hand-built graphs that each exercise one compiler rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::weights::{WeightStore, WeightTensor};
use super::{AttrValue, DType, Dim, Graph, GraphBuilder, Op};

fn x_input(b: &mut GraphBuilder, name: &str, sym: &str, width: u64) {
    b.input(name, DType::F32, vec![Dim::Lit(1), Dim::sym(sym), Dim::Lit(width)]);
}

fn random(ws: &mut WeightStore, b: &mut GraphBuilder, name: &str, shape: &[usize], seed: u64, mean: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, 0.2).expect("valid normal");
    let data = (0..shape.iter().product()).map(|_| d.sample(&mut rng)).collect();
    let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    b.weight(name, DType::F32, &dims);
    ws.insert(name, WeightTensor::f32(shape.to_vec(), data));
}

fn scalar(ws: &mut WeightStore, b: &mut GraphBuilder, name: &str, v: f32) {
    b.weight(name, DType::F32, &[]);
    ws.insert(name, WeightTensor::f32(vec![], vec![v]));
}

/// `Shape(x)[axis]` unsqueezed to a rank-1 value.
fn dim_of(b: &mut GraphBuilder, x: &str, axis: i64, p: &str) -> String {
    b.node(Op::Shape, &[x], &format!("{p}.shape"), DType::I64);
    b.constant(&format!("{p}.idx"), &[], vec![axis]);
    b.node(Op::Gather, &[&format!("{p}.shape"), &format!("{p}.idx")], &format!("{p}.dim"), DType::I64)
        .attr("axis", AttrValue::Int(0));
    format!("{p}.dim")
}

fn unsqueeze0(b: &mut GraphBuilder, x: &str, out: &str) {
    b.node(Op::Unsqueeze, &[x], out, DType::I64).attr("axes", AttrValue::Ints(vec![0]));
}

fn reshape(b: &mut GraphBuilder, x: &str, t: &str, out: &str) {
    b.node(Op::Reshape, &[x, t], out, DType::F32).attr("allowzero", AttrValue::Int(0));
}

/// Two independent Shape chains, each feeding one Reshape. One chain runs
/// through a `Mul` by a constant.
pub fn two_shape_chains() -> Graph {
    let mut b = GraphBuilder::new();
    b.symbol("N", Some(64)).symbol("M", Some(64));
    x_input(&mut b, "x", "N", 64);
    x_input(&mut b, "y", "M", 32);

    let n = dim_of(&mut b, "x", 1, "a");
    unsqueeze0(&mut b, &n, "a.n1");
    b.constant("a.tail", &[2], vec![8, 8]);
    b.node(Op::Concat, &["a.n1", "a.tail"], "a.target", DType::I64).attr("axis", AttrValue::Int(0));
    reshape(&mut b, "x", "a.target", "x3");

    let m = dim_of(&mut b, "y", 1, "b");
    b.constant("b.two", &[], vec![2]);
    b.node(Op::Mul, &[&m, "b.two"], "b.m2", DType::I64);
    unsqueeze0(&mut b, "b.m2", "b.m2_1");
    b.constant("b.tail", &[1], vec![16]);
    b.node(Op::Concat, &["b.m2_1", "b.tail"], "b.target", DType::I64).attr("axis", AttrValue::Int(0));
    reshape(&mut b, "y", "b.target", "y2");

    b.mark_output("x3").mark_output("y2");
    b.finish().expect("fixture is valid")
}

/// A `Shape` result that is itself a graph output.
pub fn shape_as_output() -> Graph {
    let mut b = GraphBuilder::new();
    b.symbol("N", Some(64));
    x_input(&mut b, "x", "N", 16);
    b.node(Op::Shape, &["x"], "x_shape", DType::I64);
    b.node(Op::Neg, &["x"], "y", DType::F32);
    b.mark_output("x_shape").mark_output("y");
    b.finish().expect("fixture is valid")
}

/// Shape of a MatMul result, so the host needs a device result mid-iteration.
pub fn shape_of_matmul() -> (Graph, WeightStore) {
    let mut b = GraphBuilder::new();
    let mut ws = WeightStore::default();
    b.symbol("N", Some(64));
    x_input(&mut b, "x", "N", 16);
    random(&mut ws, &mut b, "w", &[16, 16], 1, 0.0);
    b.node(Op::MatMul, &["x", "w"], "h", DType::F32);
    let n = dim_of(&mut b, "h", 1, "h");
    b.node(Op::Neg, &["h"], "y", DType::F32);
    b.mark_output(&n).mark_output("y");
    (b.finish().expect("fixture is valid"), ws)
}

/// Unfused layer norm over the last axis of `[1, N, 32]`.
pub fn layer_norm() -> (Graph, WeightStore) {
    let mut b = GraphBuilder::new();
    let mut ws = WeightStore::default();
    b.symbol("N", Some(64));
    x_input(&mut b, "x", "N", 32);
    random(&mut ws, &mut b, "ln.weight", &[32], 2, 1.0);
    random(&mut ws, &mut b, "ln.bias", &[32], 3, 0.0);
    scalar(&mut ws, &mut b, "two", 2.0);
    scalar(&mut ws, &mut b, "eps", 1e-5);
    let axes = || AttrValue::Ints(vec![-1]);
    b.node(Op::ReduceMean, &["x"], "ln.mean", DType::F32).attr("axes", axes()).attr("keepdims", AttrValue::Int(1));
    b.node(Op::Sub, &["x", "ln.mean"], "ln.centered", DType::F32);
    b.node(Op::Pow, &["ln.centered", "two"], "ln.sq", DType::F32);
    b.node(Op::ReduceMean, &["ln.sq"], "ln.var", DType::F32).attr("axes", axes()).attr("keepdims", AttrValue::Int(1));
    b.node(Op::Add, &["ln.var", "eps"], "ln.var_eps", DType::F32);
    b.node(Op::Sqrt, &["ln.var_eps"], "ln.std", DType::F32);
    b.node(Op::Div, &["ln.centered", "ln.std"], "ln.norm", DType::F32);
    b.node(Op::Mul, &["ln.norm", "ln.weight"], "ln.scaled", DType::F32);
    b.node(Op::Add, &["ln.scaled", "ln.bias"], "y", DType::F32);
    b.mark_output("y");
    (b.finish().expect("fixture is valid"), ws)
}

/// `Silu((x + y) * s)` over `[1, N, 16]`, every link single-consumer.
pub fn elementwise_chain() -> (Graph, WeightStore) {
    let mut b = GraphBuilder::new();
    let mut ws = WeightStore::default();
    b.symbol("N", Some(64));
    x_input(&mut b, "x", "N", 16);
    x_input(&mut b, "y", "N", 16);
    random(&mut ws, &mut b, "s", &[16], 4, 1.0);
    b.node(Op::Add, &["x", "y"], "sum", DType::F32);
    b.node(Op::Mul, &["sum", "s"], "scaled", DType::F32);
    b.node(Op::Silu, &["scaled"], "out", DType::F32);
    b.mark_output("out");
    (b.finish().expect("fixture is valid"), ws)
}
