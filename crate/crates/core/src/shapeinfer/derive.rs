//! Symbolic shape rules, one per operator. Shape-valued I64 tensors are
//! executed symbolically along the way so that reshape targets built from
//! `Shape` chains resolve to polynomials instead of unknowns.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::ShapeError;
use crate::graphir::{Graph, NodeSpec, Op};
use crate::symexpr::{CompareResult, DivError, SymExpr};

pub type SymShape = Vec<SymExpr>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Derived {
    /// Every tensor of the graph, in declaration order.
    pub shapes: IndexMap<String, SymShape>,
    /// Symbolically known contents of rank-0/1 integer tensors.
    pub values: HashMap<String, Vec<SymExpr>>,
}

/// ONNX uses huge sentinels for "to the end" slice bounds.
const SLICE_END_SENTINEL: i64 = i32::MAX as i64;

fn c(v: i64) -> SymExpr {
    SymExpr::constant(v)
}

pub fn derive_shapes(g: &Graph) -> Result<Derived, ShapeError> {
    let mut shapes: HashMap<String, SymShape> = HashMap::new();
    let mut values: HashMap<String, Vec<SymExpr>> = HashMap::new();
    for t in g.tensors.values() {
        if let (Some(shape), true) = (&t.shape, t.kind.is_source()) {
            shapes.insert(t.name.clone(), shape.iter().map(|d| d.to_expr()).collect());
            if let Some(v) = &t.value {
                values.insert(t.name.clone(), v.iter().map(|&x| c(x)).collect());
            }
        }
    }
    for node in &g.nodes {
        let ins: Vec<&SymShape> = node
            .inputs
            .iter()
            .map(|n| shapes.get(n).expect("validated graph defines inputs before use"))
            .collect();
        let in_vals: Vec<Option<&Vec<SymExpr>>> = node.inputs.iter().map(|n| values.get(n)).collect();
        let (shape, value) = derive_node(node, &ins, &in_vals)?;
        let out = node.output();
        if let Some(declared) = g.tensor(out).and_then(|t| t.shape.as_ref()) {
            let declared: SymShape = declared.iter().map(|d| d.to_expr()).collect();
            if declared != shape {
                return Err(ShapeError::DeclaredShapeMismatch {
                    tensor: out.to_string(),
                    declared: fmt_shape(&declared),
                    derived: fmt_shape(&shape),
                });
            }
        }
        if let Some(v) = value {
            values.insert(out.to_string(), v);
        }
        shapes.insert(out.to_string(), shape);
    }
    let shapes = g
        .tensors
        .keys()
        .map(|k| (k.clone(), shapes.remove(k).expect("every tensor is a source or produced")))
        .collect();
    Ok(Derived { shapes, values })
}

pub fn fmt_shape(s: &[SymExpr]) -> String {
    let parts: Vec<String> = s.iter().map(|e| e.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

fn norm_axis(node: &NodeSpec, axis: i64, rank: usize) -> Result<usize, ShapeError> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(ShapeError::RankMismatch { node: node.id, reason: format!("axis {axis} out of range for rank {rank}") });
    }
    Ok(a as usize)
}

fn attr_int(node: &NodeSpec, key: &str) -> Result<i64, ShapeError> {
    node.attr_int(key).ok_or_else(|| ShapeError::InvalidAttr { node: node.id, reason: format!("missing `{key}`") })
}

fn attr_ints<'a>(node: &'a NodeSpec, key: &str) -> Result<&'a [i64], ShapeError> {
    node.attr_ints(key).ok_or_else(|| ShapeError::InvalidAttr { node: node.id, reason: format!("missing `{key}`") })
}

/// Right-aligned broadcasting; a symbolic extent only stretches a literal 1.
pub fn broadcast(node: &NodeSpec, a: &[SymExpr], b: &[SymExpr]) -> Result<SymShape, ShapeError> {
    let rank = a.len().max(b.len());
    let one = SymExpr::one();
    let mut out = Vec::with_capacity(rank);
    for i in 0..rank {
        let da = if i + a.len() >= rank { &a[i + a.len() - rank] } else { &one };
        let db = if i + b.len() >= rank { &b[i + b.len() - rank] } else { &one };
        let d = if da == db {
            da
        } else if *da == one {
            db
        } else if *db == one {
            da
        } else {
            return Err(ShapeError::BroadcastError {
                node: node.id,
                reason: format!("{} vs {}", fmt_shape(a), fmt_shape(b)),
            });
        };
        out.push(d.clone());
    }
    Ok(out)
}

fn binary_value(op: Op, a: &[SymExpr], b: &[SymExpr]) -> Option<Vec<SymExpr>> {
    let len = a.len().max(b.len());
    if !(a.len() == len || a.len() == 1) || !(b.len() == len || b.len() == 1) {
        return None;
    }
    let pick = |v: &[SymExpr], i: usize| v[if v.len() == 1 { 0 } else { i }].clone();
    (0..len)
        .map(|i| {
            let (x, y) = (pick(a, i), pick(b, i));
            match op {
                Op::Add => Some(x + y),
                Op::Sub => Some(x - y),
                Op::Mul => Some(x * y),
                Op::Div => x.div_exact(&y).ok(),
                Op::Pow => {
                    let e = y.as_constant().filter(|e| (0..=8).contains(e))?;
                    Some((0..e).fold(SymExpr::one(), |acc, _| acc * &x))
                }
                _ => None,
            }
        })
        .collect()
}

/// Resolves one slice bound against extent `d`, clamping like ONNX.
fn slice_bound(node: &NodeSpec, idx: i64, d: &SymExpr) -> Result<SymExpr, ShapeError> {
    if let Some(dc) = d.as_constant() {
        let raw = if idx < 0 { dc + idx } else { idx.min(dc) };
        return Ok(c(raw.clamp(0, dc)));
    }
    let unsupported = || ShapeError::UnsupportedDynamicAttr {
        node: node.id,
        reason: format!("slice bound {idx} cannot be clamped against symbolic extent {d}"),
    };
    if idx >= SLICE_END_SENTINEL {
        return Ok(d.clone());
    }
    if idx < 0 {
        let e = d + &c(idx);
        return match e.compare(&SymExpr::zero()) {
            CompareResult::Equal | CompareResult::ProvablyGE => Ok(e),
            _ => Err(unsupported()),
        };
    }
    match d.compare(&c(idx)) {
        CompareResult::Equal | CompareResult::ProvablyGE => Ok(c(idx)),
        CompareResult::ProvablyLE => Ok(d.clone()),
        CompareResult::Unknown => Err(unsupported()),
    }
}

type NodeResult = (SymShape, Option<Vec<SymExpr>>);

fn derive_node(node: &NodeSpec, ins: &[&SymShape], vals: &[Option<&Vec<SymExpr>>]) -> Result<NodeResult, ShapeError> {
    let rank_err = |reason: String| ShapeError::RankMismatch { node: node.id, reason };
    match node.op {
        Op::Identity | Op::Cast => Ok((ins[0].clone(), vals[0].cloned())),
        Op::Neg => Ok((ins[0].clone(), vals[0].map(|v| v.iter().map(|e| -e).collect()))),
        Op::Sqrt | Op::Silu | Op::Gelu | Op::Softmax => {
            if node.op == Op::Softmax {
                norm_axis(node, attr_int(node, "axis")?, ins[0].len())?;
            }
            Ok((ins[0].clone(), None))
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => {
            let shape = broadcast(node, ins[0], ins[1])?;
            let value = match (vals[0], vals[1]) {
                (Some(a), Some(b)) if shape.len() <= 1 => binary_value(node.op, a, b),
                _ => None,
            };
            Ok((shape, value))
        }
        Op::FusedElementwise => {
            let mut shape = ins[0].clone();
            for s in &ins[1..] {
                shape = broadcast(node, &shape, s)?;
            }
            Ok((shape, None))
        }
        Op::Shape => Ok((vec![c(ins[0].len() as i64)], Some(ins[0].clone()))),
        Op::Gather => {
            let (data, idx) = (ins[0], ins[1]);
            let axis = norm_axis(node, attr_int(node, "axis")?, data.len())?;
            let mut shape = data[..axis].to_vec();
            shape.extend(idx.iter().cloned());
            shape.extend(data[axis + 1..].iter().cloned());
            let value = match (vals[0], vals[1]) {
                (Some(dv), Some(iv)) if data.len() == 1 => iv
                    .iter()
                    .map(|i| {
                        let i = i.as_constant()?;
                        let i = if i < 0 { i + dv.len() as i64 } else { i };
                        dv.get(usize::try_from(i).ok()?).cloned()
                    })
                    .collect::<Option<Vec<_>>>(),
                _ => None,
            };
            if let (Some(iv), Some(len)) = (vals[1], data[axis].as_constant()) {
                for i in iv.iter().filter_map(|e| e.as_constant()) {
                    if i >= len || i < -len {
                        return Err(ShapeError::InvalidAttr {
                            node: node.id,
                            reason: format!("gather index {i} out of range for extent {len}"),
                        });
                    }
                }
            }
            Ok((shape, value))
        }
        Op::Concat | Op::KVAppend => {
            let parts: &[&SymShape] = if node.op == Op::KVAppend { &ins[..2] } else { ins };
            let rank = parts[0].len();
            let axis = norm_axis(node, attr_int(node, "axis")?, rank)?;
            let mut shape = parts[0].clone();
            for p in &parts[1..] {
                if p.len() != rank {
                    return Err(rank_err(format!("concat of rank {} and {}", rank, p.len())));
                }
                for (i, (a, b)) in shape.iter().zip(p.iter()).enumerate() {
                    if i != axis && a != b {
                        return Err(rank_err(format!("concat dim {i} differs: {a} vs {b}")));
                    }
                }
                shape[axis] = &shape[axis] + &p[axis];
            }
            let value = if node.op == Op::Concat && rank == 1 {
                vals.iter().map(|v| v.cloned()).collect::<Option<Vec<_>>>().map(|vs| vs.concat())
            } else {
                None
            };
            Ok((shape, value))
        }
        Op::Slice => {
            let (starts, ends, axes) = (attr_ints(node, "starts")?, attr_ints(node, "ends")?, attr_ints(node, "axes")?);
            if starts.len() != ends.len() || starts.len() != axes.len() {
                return Err(ShapeError::InvalidAttr { node: node.id, reason: "starts/ends/axes lengths differ".into() });
            }
            if node.attr_ints("steps").is_some_and(|s| s.iter().any(|&x| x != 1)) {
                return Err(ShapeError::InvalidAttr { node: node.id, reason: "only unit steps are supported".into() });
            }
            let mut shape = ins[0].clone();
            let mut ranges = Vec::new();
            for ((&s, &e), &a) in starts.iter().zip(ends).zip(axes) {
                let axis = norm_axis(node, a, shape.len())?;
                let d = &ins[0][axis];
                let (lo, hi) = (slice_bound(node, s, d)?, slice_bound(node, e, d)?);
                let extent = &hi - &lo;
                shape[axis] = match extent.compare(&SymExpr::zero()) {
                    CompareResult::Equal | CompareResult::ProvablyGE => extent,
                    CompareResult::ProvablyLE => SymExpr::zero(),
                    CompareResult::Unknown => {
                        return Err(ShapeError::UnsupportedDynamicAttr {
                            node: node.id,
                            reason: format!("slice extent {extent} has unknown sign"),
                        })
                    }
                };
                ranges.push((lo.as_constant(), hi.as_constant()));
            }
            let value = match (vals[0], ranges.as_slice()) {
                (Some(v), [(Some(lo), Some(hi))]) if ins[0].len() == 1 => {
                    Some(v[*lo as usize..(*hi).max(*lo) as usize].to_vec())
                }
                _ => None,
            };
            Ok((shape, value))
        }
        Op::Reshape => {
            let target = vals[1].ok_or_else(|| ShapeError::UnsupportedDynamicAttr {
                node: node.id,
                reason: format!("reshape target `{}` is not symbolically known", node.inputs[1]),
            })?;
            let input = ins[0];
            let mut shape = Vec::with_capacity(target.len());
            let mut infer_at = None;
            for (i, t) in target.iter().enumerate() {
                match t.as_constant() {
                    Some(0) => shape.push(
                        input.get(i).cloned().ok_or_else(|| rank_err(format!("target 0 at {i} copies a missing dim")))?,
                    ),
                    Some(-1) if infer_at.is_none() => {
                        infer_at = Some(i);
                        shape.push(SymExpr::one());
                    }
                    Some(v) if v < 0 => {
                        return Err(ShapeError::InvalidAttr { node: node.id, reason: format!("reshape target entry {v}") })
                    }
                    _ => shape.push(t.clone()),
                }
            }
            let total = SymExpr::product(input.iter());
            let known = SymExpr::product(shape.iter());
            match infer_at {
                Some(i) => {
                    shape[i] = total.div_exact(&known).map_err(|e| ShapeError::NonDivisibleReshape {
                        node: node.id,
                        reason: match e {
                            DivError::ZeroDivisor => "target has a zero extent".into(),
                            DivError::NotDivisible => format!("{total} is not divisible by {known}"),
                        },
                    })?;
                }
                None if known != total => {
                    return Err(ShapeError::NonDivisibleReshape {
                        node: node.id,
                        reason: format!("element count {total} does not match target {known}"),
                    })
                }
                None => {}
            }
            let value = if shape.len() <= 1 { vals[0].cloned() } else { None };
            Ok((shape, value))
        }
        Op::Transpose => {
            let perm = attr_ints(node, "perm")?;
            let rank = ins[0].len();
            let mut seen = vec![false; rank];
            if perm.len() != rank {
                return Err(rank_err(format!("perm of length {} for rank {rank}", perm.len())));
            }
            for &p in perm {
                match usize::try_from(p).ok().filter(|&p| p < rank) {
                    Some(p) if !seen[p] => seen[p] = true,
                    _ => return Err(ShapeError::InvalidAttr { node: node.id, reason: format!("bad perm {perm:?}") }),
                }
            }
            Ok((perm.iter().map(|&p| ins[0][p as usize].clone()).collect(), None))
        }
        Op::Unsqueeze => {
            let axes = attr_ints(node, "axes")?;
            let out_rank = ins[0].len() + axes.len();
            let mut at: Vec<usize> = axes.iter().map(|&a| norm_axis(node, a, out_rank)).collect::<Result<_, _>>()?;
            at.sort_unstable();
            at.dedup();
            if at.len() != axes.len() {
                return Err(ShapeError::InvalidAttr { node: node.id, reason: "duplicate unsqueeze axis".into() });
            }
            let mut rest = ins[0].iter();
            let shape = (0..out_rank)
                .map(|i| if at.contains(&i) { SymExpr::one() } else { rest.next().expect("rank counted").clone() })
                .collect();
            Ok((shape, vals[0].cloned()))
        }
        Op::Squeeze => {
            let axes = attr_ints(node, "axes")?;
            let at: Vec<usize> = axes.iter().map(|&a| norm_axis(node, a, ins[0].len())).collect::<Result<_, _>>()?;
            for &a in &at {
                if ins[0][a] != SymExpr::one() {
                    return Err(rank_err(format!("cannot squeeze dim {a} of extent {}", ins[0][a])));
                }
            }
            let shape = ins[0].iter().enumerate().filter(|(i, _)| !at.contains(i)).map(|(_, d)| d.clone()).collect();
            Ok((shape, vals[0].cloned()))
        }
        Op::ReduceMean => {
            let axes = attr_ints(node, "axes")?;
            let keep = attr_int(node, "keepdims")? != 0;
            let at: Vec<usize> = axes.iter().map(|&a| norm_axis(node, a, ins[0].len())).collect::<Result<_, _>>()?;
            let mut shape = Vec::new();
            for (i, d) in ins[0].iter().enumerate() {
                if !at.contains(&i) {
                    shape.push(d.clone());
                } else if keep {
                    shape.push(SymExpr::one());
                }
            }
            Ok((shape, None))
        }
        Op::MatMul | Op::MatMulQuant => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() < 2 || b.len() < 2 {
                return Err(rank_err("matmul operands need rank >= 2".into()));
            }
            if node.op == Op::MatMulQuant && b.len() != 2 {
                return Err(rank_err("quantized weight must be [K, N]".into()));
            }
            let (ka, kb) = (&a[a.len() - 1], &b[b.len() - 2]);
            if ka != kb {
                return Err(rank_err(format!("inner dims differ: {ka} vs {kb}")));
            }
            let mut shape = broadcast(node, &a[..a.len() - 2], &b[..b.len() - 2])?;
            shape.push(a[a.len() - 2].clone());
            shape.push(b[b.len() - 1].clone());
            Ok((shape, None))
        }
        Op::RMSNorm | Op::LayerNorm => {
            let last = ins[0].last().ok_or_else(|| rank_err("normalizing a scalar".into()))?;
            for w in &ins[1..] {
                if w.len() != 1 || &w[0] != last {
                    return Err(ShapeError::BroadcastError {
                        node: node.id,
                        reason: format!("affine parameter {} does not match last dim {last}", fmt_shape(w)),
                    });
                }
            }
            Ok((ins[0].clone(), None))
        }
    }
}
