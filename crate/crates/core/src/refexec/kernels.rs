//! Reference operator semantics over flat row-major buffers.
//!
//! Every kernel accumulates in F32 in a fixed sequential order, so fused
//! and unfused forms of the same computation agree bit for bit.

use super::ExecError;
use crate::graphir::{DType, NodeSpec, Op};
use crate::quantfp4::{f16_to_f32, f32_to_f16, QuantizedWeight};
use crate::shapeinfer::{FusedStep, StepArg};

pub const MAX_RANK: usize = 8;

#[derive(Debug, Clone, Copy)]
pub enum Data<'a> {
    F32(&'a [f32]),
    I64(&'a [i64]),
    Quant(&'a QuantizedWeight),
}

#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub shape: &'a [usize],
    pub data: Data<'a>,
}

impl<'a> Input<'a> {
    pub fn f32(&self, node: &NodeSpec) -> Result<&'a [f32], ExecError> {
        match self.data {
            Data::F32(v) => Ok(v),
            _ => Err(mismatch(node, "expected a float operand")),
        }
    }

    pub fn i64(&self, node: &NodeSpec) -> Result<&'a [i64], ExecError> {
        match self.data {
            Data::I64(v) => Ok(v),
            _ => Err(mismatch(node, "expected an integer operand")),
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub enum Out<'a> {
    F32(&'a mut [f32]),
    I64(&'a mut [i64]),
}

/// Storage class of a tensor at run time.
pub fn is_int(dtype: DType) -> bool {
    matches!(dtype, DType::I64 | DType::Bool)
}

/// Per-kernel bookkeeping the tests observe.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub prefill_matmuls: u64,
    pub decode_matmuls: u64,
    pub quant_matmuls: u64,
    /// Largest dequantized tile held at once, in bytes.
    pub peak_quant_scratch: usize,
}

/// Reusable buffers for fused dequantization.
#[derive(Debug, Default)]
pub struct Scratch {
    tile: Vec<f32>,
    column: Vec<f32>,
}

impl Scratch {
    pub fn reserve_for(&mut self, q: &QuantizedWeight) {
        let tile = q.group_size * q.cols;
        if self.tile.len() < tile {
            self.tile.resize(tile, 0.0);
        }
        if self.column.len() < q.group_size {
            self.column.resize(q.group_size, 0.0);
        }
    }
}

pub fn mismatch(node: &NodeSpec, reason: impl Into<String>) -> ExecError {
    ExecError::ShapeMismatch { node: node.id, reason: reason.into() }
}

fn axis_of(node: &NodeSpec, key: &str, rank: usize) -> Result<usize, ExecError> {
    let a = node.attr_int(key).ok_or_else(|| mismatch(node, format!("missing `{key}`")))?;
    norm(node, a, rank)
}

fn norm(node: &NodeSpec, a: i64, rank: usize) -> Result<usize, ExecError> {
    let r = rank as i64;
    let v = if a < 0 { a + r } else { a };
    if v < 0 || v >= r.max(1) {
        return Err(mismatch(node, format!("axis {a} out of range for rank {rank}")));
    }
    Ok(v as usize)
}

fn strides(shape: &[usize]) -> [usize; MAX_RANK] {
    let mut s = [0; MAX_RANK];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` right-aligned to `out_rank`, zero where broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> [usize; MAX_RANK] {
    let own = strides(shape);
    let mut s = [0; MAX_RANK];
    let off = out.len() - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 && out[off + i] != 1 { 0 } else { own[i] };
    }
    s
}

/// Walks a row-major index over `shape`, tracking one offset per stride set.
struct Walker<const K: usize> {
    shape: [usize; MAX_RANK],
    rank: usize,
    idx: [usize; MAX_RANK],
    strides: [[usize; MAX_RANK]; K],
    offsets: [usize; K],
}

impl<const K: usize> Walker<K> {
    fn new(shape: &[usize], strides: [[usize; MAX_RANK]; K]) -> Self {
        let mut s = [0; MAX_RANK];
        s[..shape.len()].copy_from_slice(shape);
        Walker { shape: s, rank: shape.len(), idx: [0; MAX_RANK], strides, offsets: [0; K] }
    }

    fn advance(&mut self) {
        for d in (0..self.rank).rev() {
            self.idx[d] += 1;
            for k in 0..K {
                self.offsets[k] += self.strides[k][d];
            }
            if self.idx[d] < self.shape[d] {
                return;
            }
            for k in 0..K {
                self.offsets[k] -= self.strides[k][d] * self.shape[d];
            }
            self.idx[d] = 0;
        }
    }
}

fn check_rank(node: &NodeSpec, shapes: &[&[usize]]) -> Result<(), ExecError> {
    if shapes.iter().any(|s| s.len() > MAX_RANK) {
        return Err(mismatch(node, format!("rank above {MAX_RANK}")));
    }
    Ok(())
}

pub fn unary(op: Op, x: f32) -> f32 {
    match op {
        Op::Neg => -x,
        Op::Sqrt => x.sqrt(),
        Op::Silu => x / (1.0 + (-x).exp()),
        Op::Gelu => {
            let c = (2.0f32 / std::f32::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        Op::Identity => x,
        _ => unreachable!("{op} is not unary"),
    }
}

pub fn binary(op: Op, a: f32, b: f32) -> f32 {
    match op {
        Op::Add => a + b,
        Op::Sub => a - b,
        Op::Mul => a * b,
        Op::Div => a / b,
        // Squaring is a multiply so fused norms reproduce it exactly.
        Op::Pow if b == 2.0 => a * a,
        Op::Pow => a.powf(b),
        _ => unreachable!("{op} is not binary"),
    }
}

fn binary_i64(node: &NodeSpec, a: i64, b: i64) -> Result<i64, ExecError> {
    let r = match node.op {
        Op::Add => a.checked_add(b),
        Op::Sub => a.checked_sub(b),
        Op::Mul => a.checked_mul(b),
        Op::Div => a.checked_div(b),
        Op::Pow => u32::try_from(b).ok().and_then(|e| a.checked_pow(e)),
        _ => None,
    };
    r.ok_or_else(|| mismatch(node, format!("integer {} of {a} and {b} failed", node.op)))
}

/// Result shape from concrete operand shapes and integer values. Used by
/// the interpreter that executes every node; the compiled session reads
/// shapes from its resolved plan instead.
pub fn output_shape(node: &NodeSpec, ins: &[Input]) -> Result<Vec<usize>, ExecError> {
    let shapes: Vec<&[usize]> = ins.iter().map(|i| i.shape).collect();
    check_rank(node, &shapes)?;
    let bcast = |a: &[usize], b: &[usize]| -> Result<Vec<usize>, ExecError> {
        let rank = a.len().max(b.len());
        (0..rank)
            .map(|i| {
                let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
                let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
                match (da, db) {
                    _ if da == db => Ok(da),
                    (1, d) | (d, 1) => Ok(d),
                    _ => Err(mismatch(node, format!("cannot broadcast {a:?} with {b:?}"))),
                }
            })
            .collect()
    };
    let x = shapes[0];
    match node.op {
        Op::Identity | Op::Cast | Op::Neg | Op::Sqrt | Op::Silu | Op::Gelu | Op::Softmax => Ok(x.to_vec()),
        Op::RMSNorm | Op::LayerNorm => Ok(x.to_vec()),
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => bcast(x, shapes[1]),
        Op::FusedElementwise => shapes[1..].iter().try_fold(x.to_vec(), |acc, s| bcast(&acc, s)),
        Op::Shape => Ok(vec![x.len()]),
        Op::Gather => {
            let axis = axis_of(node, "axis", x.len())?;
            let mut s = x[..axis].to_vec();
            s.extend_from_slice(shapes[1]);
            s.extend_from_slice(&x[axis + 1..]);
            Ok(s)
        }
        Op::Concat => {
            let axis = axis_of(node, "axis", x.len())?;
            let mut s = x.to_vec();
            for p in &shapes[1..] {
                if p.len() != x.len() || (0..x.len()).any(|i| i != axis && p[i] != x[i]) {
                    return Err(mismatch(node, format!("concat of {x:?} and {p:?}")));
                }
                s[axis] += p[axis];
            }
            Ok(s)
        }
        Op::KVAppend => Err(mismatch(node, "in-place cache append needs a session")),
        Op::Slice => Ok(slice_plan(node, x)?.1),
        Op::Reshape => {
            let target = ins[1].i64(node)?;
            let total: usize = x.iter().product();
            let mut s = Vec::with_capacity(target.len());
            let mut infer = None;
            for (i, &t) in target.iter().enumerate() {
                match t {
                    0 => s.push(*x.get(i).ok_or_else(|| mismatch(node, "target 0 copies a missing dim"))?),
                    -1 if infer.is_none() => {
                        infer = Some(i);
                        s.push(1);
                    }
                    t if t < 0 => return Err(mismatch(node, format!("reshape target entry {t}"))),
                    t => s.push(t as usize),
                }
            }
            let known: usize = s.iter().product();
            if let Some(i) = infer {
                if known == 0 || !total.is_multiple_of(known) {
                    return Err(mismatch(node, format!("{total} elements into {target:?}")));
                }
                s[i] = total / known;
            } else if known != total {
                return Err(mismatch(node, format!("{total} elements into {target:?}")));
            }
            Ok(s)
        }
        Op::Transpose => {
            let perm = node.attr_ints("perm").ok_or_else(|| mismatch(node, "missing `perm`"))?;
            if perm.len() != x.len() {
                return Err(mismatch(node, "perm rank"));
            }
            perm.iter().map(|&p| x.get(p as usize).copied().ok_or_else(|| mismatch(node, "bad perm"))).collect()
        }
        Op::Unsqueeze => {
            let axes = node.attr_ints("axes").ok_or_else(|| mismatch(node, "missing `axes`"))?;
            let rank = x.len() + axes.len();
            let at: Vec<usize> = axes.iter().map(|&a| norm(node, a, rank)).collect::<Result<_, _>>()?;
            let mut rest = x.iter();
            Ok((0..rank).map(|i| if at.contains(&i) { 1 } else { *rest.next().unwrap_or(&1) }).collect())
        }
        Op::Squeeze => {
            let axes = node.attr_ints("axes").ok_or_else(|| mismatch(node, "missing `axes`"))?;
            let at: Vec<usize> = axes.iter().map(|&a| norm(node, a, x.len())).collect::<Result<_, _>>()?;
            if at.iter().any(|&a| x[a] != 1) {
                return Err(mismatch(node, format!("squeeze {axes:?} of {x:?}")));
            }
            Ok(x.iter().enumerate().filter(|(i, _)| !at.contains(i)).map(|(_, &d)| d).collect())
        }
        Op::ReduceMean => {
            let axes = node.attr_ints("axes").ok_or_else(|| mismatch(node, "missing `axes`"))?;
            let keep = node.attr_int("keepdims").unwrap_or(1) != 0;
            let at: Vec<usize> = axes.iter().map(|&a| norm(node, a, x.len())).collect::<Result<_, _>>()?;
            Ok(x.iter()
                .enumerate()
                .filter_map(|(i, &d)| match (at.contains(&i), keep) {
                    (false, _) => Some(d),
                    (true, true) => Some(1),
                    (true, false) => None,
                })
                .collect())
        }
        Op::MatMul | Op::MatMulQuant => {
            let w = shapes[1];
            if x.len() < 2 || w.len() < 2 || x[x.len() - 1] != w[w.len() - 2] {
                return Err(mismatch(node, format!("matmul of {x:?} and {w:?}")));
            }
            let mut s = bcast(&x[..x.len() - 2], &w[..w.len() - 2])?;
            s.push(x[x.len() - 2]);
            s.push(w[w.len() - 1]);
            Ok(s)
        }
    }
}

/// Normalized (axis, start) per sliced axis, and the output shape.
type SlicePlan = (Vec<(usize, usize)>, Vec<usize>);

fn slice_plan(node: &NodeSpec, x: &[usize]) -> Result<SlicePlan, ExecError> {
    let get = |k: &str| node.attr_ints(k).ok_or_else(|| mismatch(node, format!("missing `{k}`")));
    let (starts, ends, axes) = (get("starts")?, get("ends")?, get("axes")?);
    let mut out = x.to_vec();
    let mut plan = Vec::new();
    for ((&s, &e), &a) in starts.iter().zip(ends).zip(axes) {
        let axis = norm(node, a, x.len())?;
        let d = x[axis] as i64;
        let clamp = |v: i64| if v < 0 { v + d } else { v.min(d) }.clamp(0, d);
        let (lo, hi) = (clamp(s), clamp(e));
        out[axis] = (hi - lo).max(0) as usize;
        plan.push((axis, lo as usize));
    }
    Ok((plan, out))
}

/// Runs one node. `out` must hold exactly `numel(out_shape)` elements.
pub fn compute(
    node: &NodeSpec,
    steps: Option<&[FusedStep]>,
    ins: &[Input],
    out_shape: &[usize],
    out: Out,
    stats: &mut KernelStats,
    scratch: &mut Scratch,
) -> Result<(), ExecError> {
    let shapes: Vec<&[usize]> = ins.iter().map(|i| i.shape).chain(std::iter::once(out_shape)).collect();
    check_rank(node, &shapes)?;
    match (node.op, out) {
        (Op::Shape, Out::I64(o)) => {
            for (d, v) in o.iter_mut().zip(ins[0].shape) {
                *d = *v as i64;
            }
            Ok(())
        }
        (Op::Identity | Op::Reshape | Op::Squeeze | Op::Unsqueeze, out) => copy_any(node, &ins[0], out),
        (Op::Cast, out) => cast(node, &ins[0], out),
        (Op::Gather, out) => gather(node, ins, out_shape, out),
        (Op::Concat, out) => concat(node, ins, out_shape, out),
        (Op::Slice, out) => slice(node, &ins[0], out_shape, out),
        (Op::Transpose, out) => transpose(node, &ins[0], out_shape, out),
        (Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow, Out::F32(o)) => {
            let (a, b) = (ins[0].f32(node)?, ins[1].f32(node)?);
            let mut w = Walker::new(out_shape, [broadcast_strides(ins[0].shape, out_shape), broadcast_strides(ins[1].shape, out_shape)]);
            for v in o.iter_mut() {
                *v = binary(node.op, a[w.offsets[0]], b[w.offsets[1]]);
                w.advance();
            }
            Ok(())
        }
        (Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow, Out::I64(o)) => {
            let (a, b) = (ins[0].i64(node)?, ins[1].i64(node)?);
            let mut w = Walker::new(out_shape, [broadcast_strides(ins[0].shape, out_shape), broadcast_strides(ins[1].shape, out_shape)]);
            for v in o.iter_mut() {
                *v = binary_i64(node, a[w.offsets[0]], b[w.offsets[1]])?;
                w.advance();
            }
            Ok(())
        }
        (Op::Neg, Out::I64(o)) => {
            for (d, s) in o.iter_mut().zip(ins[0].i64(node)?) {
                *d = -*s;
            }
            Ok(())
        }
        (Op::Neg | Op::Sqrt | Op::Silu | Op::Gelu, Out::F32(o)) => {
            for (d, s) in o.iter_mut().zip(ins[0].f32(node)?) {
                *d = unary(node.op, *s);
            }
            Ok(())
        }
        (Op::FusedElementwise, Out::F32(o)) => {
            let steps = steps.ok_or_else(|| mismatch(node, "fused node without parsed steps"))?;
            fused(node, steps, ins, out_shape, o)
        }
        (Op::ReduceMean, Out::F32(o)) => reduce_mean(node, &ins[0], o),
        (Op::Softmax, Out::F32(o)) => softmax(node, &ins[0], o),
        (Op::RMSNorm, Out::F32(o)) => norm_rows(node, ins, o, false),
        (Op::LayerNorm, Out::F32(o)) => norm_rows(node, ins, o, true),
        (Op::MatMul, Out::F32(o)) => matmul_nd(node, &ins[0], &ins[1], out_shape, o, stats),
        (Op::MatMulQuant, Out::F32(o)) => {
            let Data::Quant(q) = ins[1].data else {
                return Err(ExecError::SchemeUnsupported(format!("node {}: weight is not quantized", node.id)));
            };
            let a = ins[0].f32(node)?;
            let rows = ins[0].numel() / q.k.max(1);
            if ins[0].shape.last() != Some(&q.k) {
                return Err(mismatch(node, format!("activation {:?} against quantized [{}, {}]", ins[0].shape, q.k, q.cols)));
            }
            matmul_quant(a, rows, q, o, stats, scratch);
            Ok(())
        }
        (op, _) => Err(mismatch(node, format!("{op} cannot produce this output dtype"))),
    }
}

fn copy_any(node: &NodeSpec, x: &Input, out: Out) -> Result<(), ExecError> {
    match out {
        Out::F32(o) => o.copy_from_slice(x.f32(node)?),
        Out::I64(o) => o.copy_from_slice(x.i64(node)?),
    }
    Ok(())
}

fn cast(node: &NodeSpec, x: &Input, out: Out) -> Result<(), ExecError> {
    let to = node.attr_str("to").and_then(DType::from_name).ok_or_else(|| mismatch(node, "bad `to`"))?;
    match (x.data, out) {
        (Data::F32(s), Out::F32(o)) => {
            for (d, v) in o.iter_mut().zip(s) {
                *d = if to == DType::F16 { f16_to_f32(f32_to_f16(*v)) } else { *v };
            }
        }
        (Data::F32(s), Out::I64(o)) => {
            for (d, v) in o.iter_mut().zip(s) {
                *d = if to == DType::Bool { (*v != 0.0) as i64 } else { *v as i64 };
            }
        }
        (Data::I64(s), Out::F32(o)) => {
            for (d, v) in o.iter_mut().zip(s) {
                *d = *v as f32;
            }
        }
        (Data::I64(s), Out::I64(o)) => {
            for (d, v) in o.iter_mut().zip(s) {
                *d = if to == DType::Bool { (*v != 0) as i64 } else { *v };
            }
        }
        _ => return Err(mismatch(node, "cannot cast a quantized tensor")),
    }
    Ok(())
}

/// Copies along axis-major chunks; shared by gather and concat.
fn gather(node: &NodeSpec, ins: &[Input], out_shape: &[usize], out: Out) -> Result<(), ExecError> {
    let x = ins[0].shape;
    let axis = axis_of(node, "axis", x.len())?;
    let idx = ins[1].i64(node)?;
    let outer: usize = x[..axis].iter().product();
    let inner: usize = x[axis + 1..].iter().product();
    let extent = x[axis] as i64;
    debug_assert_eq!(out_shape.iter().product::<usize>(), outer * idx.len() * inner);
    let pick = |i: i64| -> Result<usize, ExecError> {
        let j = if i < 0 { i + extent } else { i };
        if !(0..extent).contains(&j) {
            return Err(mismatch(node, format!("gather index {i} out of range for extent {extent}")));
        }
        Ok(j as usize)
    };
    macro_rules! run {
        ($src:expr, $o:expr) => {{
            for o in 0..outer {
                for (k, &i) in idx.iter().enumerate() {
                    let j = pick(i)?;
                    let src = &$src[(o * x[axis] + j) * inner..][..inner];
                    $o[(o * idx.len() + k) * inner..][..inner].copy_from_slice(src);
                }
            }
        }};
    }
    match (ins[0].data, out) {
        (Data::F32(s), Out::F32(o)) => run!(s, o),
        (Data::I64(s), Out::I64(o)) => run!(s, o),
        _ => return Err(mismatch(node, "gather dtype")),
    }
    Ok(())
}

fn concat(node: &NodeSpec, ins: &[Input], out_shape: &[usize], out: Out) -> Result<(), ExecError> {
    let axis = axis_of(node, "axis", out_shape.len())?;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let row = out_shape[axis] * inner;
    macro_rules! run {
        ($o:expr, $get:ident) => {{
            let mut at = 0;
            for p in ins {
                let src = p.$get(node)?;
                let chunk = p.shape[axis] * inner;
                for o in 0..outer {
                    $o[o * row + at..][..chunk].copy_from_slice(&src[o * chunk..][..chunk]);
                }
                at += chunk;
            }
        }};
    }
    match out {
        Out::F32(o) => run!(o, f32),
        Out::I64(o) => run!(o, i64),
    }
    Ok(())
}

fn slice(node: &NodeSpec, x: &Input, out_shape: &[usize], out: Out) -> Result<(), ExecError> {
    let (plan, _) = slice_plan(node, x.shape)?;
    let st = strides(x.shape);
    let base: usize = plan.iter().map(|&(a, s)| s * st[a]).sum();
    let mut w = Walker::new(out_shape, [strides_for(x.shape, &st)]);
    macro_rules! run {
        ($s:expr, $o:expr) => {{
            for v in $o.iter_mut() {
                *v = $s[base + w.offsets[0]];
                w.advance();
            }
        }};
    }
    match (x.data, out) {
        (Data::F32(s), Out::F32(o)) => run!(s, o),
        (Data::I64(s), Out::I64(o)) => run!(s, o),
        _ => return Err(mismatch(node, "slice dtype")),
    }
    Ok(())
}

fn strides_for(shape: &[usize], st: &[usize; MAX_RANK]) -> [usize; MAX_RANK] {
    let mut s = [0; MAX_RANK];
    s[..shape.len()].copy_from_slice(&st[..shape.len()]);
    s
}

fn transpose(node: &NodeSpec, x: &Input, out_shape: &[usize], out: Out) -> Result<(), ExecError> {
    let perm = node.attr_ints("perm").ok_or_else(|| mismatch(node, "missing `perm`"))?;
    let st = strides(x.shape);
    let mut moved = [0; MAX_RANK];
    for (i, &p) in perm.iter().enumerate() {
        moved[i] = st[p as usize];
    }
    let mut w = Walker::new(out_shape, [moved]);
    macro_rules! run {
        ($s:expr, $o:expr) => {{
            for v in $o.iter_mut() {
                *v = $s[w.offsets[0]];
                w.advance();
            }
        }};
    }
    match (x.data, out) {
        (Data::F32(s), Out::F32(o)) => run!(s, o),
        (Data::I64(s), Out::I64(o)) => run!(s, o),
        _ => return Err(mismatch(node, "transpose dtype")),
    }
    Ok(())
}

fn fused(node: &NodeSpec, steps: &[FusedStep], ins: &[Input], out_shape: &[usize], o: &mut [f32]) -> Result<(), ExecError> {
    const MAX_IN: usize = 8;
    const MAX_STEPS: usize = 16;
    if ins.len() > MAX_IN || steps.len() > MAX_STEPS || steps.is_empty() {
        return Err(mismatch(node, "fused chain too long"));
    }
    let mut data: [&[f32]; MAX_IN] = [&[]; MAX_IN];
    let mut st = [[0; MAX_RANK]; MAX_IN];
    for (k, i) in ins.iter().enumerate() {
        data[k] = i.f32(node)?;
        st[k] = broadcast_strides(i.shape, out_shape);
    }
    let mut w = Walker::new(out_shape, st);
    let mut vals = [0f32; MAX_STEPS];
    for v in o.iter_mut() {
        for (s, step) in steps.iter().enumerate() {
            let arg = |a: &StepArg| match *a {
                StepArg::Input(k) => data[k][w.offsets[k]],
                StepArg::Step(k) => vals[k],
            };
            vals[s] = match step.args.as_slice() {
                [x] => unary(step.op, arg(x)),
                [x, y] => binary(step.op, arg(x), arg(y)),
                _ => return Err(mismatch(node, "fused step arity")),
            };
        }
        *v = vals[steps.len() - 1];
        w.advance();
    }
    Ok(())
}

fn reduce_mean(node: &NodeSpec, x: &Input, o: &mut [f32]) -> Result<(), ExecError> {
    let s = x.f32(node)?;
    let axes = node.attr_ints("axes").ok_or_else(|| mismatch(node, "missing `axes`"))?;
    let rank = x.shape.len();
    let at: Vec<usize> = axes.iter().map(|&a| norm(node, a, rank)).collect::<Result<_, _>>()?;
    let mut reduced = x.shape.to_vec();
    for &a in &at {
        reduced[a] = 1;
    }
    let count: usize = at.iter().map(|&a| x.shape[a]).product();
    let own = strides(&reduced);
    let mut map = [0; MAX_RANK];
    for d in 0..rank {
        map[d] = if at.contains(&d) { 0 } else { own[d] };
    }
    o.fill(0.0);
    let mut w = Walker::new(x.shape, [map]);
    for v in s {
        o[w.offsets[0]] += *v;
        w.advance();
    }
    for v in o.iter_mut() {
        *v /= count as f32;
    }
    Ok(())
}

fn softmax(node: &NodeSpec, x: &Input, o: &mut [f32]) -> Result<(), ExecError> {
    let s = x.f32(node)?;
    let axis = axis_of(node, "axis", x.shape.len())?;
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    for a in 0..outer {
        for b in 0..inner {
            let at = |j: usize| (a * len + j) * inner + b;
            let mut max = f32::NEG_INFINITY;
            for j in 0..len {
                max = max.max(s[at(j)]);
            }
            let mut sum = 0.0f32;
            for j in 0..len {
                let e = (s[at(j)] - max).exp();
                o[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                o[at(j)] /= sum;
            }
        }
    }
    Ok(())
}

fn norm_rows(node: &NodeSpec, ins: &[Input], o: &mut [f32], centered: bool) -> Result<(), ExecError> {
    let x = ins[0].f32(node)?;
    let w = ins[1].f32(node)?;
    let b = if centered { Some(ins[2].f32(node)?) } else { None };
    let eps = node.attr_f64("eps").ok_or_else(|| mismatch(node, "missing `eps`"))? as f32;
    let d = *ins[0].shape.last().ok_or_else(|| mismatch(node, "normalizing a scalar"))?;
    if w.len() != d || b.is_some_and(|b| b.len() != d) {
        return Err(mismatch(node, "affine parameters do not match the last dim"));
    }
    let n = d as f32;
    for (row, out) in x.chunks_exact(d).zip(o.chunks_exact_mut(d)) {
        if centered {
            let mut sum = 0.0f32;
            for v in row {
                sum += *v;
            }
            let mean = sum / n;
            let mut sq = 0.0f32;
            for v in row {
                let c = *v - mean;
                sq += c * c;
            }
            let std = (sq / n + eps).sqrt();
            let b = b.expect("layer norm has a bias");
            for j in 0..d {
                out[j] = (row[j] - mean) / std * w[j] + b[j];
            }
        } else {
            let mut sq = 0.0f32;
            for v in row {
                sq += *v * *v;
            }
            let denom = (sq / n + eps).sqrt();
            for j in 0..d {
                out[j] = row[j] / denom * w[j];
            }
        }
    }
    Ok(())
}

/// Which matmul kernel a product of `m` rows runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatmulPath {
    Prefill,
    Decode,
}

pub fn matmul_path(m: usize) -> MatmulPath {
    if m == 1 {
        MatmulPath::Decode
    } else {
        MatmulPath::Prefill
    }
}

/// `[m, k] x [k, n]`. Both paths add products in ascending `k` per output,
/// so they agree with each other and with a plain triple loop bit for bit.
pub fn matmul_2d(a: &[f32], w: &[f32], m: usize, k: usize, n: usize, out: &mut [f32], stats: &mut KernelStats) {
    out[..m * n].fill(0.0);
    match matmul_path(m) {
        MatmulPath::Decode => {
            stats.decode_matmuls += 1;
            vecmat(&a[..k], w, n, &mut out[..n]);
        }
        MatmulPath::Prefill => {
            stats.prefill_matmuls += 1;
            // Four rows share each weight row load.
            const TILE: usize = 4;
            let mut r = 0;
            while r < m {
                let rows = TILE.min(m - r);
                for kk in 0..k {
                    let wrow = &w[kk * n..][..n];
                    for t in 0..rows {
                        let av = a[(r + t) * k + kk];
                        let orow = &mut out[(r + t) * n..][..n];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += av * wv;
                        }
                    }
                }
                r += rows;
            }
        }
    }
}

fn vecmat(a: &[f32], w: &[f32], n: usize, out: &mut [f32]) {
    for (kk, av) in a.iter().enumerate() {
        let wrow = &w[kk * n..][..n];
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += av * wv;
        }
    }
}

fn matmul_nd(node: &NodeSpec, a: &Input, w: &Input, out_shape: &[usize], o: &mut [f32], stats: &mut KernelStats) -> Result<(), ExecError> {
    let (ad, wd) = (a.f32(node)?, w.f32(node)?);
    let (ar, wr) = (a.shape.len(), w.shape.len());
    let (m, k, n) = (a.shape[ar - 2], a.shape[ar - 1], w.shape[wr - 1]);
    if w.shape[wr - 2] != k {
        return Err(mismatch(node, format!("inner dims {:?} x {:?}", a.shape, w.shape)));
    }
    let batch_shape = &out_shape[..out_shape.len() - 2];
    let batches: usize = batch_shape.iter().product();
    if wr == 2 {
        // Shared weight: fold batch into rows.
        matmul_2d(ad, wd, batches * m, k, n, o, stats);
        return Ok(());
    }
    let mut sa = broadcast_strides(&a.shape[..ar - 2], batch_shape);
    let mut sw = broadcast_strides(&w.shape[..wr - 2], batch_shape);
    for d in 0..batch_shape.len() {
        sa[d] *= m * k;
        sw[d] *= k * n;
    }
    let mut walk = Walker::new(batch_shape, [sa, sw]);
    for b in 0..batches {
        let (oa, ow) = (walk.offsets[0], walk.offsets[1]);
        matmul_2d(&ad[oa..oa + m * k], &wd[ow..ow + k * n], m, k, n, &mut o[b * m * n..][..m * n], stats);
        walk.advance();
    }
    Ok(())
}

/// `[rows, k] x dequantize(q)` without materializing more than one K-block
/// tile of the weight.
pub fn matmul_quant(a: &[f32], rows: usize, q: &QuantizedWeight, out: &mut [f32], stats: &mut KernelStats, scratch: &mut Scratch) {
    stats.quant_matmuls += 1;
    match matmul_path(rows) {
        MatmulPath::Decode => stats.decode_matmuls += 1,
        MatmulPath::Prefill => stats.prefill_matmuls += 1,
    }
    scratch.reserve_for(q);
    let (k, n) = (q.k, q.cols);
    out[..rows * n].fill(0.0);
    for block in 0..q.k_blocks() {
        let height = q.block_rows(block);
        let tile = &mut scratch.tile[..height * n];
        q.dequantize_block(block, tile, &mut scratch.column);
        stats.peak_quant_scratch = stats.peak_quant_scratch.max(tile.len() * 4);
        let k0 = block * q.group_size;
        for r in 0..rows {
            let orow = &mut out[r * n..][..n];
            for t in 0..height {
                let av = a[r * k + k0 + t];
                let wrow = &tile[t * n..][..n];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += av * wv;
                }
            }
        }
    }
}

/// Rounds every value through binary16 storage.
pub fn round_to_f16(v: &mut [f32]) {
    for x in v {
        *x = f16_to_f32(f32_to_f16(*x));
    }
}
