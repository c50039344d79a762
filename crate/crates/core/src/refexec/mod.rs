//! Reference executor: a compiled session with preallocated storage and
//! in-place KV caches, a naive interpreter used as its oracle, and the
//! padded greedy decode loop that drives either.

mod decode;
pub mod kernels;
mod naive;
mod session;

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;

use crate::graphir::weights::{WeightData, WeightStore, WeightTensor};
use crate::graphir::{AttrValue, DType, Graph, GraphError, Op, TensorKind};
use crate::kvcache::KvError;
use crate::memplan::MemPlanError;
use crate::quantfp4::{quantize_weight, QuantError, QuantizedWeight, Scheme};
use crate::shapeinfer::ShapeError;

pub use decode::{argmax, causal_mask, decode_mask, generate, padded_len, Engine, Generation, StepInput, StepRecord, StepReport};
pub use kernels::{matmul_2d, matmul_path, matmul_quant, KernelStats, MatmulPath, Scratch};
pub use naive::{NaiveSession, Tensor, TensorData};
pub use session::Session;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("node {node}: {reason}")]
    ShapeMismatch { node: i64, reason: String },
    #[error("input `{name}`: {reason}")]
    InputMismatch { name: String, reason: String },
    #[error("scheme unsupported: {0}")]
    SchemeUnsupported(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("graph is not a decoder: {0}")]
    NotADecoder(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    MemPlan(#[from] MemPlanError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Observable work done by a session, cumulative since construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    /// Times the symbol bindings (and so every shape) changed.
    pub shape_updates: u64,
    /// Shape-computing nodes actually run.
    pub shape_ops_executed: u64,
    /// Host to device handoffs.
    pub sync_points: u64,
    /// Tensor storage allocations.
    pub allocations: u64,
    /// Bytes of already cached KV entries copied to build a new cache.
    pub kv_copy_bytes: u64,
}

/// Borrowed input data for one run.
#[derive(Debug, Clone, Copy)]
pub enum Feed<'a> {
    F32(&'a [f32]),
    I64(&'a [i64]),
}

impl Feed<'_> {
    pub fn len(&self) -> usize {
        match self {
            Feed::F32(v) => v.len(),
            Feed::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub scheme: Scheme,
    pub n: u8,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    /// Decode-time padding granularity for the total length.
    pub pad: usize,
    pub fuse: bool,
    pub fold: bool,
    pub quant: Option<QuantConfig>,
    /// Round every float activation through binary16 after each op.
    pub f16_storage: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions { pad: 64, fuse: true, fold: true, quant: None, f16_storage: false }
    }
}

/// Rewrites every `MatMul` whose right operand is a 2-D float weight into
/// `MatMulQuant`, and quantizes those weights.
pub fn quantize_matmul_weights(
    g: &Graph,
    weights: &WeightStore,
    cfg: &QuantConfig,
) -> Result<(Graph, IndexMap<String, QuantizedWeight>), ExecError> {
    let consumers = g.consumers();
    let mut out = g.clone();
    let mut quant = IndexMap::new();
    let dtype = match cfg.scheme {
        Scheme::E0M4 => DType::U4E0M4,
        Scheme::Int4 => DType::U4Int4,
    };
    for node in out.nodes.iter_mut().filter(|n| n.op == Op::MatMul) {
        let name = node.inputs[1].clone();
        let Some(t) = g.tensor(&name).filter(|t| t.kind == TensorKind::Weight && t.dtype == DType::F32) else {
            continue;
        };
        let Some(w) = weights.get(&name).filter(|w| w.shape.len() == 2) else {
            continue;
        };
        let only_matmuls = consumers[name.as_str()].iter().all(|&c| g.nodes[c].op == Op::MatMul && g.nodes[c].inputs[1] == name);
        if !only_matmuls || t.shape.as_ref().is_some_and(|s| s.len() != 2) {
            continue;
        }
        if !quant.contains_key(&name) {
            let data = w.as_f32().expect("checked dtype");
            let q = quantize_weight(data, w.shape[0], w.shape[1], cfg.scheme, cfg.n, cfg.group_size)?;
            quant.insert(name.clone(), q);
        }
        node.op = Op::MatMulQuant;
        node.attrs.insert("group_size".into(), AttrValue::Int(cfg.group_size as i64));
        node.attrs.insert("scheme".into(), AttrValue::Str(cfg.scheme.name().into()));
        node.attrs.insert("n".into(), AttrValue::Int(cfg.n as i64));
    }
    for name in quant.keys() {
        out.tensors.get_mut(name).expect("quantized weights exist").dtype = dtype;
    }
    Ok((out, quant))
}

/// A copy of `weights` with every quantized tensor replaced by its
/// dequantized float values.
pub fn dequantized_store(weights: &WeightStore, quant: &IndexMap<String, QuantizedWeight>) -> WeightStore {
    let mut out = weights.clone();
    for (name, q) in quant {
        out.insert(name, WeightTensor::f32(vec![q.k, q.cols], q.dequantize()));
    }
    out
}

/// Float view of a stored weight, widening binary16.
pub(crate) fn weight_as_f32(w: &WeightTensor) -> Option<Vec<f32>> {
    match &w.data {
        WeightData::F32(v) => Some(v.clone()),
        WeightData::F16(v) => Some(v.iter().map(|&b| crate::quantfp4::f16_to_f32(crate::quantfp4::Half(b))).collect()),
        WeightData::I64(_) => None,
    }
}
