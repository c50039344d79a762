//! Preallocated per-layer KV arenas and the graph rewrite that writes new
//! cache entries into them in place.

use thiserror::Error;

use crate::graphir::{AttrValue, DType, Dim, Graph, NodeSpec, Op, TensorInfo, TensorKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("cache of {max_seq} tokens cannot hold {requested}")]
    CapacityExceeded { requested: usize, max_seq: usize },
    #[error("append at position {position} but {cur_len} tokens are cached")]
    PositionMismatch { position: usize, cur_len: usize },
    #[error("graph declares kv pairs but no {0}")]
    MetadataMissing(&'static str),
    #[error("kv pair `{past}`: {reason}")]
    PatternNotFound { past: String, reason: String },
    #[error("invalid arena layout: {0}")]
    InvalidLayout(String),
    #[error("new entries hold {got} values, expected {expected}")]
    ShapeMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layout {
    Valid,
    /// Permutation that moves the sequence axis to the first non-1 position.
    NeedsTranspose(Vec<usize>),
}

/// A cache layout can be bound to an arena only if the sequence axis is the
/// first axis whose extent is not 1, so every token range is contiguous.
pub fn validate_layout(shape: &[Dim], seq_dim: usize) -> Layout {
    let first_non_one = shape.iter().position(|d| !d.is_literal_one()).unwrap_or(seq_dim);
    if first_non_one >= seq_dim {
        return Layout::Valid;
    }
    let mut perm: Vec<usize> = (0..shape.len()).filter(|&i| i != seq_dim).collect();
    perm.insert(first_non_one, seq_dim);
    Layout::NeedsTranspose(perm)
}

/// Sequence axis of a cache tensor: its first symbolic extent.
pub fn seq_axis(shape: &[Dim]) -> Option<usize> {
    shape.iter().position(|d| matches!(d, Dim::Sym(_)))
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// A contiguous token range of an arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubTensorView {
    /// Element offset into the arena storage.
    pub offset: usize,
    pub start: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl SubTensorView {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Storage for one layer's cache, sized for the maximum sequence length.
#[derive(Debug, Clone)]
pub struct CacheArena {
    pub layer: usize,
    dims: Vec<usize>,
    seq_axis: usize,
    trailing: usize,
    data: Vec<f32>,
    cur_len: usize,
}

impl CacheArena {
    /// `dims` is the full arena shape, its `seq_axis` extent being the
    /// maximum sequence length.
    pub fn new(layer: usize, dims: Vec<usize>, seq_axis: usize) -> Result<Self, KvError> {
        if seq_axis >= dims.len() {
            return Err(KvError::InvalidLayout(format!("sequence axis {seq_axis} of rank {}", dims.len())));
        }
        if dims[..seq_axis].iter().any(|&d| d != 1) {
            return Err(KvError::InvalidLayout(format!("{dims:?} has non-1 extents before axis {seq_axis}")));
        }
        let trailing = dims[seq_axis + 1..].iter().product();
        let data = vec![0.0; dims.iter().product()];
        Ok(CacheArena { layer, dims, seq_axis, trailing, data, cur_len: 0 })
    }

    pub fn max_seq(&self) -> usize {
        self.dims[self.seq_axis]
    }

    pub fn cur_len(&self) -> usize {
        self.cur_len
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn seq_axis(&self) -> usize {
        self.seq_axis
    }

    /// Elements per token.
    pub fn trailing(&self) -> usize {
        self.trailing
    }

    pub fn capacity_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    /// Tokens `[start, start + len)`, not checked against `cur_len`.
    pub fn view(&self, start: usize, len: usize) -> Result<SubTensorView, KvError> {
        if start + len > self.max_seq() {
            return Err(KvError::CapacityExceeded { requested: start + len, max_seq: self.max_seq() });
        }
        let mut shape = self.dims.clone();
        shape[self.seq_axis] = len;
        Ok(SubTensorView { offset: start * self.trailing, start, len, shape })
    }

    pub fn view_past(&self) -> SubTensorView {
        self.view(0, self.cur_len).expect("cur_len is within capacity")
    }

    pub fn view_new(&self, new_len: usize) -> Result<SubTensorView, KvError> {
        self.view(self.cur_len, new_len)
    }

    pub fn slice(&self, v: &SubTensorView) -> &[f32] {
        &self.data[v.range()]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Writes `new` (whole tokens) at `position`, which must equal the
    /// number of cached tokens.
    pub fn append(&mut self, new: &[f32], position: usize) -> Result<SubTensorView, KvError> {
        if position != self.cur_len {
            return Err(KvError::PositionMismatch { position, cur_len: self.cur_len });
        }
        if !new.len().is_multiple_of(self.trailing) {
            return Err(KvError::ShapeMismatch { got: new.len(), expected: self.trailing * (new.len() / self.trailing + 1) });
        }
        let view = self.view_new(new.len() / self.trailing)?;
        self.data[view.range()].copy_from_slice(new);
        self.cur_len += view.len;
        Ok(view)
    }

    /// Forgets every cached token and zeroes the storage in place.
    pub fn reset(&mut self) {
        self.data.fill(0.0);
        self.cur_len = 0;
    }

    /// A JSON header line, then `[0, cur_len)` as little-endian f32.
    pub fn dump(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "layer": self.layer,
            "cur_len": self.cur_len,
            "max_seq": self.max_seq(),
            "dims": self.dims,
            "dtype": DType::F32.name(),
        });
        let mut out = header.to_string().into_bytes();
        out.push(b'\n');
        for v in self.slice(&self.view_past()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Arena shape for a (possibly rewritten) past-cache tensor: its sequence
/// extent replaced by `max_seq`.
pub fn arena_dims(past: &TensorInfo, max_seq: usize) -> Result<(Vec<usize>, usize), KvError> {
    let shape = past.shape.as_ref().ok_or_else(|| KvError::InvalidLayout(format!("`{}` has no shape", past.name)))?;
    let axis = seq_axis(shape).ok_or_else(|| KvError::InvalidLayout(format!("`{}` has no sequence axis", past.name)))?;
    let dims = shape
        .iter()
        .enumerate()
        .map(|(i, d)| match d {
            _ if i == axis => Ok(max_seq),
            Dim::Lit(v) => Ok(*v as usize),
            Dim::Sym(e) => Err(KvError::InvalidLayout(format!("`{}` has a second symbolic extent {e}", past.name))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((dims, axis))
}

fn not_found(past: &str, reason: impl Into<String>) -> KvError {
    KvError::PatternNotFound { past: past.to_string(), reason: reason.into() }
}

/// Replaces each declared `Concat(past, new)` cache node by an in-place
/// `KVAppend`, so the graph emits only the new entries. Layouts whose
/// sequence axis is not the first non-1 axis get transposes around the
/// append, and their past input is re-declared in arena layout.
pub fn rewrite_graph_outputs(g: &Graph) -> Result<Graph, KvError> {
    if g.meta.kv_pairs.is_empty() {
        return Ok(g.clone());
    }
    let position_ids = g.meta.position_ids.clone().ok_or(KvError::MetadataMissing("position_ids"))?;
    if g.tensor(&position_ids).is_none() {
        return Err(KvError::MetadataMissing("position_ids tensor"));
    }
    let mut out = g.clone();
    let mut next_id = g.next_node_id();
    for k in 0..out.meta.kv_pairs.len() {
        let pair = out.meta.kv_pairs[k].clone();
        if pair.slice.is_some() {
            continue;
        }
        let idx = out
            .nodes
            .iter()
            .position(|n| n.outputs.contains(&pair.new))
            .ok_or_else(|| not_found(&pair.past, format!("nothing produces `{}`", pair.new)))?;
        let concat = out.nodes[idx].clone();
        if concat.op != Op::Concat || concat.inputs.len() != 2 || concat.inputs[0] != pair.past {
            return Err(not_found(&pair.past, format!("`{}` is not Concat(past, new)", pair.new)));
        }
        let new_kv = concat.inputs[1].clone();
        let past_info = out.tensor(&pair.past).cloned().ok_or_else(|| not_found(&pair.past, "undeclared"))?;
        let past_shape = past_info.shape.clone().ok_or_else(|| not_found(&pair.past, "no declared shape"))?;
        let seq = seq_axis(&past_shape).ok_or_else(|| not_found(&pair.past, "no symbolic sequence axis"))?;
        let axis = concat.attr_int("axis").unwrap_or(0);
        let axis = if axis < 0 { axis + past_shape.len() as i64 } else { axis } as usize;
        if axis != seq {
            return Err(not_found(&pair.past, format!("concat axis {axis} is not the sequence axis {seq}")));
        }
        let present_info = out.tensors[&pair.new].clone();

        let (replacement, slice) = match validate_layout(&past_shape, seq) {
            Layout::Valid => {
                let node = NodeSpec::new(concat.id, Op::KVAppend, &[&pair.past, &new_kv, &position_ids], &pair.new)
                    .with_attr("axis", AttrValue::Int(seq as i64));
                (vec![node], new_kv.clone())
            }
            Layout::NeedsTranspose(perm) => {
                let inv = invert_perm(&perm);
                let arena_seq = perm.iter().position(|&p| p == seq).expect("perm covers every axis");
                let permuted: Vec<Dim> = perm.iter().map(|&p| past_shape[p].clone()).collect();
                out.tensors.get_mut(&pair.past).expect("checked above").shape = Some(permuted);
                let new_arena = format!("{new_kv}.arena_layout");
                let present_arena = format!("{}.arena_layout", pair.new);
                let dtype = present_info.dtype;
                out.tensors.insert(new_arena.clone(), TensorInfo::new(&new_arena, dtype, None, TensorKind::Activation));
                out.tensors
                    .insert(present_arena.clone(), TensorInfo::new(&present_arena, dtype, None, TensorKind::Activation));
                let perm_attr = AttrValue::Ints(perm.iter().map(|&p| p as i64).collect());
                let inv_attr = AttrValue::Ints(inv.iter().map(|&p| p as i64).collect());
                let to_arena = NodeSpec::new(next_id, Op::Transpose, &[&new_kv], &new_arena).with_attr("perm", perm_attr);
                let append = NodeSpec::new(concat.id, Op::KVAppend, &[&pair.past, &new_arena, &position_ids], &present_arena)
                    .with_attr("axis", AttrValue::Int(arena_seq as i64));
                let back = NodeSpec::new(next_id + 1, Op::Transpose, &[&present_arena], &pair.new).with_attr("perm", inv_attr);
                next_id += 2;
                (vec![to_arena, append, back], new_arena)
            }
        };
        out.nodes.splice(idx..=idx, replacement);

        let present = out.tensors.get_mut(&pair.new).expect("present exists");
        present.kind = TensorKind::Activation;
        present.shape = None;
        let s = out.tensors.get_mut(&slice).expect("slice exists");
        s.kind = TensorKind::GraphOutput;
        out.meta.kv_pairs[k].slice = Some(slice);
    }
    Ok(out)
}
