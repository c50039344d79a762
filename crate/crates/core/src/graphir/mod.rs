//! Graph IR with symbolic tensor shapes.

mod builder;
pub mod fixtures;
mod json;
pub mod weights;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

use crate::symexpr::SymExpr;

pub use builder::{build_toy_decoder, CacheLayout, ToyConfig};
pub use json::{load_graph, save_graph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("cycle or out-of-order definition involving tensor `{0}`")]
    Cycle(String),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("undeclared symbol `{0}`")]
    UndeclaredSymbol(String),
    #[error("shape arity error on `{tensor}`: {reason}")]
    ShapeArity { tensor: String, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("kv metadata missing")]
    MetadataMissing,
}

impl GraphError {
    pub(crate) fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        GraphError::Schema { path: path.into(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    I64,
    U4E0M4,
    U4Int4,
    Bool,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I64 => "i64",
            DType::U4E0M4 => "u4_e0m4",
            DType::U4Int4 => "u4_int4",
            DType::Bool => "bool",
        }
    }

    pub fn from_name(s: &str) -> Option<DType> {
        Some(match s {
            "f32" => DType::F32,
            "f16" => DType::F16,
            "i64" => DType::I64,
            "u4_e0m4" => DType::U4E0M4,
            "u4_int4" => DType::U4Int4,
            "bool" => DType::Bool,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::I64 => 2,
            DType::U4E0M4 => 3,
            DType::U4Int4 => 4,
            DType::Bool => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<DType> {
        [DType::F32, DType::F16, DType::I64, DType::U4E0M4, DType::U4Int4, DType::Bool]
            .into_iter()
            .find(|d| d.code() == c)
    }

    pub fn is_4bit(self) -> bool {
        matches!(self, DType::U4E0M4 | DType::U4Int4)
    }

    /// Byte width for whole-byte types; `None` for packed 4-bit types.
    pub fn byte_width(self) -> Option<u64> {
        match self {
            DType::F32 => Some(4),
            DType::F16 => Some(2),
            DType::I64 => Some(8),
            DType::Bool => Some(1),
            DType::U4E0M4 | DType::U4Int4 => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A declared tensor extent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Dim {
    Lit(u64),
    Sym(SymExpr),
}

impl Dim {
    pub fn sym(text: &str) -> Dim {
        Dim::from_expr(text.parse().expect("valid dimension expression"))
    }

    /// Collapses constant expressions into literals.
    pub fn from_expr(e: SymExpr) -> Dim {
        match e.as_constant() {
            Some(v) if v >= 1 => Dim::Lit(v as u64),
            _ => Dim::Sym(e),
        }
    }

    pub fn to_expr(&self) -> SymExpr {
        match self {
            Dim::Lit(v) => SymExpr::constant(*v as i64),
            Dim::Sym(e) => e.clone(),
        }
    }

    pub fn is_literal_one(&self) -> bool {
        matches!(self, Dim::Lit(1))
    }
}

impl From<u64> for Dim {
    fn from(v: u64) -> Dim {
        Dim::Lit(v)
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Lit(v) => write!(f, "{v}"),
            Dim::Sym(e) => write!(f, "\"{e}\""),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    GraphInput,
    GraphOutput,
    Weight,
    Activation,
    ShapeValue,
}

impl TensorKind {
    pub fn name(self) -> &'static str {
        match self {
            TensorKind::GraphInput => "graph_input",
            TensorKind::GraphOutput => "graph_output",
            TensorKind::Weight => "weight",
            TensorKind::Activation => "activation",
            TensorKind::ShapeValue => "shape_value",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "graph_input" => TensorKind::GraphInput,
            "graph_output" => TensorKind::GraphOutput,
            "weight" => TensorKind::Weight,
            "activation" => TensorKind::Activation,
            "shape_value" => TensorKind::ShapeValue,
            _ => return None,
        })
    }

    /// Defined before any node runs.
    pub fn is_source(self) -> bool {
        matches!(self, TensorKind::GraphInput | TensorKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    /// Declared shape; `None` leaves it to shape derivation.
    pub shape: Option<Vec<Dim>>,
    pub kind: TensorKind,
    /// Inline data for small I64 constants (reshape targets, gather indices).
    pub value: Option<Vec<i64>>,
}

impl TensorInfo {
    pub fn new(name: &str, dtype: DType, shape: Option<Vec<Dim>>, kind: TensorKind) -> Self {
        TensorInfo { name: name.to_string(), dtype, shape, kind, value: None }
    }

    pub fn is_constant(&self) -> bool {
        self.kind == TensorKind::Weight && self.value.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Ints(Vec<i64>),
    Float(f64),
    Str(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Identity,
    Shape,
    Gather,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Unsqueeze,
    Squeeze,
    Cast,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sqrt,
    Pow,
    ReduceMean,
    Softmax,
    Silu,
    Gelu,
    MatMul,
    MatMulQuant,
    RMSNorm,
    LayerNorm,
    KVAppend,
    FusedElementwise,
}

const ALL_OPS: [Op; 27] = [
    Op::Identity,
    Op::Shape,
    Op::Gather,
    Op::Concat,
    Op::Slice,
    Op::Reshape,
    Op::Transpose,
    Op::Unsqueeze,
    Op::Squeeze,
    Op::Cast,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::Div,
    Op::Neg,
    Op::Sqrt,
    Op::Pow,
    Op::ReduceMean,
    Op::Softmax,
    Op::Silu,
    Op::Gelu,
    Op::MatMul,
    Op::MatMulQuant,
    Op::RMSNorm,
    Op::LayerNorm,
    Op::KVAppend,
    Op::FusedElementwise,
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum AttrType {
    Int,
    Ints,
    Float,
    Str,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Identity => "Identity",
            Op::Shape => "Shape",
            Op::Gather => "Gather",
            Op::Concat => "Concat",
            Op::Slice => "Slice",
            Op::Reshape => "Reshape",
            Op::Transpose => "Transpose",
            Op::Unsqueeze => "Unsqueeze",
            Op::Squeeze => "Squeeze",
            Op::Cast => "Cast",
            Op::Add => "Add",
            Op::Sub => "Sub",
            Op::Mul => "Mul",
            Op::Div => "Div",
            Op::Neg => "Neg",
            Op::Sqrt => "Sqrt",
            Op::Pow => "Pow",
            Op::ReduceMean => "ReduceMean",
            Op::Softmax => "Softmax",
            Op::Silu => "Silu",
            Op::Gelu => "Gelu",
            Op::MatMul => "MatMul",
            Op::MatMulQuant => "MatMulQuant",
            Op::RMSNorm => "RMSNorm",
            Op::LayerNorm => "LayerNorm",
            Op::KVAppend => "KVAppend",
            Op::FusedElementwise => "FusedElementwise",
        }
    }

    pub fn from_name(s: &str) -> Option<Op> {
        ALL_OPS.iter().copied().find(|o| o.name() == s)
    }

    /// Inclusive bounds on the number of inputs.
    pub fn arity(self) -> (usize, usize) {
        match self {
            Op::Concat | Op::FusedElementwise => (1, usize::MAX),
            Op::Gather | Op::Reshape | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => (2, 2),
            Op::MatMul | Op::MatMulQuant | Op::RMSNorm => (2, 2),
            Op::LayerNorm | Op::KVAppend => (3, 3),
            _ => (1, 1),
        }
    }

    fn required_attrs(self) -> &'static [(&'static str, AttrType)] {
        use AttrType::*;
        match self {
            Op::Concat | Op::Gather | Op::Softmax | Op::KVAppend => &[("axis", Int)],
            Op::Transpose => &[("perm", Ints)],
            Op::Reshape => &[("allowzero", Int)],
            Op::Slice => &[("starts", Ints), ("ends", Ints), ("axes", Ints)],
            Op::RMSNorm | Op::LayerNorm => &[("eps", Float)],
            Op::MatMulQuant => &[("group_size", Int), ("scheme", Str), ("n", Int)],
            Op::Unsqueeze | Op::Squeeze => &[("axes", Ints)],
            Op::ReduceMean => &[("axes", Ints), ("keepdims", Int)],
            Op::Cast => &[("to", Str)],
            Op::FusedElementwise => &[("steps", Str)],
            _ => &[],
        }
    }

    /// Input positions that carry tensor data (as opposed to shape operands).
    pub fn is_data_input(self, index: usize) -> bool {
        !matches!((self, index), (Op::Reshape, 1))
    }

    pub fn is_elementwise(self) -> bool {
        matches!(
            self,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Neg | Op::Sqrt | Op::Pow | Op::Silu | Op::Gelu
        )
    }

    /// Pure metadata ops whose output may alias the input buffer.
    pub fn is_view(self) -> bool {
        matches!(self, Op::Reshape | Op::Squeeze | Op::Unsqueeze | Op::Identity)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: i64,
    pub op: Op,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attrs: BTreeMap<String, AttrValue>,
}

impl NodeSpec {
    pub fn new(id: i64, op: Op, inputs: &[&str], output: &str) -> Self {
        NodeSpec {
            id,
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: vec![output.to_string()],
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: AttrValue) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<&[i64]> {
        match self.attrs.get(key) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_f64(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key) {
            Some(AttrValue::Float(v)) => Some(*v),
            Some(AttrValue::Int(v)) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        match self.attrs.get(key) {
            Some(AttrValue::Str(v)) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolDecl {
    pub name: String,
    pub max: Option<i64>,
}

/// One registered KV cache: `past` is the cache graph input, `new` the
/// concatenated cache output, `arena` the name of the preallocated storage.
/// `slice` is set once the graph outputs only the freshly generated part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvPair {
    pub past: String,
    pub new: String,
    pub arena: String,
    pub slice: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Meta {
    pub name: Option<String>,
    pub kv_pairs: Vec<KvPair>,
    pub position_ids: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub symbols: Vec<SymbolDecl>,
    pub tensors: IndexMap<String, TensorInfo>,
    pub nodes: Vec<NodeSpec>,
    pub meta: Meta,
}

impl Graph {
    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.values().filter(|t| t.kind == TensorKind::GraphInput)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.values().filter(|t| t.kind == TensorKind::GraphOutput)
    }

    pub fn is_output(&self, name: &str) -> bool {
        self.tensors.get(name).is_some_and(|t| t.kind == TensorKind::GraphOutput)
    }

    pub fn symbol_max(&self) -> BTreeMap<String, i64> {
        self.symbols.iter().filter_map(|s| s.max.map(|m| (s.name.clone(), m))).collect()
    }

    /// Producer node index for each node-defined tensor.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                map.insert(o.as_str(), i);
            }
        }
        map
    }

    /// Consumer node indices for each tensor, in node order.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                let entry = map.entry(inp.as_str()).or_default();
                if entry.last() != Some(&i) {
                    entry.push(i);
                }
            }
        }
        map
    }

    pub fn next_node_id(&self) -> i64 {
        self.nodes.iter().map(|n| n.id).max().map_or(0, |m| m + 1)
    }

    /// Checks every structural invariant of the IR.
    pub fn validate(&self) -> Result<(), GraphError> {
        let declared: HashSet<&str> = self.symbols.iter().map(|s| s.name.as_str()).collect();
        for (i, s) in self.symbols.iter().enumerate() {
            if !crate::symexpr::is_valid_symbol(&s.name) {
                return Err(GraphError::schema(format!("symbols[{i}].name"), "not an identifier"));
            }
            if matches!(s.max, Some(m) if m < 1) {
                return Err(GraphError::schema(format!("symbols[{i}].max"), "must be >= 1"));
            }
        }
        if declared.len() != self.symbols.len() {
            return Err(GraphError::schema("symbols", "duplicate symbol name"));
        }

        for t in self.tensors.values() {
            self.validate_tensor(t, &declared)?;
        }

        let mut defined: HashSet<&str> = self
            .tensors
            .values()
            .filter(|t| matches!(t.kind, TensorKind::GraphInput | TensorKind::Weight))
            .map(|t| t.name.as_str())
            .collect();
        let producers = self.producers();
        let mut seen_ids = HashSet::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let path = format!("nodes[{idx}]");
            if !seen_ids.insert(node.id) {
                return Err(GraphError::schema(format!("{path}.id"), "duplicate node id"));
            }
            let (lo, hi) = node.op.arity();
            if node.inputs.len() < lo || node.inputs.len() > hi {
                return Err(GraphError::schema(
                    format!("{path}.inputs"),
                    format!("{} takes {lo}..={hi} inputs, got {}", node.op, node.inputs.len()),
                ));
            }
            if node.outputs.len() != 1 {
                return Err(GraphError::schema(format!("{path}.outputs"), "exactly one output required"));
            }
            for (key, ty) in node.op.required_attrs() {
                let ok = matches!(
                    (ty, node.attrs.get(*key)),
                    (AttrType::Int, Some(AttrValue::Int(_)))
                        | (AttrType::Ints, Some(AttrValue::Ints(_)))
                        | (AttrType::Float, Some(AttrValue::Float(_) | AttrValue::Int(_)))
                        | (AttrType::Str, Some(AttrValue::Str(_)))
                );
                if !ok {
                    return Err(GraphError::schema(
                        format!("{path}.attrs.{key}"),
                        format!("required attribute missing or mistyped for {}", node.op),
                    ));
                }
            }
            if node.op == Op::Reshape && node.attr_int("allowzero") != Some(0) {
                return Err(GraphError::schema(format!("{path}.attrs.allowzero"), "only allowzero=0 is supported"));
            }
            if node.op == Op::MatMulQuant {
                let scheme = node.attr_str("scheme").unwrap_or_default();
                if scheme != "e0m4" && scheme != "int4" {
                    return Err(GraphError::schema(format!("{path}.attrs.scheme"), "expected e0m4 or int4"));
                }
            }
            for inp in &node.inputs {
                if !self.tensors.contains_key(inp) {
                    return Err(GraphError::schema(format!("{path}.inputs"), format!("undeclared tensor `{inp}`")));
                }
                if !defined.contains(inp.as_str()) {
                    return match producers.get(inp.as_str()) {
                        Some(_) => Err(GraphError::Cycle(inp.clone())),
                        None => Err(GraphError::schema(format!("{path}.inputs"), format!("tensor `{inp}` is never produced"))),
                    };
                }
            }
            for out in &node.outputs {
                let info = self
                    .tensors
                    .get(out)
                    .ok_or_else(|| GraphError::schema(format!("{path}.outputs"), format!("undeclared tensor `{out}`")))?;
                if matches!(info.kind, TensorKind::GraphInput | TensorKind::Weight) {
                    return Err(GraphError::schema(format!("{path}.outputs"), format!("`{out}` is an input or weight")));
                }
                if !defined.insert(out.as_str()) {
                    return Err(GraphError::schema(format!("{path}.outputs"), format!("`{out}` produced twice")));
                }
            }
        }
        for t in self.tensors.values() {
            if matches!(t.kind, TensorKind::Activation | TensorKind::GraphOutput | TensorKind::ShapeValue)
                && !producers.contains_key(t.name.as_str())
            {
                return Err(GraphError::schema(format!("tensors.{}", t.name), "not produced by any node"));
            }
        }
        for (i, kv) in self.meta.kv_pairs.iter().enumerate() {
            for (field, name) in [("past", &kv.past), ("new", &kv.new)] {
                if !self.tensors.contains_key(name) {
                    return Err(GraphError::schema(format!("meta.kv_pairs[{i}].{field}"), format!("unknown tensor `{name}`")));
                }
            }
            if let Some(slice) = &kv.slice {
                if !self.tensors.contains_key(slice) {
                    return Err(GraphError::schema(format!("meta.kv_pairs[{i}].slice"), format!("unknown tensor `{slice}`")));
                }
            }
        }
        if let Some(p) = &self.meta.position_ids {
            if !self.tensors.contains_key(p) {
                return Err(GraphError::schema("meta.position_ids", format!("unknown tensor `{p}`")));
            }
        }
        Ok(())
    }

    fn validate_tensor(&self, t: &TensorInfo, declared: &HashSet<&str>) -> Result<(), GraphError> {
        let arity = |reason: &str| GraphError::ShapeArity { tensor: t.name.clone(), reason: reason.to_string() };
        if let Some(shape) = &t.shape {
            for d in shape {
                match d {
                    Dim::Lit(0) => return Err(arity("literal dims must be >= 1")),
                    Dim::Lit(_) => {}
                    Dim::Sym(e) => {
                        for s in e.symbols() {
                            if !declared.contains(s) {
                                return Err(GraphError::UndeclaredSymbol(s.to_string()));
                            }
                        }
                    }
                }
            }
        }
        match t.kind {
            TensorKind::GraphInput if t.shape.is_none() => return Err(arity("graph inputs need a declared shape")),
            TensorKind::Weight => {
                let shape = t.shape.as_ref().ok_or_else(|| arity("weights need a declared shape"))?;
                if shape.iter().any(|d| matches!(d, Dim::Sym(_))) {
                    return Err(arity("weight shapes must be literal"));
                }
            }
            TensorKind::ShapeValue => {
                if t.dtype != DType::I64 {
                    return Err(arity("shape values must be i64"));
                }
                if matches!(&t.shape, Some(s) if s.len() > 1) {
                    return Err(arity("shape values must be rank 0 or 1"));
                }
            }
            _ => {}
        }
        if let Some(value) = &t.value {
            if t.kind != TensorKind::Weight || t.dtype != DType::I64 {
                return Err(arity("inline values are only allowed on i64 weights"));
            }
            let count: u64 = t.shape.iter().flatten().map(|d| if let Dim::Lit(v) = d { *v } else { 0 }).product();
            if count != value.len() as u64 {
                return Err(arity("inline value length does not match shape"));
            }
        }
        Ok(())
    }
}

/// Programmatic graph construction used by the model builder and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    next_id: i64,
}

impl Default for Graph {
    fn default() -> Self {
        Graph { symbols: Vec::new(), tensors: IndexMap::new(), nodes: Vec::new(), meta: Meta::default() }
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn symbol(&mut self, name: &str, max: Option<i64>) -> &mut Self {
        self.graph.symbols.push(SymbolDecl { name: name.to_string(), max });
        self
    }

    pub fn tensor(&mut self, name: &str, dtype: DType, shape: Option<Vec<Dim>>, kind: TensorKind) -> &mut Self {
        self.graph.tensors.insert(name.to_string(), TensorInfo::new(name, dtype, shape, kind));
        self
    }

    pub fn input(&mut self, name: &str, dtype: DType, shape: Vec<Dim>) -> &mut Self {
        self.tensor(name, dtype, Some(shape), TensorKind::GraphInput)
    }

    pub fn weight(&mut self, name: &str, dtype: DType, shape: &[u64]) -> &mut Self {
        let dims = shape.iter().map(|&d| Dim::Lit(d)).collect();
        self.tensor(name, dtype, Some(dims), TensorKind::Weight)
    }

    /// I64 constant with inline data; an empty `shape` makes a scalar.
    pub fn constant(&mut self, name: &str, shape: &[u64], value: Vec<i64>) -> &mut Self {
        self.weight(name, DType::I64, shape);
        self.graph.tensors.get_mut(name).expect("just inserted").value = Some(value);
        self
    }

    /// Adds a node and declares its output as an activation (or shape value
    /// for I64 results) unless it already exists.
    pub fn node(&mut self, op: Op, inputs: &[&str], output: &str, dtype: DType) -> &mut NodeSpec {
        if !self.graph.tensors.contains_key(output) {
            let kind = if dtype == DType::I64 { TensorKind::ShapeValue } else { TensorKind::Activation };
            self.tensor(output, dtype, None, kind);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.graph.nodes.push(NodeSpec::new(id, op, inputs, output));
        self.graph.nodes.last_mut().expect("just pushed")
    }

    pub fn mark_output(&mut self, name: &str) -> &mut Self {
        if let Some(t) = self.graph.tensors.get_mut(name) {
            t.kind = TensorKind::GraphOutput;
        }
        self
    }

    pub fn set_output_shape(&mut self, name: &str, shape: Vec<Dim>) -> &mut Self {
        if let Some(t) = self.graph.tensors.get_mut(name) {
            t.shape = Some(shape);
        }
        self
    }

    pub fn meta_mut(&mut self) -> &mut Meta {
        &mut self.graph.meta
    }

    pub fn finish(self) -> Result<Graph, GraphError> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}

impl NodeSpec {
    pub fn attr(&mut self, key: &str, value: AttrValue) -> &mut Self {
        self.attrs.insert(key.to_string(), value);
        self
    }
}
