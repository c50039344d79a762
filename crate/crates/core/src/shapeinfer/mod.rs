//! Whole-graph symbolic shape inference and two-phase scheduling.
//!
//! Nodes are split into shape-computing (integer math over `Shape` results,
//! run on the host) and tensor-computing (everything touching activations).
//! Shape chains whose results are fully captured as polynomials are folded
//! away, so the runtime program is normally one host phase that does
//! nothing and one device phase.

mod derive;
pub mod fuse;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::graphir::weights::WeightStore;
use crate::graphir::{DType, Graph, GraphError, Op, SymbolDecl};
use crate::symexpr::{Bindings, SymExpr};

pub use derive::{broadcast, derive_shapes, fmt_shape, Derived, SymShape};
pub use fuse::{fuse, parse_steps, FusedStep, FusionStats, StepArg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("node {node}: rank mismatch: {reason}")]
    RankMismatch { node: i64, reason: String },
    #[error("node {node}: cannot broadcast {reason}")]
    BroadcastError { node: i64, reason: String },
    #[error("node {node}: non-divisible reshape: {reason}")]
    NonDivisibleReshape { node: i64, reason: String },
    #[error("node {node}: unsupported dynamic attribute: {reason}")]
    UnsupportedDynamicAttr { node: i64, reason: String },
    #[error("node {node}: invalid attribute: {reason}")]
    InvalidAttr { node: i64, reason: String },
    #[error("tensor `{tensor}` declared {declared} but derives to {derived}")]
    DeclaredShapeMismatch { tensor: String, declared: String, derived: String },
    #[error("node {node}: schedule contradicts dependencies")]
    ScheduleCycle { node: i64 },
    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),
    #[error("{what} evaluates to {value}, must be positive")]
    NonPositiveDim { what: String, value: i64 },
    #[error("symbol `{symbol}` = {value} exceeds preallocated maximum {max}")]
    ExceedsPreallocation { symbol: String, value: i64, max: i64 },
    #[error("symbol `{0}` has no declared maximum")]
    MissingMax(String),
    #[error("evaluation overflow in `{0}`")]
    Overflow(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    ShapeComputing,
    TensorComputing,
}

impl NodeClass {
    pub fn letter(self) -> char {
        match self {
            NodeClass::ShapeComputing => 'S',
            NodeClass::TensorComputing => 'T',
        }
    }
}

/// Least fixpoint of: a node is shape-computing iff it is a `Shape` node
/// or each of its data inputs is an integer constant or the output of a
/// shape-computing node.
pub fn classify(g: &Graph) -> Vec<NodeClass> {
    let producer = g.producers();
    let mut class = vec![NodeClass::TensorComputing; g.nodes.len()];
    loop {
        let mut changed = false;
        for (i, n) in g.nodes.iter().enumerate() {
            if class[i] == NodeClass::ShapeComputing {
                continue;
            }
            let shape = n.op == Op::Shape
                || n.inputs.iter().enumerate().filter(|(k, _)| n.op.is_data_input(*k)).all(|(_, inp)| {
                    g.tensor(inp).is_some_and(|t| t.is_constant())
                        || producer.get(inp.as_str()).is_some_and(|&p| class[p] == NodeClass::ShapeComputing)
                });
            if shape {
                class[i] = NodeClass::ShapeComputing;
                changed = true;
            }
        }
        if !changed {
            return class;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Folding {
    /// Shape-computing nodes that still run (per node; false for tensor nodes).
    pub retained: Vec<bool>,
    /// Shape values read as data by tensor nodes, materialized from their
    /// polynomials at bind time.
    pub baked: Vec<String>,
}

/// Decides which shape-computing nodes survive. A shape value is needed at
/// runtime when it is a graph output, or a tensor node reads it as data and
/// its polynomial is unknown; everything feeding a retained node is retained.
pub fn fold_shape_subgraphs(g: &Graph, derived: &Derived, classes: &[NodeClass]) -> Folding {
    let producer = g.producers();
    let consumers = g.consumers();
    let mut retained = vec![false; g.nodes.len()];
    let mut baked = Vec::new();
    let mut work = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if classes[i] != NodeClass::ShapeComputing {
            continue;
        }
        let out = n.output();
        let read_as_data = consumers.get(out).into_iter().flatten().any(|&c| {
            let cn = &g.nodes[c];
            classes[c] == NodeClass::TensorComputing
                && cn.inputs.iter().enumerate().any(|(k, inp)| inp == out && cn.op.is_data_input(k))
        });
        let known = derived.values.contains_key(out);
        if g.is_output(out) || (read_as_data && !known) {
            work.push(i);
        } else if read_as_data {
            baked.push(out.to_string());
        }
    }
    while let Some(i) = work.pop() {
        if std::mem::replace(&mut retained[i], true) {
            continue;
        }
        for inp in &g.nodes[i].inputs {
            if let Some(&p) = producer.get(inp.as_str()) {
                if classes[p] == NodeClass::ShapeComputing {
                    work.push(p);
                }
            }
        }
    }
    // Values produced by retained nodes are real tensors, not baked ones.
    baked.retain(|t| !producer.get(t.as_str()).is_some_and(|&p| retained[p]));
    Folding { retained, baked }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub shape_program: Vec<usize>,
    pub tensor_program: Vec<usize>,
    /// Retained shape nodes moved into the device phase because they depend
    /// on tensor results.
    pub hoisted: Vec<bool>,
    pub sync_points: usize,
}

/// Host phase then device phase. A retained shape node that reads a tensor
/// node's output cannot run before the device phase; it is hoisted into it
/// and costs one extra host/device round trip.
pub fn schedule(g: &Graph, classes: &[NodeClass], retained: &[bool]) -> Result<Schedule, ShapeError> {
    let producer = g.producers();
    let mut hoisted = vec![false; g.nodes.len()];
    let mut direct = 0;
    for (i, n) in g.nodes.iter().enumerate() {
        if !retained[i] {
            continue;
        }
        let deps: Vec<usize> = n.inputs.iter().filter_map(|inp| producer.get(inp.as_str()).copied()).collect();
        if deps.iter().any(|&p| classes[p] == NodeClass::TensorComputing) {
            hoisted[i] = true;
            direct += 1;
        } else if deps.iter().any(|&p| hoisted[p]) {
            hoisted[i] = true;
        }
    }
    let shape_program: Vec<usize> = (0..g.nodes.len()).filter(|&i| retained[i] && !hoisted[i]).collect();
    let tensor_program: Vec<usize> =
        (0..g.nodes.len()).filter(|&i| classes[i] == NodeClass::TensorComputing || hoisted[i]).collect();
    check_order(g, shape_program.iter().chain(&tensor_program).copied(), retained, classes)?;
    Ok(Schedule { shape_program, tensor_program, hoisted, sync_points: 1 + direct })
}

/// Every input of a scheduled node must be a source, a folded shape value,
/// or produced earlier in the program.
fn check_order(
    g: &Graph,
    order: impl Iterator<Item = usize>,
    retained: &[bool],
    classes: &[NodeClass],
) -> Result<(), ShapeError> {
    let producer = g.producers();
    let mut done = vec![false; g.nodes.len()];
    for i in order {
        for inp in &g.nodes[i].inputs {
            if let Some(&p) = producer.get(inp.as_str()) {
                let folded = classes[p] == NodeClass::ShapeComputing && !retained[p];
                if !done[p] && !folded {
                    return Err(ShapeError::ScheduleCycle { node: g.nodes[i].id });
                }
            }
        }
        done[i] = true;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileOptions {
    pub fuse: bool,
    /// When false every shape node runs in plain topological order,
    /// interleaved with tensor nodes.
    pub fold: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { fuse: true, fold: true }
    }
}

/// A classified, scheduled graph with symbolic shapes for every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPlan {
    pub graph: Graph,
    /// Per tensor, indexed like `graph.tensors`.
    pub shapes: Vec<SymShape>,
    pub values: HashMap<String, Vec<SymExpr>>,
    pub classes: Vec<NodeClass>,
    pub retained: Vec<bool>,
    pub hoisted: Vec<bool>,
    pub baked: Vec<String>,
    pub shape_program: Vec<usize>,
    pub tensor_program: Vec<usize>,
    pub sync_points: usize,
    pub folded: bool,
    pub fusion: FusionStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanSummary {
    pub shape_ops_retained: usize,
    pub sync_points: usize,
    pub fused_nodes: usize,
}

/// Fusion (when weights are available), derivation, classification,
/// folding and scheduling in one go.
pub fn compile(g: &Graph, weights: Option<&WeightStore>, opts: CompileOptions) -> Result<CompiledPlan, ShapeError> {
    g.validate()?;
    let (graph, fusion) = match (opts.fuse, weights) {
        (true, Some(w)) => fuse(g, w),
        _ => (g.clone(), FusionStats::default()),
    };
    let derived = derive_shapes(&graph)?;
    let classes = classify(&graph);
    let (retained, baked, shape_program, tensor_program, hoisted, sync_points) = if opts.fold {
        let f = fold_shape_subgraphs(&graph, &derived, &classes);
        let s = schedule(&graph, &classes, &f.retained)?;
        (f.retained, f.baked, s.shape_program, s.tensor_program, s.hoisted, s.sync_points)
    } else {
        let retained: Vec<bool> = classes.iter().map(|c| *c == NodeClass::ShapeComputing).collect();
        let order: Vec<usize> = (0..graph.nodes.len()).collect();
        let hoisted = vec![false; graph.nodes.len()];
        let sync = count_transitions(order.iter().map(|&i| classes[i]));
        (retained, Vec::new(), Vec::new(), order, hoisted, sync)
    };
    let shapes = derived.shapes.into_values().collect();
    Ok(CompiledPlan {
        graph,
        shapes,
        values: derived.values,
        classes,
        retained,
        hoisted,
        baked,
        shape_program,
        tensor_program,
        sync_points,
        folded: opts.fold,
        fusion,
    })
}

/// Host→device boundaries when nodes run in the given order, counting the
/// initial entry into the device phase.
pub fn count_transitions(order: impl Iterator<Item = NodeClass>) -> usize {
    let mut on_device = false;
    let mut count = 0;
    for c in order {
        let device = c == NodeClass::TensorComputing;
        if device && !on_device {
            count += 1;
        }
        on_device = device;
    }
    count.max(1)
}

impl CompiledPlan {
    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.graph.tensors.get_index_of(name)
    }

    pub fn shape_of(&self, name: &str) -> Option<&[SymExpr]> {
        self.tensor_index(name).map(|i| self.shapes[i].as_slice())
    }

    /// Shape nodes that execute at runtime, hoisted ones included.
    pub fn shape_ops_retained(&self) -> usize {
        self.retained.iter().filter(|r| **r).count()
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            shape_ops_retained: self.shape_ops_retained(),
            sync_points: self.sync_points,
            fused_nodes: self.fusion.fused_nodes(),
        }
    }

    /// Scheduled class of the node producing each tensor. Integer constants
    /// count as shape values; other sources as tensor data.
    pub fn tensor_class(&self, name: &str) -> NodeClass {
        match self.graph.producers().get(name) {
            Some(&p) if self.classes[p] == NodeClass::ShapeComputing && !self.hoisted[p] => NodeClass::ShapeComputing,
            Some(_) => NodeClass::TensorComputing,
            None if self.graph.tensor(name).is_some_and(|t| t.is_constant()) => NodeClass::ShapeComputing,
            None => NodeClass::TensorComputing,
        }
    }

    /// One `name : dtype [dims] class=S|T` line per tensor.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.graph.tensors.values().enumerate() {
            let dims: Vec<String> = self.shapes[i].iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                out,
                "{} : {} [{}] class={}",
                t.name,
                t.dtype,
                dims.join(", "),
                self.tensor_class(&t.name).letter()
            );
        }
        out
    }

    pub fn symbols(&self) -> &[SymbolDecl] {
        &self.graph.symbols
    }

    pub fn max_bindings(&self) -> Result<Bindings, ShapeError> {
        self.graph
            .symbols
            .iter()
            .map(|s| s.max.map(|m| (s.name.clone(), m)).ok_or_else(|| ShapeError::MissingMax(s.name.clone())))
            .collect()
    }

    /// Host program then device program.
    pub fn executed_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.shape_program.iter().chain(&self.tensor_program).copied()
    }

    pub fn is_shape_node(&self, node: usize) -> bool {
        self.classes[node] == NodeClass::ShapeComputing
    }
}

/// Concrete extents for every tensor of a plan under one binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedShapes {
    pub bindings: Bindings,
    /// Indexed like `plan.graph.tensors`.
    pub shapes: Vec<Vec<usize>>,
    /// Contents of `plan.baked`, same order.
    pub baked: Vec<Vec<i64>>,
}

impl ResolvedShapes {
    pub fn shape(&self, plan: &CompiledPlan, name: &str) -> Option<&[usize]> {
        plan.tensor_index(name).map(|i| self.shapes[i].as_slice())
    }

    pub fn numel(&self, tensor: usize) -> usize {
        self.shapes[tensor].iter().product()
    }

    /// Re-evaluates in place, reusing the existing buffers. Nothing is
    /// re-derived: each dim is one polynomial evaluation.
    pub fn rebind(&mut self, plan: &CompiledPlan, bindings: &Bindings) -> Result<(), ShapeError> {
        check_bindings(&plan.graph.symbols, bindings)?;
        let names: Vec<&String> = plan.graph.tensors.keys().collect();
        for (i, shape) in plan.shapes.iter().enumerate() {
            let dst = &mut self.shapes[i];
            dst.resize(shape.len(), 0);
            for (k, e) in shape.iter().enumerate() {
                let v = eval(e, bindings)?;
                if v < 0 {
                    return Err(ShapeError::NonPositiveDim { what: format!("{}[{k}] = {e}", names[i]), value: v });
                }
                dst[k] = v as usize;
            }
        }
        for (k, name) in plan.baked.iter().enumerate() {
            let exprs = &plan.values[name];
            let dst = &mut self.baked[k];
            dst.resize(exprs.len(), 0);
            for (j, e) in exprs.iter().enumerate() {
                dst[j] = eval(e, bindings)?;
            }
        }
        self.bindings.clone_from(bindings);
        Ok(())
    }
}

fn eval(e: &SymExpr, b: &Bindings) -> Result<i64, ShapeError> {
    e.evaluate(b).map_err(|err| match err {
        crate::symexpr::SymError::UnboundSymbol(s) => ShapeError::UnboundSymbol(s),
        other => ShapeError::Overflow(other.to_string()),
    })
}

fn check_bindings(symbols: &[SymbolDecl], bindings: &Bindings) -> Result<(), ShapeError> {
    for s in symbols {
        let v = *bindings.get(&s.name).ok_or_else(|| ShapeError::UnboundSymbol(s.name.clone()))?;
        if v < 1 {
            return Err(ShapeError::NonPositiveDim { what: format!("symbol `{}`", s.name), value: v });
        }
        if let Some(max) = s.max {
            if v > max {
                return Err(ShapeError::ExceedsPreallocation { symbol: s.name.clone(), value: v, max });
            }
        }
    }
    Ok(())
}

/// Evaluates every symbolic shape of the plan under `bindings`. Symbols
/// must be positive and within their declared maxima; derived extents may
/// be zero (an empty cache before the first prefill).
pub fn bind_symbols(plan: &CompiledPlan, bindings: &Bindings) -> Result<ResolvedShapes, ShapeError> {
    let mut r = ResolvedShapes {
        bindings: Bindings::new(),
        shapes: plan.shapes.iter().map(|s| vec![0; s.len()]).collect(),
        baked: plan.baked.iter().map(|b| vec![0; plan.values[b].len()]).collect(),
    };
    r.rebind(plan, bindings)?;
    Ok(r)
}

/// Names of shape-computing tensors whose values are symbolically known,
/// paired with their polynomials. Used to cross-check folding against an
/// interpreter that runs every shape node.
pub fn known_shape_values(plan: &CompiledPlan) -> Vec<(&str, &[SymExpr])> {
    let producer = plan.graph.producers();
    let mut out: Vec<(&str, &[SymExpr])> = plan
        .values
        .iter()
        .filter(|(name, _)| producer.get(name.as_str()).is_some_and(|&p| plan.is_shape_node(p)))
        .filter(|(name, _)| plan.graph.tensor(name).is_some_and(|t| t.dtype == DType::I64))
        .map(|(n, v)| (n.as_str(), v.as_slice()))
        .collect();
    out.sort_by_key(|(n, _)| *n);
    out
}
