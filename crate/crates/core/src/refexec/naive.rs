//! Straightforward interpreter used as the oracle for the compiled path.
//!
//! It runs every node of the original graph in order, shape nodes
//! included, on real integer values. Every result gets a fresh buffer and
//! caches travel as ordinary tensors: the present cache returned by one
//! step is fed back as the past cache of the next.

use std::collections::HashMap;

use super::decode::{Engine, StepInput};
use super::kernels::{compute, is_int, output_shape, round_to_f16, Data, Input, KernelStats, Out, Scratch};
use super::{dequantized_store, quantize_matmul_weights, weight_as_f32, Counters, ExecError, QuantConfig};
use crate::graphir::weights::{WeightData, WeightStore};
use crate::graphir::{Dim, Graph, Op, TensorKind};
use crate::shapeinfer::{classify, count_transitions, parse_steps, FusedStep, NodeClass};
use crate::symexpr::Bindings;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor { shape, data: TensorData::F32(data) }
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Tensor {
        Tensor { shape, data: TensorData::I64(data) }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I64(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    fn input(&self) -> Input<'_> {
        let data = match &self.data {
            TensorData::F32(v) => Data::F32(v),
            TensorData::I64(v) => Data::I64(v),
        };
        Input { shape: &self.shape, data }
    }

    fn bytes(&self) -> u64 {
        let n = self.shape.iter().product::<usize>() as u64;
        match self.data {
            TensorData::F32(_) => 4 * n,
            TensorData::I64(_) => 8 * n,
        }
    }
}

pub struct NaiveSession {
    graph: Graph,
    statics: HashMap<String, Tensor>,
    steps: HashMap<usize, Vec<FusedStep>>,
    classes: Vec<NodeClass>,
    transitions: u64,
    f16_storage: bool,
    counters: Counters,
    stats: KernelStats,
    scratch: Scratch,
    past: Vec<Tensor>,
    outputs: HashMap<String, Tensor>,
    last_bindings: Option<Bindings>,
}

impl NaiveSession {
    /// With a quantization config the matmul weights are replaced by their
    /// dequantized values, so both paths see the same numbers.
    pub fn new(graph: &Graph, weights: &WeightStore, quant: Option<&QuantConfig>, f16_storage: bool) -> Result<Self, ExecError> {
        graph.validate()?;
        let owned;
        let weights = match quant {
            Some(cfg) => {
                let (_, q) = quantize_matmul_weights(graph, weights, cfg)?;
                owned = dequantized_store(weights, &q);
                &owned
            }
            None => weights,
        };
        let mut statics = HashMap::new();
        for t in graph.tensors.values().filter(|t| t.kind == TensorKind::Weight) {
            let tensor = match (&t.value, weights.get(&t.name)) {
                (Some(v), _) => {
                    let shape = t
                        .shape
                        .iter()
                        .flatten()
                        .map(|d| match d {
                            Dim::Lit(v) => Ok(*v as usize),
                            Dim::Sym(e) => Err(ExecError::InputMismatch { name: t.name.clone(), reason: format!("symbolic constant dim {e}") }),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    Tensor::i64(shape, v.clone())
                }
                (None, Some(w)) => match &w.data {
                    WeightData::I64(v) => Tensor::i64(w.shape.clone(), v.clone()),
                    _ => Tensor::f32(w.shape.clone(), weight_as_f32(w).expect("float weight")),
                },
                (None, None) => {
                    return Err(ExecError::InputMismatch { name: t.name.clone(), reason: "weight missing from store".into() })
                }
            };
            statics.insert(t.name.clone(), tensor);
        }
        let mut steps = HashMap::new();
        for (i, n) in graph.nodes.iter().enumerate().filter(|(_, n)| n.op == Op::FusedElementwise) {
            let parsed = parse_steps(n.attr_str("steps").unwrap_or_default())
                .map_err(|reason| ExecError::ShapeMismatch { node: n.id, reason })?;
            steps.insert(i, parsed);
        }
        let classes = classify(graph);
        let transitions = count_transitions(classes.iter().copied()) as u64;
        Ok(NaiveSession {
            graph: graph.clone(),
            statics,
            steps,
            classes,
            transitions,
            f16_storage,
            counters: Counters::default(),
            stats: KernelStats::default(),
            scratch: Scratch::default(),
            past: Vec::new(),
            outputs: HashMap::new(),
            last_bindings: None,
        })
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn kernel_stats(&self) -> &KernelStats {
        &self.stats
    }

    /// Current cache tensors, one per declared kv pair.
    pub fn caches(&self) -> &[Tensor] {
        &self.past
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name)
    }

    /// Runs every node. Returns nothing; graph outputs are kept until the
    /// next run.
    pub fn run(&mut self, feeds: Vec<(String, Tensor)>) -> Result<(), ExecError> {
        let mut env: HashMap<String, Tensor> = HashMap::new();
        for (name, t) in feeds {
            let info = self
                .graph
                .tensor(&name)
                .filter(|i| i.kind == TensorKind::GraphInput)
                .ok_or_else(|| ExecError::InputMismatch { name: name.clone(), reason: "not a graph input".into() })?;
            if let Some(dims) = &info.shape {
                let fits = dims.len() == t.shape.len()
                    && dims.iter().zip(&t.shape).all(|(d, &v)| !matches!(d, Dim::Lit(l) if *l as usize != v));
                if !fits {
                    return Err(ExecError::InputMismatch { name, reason: format!("shape {:?}", t.shape) });
                }
            }
            if t.shape.iter().product::<usize>() != data_len(&t) {
                return Err(ExecError::InputMismatch { name, reason: "data length does not match shape".into() });
            }
            self.counters.allocations += 1;
            env.insert(name, t);
        }
        for (i, node) in self.graph.nodes.iter().enumerate() {
            if self.classes[i] == NodeClass::ShapeComputing {
                self.counters.shape_ops_executed += 1;
            }
            let operands: Vec<Input> = node
                .inputs
                .iter()
                .map(|name| {
                    env.get(name).or_else(|| self.statics.get(name)).map(Tensor::input).ok_or_else(|| {
                        ExecError::InputMismatch { name: name.clone(), reason: "not fed".into() }
                    })
                })
                .collect::<Result<_, _>>()?;
            let shape = output_shape(node, &operands)?;
            let numel = shape.iter().product();
            let out_dtype = self.graph.tensors[node.output()].dtype;
            let mut result = if is_int(out_dtype) {
                Tensor::i64(shape, vec![0; numel])
            } else {
                Tensor::f32(shape, vec![0.0; numel])
            };
            self.counters.allocations += 1;
            let dst = match &mut result.data {
                TensorData::F32(v) => Out::F32(v),
                TensorData::I64(v) => Out::I64(v),
            };
            compute(node, self.steps.get(&i).map(Vec::as_slice), &operands, &result.shape, dst, &mut self.stats, &mut self.scratch)?;
            if let (true, TensorData::F32(v)) = (self.f16_storage, &mut result.data) {
                round_to_f16(v);
            }
            env.insert(node.output().to_string(), result);
        }
        self.counters.sync_points += self.transitions;
        self.outputs.clear();
        for t in self.graph.outputs() {
            if let Some(v) = env.remove(&t.name) {
                self.outputs.insert(t.name.clone(), v);
            }
        }
        Ok(())
    }

    fn past_shape(&self, pair: usize, bindings: &Bindings) -> Result<Vec<usize>, ExecError> {
        let info = &self.graph.tensors[&self.graph.meta.kv_pairs[pair].past];
        let dims = info.shape.as_ref().ok_or_else(|| ExecError::NotADecoder(format!("`{}` has no shape", info.name)))?;
        dims.iter()
            .map(|d| {
                let v = d.to_expr().evaluate(bindings).map_err(|e| ExecError::NotADecoder(e.to_string()))?;
                usize::try_from(v).map_err(|_| ExecError::NotADecoder(format!("{} has extent {v}", info.name)))
            })
            .collect()
    }
}

fn data_len(t: &Tensor) -> usize {
    match &t.data {
        TensorData::F32(v) => v.len(),
        TensorData::I64(v) => v.len(),
    }
}

impl Engine for NaiveSession {
    fn step(&mut self, input: &StepInput) -> Result<&[f32], ExecError> {
        let bindings: Bindings = [("N".to_string(), input.n as i64), ("sumN".to_string(), input.sum_n as i64)].into();
        if self.last_bindings.as_ref() != Some(&bindings) {
            self.counters.shape_updates += 1;
            self.last_bindings = Some(bindings.clone());
        }
        let pairs = self.graph.meta.kv_pairs.len();
        if self.past.len() != pairs {
            // The first step sees an empty cache.
            self.past = vec![Tensor::f32(vec![0], Vec::new()); pairs];
        }
        let mut feeds = vec![
            ("input_ids".to_string(), Tensor::i64(vec![1, input.n], input.ids.to_vec())),
            ("position_ids".to_string(), Tensor::i64(vec![1, input.n], input.positions.to_vec())),
            ("attn_mask".to_string(), Tensor::f32(vec![1, input.n, input.sum_n], input.mask.to_vec())),
        ];
        for p in 0..pairs {
            let shape = self.past_shape(p, &bindings)?;
            let past = std::mem::replace(&mut self.past[p], Tensor::f32(Vec::new(), Vec::new()));
            if past.shape.iter().product::<usize>() != shape.iter().product::<usize>() {
                return Err(ExecError::InputMismatch {
                    name: self.graph.meta.kv_pairs[p].past.clone(),
                    reason: format!("cache holds {:?}, step expects {shape:?}", past.shape),
                });
            }
            // Concat(past, new) copies every cached entry.
            self.counters.kv_copy_bytes += past.bytes();
            feeds.push((self.graph.meta.kv_pairs[p].past.clone(), Tensor { shape, data: past.data }));
        }
        self.run(feeds)?;
        for p in 0..pairs {
            let name = &self.graph.meta.kv_pairs[p].new;
            self.past[p] = self
                .outputs
                .get(name)
                .cloned()
                .ok_or_else(|| ExecError::NotADecoder(format!("no cache output `{name}`")))?;
        }
        self.outputs
            .get("logits")
            .and_then(Tensor::as_f32)
            .ok_or_else(|| ExecError::NotADecoder("no float `logits` output".into()))
    }

    fn reset(&mut self) {
        self.past.clear();
        self.outputs.clear();
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn pad(&self) -> usize {
        1
    }

    fn max_seq(&self) -> usize {
        self.graph.symbol_max().get("sumN").copied().unwrap_or(0) as usize
    }
}
