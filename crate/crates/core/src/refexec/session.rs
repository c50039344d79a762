//! The compiled execution path: shapes resolved once per binding change,
//! activations in preplanned blocks, caches appended in place.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::decode::{Engine, StepInput};
use super::kernels::{compute, is_int, round_to_f16, Data, Input, KernelStats, Out, Scratch};
use super::{quantize_matmul_weights, weight_as_f32, Counters, ExecError, Feed, SessionOptions};
use crate::graphir::weights::{WeightData, WeightStore};
use crate::graphir::{Graph, Op, TensorKind};
use crate::kvcache::{arena_dims, rewrite_graph_outputs, CacheArena};
use crate::memplan::{plan_memory, ArenaSet, MemoryPlan};
use crate::quantfp4::QuantizedWeight;
use crate::shapeinfer::{bind_symbols, compile, parse_steps, CompileOptions, CompiledPlan, FusedStep, ResolvedShapes};
use crate::symexpr::Bindings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loc {
    Unset,
    Block(usize),
    Input(usize),
    Static(usize),
    Quant(usize),
    Arena(usize),
    Baked(usize),
}

#[derive(Debug)]
enum Buf {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl Buf {
    fn data(&self, numel: usize) -> Option<Data<'_>> {
        match self {
            Buf::F32(v) => v.get(..numel).map(Data::F32),
            Buf::I64(v) => v.get(..numel).map(Data::I64),
        }
    }
}

/// Storage that kernels read while one block is being written.
#[derive(Debug)]
struct Store {
    arenas: ArenaSet,
    statics: Vec<Buf>,
    inputs: Vec<Buf>,
    quant: Vec<QuantizedWeight>,
}

impl Store {
    fn read<'a>(
        &'a self,
        kv: &'a [CacheArena],
        resolved: &'a ResolvedShapes,
        loc: Loc,
        int: bool,
        numel: usize,
    ) -> Option<Data<'a>> {
        match loc {
            Loc::Block(b) => {
                let r = self.arenas.region(b);
                if int {
                    bytemuck::cast_slice::<u64, i64>(r).get(..numel).map(Data::I64)
                } else {
                    bytemuck::cast_slice::<u64, f32>(r).get(..numel).map(Data::F32)
                }
            }
            Loc::Input(s) => self.inputs[s].data(numel),
            Loc::Static(s) => self.statics[s].data(numel),
            Loc::Quant(q) => Some(Data::Quant(&self.quant[q])),
            Loc::Arena(l) => kv[l].data().get(..numel).map(Data::F32),
            Loc::Baked(k) => Some(Data::I64(&resolved.baked[k])),
            Loc::Unset => None,
        }
    }
}

pub struct Session {
    plan: CompiledPlan,
    mem: MemoryPlan,
    store: Store,
    kv: Vec<CacheArena>,
    locs: Vec<Loc>,
    int: Vec<bool>,
    node_ins: Vec<Vec<usize>>,
    node_out: Vec<usize>,
    steps: HashMap<usize, Vec<FusedStep>>,
    inputs: IndexMap<String, usize>,
    resolved: ResolvedShapes,
    step_bindings: Bindings,
    counters: Counters,
    stats: KernelStats,
    scratch: Scratch,
    opts: SessionOptions,
}

impl Session {
    /// Rewrites caches to in-place appends, optionally quantizes matmul
    /// weights, compiles, plans memory and allocates everything up front.
    pub fn new(graph: &Graph, weights: &WeightStore, opts: SessionOptions) -> Result<Session, ExecError> {
        let g = rewrite_graph_outputs(graph)?;
        let (g, quant) = match &opts.quant {
            Some(cfg) => quantize_matmul_weights(&g, weights, cfg)?,
            None => (g, IndexMap::new()),
        };
        let plan = compile(&g, Some(weights), CompileOptions { fuse: opts.fuse, fold: opts.fold })?;
        let mem = plan_memory(&plan)?;
        let max = plan.max_bindings()?;
        let resolved = bind_symbols(&plan, &max)?;
        let arenas = ArenaSet::preallocate(&mem);
        let mut counters = Counters { allocations: arenas.allocations() as u64, ..Counters::default() };

        let g = &plan.graph;
        let index = |name: &str| plan.tensor_index(name).expect("plan covers every tensor");
        let mut locs = vec![Loc::Unset; g.tensors.len()];
        let int: Vec<bool> = g.tensors.values().map(|t| is_int(t.dtype)).collect();

        let mut kv = Vec::new();
        for (layer, pair) in g.meta.kv_pairs.iter().enumerate() {
            let append = g
                .nodes
                .iter()
                .find(|n| n.op == Op::KVAppend && n.inputs[0] == pair.past)
                .ok_or_else(|| ExecError::NotADecoder(format!("no cache append reads `{}`", pair.past)))?;
            let out = index(append.output());
            let axis = append.attr_int("axis").unwrap_or(0) as usize;
            let cap = plan.shapes[out][axis].upper_bound(&max).map_err(|e| ExecError::NotADecoder(e.to_string()))?;
            let (dims, seq) = arena_dims(&g.tensors[&pair.past], cap as usize)?;
            kv.push(CacheArena::new(layer, dims, seq)?);
            counters.allocations += 1;
            locs[index(&pair.past)] = Loc::Arena(layer);
            locs[out] = Loc::Arena(layer);
        }

        let mut statics = Vec::new();
        let mut input_bufs = Vec::new();
        let mut inputs = IndexMap::new();
        for (i, t) in g.tensors.values().enumerate() {
            if locs[i] != Loc::Unset {
                continue;
            }
            match t.kind {
                TensorKind::GraphInput => {
                    let numel = resolved.numel(i);
                    input_bufs.push(if int[i] { Buf::I64(vec![0; numel]) } else { Buf::F32(vec![0.0; numel]) });
                    counters.allocations += 1;
                    locs[i] = Loc::Input(input_bufs.len() - 1);
                    inputs.insert(t.name.clone(), i);
                }
                TensorKind::Weight => {
                    if let Some(k) = quant.get_index_of(&t.name) {
                        locs[i] = Loc::Quant(k);
                        continue;
                    }
                    let buf = match (&t.value, weights.get(&t.name)) {
                        (Some(v), _) => Buf::I64(v.clone()),
                        (None, Some(w)) => match &w.data {
                            WeightData::I64(v) => Buf::I64(v.clone()),
                            _ => Buf::F32(weight_as_f32(w).expect("float weight")),
                        },
                        (None, None) => {
                            return Err(ExecError::InputMismatch { name: t.name.clone(), reason: "weight missing from store".into() })
                        }
                    };
                    statics.push(buf);
                    locs[i] = Loc::Static(statics.len() - 1);
                }
                _ => {}
            }
        }
        for (k, name) in plan.baked.iter().enumerate() {
            locs[index(name)] = Loc::Baked(k);
        }

        let node_out: Vec<usize> = g.nodes.iter().map(|n| index(n.output())).collect();
        let node_ins: Vec<Vec<usize>> = g.nodes.iter().map(|n| n.inputs.iter().map(|i| index(i)).collect()).collect();
        let mut steps = HashMap::new();
        for n in plan.executed_nodes() {
            let node = &g.nodes[n];
            let out = node_out[n];
            if node.op == Op::FusedElementwise {
                let parsed = parse_steps(node.attr_str("steps").unwrap_or_default())
                    .map_err(|reason| ExecError::ShapeMismatch { node: node.id, reason })?;
                steps.insert(n, parsed);
            }
            if locs[out] != Loc::Unset {
                continue;
            }
            locs[out] = if node.op.is_view() {
                locs[node_ins[n][0]]
            } else {
                Loc::Block(mem.block_of(node.output()).expect("planned activation"))
            };
        }

        let step_bindings = max.clone();
        let store = Store { arenas, statics, inputs: input_bufs, quant: quant.into_values().collect() };
        Ok(Session {
            plan,
            mem,
            store,
            kv,
            locs,
            int,
            node_ins,
            node_out,
            steps,
            inputs,
            resolved,
            step_bindings,
            counters,
            stats: KernelStats::default(),
            scratch: Scratch::default(),
            opts,
        })
    }

    pub fn plan(&self) -> &CompiledPlan {
        &self.plan
    }

    pub fn memory_plan(&self) -> &MemoryPlan {
        &self.mem
    }

    pub fn options(&self) -> &SessionOptions {
        &self.opts
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn kernel_stats(&self) -> &KernelStats {
        &self.stats
    }

    pub fn kv_arenas(&self) -> &[CacheArena] {
        &self.kv
    }

    pub fn bindings(&self) -> &Bindings {
        &self.resolved.bindings
    }

    /// Re-evaluates every shape when the bindings differ from the last run.
    pub fn bind(&mut self, bindings: &Bindings) -> Result<(), ExecError> {
        if &self.resolved.bindings != bindings {
            self.resolved.rebind(&self.plan, bindings)?;
            self.counters.shape_updates += 1;
        }
        Ok(())
    }

    fn feed(&mut self, name: &str, feed: &Feed) -> Result<(), ExecError> {
        let mismatch = |reason: String| ExecError::InputMismatch { name: name.to_string(), reason };
        let &t = self.inputs.get(name).ok_or_else(|| mismatch("not a fed graph input".into()))?;
        let numel = self.resolved.numel(t);
        let Loc::Input(slot) = self.locs[t] else { unreachable!("inputs live in input slots") };
        match (&mut self.store.inputs[slot], feed) {
            (Buf::F32(dst), Feed::F32(src)) if src.len() == numel => dst[..numel].copy_from_slice(src),
            (Buf::I64(dst), Feed::I64(src)) if src.len() == numel => dst[..numel].copy_from_slice(src),
            (_, f) => return Err(mismatch(format!("{} values of the wrong kind or count, expected {numel}", f.len()))),
        }
        Ok(())
    }

    /// Binds symbols, copies the feeds into their slots and runs the host
    /// program followed by the device program.
    pub fn run(&mut self, bindings: &Bindings, feeds: &[(&str, Feed)]) -> Result<(), ExecError> {
        self.bind(bindings)?;
        for (name, f) in feeds {
            self.feed(name, f)?;
        }
        let host = self.plan.shape_program.len();
        for p in 0..host + self.plan.tensor_program.len() {
            let n = if p < host { self.plan.shape_program[p] } else { self.plan.tensor_program[p - host] };
            self.exec(n)?;
        }
        self.counters.sync_points += self.plan.sync_points as u64;
        Ok(())
    }

    fn exec(&mut self, n: usize) -> Result<(), ExecError> {
        let Session { plan, store, kv, locs, int, node_ins, node_out, steps, resolved, counters, stats, scratch, opts, .. } =
            self;
        let node = &plan.graph.nodes[n];
        if plan.is_shape_node(n) {
            counters.shape_ops_executed += 1;
        }
        let out = node_out[n];
        let ins = &node_ins[n];
        let missing = |t: usize| ExecError::ShapeMismatch {
            node: node.id,
            reason: format!("operand `{}` has no storage at this point", plan.graph.tensors[t].name),
        };
        if node.op.is_view() {
            // Views share their input's storage.
            return Ok(());
        }
        match locs[out] {
            Loc::Arena(layer) if node.op == Op::KVAppend => {
                let (new_t, pos_t) = (ins[1], ins[2]);
                let new = match store.read(&[], resolved, locs[new_t], false, resolved.numel(new_t)) {
                    Some(Data::F32(v)) => v,
                    _ => return Err(missing(new_t)),
                };
                let position = match store.read(&[], resolved, locs[pos_t], true, resolved.numel(pos_t)) {
                    Some(Data::I64(v)) if !v.is_empty() => v[0],
                    _ => return Err(missing(pos_t)),
                };
                let position = usize::try_from(position)
                    .map_err(|_| ExecError::ShapeMismatch { node: node.id, reason: format!("position {position}") })?;
                kv[layer].append(new, position)?;
                Ok(())
            }
            Loc::Block(b) => {
                let mut region = store.arenas.take(b);
                let result = (|| {
                    let mut operands = Vec::with_capacity(ins.len());
                    for &t in ins {
                        let data = store.read(kv, resolved, locs[t], int[t], resolved.numel(t)).ok_or_else(|| missing(t))?;
                        operands.push(Input { shape: &resolved.shapes[t], data });
                    }
                    let numel = resolved.numel(out);
                    let dst = if int[out] {
                        Out::I64(&mut bytemuck::cast_slice_mut::<u64, i64>(&mut region)[..numel])
                    } else {
                        Out::F32(&mut bytemuck::cast_slice_mut::<u64, f32>(&mut region)[..numel])
                    };
                    compute(node, steps.get(&n).map(Vec::as_slice), &operands, &resolved.shapes[out], dst, stats, scratch)?;
                    if opts.f16_storage && !int[out] {
                        round_to_f16(&mut bytemuck::cast_slice_mut::<u64, f32>(&mut region)[..numel]);
                    }
                    Ok(())
                })();
                store.arenas.restore(b, region);
                result
            }
            _ => Err(missing(out)),
        }
    }

    /// Current shape and contents of any tensor with storage.
    pub fn tensor(&self, name: &str) -> Option<(&[usize], Data<'_>)> {
        let t = self.plan.tensor_index(name)?;
        let data = self.store.read(&self.kv, &self.resolved, self.locs[t], self.int[t], self.resolved.numel(t))?;
        Some((&self.resolved.shapes[t], data))
    }

    pub fn output_f32(&self, name: &str) -> Option<&[f32]> {
        match self.tensor(name)?.1 {
            Data::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Per-layer arena dumps.
    pub fn dump_arenas(&self) -> Vec<Vec<u8>> {
        self.kv.iter().map(CacheArena::dump).collect()
    }
}

impl Engine for Session {
    fn step(&mut self, input: &StepInput) -> Result<&[f32], ExecError> {
        let mut b = std::mem::take(&mut self.step_bindings);
        for (sym, v) in [("N", input.n), ("sumN", input.sum_n)] {
            match b.get_mut(sym) {
                Some(slot) => *slot = v as i64,
                None => return Err(ExecError::NotADecoder(format!("no symbol `{sym}`"))),
            }
        }
        let feeds = [
            ("input_ids", Feed::I64(input.ids)),
            ("position_ids", Feed::I64(input.positions)),
            ("attn_mask", Feed::F32(input.mask)),
        ];
        let result = self.run(&b, &feeds);
        self.step_bindings = b;
        result?;
        self.output_f32("logits").ok_or_else(|| ExecError::NotADecoder("no float `logits` output".into()))
    }

    fn reset(&mut self) {
        for a in &mut self.kv {
            a.reset();
        }
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn pad(&self) -> usize {
        self.opts.pad.max(1)
    }

    fn max_seq(&self) -> usize {
        self.plan.graph.symbol_max().get("sumN").copied().unwrap_or(0) as usize
    }
}
