//! Pattern fusion: rms-norm and layer-norm subgraphs collapse into single
//! nodes, and single-consumer elementwise chains into `FusedElementwise`.

use std::collections::{HashMap, HashSet};

use crate::graphir::weights::WeightStore;
use crate::graphir::{AttrValue, Graph, NodeSpec, Op};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct FusionStats {
    pub rms_norm: usize,
    pub layer_norm: usize,
    pub elementwise: usize,
}

impl FusionStats {
    pub fn fused_nodes(&self) -> usize {
        self.rms_norm + self.layer_norm + self.elementwise
    }
}

struct Index<'g> {
    g: &'g Graph,
    producer: HashMap<&'g str, usize>,
    consumers: HashMap<&'g str, Vec<usize>>,
    weights: &'g WeightStore,
}

impl<'g> Index<'g> {
    fn new(g: &'g Graph, weights: &'g WeightStore) -> Self {
        Index { g, producer: g.producers(), consumers: g.consumers(), weights }
    }

    /// The node producing `t`, if it has `op`.
    fn producer_of(&self, t: &str, op: Op) -> Option<usize> {
        self.producer.get(t).copied().filter(|&i| self.g.nodes[i].op == op)
    }

    /// True when `t` feeds exactly `node` and nothing else sees it.
    fn only_feeds(&self, t: &str, node: usize) -> bool {
        !self.g.is_output(t) && self.consumers.get(t).is_some_and(|c| c.as_slice() == [node])
    }

    fn feeds_exactly(&self, t: &str, nodes: &[usize]) -> bool {
        if self.g.is_output(t) {
            return false;
        }
        let mut got = self.consumers.get(t).cloned().unwrap_or_default();
        let mut want = nodes.to_vec();
        got.sort_unstable();
        want.sort_unstable();
        got == want
    }

    fn scalar(&self, t: &str) -> Option<f32> {
        match self.weights.get(t)?.as_f32()? {
            [v] => Some(*v),
            _ => None,
        }
    }

    /// Splits a commutative binary node into (produced-by-`op`, other).
    fn operand_pair(&self, node: usize, op: Op) -> Option<(usize, &'g str)> {
        let n = &self.g.nodes[node];
        let (a, b) = (n.inputs[0].as_str(), n.inputs[1].as_str());
        if let Some(p) = self.producer_of(a, op) {
            return Some((p, b));
        }
        self.producer_of(b, op).map(|p| (p, a))
    }

    fn is_last_axis_mean(&self, node: usize) -> bool {
        let n = &self.g.nodes[node];
        n.op == Op::ReduceMean && n.attr_ints("axes") == Some(&[-1]) && n.attr_int("keepdims") == Some(1)
    }

    /// Pow(x, 2) → mean → + eps → sqrt, ending at the sqrt. Returns
    /// (x, eps, [pow, mean, add, sqrt]).
    fn match_rms_core(&self, sqrt: usize) -> Option<(&'g str, f32, [usize; 4])> {
        let s = &self.g.nodes[sqrt];
        let add = self.producer_of(&s.inputs[0], Op::Add)?;
        if !self.only_feeds(&s.inputs[0], sqrt) {
            return None;
        }
        let (mean, eps_t) = self.operand_pair(add, Op::ReduceMean)?;
        let eps = self.scalar(eps_t)?;
        if !self.is_last_axis_mean(mean) || !self.only_feeds(self.g.nodes[add].output(), sqrt) {
            return None;
        }
        if !self.only_feeds(self.g.nodes[mean].output(), add) {
            return None;
        }
        let pow = self.producer_of(&self.g.nodes[mean].inputs[0], Op::Pow)?;
        let p = &self.g.nodes[pow];
        if self.scalar(&p.inputs[1]) != Some(2.0) || !self.only_feeds(p.output(), mean) {
            return None;
        }
        Some((p.inputs[0].as_str(), eps, [pow, mean, add, sqrt]))
    }

    /// x / sqrt(mean(x²) + eps) · w, anchored at the final Mul.
    fn match_rms(&self, mul: usize) -> Option<(NodeSpec, Vec<usize>)> {
        let (div, w) = self.operand_pair(mul, Op::Div)?;
        let d = &self.g.nodes[div];
        if !self.only_feeds(d.output(), mul) {
            return None;
        }
        let sqrt = self.producer_of(&d.inputs[1], Op::Sqrt)?;
        if !self.only_feeds(&d.inputs[1], div) {
            return None;
        }
        let (x, eps, core) = self.match_rms_core(sqrt)?;
        if d.inputs[0] != x {
            return None;
        }
        let m = &self.g.nodes[mul];
        let node = NodeSpec::new(m.id, Op::RMSNorm, &[x, w], m.output()).with_attr("eps", AttrValue::Float(eps as f64));
        let mut members = core.to_vec();
        members.extend([div, mul]);
        Some((node, members))
    }

    /// (x - mean(x)) / sqrt(mean((x - mean)²) + eps) · w + b, anchored at the
    /// final Add.
    fn match_layer_norm(&self, add: usize) -> Option<(NodeSpec, Vec<usize>)> {
        let (mul, b) = self.operand_pair(add, Op::Mul)?;
        if !self.only_feeds(self.g.nodes[mul].output(), add) {
            return None;
        }
        let (div, w) = self.operand_pair(mul, Op::Div)?;
        let d = &self.g.nodes[div];
        if d.inputs[0] == d.inputs[1] || !self.only_feeds(d.output(), mul) || !self.only_feeds(&d.inputs[1], div) {
            return None;
        }
        let sqrt = self.producer_of(&d.inputs[1], Op::Sqrt)?;
        let (centered, eps, core) = self.match_rms_core(sqrt)?;
        if d.inputs[0] != centered || !self.feeds_exactly(centered, &[core[0], div]) {
            return None;
        }
        let sub = self.producer_of(centered, Op::Sub)?;
        let s = &self.g.nodes[sub];
        let x = s.inputs[0].as_str();
        let mean = self.producer_of(&s.inputs[1], Op::ReduceMean)?;
        if !self.is_last_axis_mean(mean) || self.g.nodes[mean].inputs[0] != x || !self.only_feeds(&s.inputs[1], sub) {
            return None;
        }
        let a = &self.g.nodes[add];
        let node = NodeSpec::new(a.id, Op::LayerNorm, &[x, w, b], a.output()).with_attr("eps", AttrValue::Float(eps as f64));
        let mut members = vec![mean, sub];
        members.extend(core);
        members.extend([div, mul, add]);
        Some((node, members))
    }
}

/// Replaces each matched group with its fused node at the anchor position.
fn splice(g: &Graph, fused: Vec<(usize, NodeSpec, Vec<usize>)>) -> Graph {
    let mut removed = HashSet::new();
    let mut anchors = HashMap::new();
    for (anchor, node, members) in fused {
        removed.extend(members.iter().copied().filter(|&m| m != anchor));
        anchors.insert(anchor, node);
    }
    let mut out = g.clone();
    out.nodes = Vec::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        if removed.contains(&i) {
            out.tensors.shift_remove(n.output());
        } else if let Some(f) = anchors.remove(&i) {
            out.nodes.push(f);
        } else {
            out.nodes.push(n.clone());
        }
    }
    out
}

fn fuse_norms(g: &Graph, weights: &WeightStore, stats: &mut FusionStats) -> Graph {
    let idx = Index::new(g, weights);
    let mut taken = HashSet::new();
    let mut fused = Vec::new();
    // Layer norms first: their tail contains an rms-like core.
    for (i, n) in g.nodes.iter().enumerate() {
        if n.op == Op::Add {
            if let Some((node, members)) = idx.match_layer_norm(i) {
                if members.iter().all(|m| !taken.contains(m)) {
                    taken.extend(members.iter().copied());
                    fused.push((i, node, members));
                    stats.layer_norm += 1;
                }
            }
        }
    }
    for (i, n) in g.nodes.iter().enumerate() {
        if n.op == Op::Mul && !taken.contains(&i) {
            if let Some((node, members)) = idx.match_rms(i) {
                if members.iter().all(|m| !taken.contains(m)) {
                    taken.extend(members.iter().copied());
                    fused.push((i, node, members));
                    stats.rms_norm += 1;
                }
            }
        }
    }
    splice(g, fused)
}

fn fuse_elementwise(g: &Graph, stats: &mut FusionStats) -> Graph {
    let producer = g.producers();
    let consumers = g.consumers();
    // group id per node; a group is a chain whose last member is its tail
    let mut group_of: Vec<Option<usize>> = vec![None; g.nodes.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if !n.op.is_elementwise() {
            continue;
        }
        let pred = n.inputs.iter().find_map(|inp| {
            let p = *producer.get(inp.as_str())?;
            let single = !g.is_output(inp) && consumers.get(inp.as_str()).is_some_and(|c| c.as_slice() == [i]);
            let gid = group_of[p]?;
            (single && *groups[gid].last().expect("nonempty") == p).then_some(gid)
        });
        let gid = pred.unwrap_or_else(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[gid].push(i);
        group_of[i] = Some(gid);
    }
    let mut fused = Vec::new();
    for members in groups.into_iter().filter(|m| m.len() >= 2) {
        let mut externals: Vec<String> = Vec::new();
        let mut steps = Vec::new();
        let local: HashMap<&str, usize> = members.iter().enumerate().map(|(k, &m)| (g.nodes[m].output(), k)).collect();
        for &m in &members {
            let n = &g.nodes[m];
            let args: Vec<String> = n
                .inputs
                .iter()
                .map(|inp| match local.get(inp.as_str()) {
                    Some(k) => format!("s{k}"),
                    None => {
                        let k = externals.iter().position(|e| e == inp).unwrap_or_else(|| {
                            externals.push(inp.clone());
                            externals.len() - 1
                        });
                        format!("i{k}")
                    }
                })
                .collect();
            steps.push(format!("{}({})", n.op, args.join(",")));
        }
        let tail = *members.last().expect("len >= 2");
        let t = &g.nodes[tail];
        let refs: Vec<&str> = externals.iter().map(|s| s.as_str()).collect();
        let node = NodeSpec::new(t.id, Op::FusedElementwise, &refs, t.output())
            .with_attr("steps", AttrValue::Str(steps.join(";")));
        fused.push((tail, node, members));
        stats.elementwise += 1;
    }
    splice(g, fused)
}

/// Runs both fusion passes. Norm patterns need the scalar constants (eps,
/// the exponent 2) from `weights`. Graphs without matches come back equal.
pub fn fuse(g: &Graph, weights: &WeightStore) -> (Graph, FusionStats) {
    let mut stats = FusionStats::default();
    let g = fuse_norms(g, weights, &mut stats);
    let g = fuse_elementwise(&g, &mut stats);
    (g, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepArg {
    Input(usize),
    Step(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusedStep {
    pub op: Op,
    pub args: Vec<StepArg>,
}

/// Parses a `FusedElementwise` program such as `Mul(i0,i1);Add(s0,i2)`.
pub fn parse_steps(text: &str) -> Result<Vec<FusedStep>, String> {
    let mut steps = Vec::new();
    for (k, part) in text.split(';').enumerate() {
        let open = part.find('(').ok_or_else(|| format!("step {k}: missing `(`"))?;
        let body = part[open + 1..].strip_suffix(')').ok_or_else(|| format!("step {k}: missing `)`"))?;
        let op = Op::from_name(&part[..open]).filter(|o| o.is_elementwise()).ok_or_else(|| format!("step {k}: bad op"))?;
        let args = body
            .split(',')
            .map(|a| {
                let (kind, num) = a.split_at(1.min(a.len()));
                let num: usize = num.parse().map_err(|_| format!("step {k}: bad operand `{a}`"))?;
                match kind {
                    "i" => Ok(StepArg::Input(num)),
                    "s" if num < k => Ok(StepArg::Step(num)),
                    _ => Err(format!("step {k}: bad operand `{a}`")),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let want = if matches!(op, Op::Neg | Op::Sqrt | Op::Silu | Op::Gelu) { 1 } else { 2 };
        if args.len() != want {
            return Err(format!("step {k}: {op} takes {want} operands"));
        }
        steps.push(FusedStep { op, args });
    }
    Ok(steps)
}
