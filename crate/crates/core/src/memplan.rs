//! Static activation memory planning.
//!
//! Every activation gets a byte size as a polynomial over the graph
//! symbols. A greedy sweep in definition order hands each tensor a block
//! that is free and provably large enough, or opens a new one. Blocks are
//! sized for the declared symbol maxima and allocated once.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;

use crate::graphir::{DType, Op};
use crate::shapeinfer::{CompiledPlan, ShapeError};
use crate::symexpr::{Bindings, CompareResult, SymExpr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemPlanError {
    #[error("4-bit tensor `{tensor}` needs an even literal innermost dim, shape is [{shape}]")]
    OddPacking { tensor: String, shape: String },
    #[error("size of `{tensor}` cannot be bounded: {reason}")]
    Unbounded { tensor: String, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// `last_use` of tensors that must survive the whole run.
pub const FOREVER: usize = usize::MAX;

/// Positions in executed program order (host program, then device program).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Lifetime {
    pub def: usize,
    pub last_use: usize,
}

impl Lifetime {
    pub fn overlaps(&self, other: &Lifetime) -> bool {
        self.def <= other.last_use && other.def <= self.last_use
    }
}

/// Bytes needed by a tensor of `dtype` with the given extents.
pub fn size_expr(tensor: &str, dtype: DType, shape: &[SymExpr]) -> Result<SymExpr, MemPlanError> {
    let Some(width) = dtype.byte_width() else {
        let inner = shape.last().and_then(SymExpr::as_constant).filter(|c| c % 2 == 0);
        let Some(inner) = inner else {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            return Err(MemPlanError::OddPacking { tensor: tensor.to_string(), shape: dims.join(", ") });
        };
        let mut dims = shape[..shape.len() - 1].to_vec();
        dims.push(SymExpr::constant(inner / 2));
        return Ok(SymExpr::product(&dims));
    };
    Ok(SymExpr::product(shape) * SymExpr::constant(width as i64))
}

/// One unit of storage: a tensor plus everything that views it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanItem {
    /// Owner first, then views in program order.
    pub tensors: Vec<String>,
    pub size: SymExpr,
    pub lifetime: Lifetime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub id: usize,
    #[serde(rename = "size_expr", serialize_with = "as_string")]
    pub size: SymExpr,
    pub max_bytes: u64,
}

fn as_string<S: serde::Serializer>(e: &SymExpr, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPlan {
    pub blocks: Vec<Block>,
    /// Every planned tensor (views included) to its block.
    pub assignment: IndexMap<String, usize>,
    pub items: Vec<PlanItem>,
    /// Block of each item, same order as `items`.
    pub item_blocks: Vec<usize>,
    pub peak_bytes: u64,
    pub naive_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport<'a> {
    pub blocks: &'a [Block],
    pub assignments: &'a IndexMap<String, usize>,
    pub peak_bytes: u64,
    pub naive_bytes: u64,
    pub savings_ratio: f64,
}

impl MemoryPlan {
    pub fn savings_ratio(&self) -> f64 {
        if self.naive_bytes == 0 {
            return 0.0;
        }
        1.0 - self.peak_bytes as f64 / self.naive_bytes as f64
    }

    pub fn report(&self) -> PlanReport<'_> {
        PlanReport {
            blocks: &self.blocks,
            assignments: &self.assignment,
            peak_bytes: self.peak_bytes,
            naive_bytes: self.naive_bytes,
            savings_ratio: self.savings_ratio(),
        }
    }

    pub fn block_of(&self, tensor: &str) -> Option<usize> {
        self.assignment.get(tensor).copied()
    }

    /// Re-checks sharing and sizing from scratch.
    pub fn verify(&self) -> Result<(), String> {
        for (i, a) in self.items.iter().enumerate() {
            let block = &self.blocks[self.item_blocks[i]];
            match block.size.compare(&a.size) {
                CompareResult::Equal | CompareResult::ProvablyGE => {}
                other => return Err(format!("`{}` in block {} compares {other:?}", a.tensors[0], block.id)),
            }
            for (j, b) in self.items.iter().enumerate().skip(i + 1) {
                if self.item_blocks[i] == self.item_blocks[j] && a.lifetime.overlaps(&b.lifetime) {
                    return Err(format!("`{}` and `{}` share block {} while both live", a.tensors[0], b.tensors[0], block.id));
                }
            }
        }
        Ok(())
    }
}

/// Greedy best-fit over items sorted by definition point.
pub fn assign_blocks(items: Vec<PlanItem>, max: &Bindings) -> Result<MemoryPlan, MemPlanError> {
    let bound = |item: &PlanItem| -> Result<u64, MemPlanError> {
        item.size.upper_bound(max).map(|b| b.max(0) as u64).map_err(|e| MemPlanError::Unbounded {
            tensor: item.tensors[0].clone(),
            reason: e.to_string(),
        })
    };
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| (items[i].lifetime.def, i));

    let mut blocks: Vec<Block> = Vec::new();
    let mut block_free_after: Vec<usize> = Vec::new();
    let mut item_blocks = vec![0; items.len()];
    let mut naive_bytes = 0u64;
    for i in order {
        let item = &items[i];
        let bytes = bound(item)?;
        naive_bytes += bytes;
        let best = blocks
            .iter()
            .filter(|b| block_free_after[b.id] < item.lifetime.def)
            .filter_map(|b| match b.size.compare(&item.size) {
                CompareResult::Equal => Some((false, b.max_bytes, b.id)),
                CompareResult::ProvablyGE => Some((true, b.max_bytes, b.id)),
                _ => None,
            })
            .min();
        let id = match best {
            Some((_, _, id)) => id,
            None => {
                blocks.push(Block { id: blocks.len(), size: item.size.clone(), max_bytes: bytes });
                block_free_after.push(0);
                blocks.len() - 1
            }
        };
        block_free_after[id] = item.lifetime.last_use;
        item_blocks[i] = id;
    }

    let mut assignment = IndexMap::new();
    for (item, &b) in items.iter().zip(&item_blocks) {
        for t in &item.tensors {
            assignment.insert(t.clone(), b);
        }
    }
    let peak_bytes = blocks.iter().map(|b| b.max_bytes).sum();
    Ok(MemoryPlan { blocks, assignment, items, item_blocks, peak_bytes, naive_bytes })
}

/// Groups planned tensors with their views and computes lifetimes over the
/// executed program. Tensors that do not own storage produced by an
/// executed node (sources, inline constants, baked shape values, cache
/// arenas and views of any of these) are left out.
pub fn plan_items(plan: &CompiledPlan) -> Result<Vec<PlanItem>, MemPlanError> {
    let g = &plan.graph;
    let consumers = g.consumers();
    let mut position: HashMap<usize, usize> = HashMap::new();
    for (p, n) in plan.executed_nodes().enumerate() {
        position.insert(n, p);
    }

    let mut items: Vec<PlanItem> = Vec::new();
    let mut item_of: HashMap<&str, usize> = HashMap::new();
    for (p, n) in plan.executed_nodes().enumerate() {
        let node = &g.nodes[n];
        if node.op == Op::KVAppend {
            continue;
        }
        let out = node.output();
        let last_use = if g.is_output(out) {
            FOREVER
        } else {
            consumers
                .get(out)
                .into_iter()
                .flatten()
                .filter_map(|c| position.get(c).copied())
                .max()
                .unwrap_or(p)
                .max(p)
        };
        if node.op.is_view() {
            if let Some(&k) = item_of.get(node.inputs[0].as_str()) {
                let it = &mut items[k];
                it.tensors.push(out.to_string());
                it.lifetime.last_use = it.lifetime.last_use.max(last_use);
                item_of.insert(out, k);
            }
            continue;
        }
        let t = plan.tensor_index(out).expect("node outputs are declared");
        let size = size_expr(out, g.tensors[t].dtype, &plan.shapes[t])?;
        item_of.insert(out, items.len());
        items.push(PlanItem { tensors: vec![out.to_string()], size, lifetime: Lifetime { def: p, last_use } });
    }
    Ok(items)
}

/// Plans every activation of a compiled graph against its symbol maxima.
pub fn plan_memory(plan: &CompiledPlan) -> Result<MemoryPlan, MemPlanError> {
    let max = plan.max_bindings()?;
    assign_blocks(plan_items(plan)?, &max)
}

/// One contiguous region per block, allocated up front.
#[derive(Debug, Default)]
pub struct ArenaSet {
    regions: Vec<Vec<u64>>,
    allocations: usize,
}

impl ArenaSet {
    pub fn preallocate(plan: &MemoryPlan) -> Self {
        let mut set = ArenaSet::default();
        for b in &plan.blocks {
            set.regions.push(vec![0u64; b.max_bytes.div_ceil(8) as usize]);
            set.allocations += 1;
        }
        set
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn capacity_bytes(&self, block: usize) -> usize {
        self.regions[block].len() * 8
    }

    pub fn total_bytes(&self) -> usize {
        self.regions.iter().map(|r| r.len() * 8).sum()
    }

    /// Regions allocated so far. Only `preallocate` allocates.
    pub fn allocations(&self) -> usize {
        self.allocations
    }

    pub fn region(&self, block: usize) -> &[u64] {
        &self.regions[block]
    }

    pub fn region_mut(&mut self, block: usize) -> &mut [u64] {
        &mut self.regions[block]
    }

    /// Moves a region out so it can be written while others are read.
    /// Must be handed back with [`ArenaSet::restore`].
    pub fn take(&mut self, block: usize) -> Vec<u64> {
        std::mem::take(&mut self.regions[block])
    }

    pub fn restore(&mut self, block: usize, region: Vec<u64>) {
        debug_assert!(self.regions[block].is_empty());
        self.regions[block] = region;
    }
}
