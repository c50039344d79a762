//! Greedy decode loop with padded total length.

use std::time::Instant;

use serde::Serialize;

use super::{Counters, ExecError};
use crate::kvcache::KvError;

/// One forward call: `n` new tokens against a total length of `sum_n`.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub ids: &'a [i64],
    pub positions: &'a [i64],
    /// `[n, sum_n]` additive mask.
    pub mask: &'a [f32],
    pub n: usize,
    pub sum_n: usize,
}

/// Something that can run the decoder one call at a time.
pub trait Engine {
    /// Returns logits laid out as `[n, vocab]`.
    fn step(&mut self, input: &StepInput) -> Result<&[f32], ExecError>;
    /// Forgets all cached tokens.
    fn reset(&mut self);
    fn counters(&self) -> Counters;
    fn pad(&self) -> usize;
    fn max_seq(&self) -> usize;
}

impl Counters {
    /// Work done between `earlier` and `self`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            shape_updates: self.shape_updates - earlier.shape_updates,
            shape_ops_executed: self.shape_ops_executed - earlier.shape_ops_executed,
            sync_points: self.sync_points - earlier.sync_points,
            allocations: self.allocations - earlier.allocations,
            kv_copy_bytes: self.kv_copy_bytes - earlier.kv_copy_bytes,
        }
    }
}

/// Rounds `len` up to a multiple of `pad`, capped at `max_seq`.
pub fn padded_len(len: usize, pad: usize, max_seq: usize) -> usize {
    let pad = pad.max(1);
    (len.div_ceil(pad) * pad).min(max_seq)
}

/// `[n, n]` lower-triangular mask for an unpadded prefill.
pub fn causal_mask(n: usize) -> Vec<f32> {
    let mut m = vec![f32::MIN; n * n];
    for i in 0..n {
        m[i * n..i * n + i + 1].fill(0.0);
    }
    m
}

/// `[1, padded]` mask for a single decode token that sees `len` positions.
pub fn decode_mask(len: usize, padded: usize) -> Vec<f32> {
    let mut m = vec![f32::MIN; padded];
    m[..len.min(padded)].fill(0.0);
    m
}

/// Index of the largest value, lowest index on ties. NaN never wins.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || (v[best].is_nan() && !x.is_nan()) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub len: usize,
    pub padded_len: usize,
    pub token: i64,
    /// Shape updates since the prefill, including this step.
    pub shape_updates: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Decode steps after the prefill.
    pub steps: usize,
    pub prefill_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens_per_step_ms: Option<f64>,
    /// Counter deltas over the decode steps only.
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<i64>,
    pub steps: Vec<StepRecord>,
    pub report: StepReport,
    /// Logits of the final position of the last call.
    pub last_logits: Vec<f32>,
}

fn last_row(logits: &[f32], n: usize) -> &[f32] {
    let vocab = logits.len() / n.max(1);
    &logits[(n - 1) * vocab..n * vocab]
}

/// Prefills `prompt` then greedily generates `max_new` tokens. The first
/// token comes from the prefill; each later one is a decode step.
pub fn generate<E: Engine + ?Sized>(engine: &mut E, prompt: &[i64], max_new: usize, time: bool) -> Result<Generation, ExecError> {
    if prompt.is_empty() {
        return Err(ExecError::EmptyPrompt);
    }
    let max_seq = engine.max_seq();
    let requested = prompt.len() + max_new.saturating_sub(1);
    if requested > max_seq {
        return Err(KvError::CapacityExceeded { requested, max_seq }.into());
    }
    let pad = engine.pad();
    let mut out = Generation {
        tokens: Vec::with_capacity(max_new),
        steps: Vec::new(),
        report: StepReport { steps: 0, prefill_tokens: prompt.len(), tokens_per_step_ms: None, counters: Counters::default() },
        last_logits: Vec::new(),
    };
    if max_new == 0 {
        return Ok(out);
    }
    engine.reset();
    let n = prompt.len();
    let positions: Vec<i64> = (0..n as i64).collect();
    let mask = causal_mask(n);
    let logits = engine.step(&StepInput { ids: prompt, positions: &positions, mask: &mask, n, sum_n: n })?;
    let row = last_row(logits, n);
    let mut token = argmax(row) as i64;
    out.last_logits = row.to_vec();
    out.tokens.push(token);

    let before = engine.counters();
    let mut total_ms = 0.0;
    for _ in 1..max_new {
        let len = n + out.tokens.len();
        let padded = padded_len(len, pad, max_seq);
        let mask = decode_mask(len, padded);
        let start = time.then(Instant::now);
        let logits = engine.step(&StepInput { ids: &[token], positions: &[len as i64 - 1], mask: &mask, n: 1, sum_n: padded })?;
        token = argmax(logits) as i64;
        let elapsed_ms = start.map(|s| s.elapsed().as_secs_f64() * 1e3);
        total_ms += elapsed_ms.unwrap_or(0.0);
        out.last_logits.clear();
        out.last_logits.extend_from_slice(logits);
        out.tokens.push(token);
        let shape_updates = engine.counters().since(&before).shape_updates;
        out.steps.push(StepRecord { len, padded_len: padded, token, shape_updates, elapsed_ms });
    }
    out.report.steps = out.steps.len();
    out.report.counters = engine.counters().since(&before);
    if time && !out.steps.is_empty() {
        out.report.tokens_per_step_ms = Some(total_ms / out.steps.len() as f64);
    }
    Ok(out)
}
