//! Oracles shared by the integration suites and the acceptance target.
#![allow(dead_code)]

use std::collections::HashMap;

use dynlite::graphir::{build_toy_decoder, AttrValue, CacheLayout, DType, Dim, Graph, GraphBuilder, Op, ToyConfig};
use dynlite::memplan::MemoryPlan;
use dynlite::refexec::{generate, NaiveSession, Session, SessionOptions};
use dynlite::shapeinfer::{bind_symbols, CompiledPlan};
use dynlite::symexpr::Bindings;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn prompt(len: usize, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..97)).collect()
}

/// Random DAGs over `[rows, cols]` activations, with views and matmuls.
pub fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    const ROWS: [&str; 4] = ["N", "M", "N + M", "2*N"];
    let mut b = GraphBuilder::new();
    b.symbol("N", Some(16)).symbol("M", Some(16));
    let mut pool: Vec<(String, usize, u64)> = Vec::new();
    for i in 0..2 {
        let (r, c) = (rng.gen_range(0..2), [4u64, 8][rng.gen_range(0..2)]);
        let name = format!("in{i}");
        b.input(&name, DType::F32, vec![Dim::sym(ROWS[r]), Dim::Lit(c)]);
        pool.push((name, r, c));
    }
    let steps = rng.gen_range(3..25);
    for s in 0..steps {
        let out = format!("t{s}");
        let (x, r, c) = pool[rng.gen_range(0..pool.len())].clone();
        match rng.gen_range(0..6) {
            0 => {
                let partner = pool.iter().filter(|p| p.1 == r && p.2 == c).nth(rng.gen_range(0..2)).cloned();
                let y = partner.map(|p| p.0).unwrap_or_else(|| x.clone());
                b.node(Op::Add, &[&x, &y], &out, DType::F32);
                pool.push((out, r, c));
            }
            1 if r < 2 => {
                let Some(y) = pool.iter().find(|p| p.1 == 1 - r && p.2 == c).map(|p| p.0.clone()) else {
                    b.node(Op::Silu, &[&x], &out, DType::F32);
                    pool.push((out, r, c));
                    continue;
                };
                b.node(Op::Concat, &[&x, &y], &out, DType::F32).attr("axis", AttrValue::Int(0));
                pool.push((out, 2, c));
            }
            2 => {
                let c2 = [4u64, 8, 16][rng.gen_range(0..3)];
                let w = format!("w{s}");
                b.weight(&w, DType::F32, &[c, c2]);
                b.node(Op::MatMul, &[&x, &w], &out, DType::F32);
                pool.push((out, r, c2));
            }
            3 => {
                let t = format!("shape{s}");
                b.constant(&t, &[3], vec![0, (c / 2) as i64, 2]);
                b.node(Op::Reshape, &[&x, &t], &out, DType::F32).attr("allowzero", AttrValue::Int(0));
                b.node(Op::Neg, &[&out], &format!("{out}.neg"), DType::F32);
                if rng.gen_bool(0.3) {
                    b.mark_output(&format!("{out}.neg"));
                }
            }
            4 => {
                let two = format!("two{s}");
                b.constant(&two, &[], vec![2]);
                let rows = format!("rows{s}");
                b.node(Op::Shape, &[&x], &rows, DType::I64);
                b.node(Op::Mul, &[&rows, &two], &format!("{rows}.x2"), DType::I64);
                b.node(Op::Neg, &[&x], &out, DType::F32);
                pool.push((out, r, c));
            }
            _ => {
                b.node(Op::Neg, &[&x], &out, DType::F32);
                pool.push((out, r, c));
            }
        }
        let last = pool.last().unwrap().0.clone();
        if rng.gen_bool(0.15) && last.starts_with('t') {
            b.mark_output(&last);
        }
    }
    b.node(Op::Neg, &[&pool.last().unwrap().0], "final", DType::F32);
    b.mark_output("final");
    b.finish().unwrap()
}

/// Lifetimes recomputed straight from the program, one per tensor.
pub fn oracle_lifetimes(plan: &CompiledPlan) -> HashMap<String, (usize, usize)> {
    let order: Vec<usize> = plan.executed_nodes().collect();
    let mut out = HashMap::new();
    for (p, &n) in order.iter().enumerate() {
        let name = plan.graph.nodes[n].output();
        let mut last = p;
        for (q, &m) in order.iter().enumerate() {
            if plan.graph.nodes[m].inputs.iter().any(|i| i == name) {
                last = last.max(q);
            }
        }
        if plan.graph.is_output(name) {
            last = usize::MAX;
        }
        out.insert(name.to_string(), (p, last));
    }
    out
}

pub fn storage_root(plan: &CompiledPlan, name: &str) -> String {
    let producers = plan.graph.producers();
    let mut cur = name.to_string();
    while let Some(&p) = producers.get(cur.as_str()) {
        let n = &plan.graph.nodes[p];
        if !n.op.is_view() {
            break;
        }
        cur = n.inputs[0].clone();
    }
    cur
}

pub fn check_plan(plan: &CompiledPlan, m: &MemoryPlan, rng: &mut ChaCha8Rng) {
    m.verify().unwrap();
    let life = oracle_lifetimes(plan);
    let names: Vec<&String> = m.assignment.keys().collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            if m.assignment[*a] != m.assignment[*b] {
                continue;
            }
            let (la, lb) = (life[*a], life[*b]);
            let overlap = la.0 <= lb.1 && lb.0 <= la.1;
            if overlap {
                assert_eq!(storage_root(plan, a), storage_root(plan, b), "{a} and {b} overlap in one block");
            }
        }
    }
    // Every planned tensor fits its block at concrete bindings.
    let max = plan.max_bindings().unwrap();
    for _ in 0..5 {
        let mut b: Bindings = max.iter().map(|(k, &v)| (k.clone(), rng.gen_range(1..=v))).collect();
        if let (Some(&n), Some(&s)) = (b.get("N"), b.get("sumN")) {
            b.insert("sumN".into(), s.max(n));
        }
        let r = bind_symbols(plan, &b).unwrap();
        for (name, &block) in &m.assignment {
            let t = plan.tensor_index(name).unwrap();
            let width = plan.graph.tensors[t].dtype.byte_width().unwrap();
            let bytes = r.numel(t) as u64 * width;
            assert!(bytes <= m.blocks[block].max_bytes, "{name}: {bytes} > block {block}");
            let block_now = m.blocks[block].size.evaluate(&b).unwrap() as u64;
            assert!(bytes <= block_now);
        }
    }
}

pub fn kv_trace_matches(layout: CacheLayout, seed: u64) {
    let cfg = ToyConfig { layout, ..ToyConfig::default() };
    let (g, w) = build_toy_decoder(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (plen, steps) = (rng.gen_range(1..=64), rng.gen_range(1..=32));
    let p = prompt(plen, seed);
    let mut fast = Session::new(&g, &w, SessionOptions::default()).unwrap();
    let mut slow = NaiveSession::new(&g, &w, None, false).unwrap();
    let a = generate(&mut fast, &p, steps + 1, false).unwrap();
    let b = generate(&mut slow, &p, steps + 1, false).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(bits(&a.last_logits), bits(&b.last_logits));
    assert_eq!(fast.counters().kv_copy_bytes, 0);

    let total = plen + steps;
    // K and V share one cache tensor per layer.
    let trailing = fast.kv_arenas()[0].trailing();
    assert_eq!(trailing, 2 * cfg.heads * cfg.head_dim);
    for (arena, cache) in fast.kv_arenas().iter().zip(slow.caches()) {
        assert_eq!(arena.cur_len(), total);
        let past = arena.slice(&arena.view_past()).to_vec();
        let oracle = cache.as_f32().unwrap();
        let oracle = match layout {
            CacheLayout::SeqFirst => oracle.to_vec(),
            // [1, heads, seq, d] against the arena's [1, seq, heads, d].
            CacheLayout::HeadsFirst => {
                let (heads, hd) = (arena.dims()[2], arena.dims()[3]);
                let mut t = vec![0.0; oracle.len()];
                for h in 0..heads {
                    for s in 0..total {
                        for d in 0..hd {
                            t[(s * heads + h) * hd + d] = oracle[(h * total + s) * hd + d];
                        }
                    }
                }
                t
            }
        };
        assert_eq!(bits(&past), bits(&oracle));
    }
    // The oracle copies every cached entry once per call.
    let per_call: usize = (0..=steps).map(|i| if i == 0 { 0 } else { plen + i - 1 }).sum();
    assert_eq!(slow.counters().kv_copy_bytes as usize, cfg.layers * per_call * trailing * 4);
}
