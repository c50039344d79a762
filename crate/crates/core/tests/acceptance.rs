//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{check_plan, kv_trace_matches, prompt, random_graph};
use dynlite::cli::{run_cli, EXIT_OK};
use dynlite::graphir::{build_toy_decoder, save_graph, AttrValue, CacheLayout, DType, Dim, GraphBuilder, Op, ToyConfig};
use dynlite::memplan::plan_memory;
use dynlite::quantfp4::e0m4::{code_to_half_bits, exp_bin_part};
use dynlite::quantfp4::{dequantize_e0m4, f16_to_f32, f32_to_f16, mae_compare, quantize_e0m4, Half};
use dynlite::refexec::{causal_mask, generate, Engine, Session, SessionOptions, StepInput};
use dynlite::shapeinfer::{compile, derive_shapes, fuse, CompileOptions};
use dynlite::symexpr::{CompareResult, SymExpr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = fn() -> String;

fn e(s: &str) -> SymExpr {
    s.parse().unwrap()
}

fn shape(strs: &[&str]) -> Vec<SymExpr> {
    strs.iter().map(|s| e(s)).collect()
}

fn shape_examples() -> String {
    let mut b = GraphBuilder::new();
    b.symbol("N", None).symbol("sumN", None);
    b.input("past", DType::F16, vec![Dim::sym("sumN - N"), Dim::Lit(1), Dim::Lit(2), Dim::Lit(128)]);
    b.input("new", DType::F16, vec![Dim::sym("N"), Dim::Lit(1), Dim::Lit(2), Dim::Lit(128)]);
    b.node(Op::Concat, &["past", "new"], "present", DType::F16).attr("axis", AttrValue::Int(0));
    b.input("x", DType::F16, vec![Dim::Lit(1), Dim::sym("N"), Dim::Lit(4096)]);
    b.constant("target", &[4], vec![1, -1, 32, 128]);
    b.node(Op::Reshape, &["x", "target"], "y", DType::F16).attr("allowzero", AttrValue::Int(0));
    let d = derive_shapes(&b.finish().unwrap()).unwrap();
    assert_eq!(d.shapes["present"], shape(&["sumN", "1", "2", "128"]));
    assert_eq!(d.shapes["y"], shape(&["1", "N", "32", "128"]));
    assert_eq!(e("N*4096").compare(&e("N*32*128")), CompareResult::Equal);
    assert_eq!(e("N*4096").compare(&e("sumN*2*128")), CompareResult::Unknown);
    "concat, reshape and both comparisons exact".into()
}

fn shape_op_elimination() -> String {
    let (g, w) = build_toy_decoder(&ToyConfig::default()).unwrap();
    let plan = compile(&g, Some(&w), CompileOptions::default()).unwrap();
    assert_eq!(plan.shape_ops_retained(), 0);
    assert_eq!(plan.sync_points, 1);
    format!("retained {}, sync points {}", plan.shape_ops_retained(), plan.sync_points)
}

fn memory_plan() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let g = random_graph(&mut rng);
        let plan = compile(&g, None, CompileOptions::default()).unwrap();
        check_plan(&plan, &plan_memory(&plan).unwrap(), &mut rng);
    }
    let (g, w) = build_toy_decoder(&ToyConfig::default()).unwrap();
    let plan = compile(&g, Some(&w), CompileOptions::default()).unwrap();
    let m = plan_memory(&plan).unwrap();
    check_plan(&plan, &m, &mut rng);
    assert!(m.peak_bytes < m.naive_bytes);
    format!("200 graphs without overlap; toy peak {} < naive {}", m.peak_bytes, m.naive_bytes)
}

fn e0m4_bits() -> String {
    for n in [1u8, 2] {
        for code in 0u8..16 {
            let expect = ((n as u16 + 15) << 10) | ((code as u16) << 6);
            assert_eq!(code_to_half_bits(code, exp_bin_part(n)), expect);
        }
        // A ramp that uses every code, decoded through the real path.
        let ramp: Vec<f32> = (0..1024).map(|i| i as f32 / 1023.0).collect();
        let g = quantize_e0m4(&ramp, n).unwrap();
        let mut seen = [false; 16];
        for (i, v) in dequantize_e0m4(&g).iter().enumerate() {
            let c = g.code(i);
            seen[c as usize] = true;
            let w1 = f16_to_f32(Half(((n as u16 + 15) << 10) | ((c as u16) << 6)));
            assert_eq!(v.to_bits(), ((w1 - f16_to_f32(g.bias)) / g.scale).to_bits());
        }
        assert!(seen.iter().all(|&s| s), "ramp misses a code for n={n}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = Normal::new(0.0f32, 0.02).unwrap();
    for _ in 0..2000 {
        let mut w: Vec<f32> = (0..128).map(|_| normal.sample(&mut rng)).collect();
        for _ in 0..rng.gen_range(1..4) {
            let i = rng.gen_range(0..w.len());
            w[i] = 0.0;
        }
        for n in [1u8, 2] {
            let d = dequantize_e0m4(&quantize_e0m4(&w, n).unwrap());
            assert!(w.iter().zip(&d).all(|(x, y)| *x != 0.0 || *y == 0.0));
        }
    }
    "32 code patterns exact; zeros exact in 4000 straddling groups".into()
}

fn mae_ratio() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0f32, 0.02).unwrap();
    let (k, cols) = (4096, 128);
    let mut sum = 0.0;
    for _ in 0..100 {
        let w: Vec<f32> = (0..k * cols).map(|_| normal.sample(&mut rng)).collect();
        sum += mae_compare(&w, k, cols, 128, 1).unwrap().ratio.unwrap();
    }
    let mean = sum / 100.0;
    assert!((0.93..=0.98).contains(&mean), "mean ratio {mean:.4}");
    format!("mean ratio {mean:.4}")
}

fn kv_equivalence() -> String {
    for seed in 0..50u64 {
        let layout = if seed % 2 == 0 { CacheLayout::SeqFirst } else { CacheLayout::HeadsFirst };
        kv_trace_matches(layout, 1000 + seed);
    }
    "50 traces bitwise equal, copy bytes match formula".into()
}

fn end_to_end() -> String {
    let dir = tempfile::tempdir().unwrap();
    let (g, w) = build_toy_decoder(&ToyConfig::default()).unwrap();
    let (gp, wp) = (dir.path().join("toy.json"), dir.path().join("toy.lgw"));
    std::fs::write(&gp, save_graph(&g)).unwrap();
    std::fs::write(&wp, w.to_bytes()).unwrap();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let args = ["dynlite", "compare", "--graph", gp.to_str().unwrap(), "--weights", wp.to_str().unwrap()];
    let args = args.into_iter().chain(["--prompt", "3,1,4,1,5,9,2,6", "--max-new-tokens", "32"]);
    assert_eq!(run_cli(args, &mut out, &mut err), EXIT_OK, "{}", String::from_utf8_lossy(&err));
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!(v["tokens_identical"], true);
    assert_eq!(v["optimized"]["tokens"].as_array().unwrap().len(), 32);

    let p = [3, 1, 4, 1, 5, 9, 2, 6];
    let runs: Vec<Vec<i64>> = [1, 64, 128]
        .iter()
        .map(|&pad| {
            let mut s = Session::new(&g, &w, SessionOptions { pad, ..SessionOptions::default() }).unwrap();
            generate(&mut s, &p, 32, false).unwrap().tokens
        })
        .collect();
    assert!(runs.iter().all(|t| *t == runs[0]));
    assert_eq!(serde_json::json!(runs[0]), v["optimized"]["tokens"]);
    "compare identical over 32 tokens; P in {1,64,128} invariant".into()
}

fn zero_allocation() -> String {
    let (g, w) = build_toy_decoder(&ToyConfig::default()).unwrap();
    let mut s = Session::new(&g, &w, SessionOptions::default()).unwrap();
    generate(&mut s, &prompt(8, 1), 4, false).unwrap();
    let before = s.counters().allocations;
    let out = generate(&mut s, &prompt(16, 2), 65, false).unwrap();
    assert_eq!(out.report.steps, 64);
    assert_eq!(out.report.counters.allocations, 0);
    assert_eq!(s.counters().allocations, before);
    "allocations delta 0 over 64 steps".into()
}

fn prefill(s: &mut Session, p: &[i64]) -> Vec<f32> {
    let n = p.len();
    let positions: Vec<i64> = (0..n as i64).collect();
    let mask = causal_mask(n);
    s.reset();
    s.step(&StepInput { ids: p, positions: &positions, mask: &mask, n, sum_n: n }).unwrap().to_vec()
}

fn fusion() -> String {
    let cfg = ToyConfig::default();
    let (g, w) = build_toy_decoder(&cfg).unwrap();
    let mut fused = Session::new(&g, &w, SessionOptions::default()).unwrap();
    let mut plain = Session::new(&g, &w, SessionOptions { fuse: false, ..SessionOptions::default() }).unwrap();
    assert!(fused.plan().graph.nodes.len() < plain.plan().graph.nodes.len());
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let p = prompt(8 + 10 * seed as usize, 40 + seed);
        let (a, b) = (prefill(&mut fused, &p), prefill(&mut plain, &p));
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()));
        worst = worst.max(diff / scale);
    }
    assert!(worst <= 1e-6, "relative difference {worst:e}");

    let (fg, stats) = fuse(&g, &w);
    let norms = 2 * cfg.layers + 1;
    assert_eq!(stats.rms_norm, norms);
    assert_eq!(fg.nodes.iter().filter(|n| n.op == Op::RMSNorm).count(), norms);
    assert!(!fg.nodes.iter().any(|n| matches!(n.op, Op::ReduceMean | Op::Sqrt | Op::Pow)));
    format!("max relative difference {worst:.2e}; {norms} rms-norm subgraphs now single nodes")
}

fn binary16() -> String {
    let mut nans = 0;
    for b in 0..=u16::MAX {
        let h = Half(b);
        let back = f32_to_f16(f16_to_f32(h));
        if h.is_nan() {
            assert!(back.is_nan() && back.sign() == h.sign());
            nans += 1;
        } else {
            assert_eq!(back.0, b);
        }
    }
    format!("65536 patterns, {nans} NaNs normalized")
}

fn main() {
    let criteria: [(&str, Check, Option<u64>); 10] = [
        ("shape examples", shape_examples, Some(1)),
        ("shape-op elimination", shape_op_elimination, None),
        ("memory plan soundness and savings", memory_plan, Some(30)),
        ("E0M4 bit contract", e0m4_bits, None),
        ("FP4/INT4 MAE ratio", mae_ratio, Some(60)),
        ("KV cache equivalence", kv_equivalence, None),
        ("end-to-end oracle equivalence", end_to_end, Some(30)),
        ("zero-allocation decoding", zero_allocation, None),
        ("fusion equivalence", fusion, Some(10)),
        ("binary16 round trip", binary16, Some(5)),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        let verdict = match result {
            Ok(detail) => match limit {
                Some(s) if took > Duration::from_secs(*s) => Err(format!("{detail}; over the {s}s limit")),
                _ => Ok(detail),
            },
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.2}s]", i + 1, took.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
