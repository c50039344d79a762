//! Deterministic desk-scale decoder graphs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::weights::{WeightStore, WeightTensor};
use super::{AttrValue, DType, Dim, Graph, GraphBuilder, GraphError, KvPair, Op};

/// Where the sequence axis sits in the per-layer KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheLayout {
    /// `[seq, 1, 2·heads, head_dim]`, directly usable as an arena.
    SeqFirst,
    /// `[1, 2·heads, seq, head_dim]`, needs a transpose before arena binding.
    HeadsFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub seed: u64,
    /// MLP width; `0` means `2 * hidden`.
    pub ffn: usize,
    pub max_seq: i64,
    pub layout: CacheLayout,
    pub eps: f64,
}

impl ToyConfig {
    pub fn new(layers: usize, hidden: usize, heads: usize, head_dim: usize, vocab: usize, seed: u64) -> Self {
        ToyConfig { layers, hidden, heads, head_dim, vocab, seed, ffn: 0, max_seq: 256, layout: CacheLayout::SeqFirst, eps: 1e-5 }
    }

    fn ffn_width(&self) -> usize {
        if self.ffn == 0 {
            2 * self.hidden
        } else {
            self.ffn
        }
    }
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig::new(2, 64, 4, 16, 97, 7)
    }
}

fn ints(v: &[i64]) -> AttrValue {
    AttrValue::Ints(v.to_vec())
}

struct Ctx<'a> {
    b: GraphBuilder,
    w: WeightStore,
    rng: ChaCha8Rng,
    cfg: &'a ToyConfig,
}

impl Ctx<'_> {
    fn gaussian(&mut self, name: &str, shape: &[usize], std: f32, mean: f32) {
        let dist = Normal::new(mean, std).expect("valid normal");
        let count = shape.iter().product();
        let data: Vec<f32> = (0..count).map(|_| dist.sample(&mut self.rng)).collect();
        let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        self.b.weight(name, DType::F32, &dims);
        self.w.insert(name, WeightTensor::f32(shape.to_vec(), data));
    }

    fn scalar(&mut self, name: &str, value: f32) {
        self.b.weight(name, DType::F32, &[]);
        self.w.insert(name, WeightTensor::f32(vec![], vec![value]));
    }

    fn f32_node(&mut self, op: Op, inputs: &[&str], out: &str) {
        self.b.node(op, inputs, out, DType::F32);
    }

    /// Unfused rms-norm: x / sqrt(mean(x^2) + eps) * w.
    fn rms_norm(&mut self, x: &str, prefix: &str) -> String {
        let hidden = self.cfg.hidden;
        let w = format!("{prefix}.weight");
        self.gaussian(&w, &[hidden], 0.05, 1.0);
        let p = format!("{prefix}.pow");
        let m = format!("{prefix}.mean");
        let a = format!("{prefix}.add_eps");
        let s = format!("{prefix}.sqrt");
        let d = format!("{prefix}.div");
        let out = format!("{prefix}.out");
        self.f32_node(Op::Pow, &[x, "const.two"], &p);
        self.b.node(Op::ReduceMean, &[&p], &m, DType::F32).attr("axes", ints(&[-1])).attr("keepdims", AttrValue::Int(1));
        self.f32_node(Op::Add, &[&m, "const.eps"], &a);
        self.f32_node(Op::Sqrt, &[&a], &s);
        self.f32_node(Op::Div, &[x, &s], &d);
        self.f32_node(Op::Mul, &[&d, &w], &out);
        out
    }

    fn linear(&mut self, x: &str, name: &str, k: usize, n: usize) -> String {
        let w = format!("{name}.weight");
        self.gaussian(&w, &[k, n], 1.0 / (k as f32).sqrt(), 0.0);
        let out = format!("{name}.out");
        self.f32_node(Op::MatMul, &[x, &w], &out);
        out
    }

    /// Shape(x)[axis] as a rank-1 shape value.
    fn dim_of(&mut self, x: &str, axis: usize, prefix: &str) -> String {
        let shape = format!("{prefix}.shape");
        let idx = format!("{prefix}.idx");
        let g = format!("{prefix}.gather");
        let u = format!("{prefix}.unsq");
        self.b.node(Op::Shape, &[x], &shape, DType::I64);
        self.b.constant(&idx, &[], vec![axis as i64]);
        self.b.node(Op::Gather, &[&shape, &idx], &g, DType::I64).attr("axis", AttrValue::Int(0));
        self.b.node(Op::Unsqueeze, &[&g], &u, DType::I64).attr("axes", ints(&[0]));
        u
    }

    fn concat_i64(&mut self, parts: &[&str], out: &str) {
        self.b.node(Op::Concat, parts, out, DType::I64).attr("axis", AttrValue::Int(0));
    }

    fn reshape(&mut self, x: &str, target: &str, out: &str) {
        self.b.node(Op::Reshape, &[x, target], out, DType::F32).attr("allowzero", AttrValue::Int(0));
    }

    fn transpose(&mut self, x: &str, perm: &[i64], out: &str) {
        self.b.node(Op::Transpose, &[x], out, DType::F32).attr("perm", ints(perm));
    }

    fn layer(&mut self, l: usize, x: &str) -> String {
        let cfg = self.cfg;
        let (hd, h, d) = (cfg.hidden, cfg.heads as i64, cfg.head_dim as i64);
        let p = format!("l{l}");
        let hn = self.rms_norm(x, &format!("{p}.attn_norm"));
        let q = self.linear(&hn, &format!("{p}.q_proj"), hd, hd);
        let k = self.linear(&hn, &format!("{p}.k_proj"), hd, hd);
        let v = self.linear(&hn, &format!("{p}.v_proj"), hd, hd);

        // Sequence length recovered from the activation's shape, as an
        // exported model would do it.
        let n = self.dim_of(&hn, 1, &format!("{p}.seq"));
        let c_one = format!("{p}.c_one");
        let c_h = format!("{p}.c_heads");
        let c_d = format!("{p}.c_head_dim");
        let c_hidden = format!("{p}.c_hidden");
        self.b.constant(&c_one, &[1], vec![1]);
        self.b.constant(&c_h, &[1], vec![h]);
        self.b.constant(&c_d, &[1], vec![d]);
        self.b.constant(&c_hidden, &[1], vec![hd as i64]);

        let past = format!("{p}.past_kv");
        let present = format!("{p}.present_kv");
        let new_kv = format!("{p}.new_kv");
        let (kt, vt, qt) = match cfg.layout {
            CacheLayout::SeqFirst => {
                let t_nhd = format!("{p}.t_nhd");
                let t_n1hd = format!("{p}.t_n1hd");
                self.concat_i64(&[&n, &c_h, &c_d], &t_nhd);
                self.concat_i64(&[&n, &c_one, &c_h, &c_d], &t_n1hd);
                let q3 = format!("{p}.q3");
                let k4 = format!("{p}.k4");
                let v4 = format!("{p}.v4");
                self.reshape(&q, &t_nhd, &q3);
                self.reshape(&k, &t_n1hd, &k4);
                self.reshape(&v, &t_n1hd, &v4);
                self.b.node(Op::Concat, &[&k4, &v4], &new_kv, DType::F32).attr("axis", AttrValue::Int(2));
                self.b.input(&past, DType::F32, vec![Dim::sym("sumN - N"), Dim::Lit(1), Dim::Lit(2 * h as u64), Dim::Lit(d as u64)]);
                self.b.node(Op::Concat, &[&past, &new_kv], &present, DType::F32).attr("axis", AttrValue::Int(0));
                let kf = format!("{p}.k_full");
                let vf = format!("{p}.v_full");
                self.b
                    .node(Op::Slice, &[&present], &kf, DType::F32)
                    .attr("starts", ints(&[0]))
                    .attr("ends", ints(&[h]))
                    .attr("axes", ints(&[2]));
                self.b
                    .node(Op::Slice, &[&present], &vf, DType::F32)
                    .attr("starts", ints(&[h]))
                    .attr("ends", ints(&[2 * h]))
                    .attr("axes", ints(&[2]));
                let kf3 = format!("{p}.k_full3");
                let vf3 = format!("{p}.v_full3");
                self.b.node(Op::Squeeze, &[&kf], &kf3, DType::F32).attr("axes", ints(&[1]));
                self.b.node(Op::Squeeze, &[&vf], &vf3, DType::F32).attr("axes", ints(&[1]));
                let qt = format!("{p}.q_t");
                let kt = format!("{p}.k_t");
                let vt = format!("{p}.v_t");
                self.transpose(&q3, &[1, 0, 2], &qt);
                self.transpose(&kf3, &[1, 2, 0], &kt);
                self.transpose(&vf3, &[1, 0, 2], &vt);
                (kt, vt, qt)
            }
            CacheLayout::HeadsFirst => {
                let t_1nhd = format!("{p}.t_1nhd");
                self.concat_i64(&[&c_one, &n, &c_h, &c_d], &t_1nhd);
                let (q4, k4, v4) = (format!("{p}.q4"), format!("{p}.k4"), format!("{p}.v4"));
                self.reshape(&q, &t_1nhd, &q4);
                self.reshape(&k, &t_1nhd, &k4);
                self.reshape(&v, &t_1nhd, &v4);
                let (qh, kh, vh) = (format!("{p}.q_h"), format!("{p}.k_h"), format!("{p}.v_h"));
                self.transpose(&q4, &[0, 2, 1, 3], &qh);
                self.transpose(&k4, &[0, 2, 1, 3], &kh);
                self.transpose(&v4, &[0, 2, 1, 3], &vh);
                self.b.node(Op::Concat, &[&kh, &vh], &new_kv, DType::F32).attr("axis", AttrValue::Int(1));
                self.b.input(&past, DType::F32, vec![Dim::Lit(1), Dim::Lit(2 * h as u64), Dim::sym("sumN - N"), Dim::Lit(d as u64)]);
                self.b.node(Op::Concat, &[&past, &new_kv], &present, DType::F32).attr("axis", AttrValue::Int(2));
                let kf = format!("{p}.k_full");
                let vf = format!("{p}.v_full");
                self.b
                    .node(Op::Slice, &[&present], &kf, DType::F32)
                    .attr("starts", ints(&[0]))
                    .attr("ends", ints(&[h]))
                    .attr("axes", ints(&[1]));
                self.b
                    .node(Op::Slice, &[&present], &vf, DType::F32)
                    .attr("starts", ints(&[h]))
                    .attr("ends", ints(&[2 * h]))
                    .attr("axes", ints(&[1]));
                let qt = format!("{p}.q_t");
                let kf3 = format!("{p}.k_full3");
                let vt = format!("{p}.v_t");
                let kt = format!("{p}.k_t");
                self.b.node(Op::Squeeze, &[&qh], &qt, DType::F32).attr("axes", ints(&[0]));
                self.b.node(Op::Squeeze, &[&kf], &kf3, DType::F32).attr("axes", ints(&[0]));
                self.b.node(Op::Squeeze, &[&vf], &vt, DType::F32).attr("axes", ints(&[0]));
                self.transpose(&kf3, &[0, 2, 1], &kt);
                (kt, vt, qt)
            }
        };
        let present_shape = match cfg.layout {
            CacheLayout::SeqFirst => vec![Dim::sym("sumN"), Dim::Lit(1), Dim::Lit(2 * h as u64), Dim::Lit(d as u64)],
            CacheLayout::HeadsFirst => vec![Dim::Lit(1), Dim::Lit(2 * h as u64), Dim::sym("sumN"), Dim::Lit(d as u64)],
        };
        self.b.mark_output(&present).set_output_shape(&present, present_shape);
        self.b.meta_mut().kv_pairs.push(KvPair {
            past: past.clone(),
            new: present.clone(),
            arena: format!("{p}.kv_arena"),
            slice: None,
        });

        let scores = format!("{p}.scores");
        let scaled = format!("{p}.scaled");
        let masked = format!("{p}.masked");
        let probs = format!("{p}.probs");
        let ctx = format!("{p}.ctx");
        self.f32_node(Op::MatMul, &[&qt, &kt], &scores);
        self.f32_node(Op::Mul, &[&scores, "const.attn_scale"], &scaled);
        self.f32_node(Op::Add, &[&scaled, "attn_mask"], &masked);
        self.b.node(Op::Softmax, &[&masked], &probs, DType::F32).attr("axis", AttrValue::Int(-1));
        self.f32_node(Op::MatMul, &[&probs, &vt], &ctx);
        let ctx_t = format!("{p}.ctx_t");
        self.transpose(&ctx, &[1, 0, 2], &ctx_t);
        let t_1nh = format!("{p}.t_1nh");
        self.concat_i64(&[&c_one, &n, &c_hidden], &t_1nh);
        let ctx2 = format!("{p}.ctx2");
        self.reshape(&ctx_t, &t_1nh, &ctx2);
        let o = self.linear(&ctx2, &format!("{p}.o_proj"), hd, hd);
        let x1 = format!("{p}.resid1");
        self.f32_node(Op::Add, &[x, &o], &x1);

        let hn2 = self.rms_norm(&x1, &format!("{p}.mlp_norm"));
        let ffn = cfg.ffn_width();
        let g = self.linear(&hn2, &format!("{p}.gate_proj"), hd, ffn);
        let u = self.linear(&hn2, &format!("{p}.up_proj"), hd, ffn);
        let sg = format!("{p}.gate_act");
        let gu = format!("{p}.gated");
        self.f32_node(Op::Silu, &[&g], &sg);
        self.f32_node(Op::Mul, &[&sg, &u], &gu);
        let down = self.linear(&gu, &format!("{p}.down_proj"), ffn, hd);
        let x2 = format!("{p}.resid2");
        self.f32_node(Op::Add, &[&x1, &down], &x2);
        x2
    }
}

/// Builds an L-layer decoder with unfused rms-norm subgraphs, shape-op
/// chains feeding every reshape, and concat-style KV caches, plus seeded
/// weights.
pub fn build_toy_decoder(cfg: &ToyConfig) -> Result<(Graph, WeightStore), GraphError> {
    if cfg.layers == 0 || cfg.hidden == 0 || cfg.heads == 0 || cfg.head_dim == 0 || cfg.vocab == 0 {
        return Err(GraphError::Config("all dimensions must be >= 1".into()));
    }
    if cfg.hidden != cfg.heads * cfg.head_dim {
        return Err(GraphError::Config(format!(
            "hidden ({}) != heads ({}) x head_dim ({})",
            cfg.hidden, cfg.heads, cfg.head_dim
        )));
    }
    if cfg.max_seq < 1 {
        return Err(GraphError::Config("max_seq must be >= 1".into()));
    }
    let mut c = Ctx { b: GraphBuilder::new(), w: WeightStore::default(), rng: ChaCha8Rng::seed_from_u64(cfg.seed), cfg };
    c.b.symbol("N", Some(cfg.max_seq)).symbol("sumN", Some(cfg.max_seq));
    c.b.input("input_ids", DType::I64, vec![Dim::Lit(1), Dim::sym("N")]);
    c.b.input("position_ids", DType::I64, vec![Dim::Lit(1), Dim::sym("N")]);
    c.b.input("attn_mask", DType::F32, vec![Dim::Lit(1), Dim::sym("N"), Dim::sym("sumN")]);
    c.scalar("const.two", 2.0);
    c.scalar("const.eps", cfg.eps as f32);
    c.scalar("const.attn_scale", 1.0 / (cfg.head_dim as f32).sqrt());
    c.gaussian("embed.weight", &[cfg.vocab, cfg.hidden], 1.0, 0.0);
    c.b.node(Op::Gather, &["embed.weight", "input_ids"], "embed.out", DType::F32).attr("axis", AttrValue::Int(0));
    let mut x = "embed.out".to_string();
    for l in 0..cfg.layers {
        x = c.layer(l, &x);
    }
    let hf = c.rms_norm(&x, "final_norm");
    let logits_w = "lm_head.weight";
    c.gaussian(logits_w, &[cfg.hidden, cfg.vocab], 1.0 / (cfg.hidden as f32).sqrt(), 0.0);
    c.f32_node(Op::MatMul, &[&hf, logits_w], "logits");
    c.b.mark_output("logits").set_output_shape("logits", vec![Dim::Lit(1), Dim::sym("N"), Dim::Lit(cfg.vocab as u64)]);
    c.b.meta_mut().name = Some("toy-decoder".into());
    c.b.meta_mut().position_ids = Some("position_ids".into());
    let graph = c.b.finish()?;
    Ok((graph, c.w))
}
