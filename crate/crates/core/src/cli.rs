//! Command-line front end. The `dynlite` binary is a thin wrapper around
//! [`run_cli`].

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::{json, Value};

use crate::graphir::weights::WeightStore;
use crate::graphir::{build_toy_decoder, load_graph, save_graph, CacheLayout, Graph, ToyConfig};
use crate::memplan::plan_memory;
use crate::quantfp4::{mae_compare, quantize_weight, Scheme};
use crate::refexec::{generate, Engine, ExecError, Generation, NaiveSession, QuantConfig, Session, SessionOptions};
use crate::shapeinfer::{compile, CompileOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COMPILE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dynlite", version, about = "Dynamic-shape decoder runtime tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random toy decoder graph and its weights.
    BuildToyModel(BuildArgs),
    /// Print symbolic shapes, node classes and the plan summary.
    InferShapes(CompileArgs),
    /// Print the memory plan for a graph.
    PlanMemory(CompileArgs),
    /// Quantize every 2-D float weight and report reconstruction error.
    Quantize(QuantizeArgs),
    /// Greedy decode with one pipeline.
    Run(RunArgs),
    /// Decode with the optimized and the naive pipeline and diff them.
    Compare(RunArgs),
    /// FP4 vs INT4 reconstruction error, on a weight file or synthetic Gaussian weights.
    MaeReport(MaeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    SeqFirst,
    HeadsFirst,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 97)]
    pub vocab: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub max_seq: i64,
    #[arg(long, value_enum, default_value_t = LayoutArg::SeqFirst)]
    pub layout: LayoutArg,
    /// Graph JSON destination.
    #[arg(long)]
    pub graph: PathBuf,
    /// Weight file destination.
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    pub graph: PathBuf,
    /// Weights enable fusion.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub no_fuse: bool,
    #[arg(long)]
    pub no_fold: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    E0m4,
    Int4,
    F32,
}

impl SchemeArg {
    fn scheme(self) -> Option<Scheme> {
        match self {
            SchemeArg::E0m4 => Some(Scheme::E0M4),
            SchemeArg::Int4 => Some(Scheme::Int4),
            SchemeArg::F32 => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    pub weights: PathBuf,
    #[arg(long, value_enum, default_value_t = SchemeArg::E0m4)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 1)]
    pub n: u8,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    /// Directory for one `<tensor>.lgq` file per quantized weight.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Optimized,
    NaiveOracle,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, value_enum, default_value_t = SchemeArg::F32)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 1)]
    pub n: u8,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    /// Decode padding granularity.
    #[arg(long, default_value_t = 64)]
    pub pad: usize,
    /// Overrides the declared maximum of every sequence symbol.
    #[arg(long)]
    pub max_seq: Option<i64>,
    /// Comma separated token ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "prompt_file")]
    pub prompt: Vec<i64>,
    /// File of whitespace or comma separated token ids.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    #[arg(long, value_enum, default_value_t = Mode::Optimized)]
    pub mode: Mode,
    /// Also report wall-clock time per stage.
    #[arg(long)]
    pub time: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaeArgs {
    /// Weight file; omit to use synthetic Gaussian weights.
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, default_value_t = 1)]
    pub n: u8,
    #[arg(long, default_value_t = 4096)]
    pub k: usize,
    #[arg(long, default_value_t = 128)]
    pub cols: usize,
    #[arg(long, default_value_t = 0.02)]
    pub std: f32,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved settings of one decode run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub graph: PathBuf,
    pub weights: PathBuf,
    pub scheme: SchemeArg,
    pub n: u8,
    pub group_size: usize,
    pub pad: usize,
    pub max_seq: Option<i64>,
    pub prompt: Vec<i64>,
    pub max_new_tokens: usize,
    pub mode: Mode,
}

#[derive(Debug)]
pub enum CliError {
    Compile(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Compile(_) => EXIT_COMPILE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Compile(m) | CliError::Runtime(m) => m,
        }
    }
}

fn compile_err(e: impl std::fmt::Display) -> CliError {
    CliError::Compile(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Setup failures from the symbolic passes are compile errors; the rest
/// happen while running.
fn exec_err(e: ExecError) -> CliError {
    match e {
        ExecError::Shape(_) | ExecError::Graph(_) | ExecError::MemPlan(_) => CliError::Compile(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn read(path: &Path, wrap: fn(String) -> CliError) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| wrap(format!("{}: {e}", path.display())))
}

fn load_graph_file(path: &Path) -> Result<Graph, CliError> {
    load_graph(&read(path, CliError::Compile)?).map_err(|e| CliError::Compile(format!("{}: {e}", path.display())))
}

fn load_weights(path: &Path) -> Result<WeightStore, CliError> {
    WeightStore::from_bytes(&read(path, CliError::Compile)?).map_err(|e| CliError::Compile(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, dest: Option<&Path>, report: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    match dest {
        Some(p) => write_file(p, format!("{text}\n").as_bytes()),
        None => writeln!(out, "{text}").map_err(runtime_err),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_COMPILE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    match cmd {
        Command::BuildToyModel(a) => build_toy_model(&a, out),
        Command::InferShapes(a) => infer_shapes(&a, out),
        Command::PlanMemory(a) => plan_memory_cmd(&a, out),
        Command::Quantize(a) => quantize(&a, out),
        Command::Run(a) => run(&a, out, err),
        Command::Compare(a) => compare(&a, out, err),
        Command::MaeReport(a) => mae_report(&a, out),
    }
}

fn build_toy_model(a: &BuildArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = ToyConfig {
        max_seq: a.max_seq,
        layout: match a.layout {
            LayoutArg::SeqFirst => CacheLayout::SeqFirst,
            LayoutArg::HeadsFirst => CacheLayout::HeadsFirst,
        },
        ..ToyConfig::new(a.layers, a.hidden, a.heads, a.head_dim, a.vocab, a.seed)
    };
    let (g, w) = build_toy_decoder(&cfg).map_err(compile_err)?;
    write_file(&a.graph, &save_graph(&g))?;
    write_file(&a.weights, &w.to_bytes())?;
    let report = json!({
        "graph": a.graph,
        "weights": a.weights,
        "nodes": g.nodes.len(),
        "tensors": g.tensors.len(),
        "weight_tensors": w.tensors.len(),
    });
    emit(out, None, &report)?;
    Ok(EXIT_OK)
}

fn compile_from(a: &CompileArgs) -> Result<crate::shapeinfer::CompiledPlan, CliError> {
    let g = load_graph_file(&a.graph)?;
    let w = a.weights.as_deref().map(load_weights).transpose()?;
    compile(&g, w.as_ref(), CompileOptions { fuse: !a.no_fuse, fold: !a.no_fold }).map_err(compile_err)
}

fn infer_shapes(a: &CompileArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let plan = compile_from(a)?;
    let dump = plan.dump();
    let summary = serde_json::to_value(plan.summary()).expect("summary serializes");
    match &a.out {
        Some(p) => {
            let lines: Vec<&str> = dump.lines().collect();
            let classes: Vec<String> = plan.classes.iter().map(|c| c.letter().to_string()).collect();
            emit(out, Some(p), &json!({ "tensors": lines, "node_classes": classes, "summary": summary }))?;
        }
        None => {
            write!(out, "{dump}").map_err(runtime_err)?;
            let classes: String = plan.classes.iter().map(|c| c.letter()).collect();
            writeln!(out, "node classes: {classes}").map_err(runtime_err)?;
            writeln!(out, "{summary}").map_err(runtime_err)?;
        }
    }
    Ok(EXIT_OK)
}

fn plan_memory_cmd(a: &CompileArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let plan = compile_from(a)?;
    let mem = plan_memory(&plan).map_err(compile_err)?;
    emit(out, a.out.as_deref(), &serde_json::to_value(mem.report()).expect("report serializes"))?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct MaeRow {
    name: String,
    k: usize,
    cols: usize,
    mae_fp4: f64,
    mae_int4: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio: Option<f64>,
    short_group: bool,
}

fn mae_table(w: &WeightStore, group_size: usize, n: u8) -> Result<Vec<MaeRow>, CliError> {
    let mut rows = Vec::new();
    for (name, t) in &w.tensors {
        let (Some(data), [k, cols]) = (t.as_f32(), t.shape.as_slice()) else { continue };
        let r = mae_compare(data, *k, *cols, group_size, n).map_err(|e| runtime_err(format!("{name}: {e}")))?;
        rows.push(MaeRow {
            name: name.clone(),
            k: *k,
            cols: *cols,
            mae_fp4: r.mae_fp4,
            mae_int4: r.mae_int4,
            ratio: r.ratio,
            short_group: k % group_size != 0,
        });
    }
    Ok(rows)
}

fn mean_ratio(rows: &[MaeRow]) -> Option<f64> {
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.ratio).collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

fn quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let w = load_weights(&a.weights)?;
    let rows = mae_table(&w, a.group_size, a.n)?;
    let mut files = Vec::new();
    if let (Some(scheme), Some(dir)) = (a.scheme.scheme(), &a.out_dir) {
        std::fs::create_dir_all(dir).map_err(runtime_err)?;
        for row in &rows {
            let data = w.tensors[&row.name].as_f32().expect("table holds float tensors");
            let q = quantize_weight(data, row.k, row.cols, scheme, a.n, a.group_size).map_err(runtime_err)?;
            let path = dir.join(format!("{}.lgq", row.name));
            write_file(&path, &q.to_bytes())?;
            files.push(path);
        }
    }
    let report = json!({
        "scheme": a.scheme,
        "n": a.n,
        "group_size": a.group_size,
        "tensors": rows,
        "mean_ratio": mean_ratio(&rows),
        "files": files,
    });
    emit(out, a.out.as_deref(), &report)?;
    Ok(EXIT_OK)
}

fn mae_report(a: &MaeArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let rows = match &a.weights {
        Some(p) => mae_table(&load_weights(p)?, a.group_size, a.n)?,
        None => {
            let normal = Normal::new(0.0f32, a.std).map_err(runtime_err)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut store = WeightStore::default();
            for t in 0..a.trials {
                let data: Vec<f32> = (0..a.k * a.cols).map(|_| normal.sample(&mut rng)).collect();
                store.insert(&format!("gaussian.{t}"), crate::graphir::weights::WeightTensor::f32(vec![a.k, a.cols], data));
            }
            mae_table(&store, a.group_size, a.n)?
        }
    };
    let report = json!({ "group_size": a.group_size, "n": a.n, "tensors": rows, "mean_ratio": mean_ratio(&rows) });
    emit(out, a.out.as_deref(), &report)?;
    Ok(EXIT_OK)
}

fn parse_prompt(text: &str) -> Result<Vec<i64>, CliError> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<i64>().map_err(|e| runtime_err(format!("prompt token `{s}`: {e}"))))
        .collect()
}

impl RunConfig {
    pub fn from_args(a: &RunArgs) -> Result<RunConfig, CliError> {
        let prompt = match &a.prompt_file {
            Some(p) => parse_prompt(&String::from_utf8_lossy(&read(p, CliError::Runtime)?))?,
            None => a.prompt.clone(),
        };
        Ok(RunConfig {
            graph: a.graph.clone(),
            weights: a.weights.clone(),
            scheme: a.scheme,
            n: a.n,
            group_size: a.group_size,
            pad: a.pad,
            max_seq: a.max_seq,
            prompt,
            max_new_tokens: a.max_new_tokens,
            mode: a.mode,
        })
    }

    fn quant(&self) -> Option<QuantConfig> {
        self.scheme.scheme().map(|scheme| QuantConfig { scheme, n: self.n, group_size: self.group_size })
    }
}

fn load_model(cfg: &RunConfig) -> Result<(Graph, WeightStore), CliError> {
    let mut g = load_graph_file(&cfg.graph)?;
    if let Some(m) = cfg.max_seq {
        for s in &mut g.symbols {
            s.max = Some(m);
        }
    }
    Ok((g, load_weights(&cfg.weights)?))
}

struct Timed {
    generation: Generation,
    setup_ms: f64,
    decode_ms: f64,
}

fn execute(cfg: &RunConfig, mode: Mode, g: &Graph, w: &WeightStore, time: bool) -> Result<Timed, CliError> {
    let start = Instant::now();
    let mut engine: Box<dyn Engine> = match mode {
        Mode::Optimized => {
            let opts = SessionOptions { pad: cfg.pad, quant: cfg.quant(), ..SessionOptions::default() };
            Box::new(Session::new(g, w, opts).map_err(exec_err)?)
        }
        Mode::NaiveOracle => Box::new(NaiveSession::new(g, w, cfg.quant().as_ref(), false).map_err(exec_err)?),
    };
    let setup_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let generation = generate(engine.as_mut(), &cfg.prompt, cfg.max_new_tokens, time).map_err(exec_err)?;
    Ok(Timed { generation, setup_ms, decode_ms: start.elapsed().as_secs_f64() * 1e3 })
}

fn run_value(t: &Timed, time: bool) -> Value {
    let mut v = json!({ "tokens": t.generation.tokens, "report": t.generation.report });
    if time {
        v["timing_ms"] = json!({
            "note": "local wall clock, not comparable to on-device measurements",
            "setup": t.setup_ms,
            "generate": t.decode_ms,
        });
    }
    v
}

fn run(a: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = RunConfig::from_args(a)?;
    let (g, w) = load_model(&cfg)?;
    let t = execute(&cfg, cfg.mode, &g, &w, a.time)?;
    if a.time {
        let _ = writeln!(err, "timing (local only): setup {:.3} ms, generate {:.3} ms", t.setup_ms, t.decode_ms);
    }
    let mut report = run_value(&t, a.time);
    report["config"] = serde_json::to_value(&cfg).expect("config serializes");
    emit(out, a.out.as_deref(), &report)?;
    Ok(EXIT_OK)
}

fn compare(a: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = RunConfig::from_args(a)?;
    let (g, w) = load_model(&cfg)?;
    let fast = execute(&cfg, Mode::Optimized, &g, &w, a.time)?;
    let slow = execute(&cfg, Mode::NaiveOracle, &g, &w, a.time)?;
    let identical = fast.generation.tokens == slow.generation.tokens;
    let (fc, sc) = (fast.generation.report.counters, slow.generation.report.counters);
    let saved = sc.kv_copy_bytes.saturating_sub(fc.kv_copy_bytes);
    let _ = writeln!(err, "tokens identical: {identical}; kv_copy_bytes saved: {saved}");
    let report = json!({
        "tokens_identical": identical,
        "kv_copy_bytes_saved": saved,
        "counter_deltas": {
            "shape_updates": sc.shape_updates as i64 - fc.shape_updates as i64,
            "shape_ops_executed": sc.shape_ops_executed as i64 - fc.shape_ops_executed as i64,
            "sync_points": sc.sync_points as i64 - fc.sync_points as i64,
            "allocations": sc.allocations as i64 - fc.allocations as i64,
            "kv_copy_bytes": sc.kv_copy_bytes as i64 - fc.kv_copy_bytes as i64,
        },
        "optimized": run_value(&fast, a.time),
        "naive_oracle": run_value(&slow, a.time),
        "config": cfg,
    });
    emit(out, a.out.as_deref(), &report)?;
    Ok(if identical { EXIT_OK } else { EXIT_MISMATCH })
}
