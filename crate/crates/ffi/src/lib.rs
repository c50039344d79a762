//! C interface to the dynlite runtime.
//!
//! Every fallible call returns a [`DlStatus`]; on failure the message is
//! available from [`dl_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dynlite::graphir::weights::WeightStore;
use dynlite::graphir::{build_toy_decoder, load_graph, Graph, ToyConfig};
use dynlite::quantfp4::{dequantize_e0m4, f16_to_f32, f32_to_f16, quantize_e0m4, Half, QuantGroupE0M4, Scheme};
use dynlite::refexec::{generate, Engine, NaiveSession, QuantConfig, Session, SessionOptions};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Graph = 4,
    Weights = 5,
    Quant = 6,
    Exec = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlScheme {
    F32 = 0,
    E0M4 = 1,
    Int4 = 2,
}

/// Snapshot of an engine's cumulative work counters.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DlCounters {
    pub shape_updates: u64,
    pub shape_ops_executed: u64,
    pub sync_points: u64,
    pub allocations: u64,
    pub kv_copy_bytes: u64,
}

/// A graph together with its weights.
pub struct DlModel {
    graph: Graph,
    weights: WeightStore,
}

pub struct DlEngine {
    inner: Box<dyn Engine>,
}

pub struct DlQuantGroup {
    inner: QuantGroupE0M4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn fail(status: DlStatus, msg: impl std::fmt::Display) -> DlStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `DlStatus::Panic`.
fn guard(f: impl FnOnce() -> DlStatus) -> DlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(DlStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, DlStatus> {
    if p.is_null() {
        return Err(fail(DlStatus::NullArgument, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(DlStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize) -> Result<&'a [T], DlStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DlStatus::NullArgument, "null buffer"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the most recent failure on this thread. Empty if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn dl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a graph JSON file and its LGW1 weight file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_model_load(graph_path: *const c_char, weights_path: *const c_char, out: *mut *mut DlModel) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::NullArgument, "null output handle");
        }
        let gp = try_status!(path_arg(graph_path));
        let wp = try_status!(path_arg(weights_path));
        let gbytes = try_status!(std::fs::read(gp).map_err(|e| fail(DlStatus::Io, format!("{}: {e}", gp.display()))));
        let wbytes = try_status!(std::fs::read(wp).map_err(|e| fail(DlStatus::Io, format!("{}: {e}", wp.display()))));
        let graph = try_status!(load_graph(&gbytes).map_err(|e| fail(DlStatus::Graph, e)));
        let weights = try_status!(WeightStore::from_bytes(&wbytes).map_err(|e| fail(DlStatus::Weights, e)));
        *out = Box::into_raw(Box::new(DlModel { graph, weights }));
        DlStatus::Ok
    })
}

/// Builds the synthetic toy decoder in memory.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_model_build_toy(
    layers: usize,
    hidden: usize,
    heads: usize,
    head_dim: usize,
    vocab: usize,
    seed: u64,
    max_seq: i64,
    out: *mut *mut DlModel,
) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::NullArgument, "null output handle");
        }
        let mut cfg = ToyConfig::new(layers, hidden, heads, head_dim, vocab, seed);
        if max_seq > 0 {
            cfg.max_seq = max_seq;
        }
        let (graph, weights) = try_status!(build_toy_decoder(&cfg).map_err(|e| fail(DlStatus::Graph, e)));
        *out = Box::into_raw(Box::new(DlModel { graph, weights }));
        DlStatus::Ok
    })
}

/// # Safety
/// `model` must come from a `dl_model_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn dl_model_free(model: *mut DlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn quant_config(scheme: DlScheme, n: u8, group_size: usize) -> Option<QuantConfig> {
    let scheme = match scheme {
        DlScheme::F32 => return None,
        DlScheme::E0M4 => Scheme::E0M4,
        DlScheme::Int4 => Scheme::Int4,
    };
    Some(QuantConfig { scheme, n, group_size })
}

/// Compiles an engine for `model`. With `naive` set, the engine is the
/// unoptimized reference interpreter. The model may be freed afterwards.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_engine_new(
    model: *const DlModel,
    pad: usize,
    scheme: DlScheme,
    n: u8,
    group_size: usize,
    naive: bool,
    out: *mut *mut DlEngine,
) -> DlStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(DlStatus::NullArgument, "null handle");
        }
        if pad == 0 || group_size == 0 {
            return fail(DlStatus::InvalidArgument, "pad and group_size must be positive");
        }
        let m = &*model;
        let quant = quant_config(scheme, n, group_size);
        let inner: Box<dyn Engine> = if naive {
            Box::new(try_status!(NaiveSession::new(&m.graph, &m.weights, quant.as_ref(), false).map_err(|e| fail(DlStatus::Exec, e))))
        } else {
            let opts = SessionOptions { pad, quant, ..SessionOptions::default() };
            Box::new(try_status!(Session::new(&m.graph, &m.weights, opts).map_err(|e| fail(DlStatus::Exec, e))))
        };
        *out = Box::into_raw(Box::new(DlEngine { inner }));
        DlStatus::Ok
    })
}

/// # Safety
/// `engine` must come from `dl_engine_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn dl_engine_free(engine: *mut DlEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Greedy decoding. Writes `max_new` tokens into `tokens_out` and their
/// count into `written`. Returns `BufferTooSmall` without running if
/// `capacity < max_new`.
///
/// # Safety
/// `prompt` must hold `prompt_len` values and `tokens_out` `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn dl_engine_generate(
    engine: *mut DlEngine,
    prompt: *const i64,
    prompt_len: usize,
    max_new: usize,
    tokens_out: *mut i64,
    capacity: usize,
    written: *mut usize,
) -> DlStatus {
    guard(|| {
        if engine.is_null() || written.is_null() || (tokens_out.is_null() && capacity > 0) {
            return fail(DlStatus::NullArgument, "null argument");
        }
        *written = 0;
        if capacity < max_new {
            return fail(DlStatus::BufferTooSmall, format!("need room for {max_new} tokens, have {capacity}"));
        }
        let prompt = try_status!(slice_arg(prompt, prompt_len));
        let g = try_status!(generate((*engine).inner.as_mut(), prompt, max_new, false).map_err(|e| fail(DlStatus::Exec, e)));
        if !g.tokens.is_empty() {
            ptr::copy_nonoverlapping(g.tokens.as_ptr(), tokens_out, g.tokens.len());
        }
        *written = g.tokens.len();
        DlStatus::Ok
    })
}

/// Cumulative counters since the engine was created.
///
/// # Safety
/// `engine` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_engine_counters(engine: *const DlEngine, out: *mut DlCounters) -> DlStatus {
    if engine.is_null() || out.is_null() {
        return fail(DlStatus::NullArgument, "null argument");
    }
    let c = (*engine).inner.counters();
    *out = DlCounters {
        shape_updates: c.shape_updates,
        shape_ops_executed: c.shape_ops_executed,
        sync_points: c.sync_points,
        allocations: c.allocations,
        kv_copy_bytes: c.kv_copy_bytes,
    };
    DlStatus::Ok
}

/// Quantizes one group of weights to E0M4 with exponent parameter `n`.
///
/// # Safety
/// `values` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dl_quantize_e0m4(values: *const f32, len: usize, n: u8, out: *mut *mut DlQuantGroup) -> DlStatus {
    guard(|| {
        if out.is_null() {
            return fail(DlStatus::NullArgument, "null output handle");
        }
        let v = try_status!(slice_arg(values, len));
        let inner = try_status!(quantize_e0m4(v, n).map_err(|e| fail(DlStatus::Quant, e)));
        *out = Box::into_raw(Box::new(DlQuantGroup { inner }));
        DlStatus::Ok
    })
}

/// Number of values in the group, or 0 for a null handle.
///
/// # Safety
/// `group` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn dl_quant_group_len(group: *const DlQuantGroup) -> usize {
    group.as_ref().map_or(0, |g| g.inner.len)
}

/// The 4-bit code of element `i`, or 0xFF when out of range.
///
/// # Safety
/// `group` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn dl_quant_group_code(group: *const DlQuantGroup, i: usize) -> u8 {
    match group.as_ref() {
        Some(g) if i < g.inner.len => g.inner.code(i),
        _ => 0xFF,
    }
}

/// Reconstructs the group into `out`.
///
/// # Safety
/// `group` must be live; `out` must hold `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn dl_quant_group_dequantize(group: *const DlQuantGroup, out: *mut f32, capacity: usize) -> DlStatus {
    guard(|| {
        let Some(g) = group.as_ref() else {
            return fail(DlStatus::NullArgument, "null handle");
        };
        if capacity < g.inner.len {
            return fail(DlStatus::BufferTooSmall, format!("need {} floats, have {capacity}", g.inner.len));
        }
        if out.is_null() {
            return fail(DlStatus::NullArgument, "null buffer");
        }
        let v = dequantize_e0m4(&g.inner);
        ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
        DlStatus::Ok
    })
}

/// # Safety
/// `group` must come from `dl_quantize_e0m4` or be null.
#[no_mangle]
pub unsafe extern "C" fn dl_quant_group_free(group: *mut DlQuantGroup) {
    if !group.is_null() {
        drop(Box::from_raw(group));
    }
}

/// Round-to-nearest-even narrowing to binary16 bits.
#[no_mangle]
pub extern "C" fn dl_f32_to_f16(x: f32) -> u16 {
    f32_to_f16(x).to_bits()
}

#[no_mangle]
pub extern "C" fn dl_f16_to_f32(bits: u16) -> f32 {
    f16_to_f32(Half::from_bits(bits))
}
