use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dynlite::graphir::{build_toy_decoder, save_graph, ToyConfig};
use dynlite::quantfp4::{dequantize_e0m4, quantize_e0m4};
use dynlite::refexec::{generate, Session, SessionOptions};
use dynlite_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dl_last_error()).to_string_lossy().into_owned() }
}

fn toy() -> *mut DlModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dl_model_build_toy(2, 64, 4, 16, 97, 7, 0, &mut m) }, DlStatus::Ok);
    m
}

fn generate_with(model: *const DlModel, naive: bool, prompt: &[i64], max_new: usize) -> (Vec<i64>, DlCounters) {
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(dl_engine_new(model, 64, DlScheme::F32, 1, 128, naive, &mut e), DlStatus::Ok);
        let mut tokens = vec![0i64; max_new];
        let mut written = 0usize;
        let s = dl_engine_generate(e, prompt.as_ptr(), prompt.len(), max_new, tokens.as_mut_ptr(), tokens.len(), &mut written);
        assert_eq!(s, DlStatus::Ok, "{}", last_error());
        let mut c = DlCounters::default();
        assert_eq!(dl_engine_counters(e, &mut c), DlStatus::Ok);
        dl_engine_free(e);
        tokens.truncate(written);
        (tokens, c)
    }
}

#[test]
fn generation_matches_the_rust_api_and_the_oracle() {
    let prompt = [3i64, 1, 4, 1, 5];
    let model = toy();
    let (fast, fc) = generate_with(model, false, &prompt, 16);
    let (slow, sc) = generate_with(model, true, &prompt, 16);
    unsafe { dl_model_free(model) };
    assert_eq!(fast.len(), 16);
    assert_eq!(fast, slow);
    assert_eq!(fc.kv_copy_bytes, 0);
    assert!(sc.kv_copy_bytes > 0);

    let (g, w) = build_toy_decoder(&ToyConfig::default()).unwrap();
    let mut s = Session::new(&g, &w, SessionOptions::default()).unwrap();
    assert_eq!(generate(&mut s, &prompt, 16, false).unwrap().tokens, fast);
}

#[test]
fn model_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let (g, w) = build_toy_decoder(&ToyConfig::new(1, 64, 4, 16, 97, 7)).unwrap();
    let gp = dir.path().join("m.json");
    let wp = dir.path().join("m.lgw");
    std::fs::write(&gp, save_graph(&g)).unwrap();
    std::fs::write(&wp, w.to_bytes()).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dl_model_load(c(&gp).as_ptr(), c(&wp).as_ptr(), &mut m), DlStatus::Ok);
        let (tokens, _) = generate_with(m, false, &[1, 2, 3], 4);
        assert_eq!(tokens.len(), 4);
        dl_model_free(m);

        let missing = c(&dir.path().join("nope.json"));
        let mut m = ptr::null_mut();
        assert_eq!(dl_model_load(missing.as_ptr(), c(&wp).as_ptr(), &mut m), DlStatus::Io);
        assert!(m.is_null());
        assert!(last_error().contains("nope.json"));
        std::fs::write(&gp, b"{not json").unwrap();
        assert_eq!(dl_model_load(c(&gp).as_ptr(), c(&wp).as_ptr(), &mut m), DlStatus::Graph);
        std::fs::write(&gp, save_graph(&g)).unwrap();
        std::fs::write(&wp, b"LGW1\x05").unwrap();
        assert_eq!(dl_model_load(c(&gp).as_ptr(), c(&wp).as_ptr(), &mut m), DlStatus::Weights);
    }
}

#[test]
fn error_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dl_model_build_toy(1, 60, 4, 16, 97, 7, 0, &mut m), DlStatus::Graph);
        assert!(m.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(dl_model_load(ptr::null(), ptr::null(), &mut m), DlStatus::NullArgument);

        let model = toy();
        let mut e = ptr::null_mut();
        assert_eq!(dl_engine_new(model, 0, DlScheme::F32, 1, 128, false, &mut e), DlStatus::InvalidArgument);
        assert_eq!(dl_engine_new(model, 64, DlScheme::E0M4, 2, 32, false, &mut e), DlStatus::Ok);
        let mut out = [0i64; 2];
        let mut written = 7usize;
        let s = dl_engine_generate(e, [1i64].as_ptr(), 1, 4, out.as_mut_ptr(), out.len(), &mut written);
        assert_eq!((s, written), (DlStatus::BufferTooSmall, 0));
        let s = dl_engine_generate(e, ptr::null(), 0, 2, out.as_mut_ptr(), out.len(), &mut written);
        assert_eq!(s, DlStatus::Exec);
        let s = dl_engine_generate(e, [1i64].as_ptr(), 1, 2, out.as_mut_ptr(), out.len(), &mut written);
        assert_eq!((s, written), (DlStatus::Ok, 2));
        dl_engine_free(e);
        dl_model_free(model);
        dl_engine_free(ptr::null_mut());
        dl_model_free(ptr::null_mut());
    }
}

#[test]
fn quant_group_handles() {
    let values: Vec<f32> = (0..128).map(|i| ((i * 37 % 101) as f32 - 50.0) / 300.0).collect();
    let expect = quantize_e0m4(&values, 1).unwrap();
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(dl_quantize_e0m4(values.as_ptr(), values.len(), 1, &mut g), DlStatus::Ok);
        assert_eq!(dl_quant_group_len(g), 128);
        for i in 0..128 {
            assert_eq!(dl_quant_group_code(g, i), expect.code(i));
        }
        assert_eq!(dl_quant_group_code(g, 128), 0xFF);
        let mut out = vec![0f32; 128];
        assert_eq!(dl_quant_group_dequantize(g, out.as_mut_ptr(), 127), DlStatus::BufferTooSmall);
        assert_eq!(dl_quant_group_dequantize(g, out.as_mut_ptr(), 128), DlStatus::Ok);
        let reference = dequantize_e0m4(&expect);
        assert!(out.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()));
        dl_quant_group_free(g);

        let mut g = ptr::null_mut();
        assert_eq!(dl_quantize_e0m4(values.as_ptr(), values.len(), 3, &mut g), DlStatus::Quant);
        assert_eq!(dl_quantize_e0m4([f32::NAN].as_ptr(), 1, 1, &mut g), DlStatus::Quant);
        assert!(g.is_null());
        assert_eq!(dl_quant_group_len(ptr::null()), 0);
    }
}

#[test]
fn half_conversion_round_trips() {
    for bits in 0..=u16::MAX {
        let x = dl_f16_to_f32(bits);
        if !x.is_nan() {
            assert_eq!(dl_f32_to_f16(x), bits);
        }
    }
    assert_eq!(dl_f32_to_f16(1.0), 0x3C00);
}

fn target_dir() -> PathBuf {
    // tests/ binaries live in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(header_dir.join("dynlite.h")).unwrap();
    for name in ["dl_last_error", "dl_engine_generate", "DlCounters", "DL_STATUS_BUFFER_TOO_SMALL"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; header content checked only");
        return;
    };
    let lib_dir = target_dir();
    let dylib = lib_dir.join(format!("{}dynlite_ffi{}", std::env::consts::DLL_PREFIX, std::env::consts::DLL_SUFFIX));
    if !dylib.exists() {
        eprintln!("{} not built; header content checked only", dylib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-ldynlite_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok 8");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include "dynlite.h"

int main(void) {
    DlModel *m = NULL;
    if (dl_model_build_toy(1, 64, 4, 16, 97, 7, 0, &m) != DL_STATUS_OK) return 1;
    DlEngine *e = NULL;
    if (dl_engine_new(m, 64, DL_SCHEME_F32, 1, 128, false, &e) != DL_STATUS_OK) return 2;
    dl_model_free(m);
    int64_t prompt[3] = {1, 2, 3};
    int64_t out[8];
    size_t written = 0;
    if (dl_engine_generate(e, prompt, 3, 8, out, 8, &written) != DL_STATUS_OK) {
        fprintf(stderr, "%s\n", dl_last_error());
        return 3;
    }
    DlCounters c;
    dl_engine_counters(e, &c);
    if (c.kv_copy_bytes != 0) return 4;
    dl_engine_free(e);
    if (dl_engine_new(NULL, 64, DL_SCHEME_F32, 1, 128, false, &e) != DL_STATUS_NULL_ARGUMENT) return 5;
    printf("ok %zu\n", written);
    return 0;
}
"#;
