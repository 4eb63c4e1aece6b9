use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use grounding_loss_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe { gl_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn ciou_matches_library() {
    let (p, g) = ([0.5, 0.5, 0.4, 0.2], [0.55, 0.45, 0.3, 0.3]);
    let mut out = GlCiouBreakdown {
        s: 0.0,
        d: 0.0,
        v: 0.0,
        iou: 0.0,
        alpha: 0.0,
        total: 0.0,
    };
    let mut grad = [0.0; 4];
    let st = unsafe { gl_ciou(p.as_ptr(), g.as_ptr(), false, true, &mut out, grad.as_mut_ptr()) };
    assert_eq!(st, GlStatus::Ok);
    let lib = grounding_loss::ciou_loss(
        &grounding_loss::CenterBox::from_array(p),
        &grounding_loss::CenterBox::from_array(g),
        grounding_loss::CiouOptions::default(),
    )
    .unwrap();
    assert_eq!(out.total, lib.total);
    assert!(grad.iter().any(|v| *v != 0.0));
}

#[test]
fn build_target_worked_example() {
    let u = [0.9, 0.6, 0.1];
    let classes = [0.8, 0.2, 0.8, 0.2, 0.2, 0.8];
    let (mut p, mut uh) = ([0.0; 3], [0.0; 3]);
    let (mut j, mut fb) = (99usize, true);
    let st = unsafe {
        gl_build_target(u.as_ptr(), 3, classes.as_ptr(), 2, 0.5, 1e-8, p.as_mut_ptr(), uh.as_mut_ptr(), &mut j, &mut fb)
    };
    assert_eq!(st, GlStatus::Ok, "{}", last_error());
    assert_eq!(j, 0);
    assert!(!fb);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(p[2], 0.0);
}

#[test]
fn dataset_train_evaluate_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds: *mut GlDataset = ptr::null_mut();
    assert_eq!(unsafe { gl_dataset_generate(3, 4, 4, 30, &mut ds) }, GlStatus::Ok);
    assert_eq!(unsafe { gl_dataset_len(ds) }, 30);

    let data_path = cstr(&dir.path().join("d.jsonl"));
    assert_eq!(unsafe { gl_dataset_write(ds, data_path.as_ptr()) }, GlStatus::Ok);
    let mut reread: *mut GlDataset = ptr::null_mut();
    assert_eq!(unsafe { gl_dataset_read(data_path.as_ptr(), &mut reread) }, GlStatus::Ok);
    assert_eq!(unsafe { gl_dataset_len(reread) }, 30);

    let mut opts = gl_train_options_default();
    opts.epochs = 1;
    let mut params: *mut GlParams = ptr::null_mut();
    let mut val = -1.0;
    assert_eq!(unsafe { gl_train(ds, &opts, &mut params, &mut val) }, GlStatus::Ok, "{}", last_error());
    assert!((0.0..=1.0).contains(&val));
    assert!(unsafe { gl_params_num_params(params) } > 0);

    let ckpt = cstr(&dir.path().join("c.json"));
    assert_eq!(unsafe { gl_params_save(params, ckpt.as_ptr()) }, GlStatus::Ok);
    let mut loaded: *mut GlParams = ptr::null_mut();
    assert_eq!(unsafe { gl_params_load(ckpt.as_ptr(), &mut loaded) }, GlStatus::Ok);

    let mut a = GlEvalReport {
        accuracy: 0.0,
        point_game_accuracy: 0.0,
        n_queries: 0,
    };
    let mut b = a;
    assert_eq!(unsafe { gl_evaluate(reread, params, &mut a) }, GlStatus::Ok);
    assert_eq!(unsafe { gl_evaluate(reread, loaded, &mut b) }, GlStatus::Ok);
    assert_eq!(a, b);
    assert!(a.n_queries > 0);

    unsafe {
        gl_params_free(params);
        gl_params_free(loaded);
        gl_dataset_free(ds);
        gl_dataset_free(reread);
        gl_dataset_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_is_io_error() {
    let mut ds: *mut GlDataset = ptr::null_mut();
    let path = CString::new("/nonexistent/dir/d.jsonl").unwrap();
    assert_eq!(unsafe { gl_dataset_read(path.as_ptr(), &mut ds) }, GlStatus::Io);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/grounding_loss.h")
}

#[test]
fn header_declares_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "gl_iou",
        "gl_ciou",
        "gl_build_target",
        "gl_dataset_generate",
        "gl_dataset_read",
        "gl_dataset_write",
        "gl_dataset_free",
        "gl_train",
        "gl_evaluate",
        "gl_params_save",
        "gl_params_load",
        "gl_params_free",
        "gl_last_error_message",
        "typedef struct GlDataset GlDataset",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

const SMOKE_C: &str = r#"
#include <stdio.h>
#include "grounding_loss.h"

int main(void) {
    double a[4] = {0, 0, 2, 2}, b[4] = {1, 1, 3, 3}, v = 0;
    if (gl_iou(a, b, &v) != GL_STATUS_OK) return 1;
    if (v < 0.142857 || v > 0.142858) return 2;
    GlDataset *ds = NULL;
    if (gl_dataset_generate(1, 3, 3, 5, &ds) != GL_STATUS_OK) return 3;
    if (gl_dataset_len(ds) != 5) return 4;
    gl_dataset_free(ds);
    if (gl_iou(a, NULL, &v) != GL_STATUS_NULL_POINTER) return 5;
    char msg[128];
    if (gl_last_error_message(msg, sizeof msg) == 0) return 6;
    printf("ok\n");
    return 0;
}
"#;

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn header_compiles_as_c() {
    if !have_cc() {
        eprintln!("cc not found, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, SMOKE_C).unwrap();
    let inc = header().parent().unwrap().to_path_buf();
    let st = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&inc)
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
}

/// Links the smoke program against the static library when cargo has built it.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libgrounding_loss_ffi.a");
    if !have_cc() || !lib.exists() {
        eprintln!("static library or cc unavailable, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, SMOKE_C).unwrap();
    let st = Command::new("cc")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
