use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use qprobe_ffi::*;

fn last_message() -> String {
    let p = qp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn gradient(w: usize, h: usize) -> *mut QpRaster {
    let data: Vec<f64> = (0..w * h * 3).map(|i| ((i * 7) % 255) as f64 / 255.0).collect();
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { qp_raster_new(w, h, 3, data.as_ptr(), &mut r) }, QpStatus::Ok);
    r
}

#[test]
fn raster_handles_round_trip() {
    let r = gradient(16, 8);
    let (mut w, mut h, mut c) = (0, 0, 0);
    unsafe {
        assert_eq!(qp_raster_shape(r, &mut w, &mut h, &mut c), QpStatus::Ok);
        assert_eq!((w, h, c), (16, 8, 3));
        let (mut data, mut len) = (ptr::null(), 0);
        assert_eq!(qp_raster_data(r, &mut data, &mut len), QpStatus::Ok);
        assert_eq!(len, 16 * 8 * 3);
        assert_eq!(*data.add(1), 7.0 / 255.0);

        let mut err = 1.0;
        assert_eq!(qp_wavelet_roundtrip_error(r, 2, &mut err), QpStatus::Ok);
        assert!(err < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("x.png").to_str().unwrap()).unwrap();
        assert_eq!(qp_raster_save(r, path.as_ptr()), QpStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(qp_raster_load(path.as_ptr(), &mut back), QpStatus::Ok);
        assert_eq!(qp_raster_shape(back, &mut w, ptr::null_mut(), ptr::null_mut()), QpStatus::Ok);
        assert_eq!(w, 16);
        qp_raster_free(back);
        qp_raster_free(r);
        qp_raster_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_code_and_message() {
    unsafe {
        let mut r = ptr::null_mut();
        let bad = [0.5; 9];
        assert_eq!(qp_raster_new(3, 3, 1, bad.as_ptr(), ptr::null_mut()), QpStatus::NullPointer);
        assert_eq!(qp_last_error_code(), QpStatus::NullPointer);
        assert_eq!(qp_raster_new(0, 2, 1, bad.as_ptr(), &mut r), qp_last_error_code());
        assert_ne!(qp_last_error_code(), QpStatus::Ok);

        let missing = CString::new("/nonexistent/q.png").unwrap();
        assert_eq!(qp_raster_load(missing.as_ptr(), &mut r), QpStatus::Io);
        assert!(last_message().contains("/nonexistent/q.png"));

        let mut v = 0.0;
        assert_eq!(qp_acc_reward(3.0, 3.0, 0.0, &mut v), QpStatus::Argument);
        assert!(last_message().contains("tau"));

        // A success clears the slot.
        assert_eq!(qp_acc_reward(3.0, 3.0, 0.5, &mut v), QpStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(qp_last_error_code(), QpStatus::Ok);
        assert!(qp_last_error_message().is_null());
    }
}

#[test]
fn last_error_is_per_thread() {
    let mut v = 0.0;
    assert_eq!(unsafe { qp_rank_reward(0.5, 0.3, &mut v) }, QpStatus::Argument);
    std::thread::spawn(|| {
        assert_eq!(qp_last_error_code(), QpStatus::Ok);
        assert!(qp_last_error_message().is_null());
    })
    .join()
    .unwrap();
    assert_eq!(qp_last_error_code(), QpStatus::Argument);
}

#[test]
fn metrics_and_rewards() {
    let preds = [0.1, 0.2, 0.5, 0.9, 7.0];
    let gts = [1.0, 2.0, 3.0, 4.0, 5.0];
    let (mut s, mut p) = (0.0, 0.0);
    unsafe {
        assert_eq!(qp_srcc(preds.as_ptr(), gts.as_ptr(), 5, &mut s), QpStatus::Ok);
        assert_eq!(s, 1.0);
        assert_eq!(qp_plcc(gts.as_ptr(), gts.as_ptr(), 5, &mut p), QpStatus::Ok);
        assert!((p - 1.0).abs() < 1e-15);
        assert_eq!(qp_srcc(preds.as_ptr(), gts.as_ptr(), 1, &mut s), QpStatus::Argument);

        let gi = [4.0, 5.0];
        let gj = [2.0, 3.0];
        let mut out = [0.0; 2];
        assert_eq!(qp_pair_rewards(gi.as_ptr(), gj.as_ptr(), 2, 1.0, 0.01, out.as_mut_ptr()), QpStatus::Ok);
        assert!(out.iter().all(|&r| r > 0.5));

        let rewards = [1.0, 2.0, 3.0];
        let mut adv = [0.0; 3];
        assert_eq!(qp_group_advantages(rewards.as_ptr(), 3, adv.as_mut_ptr()), QpStatus::Ok);
        assert!((adv.iter().sum::<f64>()).abs() < 1e-12);

        let trace = CString::new("<think>ok</think><score>3.5</score>").unwrap();
        assert_eq!(qp_format_reward(trace.as_ptr()), 1.0);
        assert_eq!(qp_format_reward(ptr::null()), 0.0);
        assert_eq!(qp_iou(0, 0, 10, 10, 0, 0, 10, 10), 1.0);
        assert_eq!(qp_iou(0, 0, 10, 10, 5, 0, 10, 10), 50.0 / 150.0);
    }
}

#[test]
fn forge_and_evaluate_through_handles() {
    let src = gradient(128, 128);
    unsafe {
        let cfg = CString::new(r#"{"pristine_fraction": 0.0, "seed": 3}"#).unwrap();
        let id = CString::new("a").unwrap();
        let (mut img, mut json) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(qp_forge_item(src, cfg.as_ptr(), id.as_ptr(), &mut img, &mut json), QpStatus::Ok, "{}", last_message());
        let item: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(item["id"], "a");
        let mos = item["mos"].as_f64().unwrap();
        assert!(mos < 5.0);

        let mut again = 0.0;
        let defects = CString::new(item["defects"].to_string()).unwrap();
        assert_eq!(qp_synthesize_mos(defects.as_ptr(), 128.0 * 128.0, &mut again), QpStatus::Ok);
        assert_eq!(again, mos);

        let manifest_json = CString::new(format!("[{item}, {}]", item.to_string().replace("\"a\"", "\"b\"").replacen(&format!("{mos}"), "4.9", 1))).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(qp_manifest_parse(manifest_json.as_ptr(), &mut m), QpStatus::Ok, "{}", last_message());
        assert_eq!(qp_manifest_len(m), 2);
        let mut one = ptr::null_mut();
        assert_eq!(qp_manifest_item_json(m, 1, &mut one), QpStatus::Ok);
        assert!(CStr::from_ptr(one).to_str().unwrap().contains("\"b\""));
        qp_string_free(one);
        assert_eq!(qp_manifest_item_json(m, 2, &mut one), QpStatus::Argument);

        let preds = CString::new(format!(r#"[{{"id":"a","score":{mos}}},{{"id":"b","score":4.9}}]"#)).unwrap();
        let mut report = ptr::null_mut();
        assert_eq!(qp_evaluate(m, preds.as_ptr(), &mut report), QpStatus::Ok, "{}", last_message());
        let r: serde_json::Value = serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
        assert_eq!(r["average"]["mae"], 0.0);
        qp_string_free(report);

        let ghost = CString::new(r#"[{"id":"zz","score":1}]"#).unwrap();
        assert_eq!(qp_evaluate(m, ghost.as_ptr(), &mut report), QpStatus::MissingIds);
        assert!(last_message().contains("zz"));

        qp_manifest_free(m);
        qp_string_free(json);
        qp_raster_free(img);
        qp_raster_free(src);
    }
}

fn artifact_dir() -> PathBuf {
    // target/<profile>/deps/abi-<hash> -> target/<profile>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = PathBuf::from(env!("OUT_DIR"));
    let header = std::fs::read_to_string(header_dir.join("qprobe.h")).unwrap();
    for sym in ["qp_last_error_message", "qp_raster_new", "qp_srcc", "QP_STATUS_MISSING_ENTRY", "typedef struct QpRaster QpRaster"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let lib = artifact_dir().join("libqprobe_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "qprobe.h"

int main(void) {
    double p[4] = {1, 2, 3, 4}, g[4] = {2, 4, 6, 9}, s = 0;
    if (qp_srcc(p, g, 4, &s) != QP_STATUS_OK || s != 1.0) return 1;
    double px[4] = {0.1, 0.2, 0.3, 0.4};
    QpRaster *r = NULL;
    if (qp_raster_new(2, 2, 1, px, &r) != QP_STATUS_OK) return 2;
    size_t w = 0;
    qp_raster_shape(r, &w, NULL, NULL);
    qp_raster_free(r);
    if (qp_raster_load("/nonexistent.png", &r) != QP_STATUS_IO) return 3;
    if (strstr(qp_last_error_message(), "nonexistent") == NULL) return 4;
    printf("%s %zu\n", qp_version(), w);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .expect("C compiler runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), format!("{} 2", env!("CARGO_PKG_VERSION")));
}
