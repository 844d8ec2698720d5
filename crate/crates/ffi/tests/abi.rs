use oshape::checkpoint::Checkpoint;
use oshape::trainer::{train_two_phase, TrainConfig};
use oshape_ffi::*;
use std::ffi::CString;
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { oshape_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

fn checkpoint(dir: &std::path::Path) -> CString {
    let cfg = TrainConfig {
        batch_symbols: 64,
        steps_phase1: 5,
        steps_phase2: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = train_two_phase(&cfg).unwrap();
    let path = dir.join("m.ckpt");
    Checkpoint::from_run(&run, "ffi").unwrap().save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn model_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = checkpoint(dir.path());
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(oshape_model_load(path.as_ptr(), &mut model), OshapeStatus::Ok);
        assert_eq!(oshape_model_m(model), 16);
        assert_eq!(oshape_model_snr_db(model), 10.0);

        let (mut re, mut im, mut p) = ([0.0; 16], [0.0; 16], [0.0; 16]);
        let st = oshape_model_constellation(model, 10.0, re.as_mut_ptr(), im.as_mut_ptr(), p.as_mut_ptr(), 16);
        assert_eq!(st, OshapeStatus::Ok);
        let e: f64 = (0..16).map(|k| p[k] * (re[k] * re[k] + im[k] * im[k])).sum();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9 && (e - 1.0).abs() < 1e-9);
        let st = oshape_model_constellation(model, 10.0, re.as_mut_ptr(), im.as_mut_ptr(), p.as_mut_ptr(), 4);
        assert_eq!(st, OshapeStatus::BufferTooSmall);
        assert!(last_error().contains("need 16"));

        let mut mi = f64::NAN;
        assert_eq!(oshape_model_eval_mi(model, 10.0, 50, 1, &mut mi), OshapeStatus::Ok);
        assert!(mi <= 4.02);
        let mut ser = f64::NAN;
        assert_eq!(oshape_model_eval_ser(model, 10.0, 800, 1, &mut ser), OshapeStatus::Ok);
        assert!((0.0..=1.0).contains(&ser));
        oshape_model_free(model);
        oshape_model_free(ptr::null_mut());
    }
}

#[test]
fn load_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"OSHP\x01").unwrap();
    let path = CString::new(bad.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(oshape_model_load(path.as_ptr(), &mut model), OshapeStatus::Checkpoint);
        assert!(model.is_null());
        assert!(last_error().contains("offset"));
        assert_eq!(oshape_model_load(ptr::null(), &mut model), OshapeStatus::NullPointer);
        let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
        assert_eq!(oshape_model_load(missing.as_ptr(), &mut model), OshapeStatus::Io);
        assert_eq!(oshape_model_m(ptr::null()), 0);
    }
}

#[test]
fn modulate_and_papr() {
    let re = [1.0, -1.0, 0.5, 0.25];
    let im = [0.0, 1.0, -0.5, 0.75];
    let mut x = [0.0; 16];
    unsafe {
        assert_eq!(oshape_aco_modulate(4, re.as_ptr(), im.as_ptr(), false, x.as_mut_ptr(), 16), OshapeStatus::Ok);
        for n in 0..8 {
            assert!((x[n] + x[n + 8]).abs() < 1e-12);
        }
        let mut clipped = [0.0; 16];
        assert_eq!(oshape_aco_modulate(4, re.as_ptr(), im.as_ptr(), true, clipped.as_mut_ptr(), 16), OshapeStatus::Ok);
        assert!(clipped.iter().zip(&x).all(|(c, v)| *c == v.max(0.0)));
        let mut db = 0.0;
        assert_eq!(oshape_papr_db(clipped.as_ptr(), 16, &mut db), OshapeStatus::Ok);
        assert!(db >= 10.0 * 2f64.log10() - 1e-9);
        assert_eq!(oshape_aco_modulate(3, re.as_ptr(), im.as_ptr(), true, x.as_mut_ptr(), 16), OshapeStatus::InvalidArgument);
        assert_eq!(oshape_aco_modulate(4, re.as_ptr(), im.as_ptr(), true, x.as_mut_ptr(), 8), OshapeStatus::BufferTooSmall);
        let zeros = [0.0; 8];
        assert_eq!(oshape_papr_db(zeros.as_ptr(), 8, &mut db), OshapeStatus::Numeric);
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/oshape.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["oshape_model_load", "oshape_model_free", "oshape_last_error", "OSHAPE_STATUS_OK", "typedef struct OshapeModel OshapeModel"] {
        assert!(text.contains(sym), "{sym}");
    }
    // compile check when a C compiler is present
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
