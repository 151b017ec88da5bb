use std::ffi::{CStr, CString};
use std::ptr;

use gustpost::synthgen::{generate_archive, ScenarioConfig};
use gustpost_ffi::*;

fn small_archive() -> tempfile::TempDir {
    let mut cfg = ScenarioConfig::well_specified();
    cfg.stations = 3;
    cfg.days = 150;
    cfg.lead_times = vec![3, 6];
    cfg.runs = vec![0];
    let dir = tempfile::tempdir().unwrap();
    generate_archive(&cfg).unwrap().write(dir.path()).unwrap();
    dir
}

fn cstring(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = gp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_cargo_version() {
    let v = unsafe { CStr::from_ptr(gp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(gp_dataset_load(ptr::null(), &mut ds), GpStatus::NullPointer);
        assert!(ds.is_null());
        assert!(last_error().contains("path"));
        assert_eq!(
            gp_dataset_size(ptr::null(), ptr::null_mut(), ptr::null_mut()),
            GpStatus::NullPointer
        );
        let mut out = 0.0;
        assert_eq!(
            gp_brier_score(ptr::null(), ptr::null(), 3, &mut out),
            GpStatus::NullPointer
        );
        gp_dataset_free(ptr::null_mut());
        gp_model_free(ptr::null_mut());
    }
}

#[test]
fn missing_archive_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstring(dir.path().join("nope").to_str().unwrap());
    let mut ds = ptr::null_mut();
    let status = unsafe { gp_dataset_load(path.as_ptr(), &mut ds) };
    assert_eq!(status, GpStatus::Io);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn success_clears_last_error() {
    let mut out = 0.0;
    unsafe {
        gp_brier_score(ptr::null(), ptr::null(), 1, &mut out);
        assert!(!gp_last_error().is_null());
        let f = [0.2, 0.9];
        let o = [0.0, 1.0];
        assert_eq!(gp_brier_score(f.as_ptr(), o.as_ptr(), 2, &mut out), GpStatus::Ok);
    }
    assert!(gp_last_error().is_null());
    assert!((out - (0.04 + 0.01) / 2.0).abs() < 1e-15);
}

#[test]
fn brier_score_rejects_bad_outcomes() {
    let f = [0.5];
    let o = [2.0];
    let mut out = 0.0;
    let status = unsafe { gp_brier_score(f.as_ptr(), o.as_ptr(), 1, &mut out) };
    assert_ne!(status, GpStatus::Ok);
}

#[test]
fn train_predict_save_load_round_trip() {
    let dir = small_archive();
    let path = cstring(dir.path().to_str().unwrap());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(
            gp_dataset_load(path.as_ptr(), &mut ds),
            GpStatus::Ok,
            "{}",
            last_error()
        );
        let (mut n, mut rejected) = (0usize, 0usize);
        assert_eq!(gp_dataset_size(ds, &mut n, &mut rejected), GpStatus::Ok);
        assert!(n > 100);

        let method = cstring("emos");
        let mut model = ptr::null_mut();
        assert_eq!(
            gp_model_train(ds, method.as_ptr(), 0, 7, &mut model),
            GpStatus::Ok,
            "{}",
            last_error()
        );

        let thresholds = [10.0, 20.0, 30.0];
        let mut p = [0.0; 3];
        assert_eq!(
            gp_model_predict(model, ds, 5, thresholds.as_ptr(), 3, p.as_mut_ptr()),
            GpStatus::Ok
        );
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p[0] >= p[1] && p[1] >= p[2]);

        let file = cstring(dir.path().join("model.json").to_str().unwrap());
        assert_eq!(gp_model_save(model, file.as_ptr()), GpStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(gp_model_load(file.as_ptr(), &mut loaded), GpStatus::Ok);
        let mut q = [0.0; 3];
        assert_eq!(
            gp_model_predict(loaded, ds, 5, thresholds.as_ptr(), 3, q.as_mut_ptr()),
            GpStatus::Ok
        );
        assert_eq!(p, q);

        assert_eq!(
            gp_model_predict(model, ds, n, thresholds.as_ptr(), 3, p.as_mut_ptr()),
            GpStatus::InvalidArgument
        );
        let unsorted = [30.0, 10.0];
        assert_eq!(
            gp_model_predict(model, ds, 0, unsorted.as_ptr(), 2, p.as_mut_ptr()),
            GpStatus::InvalidArgument
        );

        gp_model_free(loaded);
        gp_model_free(model);
        gp_dataset_free(ds);
    }
}

#[test]
fn invalid_method_and_mode_are_rejected() {
    let dir = small_archive();
    let path = cstring(dir.path().to_str().unwrap());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(gp_dataset_load(path.as_ptr(), &mut ds), GpStatus::Ok);
        let mut model = ptr::null_mut();
        let bogus = cstring("random_forest");
        assert_eq!(
            gp_model_train(ds, bogus.as_ptr(), 0, 1, &mut model),
            GpStatus::InvalidArgument
        );
        assert!(model.is_null());
        let emos = cstring("emos");
        assert_eq!(
            gp_model_train(ds, emos.as_ptr(), GP_MODE_JOINT, 1, &mut model),
            GpStatus::InvalidArgument
        );
        assert!(last_error().contains("joint"));
        assert_eq!(
            gp_model_train(ds, emos.as_ptr(), 64, 1, &mut model),
            GpStatus::InvalidArgument
        );
        gp_dataset_free(ds);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gustpost.h")).unwrap();
    for name in [
        "gp_version",
        "gp_last_error",
        "gp_dataset_load",
        "gp_dataset_free",
        "gp_model_train",
        "gp_model_predict",
        "gp_model_free",
        "gp_brier_score",
        "typedef struct GpModel GpModel",
        "GP_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
