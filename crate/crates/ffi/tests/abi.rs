use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use gdiff_ffi::*;

fn last_error() -> String {
    let p = gdiff_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const SOLVE: &str = r#"
horizon = 0.5
[theta]
interval = [0.25, 1.0]
[system]
n = 1
sigma = "constant"
sigma_constant = [[1.0]]
[test_functions]
datum = "cos(x_1)"
[grid]
half_width = 5.0
nodes = [201]
"#;

#[test]
fn theta_handle_evaluates_g() {
    let mut theta = ptr::null_mut();
    assert_eq!(unsafe { gdiff_theta_interval(0.25, 1.0, &mut theta) }, GdiffStatus::Ok);
    assert_eq!(unsafe { gdiff_theta_dim(theta) }, 1);
    let mut g = 0.0;
    // G(a) = max(a s^2) / 2 over the interval
    for (a, want) in [(2.0, 1.0), (-2.0, -0.25)] {
        assert_eq!(unsafe { gdiff_theta_eval_g(theta, &a, 1, &mut g) }, GdiffStatus::Ok);
        assert!((g - want).abs() < 1e-15, "{a}: {g}");
    }
    let bad = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { gdiff_theta_eval_g(theta, bad.as_ptr(), 2, &mut g) }, GdiffStatus::Dimension);
    assert!(last_error().contains("dimension"));
    unsafe { gdiff_theta_free(theta) };
}

#[test]
fn generator_sets_and_argument_errors() {
    let gens = [0.5, 0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 1.0];
    let mut theta = ptr::null_mut();
    assert_eq!(unsafe { gdiff_theta_new(2, gens.as_ptr(), 2, &mut theta) }, GdiffStatus::Ok);
    let a = [1.0, 0.0, 0.0, -3.0];
    let mut g = 0.0;
    assert_eq!(unsafe { gdiff_theta_eval_g(theta, a.as_ptr(), 2, &mut g) }, GdiffStatus::Ok);
    // covariances 0.25 I and I: traces -0.5 and -2
    assert!((g - (-0.25)).abs() < 1e-15, "{g}");
    unsafe { gdiff_theta_free(theta) };

    assert_eq!(unsafe { gdiff_theta_new(2, ptr::null(), 2, &mut theta) }, GdiffStatus::NullPointer);
    assert!(last_error().contains("generators"));
    assert_eq!(unsafe { gdiff_theta_interval(1.0, 0.5, &mut theta) }, GdiffStatus::Invalid);
    assert_eq!(unsafe { gdiff_theta_interval(0.5, 1.0, ptr::null_mut()) }, GdiffStatus::NullPointer);
    assert_eq!(unsafe { gdiff_theta_dim(ptr::null()) }, 0);
    unsafe {
        gdiff_theta_free(ptr::null_mut());
        gdiff_solution_free(ptr::null_mut());
        gdiff_string_free(ptr::null_mut());
    }
}

#[test]
fn solution_handle_matches_closed_form() {
    let cfg = CString::new(SOLVE).unwrap();
    let mut sol = ptr::null_mut();
    assert_eq!(unsafe { gdiff_solve_pde(cfg.as_ptr(), &mut sol) }, GdiffStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { gdiff_solution_dim(sol) }, 1);
    let mut v = 0.0;
    assert_eq!(unsafe { gdiff_solution_value(sol, 0.5, &0.0, 1, &mut v) }, GdiffStatus::Ok);
    assert!((v - (-0.0625f64).exp()).abs() < 2e-3, "{v}");
    assert_eq!(unsafe { gdiff_solution_value(sol, 0.5, [0.0, 0.0].as_ptr(), 2, &mut v) }, GdiffStatus::Dimension);

    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { gdiff_solution_csv(sol, &mut csv) }, GdiffStatus::Ok);
    assert!(unsafe { CStr::from_ptr(csv) }.to_str().unwrap().starts_with("t,x_1,u\n"));
    unsafe {
        gdiff_string_free(csv);
        gdiff_solution_free(sol);
    }
}

#[test]
fn run_returns_report_and_exit_code() {
    let name = CString::new("counterexample-remark").unwrap();
    let cfg = CString::new("seed = 1\n[theta]\ninterval = [0.5, 1.0]\n").unwrap();
    let mut json = ptr::null_mut();
    let mut code = -1;
    assert_eq!(unsafe { gdiff_run(name.as_ptr(), cfg.as_ptr(), &mut json, &mut code) }, GdiffStatus::Ok);
    let report: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    unsafe { gdiff_string_free(json) };
    assert_eq!(code, 0);
    assert_eq!(report["exit_code"], 0);
    assert_eq!(report["seed"], 1);

    let unknown = CString::new("no-such-experiment").unwrap();
    assert_eq!(unsafe { gdiff_run(unknown.as_ptr(), cfg.as_ptr(), &mut json, &mut code) }, GdiffStatus::Ok);
    unsafe { gdiff_string_free(json) };
    assert_eq!(code, 2);

    let bad = CString::new("[scenario]\nn_pahts = 3\n").unwrap();
    assert_eq!(unsafe { gdiff_run(name.as_ptr(), bad.as_ptr(), &mut json, &mut code) }, GdiffStatus::Config);
    assert!(last_error().contains("n_pahts"));
    assert_eq!(unsafe { gdiff_run(ptr::null(), cfg.as_ptr(), &mut json, &mut code) }, GdiffStatus::NullPointer);
}

#[test]
fn header_declares_every_export() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gdiff.h");
    let text = std::fs::read_to_string(&header).unwrap();
    let src = include_str!("../src/lib.rs");
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for f in exports {
        assert!(text.contains(&format!("{f}(")), "header lacks {f}");
    }
    for code in ["GDIFF_STATUS_OK = 0", "GDIFF_STATUS_PANIC = 9", "typedef struct GdiffTheta GdiffTheta"] {
        assert!(text.contains(code), "{code}");
    }
    // compile the header as C when a compiler is around
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
