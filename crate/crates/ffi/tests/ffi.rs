use covlab_ffi::*;
use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let p = covlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn domain(spec: &str, n: u32) -> *mut CovlabDomain {
    let spec = CString::new(spec).unwrap();
    let mut dom = ptr::null_mut();
    assert_eq!(unsafe { covlab_domain_new(spec.as_ptr(), 2.0, n, &mut dom) }, CovlabStatus::Ok);
    dom
}

#[test]
fn cone_green_matches_closed_form() {
    let dom = domain("cone:1", 64);
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(covlab_green_solve(dom, 64, &mut g), CovlabStatus::Ok);
        let mut v = 0.0;
        assert_eq!(covlab_green_value(g, 0.25, 1.0, &mut v), CovlabStatus::Ok);
        assert!((v - (1.0 - 0.0625)).abs() < 2e-2, "{v}");
        let mut grid = CovlabGrid { x0: 0.0, t0: 0.0, h: 0.0, nx: 0, nt: 0 };
        assert_eq!(covlab_green_grid(g, &mut grid), CovlabStatus::Ok);
        let n = (grid.nx * grid.nt) as usize;
        let mut buf = vec![0.0; n];
        assert_eq!(covlab_green_values(g, buf.as_mut_ptr(), n - 1), CovlabStatus::InvalidInput);
        assert_eq!(covlab_green_values(g, buf.as_mut_ptr(), n), CovlabStatus::Ok);
        assert!(buf.iter().any(|v| v.is_nan()) && buf.iter().any(|v| v.is_finite()));
        let mut d = 0.0;
        assert_eq!(covlab_domain_dist(dom, 0.0, 1.0, &mut d), CovlabStatus::Ok);
        assert!((d - 0.5f64.sqrt()).abs() < 1e-9);
        assert_eq!(covlab_domain_dist(dom, 0.5, 0.0, &mut d), CovlabStatus::InvalidInput);
        covlab_green_free(g);
        covlab_domain_free(dom);
    }
}

#[test]
fn errors_and_null_pointers() {
    let bad = CString::new("cone:1,2,3").unwrap();
    let mut dom = ptr::null_mut();
    assert_eq!(unsafe { covlab_domain_new(bad.as_ptr(), 2.0, 64, &mut dom) }, CovlabStatus::InvalidInput);
    assert!(last_error().contains("cone:1,2,3"));
    assert!(dom.is_null());
    let ok = CString::new("flat").unwrap();
    assert_eq!(unsafe { covlab_domain_new(ok.as_ptr(), 2.0, 64, ptr::null_mut()) }, CovlabStatus::NullPointer);
    assert_eq!(unsafe { covlab_domain_new(ptr::null(), 2.0, 64, &mut dom) }, CovlabStatus::NullPointer);
    let mut v = 0.0;
    assert_eq!(unsafe { covlab_domain_g(ptr::null(), 0.0, &mut v) }, CovlabStatus::NullPointer);
    unsafe {
        covlab_domain_free(ptr::null_mut());
        covlab_green_free(ptr::null_mut());
        covlab_string_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(covlab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn pipeline_json_identity() {
    let cfg = CString::new(
        r#"{"name": "ffi", "domain": {"family": "sine", "amp": 0.2, "freq": 2.0}, "grid_n": 128,
            "p_list": [2.0], "radii": [0.5, 1.0], "ball_radii": [0.5], "inversion_targets": 10}"#,
    )
    .unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { covlab_pipeline_json(cfg.as_ptr(), ptr::null(), &mut out) }, CovlabStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { covlab_string_free(out) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let c = &v[0]["comparison"][0];
    assert!(c["base"].as_f64().unwrap() >= 1.0);
    assert_eq!(c["base"], c["perturbed"]);

    let typo = CString::new(r#"{"name": "ffi", "domain": {"family": "flat"}, "grid": 64}"#).unwrap();
    assert_eq!(unsafe { covlab_pipeline_json(typo.as_ptr(), ptr::null(), &mut out) }, CovlabStatus::InvalidInput);
    assert!(last_error().contains("grid"));
    let big = CString::new("shear").unwrap();
    let cone = CString::new(r#"{"name": "ffi", "domain": {"family": "cone", "lip": 1.0}, "grid_n": 64, "eps_sweep": [0.45]}"#)
        .unwrap();
    let s = unsafe { covlab_pipeline_json(cone.as_ptr(), big.as_ptr(), &mut out) };
    assert!(matches!(s, CovlabStatus::InvalidInput | CovlabStatus::Assertion), "{s:?}");
}

/// Compiles the C smoke test against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libcovlab_ffi.a");
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
