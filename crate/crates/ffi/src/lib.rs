//! C ABI over the `covlab` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_solve`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`CovlabStatus`]; on failure the message is available from
//! [`covlab_last_error`] on the same thread until the next failing call.
//! Strings returned by the library are released with [`covlab_string_free`].

use covlab::cli::{parse_domain, parse_map};
use covlab::config::Scenario;
use covlab::geometry::{build_domain, BiLipMap, GraphDomain};
use covlab::green::{solve_green, GreenData, GreenOptions};
use covlab::solvability::{kappa_density, rh_constant, standard_balls, stability_experiment, ExperimentSpec};
use covlab::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovlabStatus {
    Ok = 0,
    /// Bad arguments, unparsable specs or configs.
    InvalidInput = 1,
    /// A numerical invariant failed.
    Assertion = 2,
    /// A required pointer was null.
    NullPointer = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Graph domain handle.
pub struct CovlabDomain(GraphDomain);

/// Green function handle.
pub struct CovlabGreen(GreenData);

/// Uniform grid of a Green solve: node `(i, j)` at `(x0 + i h, t0 + j h)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovlabGrid {
    pub x0: f64,
    pub t0: f64,
    pub h: f64,
    pub nx: u32,
    pub nt: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CovlabStatus {
    match e {
        Error::Io(_) | Error::Csv(_) => CovlabStatus::Io,
        e if e.is_assertion() => CovlabStatus::Assertion,
        _ => CovlabStatus::InvalidInput,
    }
}

/// Runs `f`, turning errors and panics into a status and the last error.
fn guard(f: impl FnOnce() -> Result<(), (CovlabStatus, String)>) -> CovlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CovlabStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CovlabStatus::Panic
        }
    }
}

fn lib<T>(r: covlab::Result<T>) -> Result<T, (CovlabStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CovlabStatus, String) {
    (CovlabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CovlabStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (CovlabStatus::InvalidInput, format!("{what}: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (CovlabStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (CovlabStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failing call on this thread, or null. Owned by the
/// library; valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn covlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn covlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a domain from a spec such as `"cone:1"` or `"sine:0.3,2"`.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn covlab_domain_new(
    spec: *const c_char,
    r: f64,
    grid_n: u32,
    out: *mut *mut CovlabDomain,
) -> CovlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let fam = lib(parse_domain(str_arg(spec, "spec")?))?;
        let dom = lib(build_domain(fam, 2, r, grid_n as usize))?;
        *out = Box::into_raw(Box::new(CovlabDomain(dom)));
        Ok(())
    })
}

/// # Safety
/// `dom` must come from [`covlab_domain_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn covlab_domain_free(dom: *mut CovlabDomain) {
    if !dom.is_null() {
        drop(Box::from_raw(dom));
    }
}

/// Graph height `g(x)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covlab_domain_g(dom: *const CovlabDomain, x: f64, out: *mut f64) -> CovlabStatus {
    guard(|| {
        *out_arg(out, "out")? = in_arg(dom, "dom")?.0.g(x);
        Ok(())
    })
}

/// Distance from `(x, t)` to the boundary; fails below the graph.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covlab_domain_dist(dom: *const CovlabDomain, x: f64, t: f64, out: *mut f64) -> CovlabStatus {
    guard(|| {
        let d = lib(in_arg(dom, "dom")?.0.dist_to_boundary([x, t]))?;
        *out_arg(out, "out")? = d;
        Ok(())
    })
}

/// Green function with pole at infinity, normalized to 1 at `(0, g(0) + 1)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covlab_green_solve(
    dom: *const CovlabDomain,
    grid_n: u32,
    out: *mut *mut CovlabGreen,
) -> CovlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let gd = lib(solve_green(&in_arg(dom, "dom")?.0, grid_n as usize, &GreenOptions { richardson: false }))?;
        *out = Box::into_raw(Box::new(CovlabGreen(gd)));
        Ok(())
    })
}

/// # Safety
/// `g` must come from [`covlab_green_solve`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn covlab_green_free(g: *mut CovlabGreen) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covlab_green_grid(g: *const CovlabGreen, out: *mut CovlabGrid) -> CovlabStatus {
    guard(|| {
        let grid = in_arg(g, "green")?.0.grid;
        *out_arg(out, "out")? =
            CovlabGrid { x0: grid.x0, t0: grid.t0, h: grid.h, nx: grid.nx as u32, nt: grid.nt as u32 };
        Ok(())
    })
}

/// Bilinear value of `G` at `(x, t)`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covlab_green_value(g: *const CovlabGreen, x: f64, t: f64, out: *mut f64) -> CovlabStatus {
    guard(|| {
        let v = in_arg(g, "green")?.0.g_at([x, t]).ok_or_else(|| {
            (CovlabStatus::InvalidInput, format!("({x}, {t}) is outside the sampled domain"))
        })?;
        *out_arg(out, "out")? = v;
        Ok(())
    })
}

/// Copies the `nx·nt` node values of `G` into `buf` (row `j` at `j·nx`),
/// NaN at nodes without a value.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn covlab_green_values(g: *const CovlabGreen, buf: *mut f64, len: usize) -> CovlabStatus {
    guard(|| {
        let f = &in_arg(g, "green")?.0.g;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < f.values.len() {
            return Err((CovlabStatus::InvalidInput, format!("buffer holds {len} of {} values", f.values.len())));
        }
        let dst = std::slice::from_raw_parts_mut(buf, f.values.len());
        for (k, d) in dst.iter_mut().enumerate() {
            *d = f.at(k).unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Reverse-Hölder constant `C_p` of the density `κ` over boundary balls of
/// radius `radius` centred at `0, ±R/8, ±R/4`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covlab_rh_constant(g: *const CovlabGreen, p: f64, radius: f64, out: *mut f64) -> CovlabStatus {
    guard(|| {
        let gd = &in_arg(g, "green")?.0;
        let kappa = kappa_density(gd, 0.5 * gd.dom.r);
        let rep = lib(rh_constant(&gd.dom, &kappa, p, &standard_balls(&gd.dom, &[radius])))?;
        *out_arg(out, "out")? = rep.c_p_estimate;
        Ok(())
    })
}

/// Runs the base-versus-perturbed experiment for each ε of a scenario
/// (JSON, the same schema as the command line) and returns the reports as
/// a JSON array. `map` overrides the scenario's map when non-null.
///
/// # Safety
/// `config` must be NUL-terminated, `map` null or NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn covlab_pipeline_json(
    config: *const c_char,
    map: *const c_char,
    out: *mut *mut c_char,
) -> CovlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut sc = lib(Scenario::from_json(str_arg(config, "config")?))?;
        if !map.is_null() {
            sc.map = lib(parse_map(str_arg(map, "map")?))?;
        }
        let dom = lib(build_domain(sc.domain.clone(), 2, sc.r, sc.grid_n))?;
        let spec = ExperimentSpec {
            grid_n: sc.grid_n,
            ps: sc.p_list.clone(),
            radii: sc.radii.clone(),
            ball_radii: sc.ball_radii.clone(),
            inversion_targets: sc.inversion_targets,
            seed: sc.seed,
        };
        let mut reports = Vec::new();
        for &eps in &sc.eps_sweep {
            let m = lib(BiLipMap::new(sc.map.clone(), eps))?;
            reports.push(lib(stability_experiment(&dom, &m, &spec))?);
        }
        let text = serde_json::to_string(&reports).map_err(|e| (CovlabStatus::Io, e.to_string()))?;
        *out = CString::new(text).map_err(|e| (CovlabStatus::Io, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn covlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
