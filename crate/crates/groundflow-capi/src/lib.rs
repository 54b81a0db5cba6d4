//! C ABI over the groundflow toolkit.
//!
//! Conventions:
//! - Every fallible call returns a [`GfStatus`]; `GF_STATUS_OK` is zero.
//! - On failure, [`gf_last_error`] returns a thread-local message that stays
//!   valid until the next failing call on the same thread.
//! - Handles (`GfField`, `GfSolution`, `GfNetwork`) are opaque; free them
//!   with the matching `*_free` function exactly once. NULL is tolerated by
//!   the free functions and rejected everywhere else.
//! - Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use groundflow::kle::{build_basis_2d, ConductivityField, CovarianceSpec, FieldFile};
use groundflow::net::{self, MlpParams};
use groundflow::scenario::{run_scenario, ArtifactLevel, ScenarioOutcome, ScenarioSpec};
use groundflow::solver::{self, HeadSolution};
use groundflow::{ErrorClass, GfError, Grid2D};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfStatus {
    Ok = 0,
    /// Invalid spec, config, or argument values.
    Spec = 2,
    /// Numerical failure (solver, root finding, diverged training).
    Numeric = 3,
    /// Filesystem or parse failure.
    Io = 4,
    /// A required pointer argument was NULL.
    NullArg = 5,
    /// A string argument was not valid UTF-8.
    Utf8 = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &GfError) -> GfStatus {
    match err.class() {
        ErrorClass::Spec => GfStatus::Spec,
        ErrorClass::Numeric => GfStatus::Numeric,
        ErrorClass::Io => GfStatus::Io,
    }
}

fn fail(err: GfError) -> GfStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Runs a closure behind a panic guard, mapping panics to `GF_STATUS_PANIC`.
fn guarded<F: FnOnce() -> GfStatus>(f: F) -> GfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            GfStatus::Panic
        }
    }
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, GfStatus> {
    if ptr.is_null() {
        set_error("NULL string argument");
        return Err(GfStatus::NullArg);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        GfStatus::Utf8
    })
}

/// Last error message raised on this thread (empty string if none).
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gf_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Conductivity fields
// ---------------------------------------------------------------------------

/// Opaque handle to a conductivity-field realization.
pub struct GfField {
    inner: ConductivityField,
    seed: Option<u64>,
}

/// Creates a field realization from covariance parameters and a seed.
///
/// # Safety
/// `out` must be a valid pointer; the result must be freed with
/// [`gf_field_free`].
#[no_mangle]
pub unsafe extern "C" fn gf_field_create(
    variance: f64,
    corr_len_x: f64,
    corr_len_y: f64,
    domain_len_x: f64,
    domain_len_y: f64,
    mean_logk: f64,
    n_terms: usize,
    seed: u64,
    out: *mut *mut GfField,
) -> GfStatus {
    guarded(|| {
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        let spec = CovarianceSpec {
            variance,
            corr_len_x,
            corr_len_y,
            domain_len_x,
            domain_len_y,
            mean_logk,
        };
        match build_basis_2d(&spec, n_terms) {
            Ok(basis) => {
                let field = ConductivityField::sample(Arc::new(basis), seed);
                *out = Box::into_raw(Box::new(GfField {
                    inner: field,
                    seed: Some(seed),
                }));
                GfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a field document written by the CLI or [`gf_field_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gf_field_load(path: *const c_char, out: *mut *mut GfField) -> GfStatus {
    guarded(|| {
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(GfError::io(path, e)),
        };
        let doc = match FieldFile::parse(&text) {
            Ok(d) => d,
            Err(e) => return fail(e),
        };
        let seed = doc.seed;
        match doc.instantiate() {
            Ok(field) => {
                *out = Box::into_raw(Box::new(GfField { inner: field, seed }));
                GfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the field document (header, xi vector) to `path`.
///
/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gf_field_save(field: *const GfField, path: *const c_char) -> GfStatus {
    guarded(|| {
        let Some(f) = field.as_ref() else {
            set_error("NULL field handle");
            return GfStatus::NullArg;
        };
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let doc = FieldFile::from_field(&f.inner, f.seed);
        match std::fs::write(path, doc.to_document()) {
            Ok(()) => GfStatus::Ok,
            Err(e) => fail(GfError::io(path, e)),
        }
    })
}

/// Number of retained expansion terms.
///
/// # Safety
/// `field` must be a live handle (returns 0 on NULL).
#[no_mangle]
pub unsafe extern "C" fn gf_field_n_terms(field: *const GfField) -> usize {
    field.as_ref().map_or(0, |f| f.inner.basis().n_terms())
}

/// Log-conductivity and its gradient at a point: `out = [Z, dZ/dx, dZ/dy]`.
///
/// # Safety
/// `field` must be a live handle and `out` must point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn gf_field_logk(
    field: *const GfField,
    x: f64,
    y: f64,
    out: *mut f64,
) -> GfStatus {
    guarded(|| {
        let Some(f) = field.as_ref() else {
            set_error("NULL field handle");
            return GfStatus::NullArg;
        };
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        let p = f.inner.synthesize_logk(x, y);
        *out.add(0) = p.z;
        *out.add(1) = p.dz_dx;
        *out.add(2) = p.dz_dy;
        GfStatus::Ok
    })
}

/// Conductivity and its gradient at a point: `out = [K, dK/dx, dK/dy]`.
///
/// # Safety
/// `field` must be a live handle and `out` must point to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn gf_field_conductivity(
    field: *const GfField,
    x: f64,
    y: f64,
    out: *mut f64,
) -> GfStatus {
    guarded(|| {
        let Some(f) = field.as_ref() else {
            set_error("NULL field handle");
            return GfStatus::NullArg;
        };
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        let (k, kx, ky) = f.inner.k_at(x, y);
        *out.add(0) = k;
        *out.add(1) = kx;
        *out.add(2) = ky;
        GfStatus::Ok
    })
}

/// Frees a field handle (NULL is a no-op).
///
/// # Safety
/// `field` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gf_field_free(field: *mut GfField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

// ---------------------------------------------------------------------------
// Reference solver
// ---------------------------------------------------------------------------

/// Opaque handle to a simulated head trajectory.
pub struct GfSolution {
    inner: HeadSolution,
}

/// Simulates the base transient problem on `nx x ny` cells: prescribed heads
/// on the left/right columns, no-flow laterals, sharp initial front.
///
/// # Safety
/// `field` must be a live handle and `out` a valid pointer; free the result
/// with [`gf_solution_free`].
#[no_mangle]
pub unsafe extern "C" fn gf_simulate(
    field: *const GfField,
    nx: usize,
    ny: usize,
    dt: f64,
    n_steps: usize,
    left_head: f64,
    right_head: f64,
    specific_storage: f64,
    out: *mut *mut GfSolution,
) -> GfStatus {
    guarded(|| {
        let Some(f) = field.as_ref() else {
            set_error("NULL field handle");
            return GfStatus::NullArg;
        };
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        let spec = f.inner.basis().spec();
        let grid = match Grid2D::from_extent(nx, ny, spec.domain_len_x, spec.domain_len_y) {
            Ok(g) => g,
            Err(e) => return fail(e),
        };
        let k = f.inner.k_grid(&grid);
        let mut problem = match solver::base_problem(k) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        problem.grid = grid;
        problem.dt = dt;
        problem.n_steps = n_steps;
        problem.specific_storage = specific_storage;
        problem.bc.left = solver::SideBc::head(left_head);
        problem.bc.right = solver::SideBc::head(right_head);
        problem.ic.fill(0.0);
        for j in 0..grid.ny {
            problem.ic[(j, 0)] = left_head;
            problem.ic[(j, grid.nx - 1)] = right_head;
        }
        match solver::simulate(&problem) {
            Ok(sol) => {
                *out = Box::into_raw(Box::new(GfSolution { inner: sol }));
                GfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of time steps (the trajectory stores `n_steps + 1` slices).
///
/// # Safety
/// `solution` must be a live handle (returns 0 on NULL).
#[no_mangle]
pub unsafe extern "C" fn gf_solution_n_steps(solution: *const GfSolution) -> usize {
    solution.as_ref().map_or(0, |s| s.inner.n_steps())
}

/// Copies the head field of one stored step into `buf` (row-major, ny rows
/// of nx values). `len` must be at least `nx * ny`.
///
/// # Safety
/// `solution` must be a live handle and `buf` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gf_solution_heads(
    solution: *const GfSolution,
    step: usize,
    buf: *mut f64,
    len: usize,
) -> GfStatus {
    guarded(|| {
        let Some(s) = solution.as_ref() else {
            set_error("NULL solution handle");
            return GfStatus::NullArg;
        };
        if buf.is_null() {
            set_error("NULL buffer");
            return GfStatus::NullArg;
        }
        if step >= s.inner.heads.len() {
            return fail(GfError::invalid(
                "solution step",
                format!("step {step} outside 0..={}", s.inner.n_steps()),
            ));
        }
        let field = &s.inner.heads[step];
        let n = field.len();
        if len < n {
            return fail(GfError::invalid(
                "solution buffer",
                format!("buffer holds {len} values, need {n}"),
            ));
        }
        for (offset, v) in field.iter().enumerate() {
            *buf.add(offset) = *v;
        }
        GfStatus::Ok
    })
}

/// Frees a solution handle (NULL is a no-op).
///
/// # Safety
/// `solution` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gf_solution_free(solution: *mut GfSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

// ---------------------------------------------------------------------------
// Surrogate networks
// ---------------------------------------------------------------------------

/// Opaque handle to a trained surrogate loaded from a checkpoint.
pub struct GfNetwork {
    inner: MlpParams,
}

/// Loads a checkpoint document written during training.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; free
/// the result with [`gf_network_free`].
#[no_mangle]
pub unsafe extern "C" fn gf_network_load(path: *const c_char, out: *mut *mut GfNetwork) -> GfStatus {
    guarded(|| {
        let path = match utf8_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(GfError::io(path, e)),
        };
        match net::parse_checkpoint(&text) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(GfNetwork { inner: params }));
                GfStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Physical-unit head prediction at `(t, x, y)`.
///
/// # Safety
/// `network` must be a live handle and `out` must point to a double.
#[no_mangle]
pub unsafe extern "C" fn gf_network_predict(
    network: *const GfNetwork,
    t: f64,
    x: f64,
    y: f64,
    out: *mut f64,
) -> GfStatus {
    guarded(|| {
        let Some(n) = network.as_ref() else {
            set_error("NULL network handle");
            return GfStatus::NullArg;
        };
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        *out = net::predict(&n.inner, t, x, y);
        GfStatus::Ok
    })
}

/// Physical-unit jet at `(t, x, y)`:
/// `out = [h, dh/dt, dh/dx, dh/dy, d2h/dt2, d2h/dx2, d2h/dy2]`.
///
/// # Safety
/// `network` must be a live handle and `out` must point to 7 doubles.
#[no_mangle]
pub unsafe extern "C" fn gf_network_jet(
    network: *const GfNetwork,
    t: f64,
    x: f64,
    y: f64,
    out: *mut f64,
) -> GfStatus {
    guarded(|| {
        let Some(n) = network.as_ref() else {
            set_error("NULL network handle");
            return GfStatus::NullArg;
        };
        if out.is_null() {
            set_error("NULL output pointer");
            return GfStatus::NullArg;
        }
        let j = net::jet_physical(&n.inner, t, x, y);
        for (offset, v) in [j.value, j.d_t, j.d_x, j.d_y, j.d_tt, j.d_xx, j.d_yy]
            .into_iter()
            .enumerate()
        {
            *out.add(offset) = v;
        }
        GfStatus::Ok
    })
}

/// Frees a network handle (NULL is a no-op).
///
/// # Safety
/// `network` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gf_network_free(network: *mut GfNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

// ---------------------------------------------------------------------------
// Scenario execution
// ---------------------------------------------------------------------------

/// Overall metrics of one scenario run, guided model vs data-only baseline.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GfPairMetrics {
    pub guided_relative_l2: f64,
    pub guided_r2: f64,
    pub baseline_relative_l2: f64,
    pub baseline_r2: f64,
}

/// Executes a scenario spec file end to end (training included) and reports
/// the headline metrics. Artifacts are written under `out_dir` when it is
/// non-NULL. Transfer-kind specs are rejected here; they report three models
/// and are served by the CLI instead.
///
/// # Safety
/// `spec_path` must be a NUL-terminated string; `out_dir` may be NULL;
/// `metrics` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gf_run_scenario(
    spec_path: *const c_char,
    out_dir: *const c_char,
    metrics: *mut GfPairMetrics,
) -> GfStatus {
    guarded(|| {
        let spec_path = match utf8_arg(spec_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out_path = if out_dir.is_null() {
            None
        } else {
            match utf8_arg(out_dir) {
                Ok(p) => Some(std::path::PathBuf::from(p)),
                Err(s) => return s,
            }
        };
        if metrics.is_null() {
            set_error("NULL metrics pointer");
            return GfStatus::NullArg;
        }
        let text = match std::fs::read_to_string(spec_path) {
            Ok(t) => t,
            Err(e) => return fail(GfError::io(spec_path, e)),
        };
        let spec = match ScenarioSpec::from_document(&text) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        if let Some(dir) = &out_path {
            if let Err(e) = std::fs::create_dir_all(dir) {
                return fail(GfError::io(dir.display().to_string(), e));
            }
        }
        match run_scenario(&spec, out_path.as_deref(), ArtifactLevel::Full) {
            Ok(ScenarioOutcome::Pair(pair)) => {
                *metrics = GfPairMetrics {
                    guided_relative_l2: pair.guided.relative_l2,
                    guided_r2: pair.guided.r2_score,
                    baseline_relative_l2: pair.baseline.relative_l2,
                    baseline_r2: pair.baseline.r2_score,
                };
                GfStatus::Ok
            }
            Ok(ScenarioOutcome::Transfer(_)) => fail(GfError::invalid(
                "scenario kind",
                "transfer specs report three models; use the CLI for them",
            )),
            Err(e) => fail(e),
        }
    })
}
