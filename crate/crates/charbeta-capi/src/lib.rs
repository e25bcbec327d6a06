//! C ABI for the charbeta library.
//!
//! Conventions:
//! - Every fallible entry point returns a [`CbStatus`] code; `CB_STATUS_OK`
//!   is zero. On failure, `cb_last_error_message()` returns a thread-local
//!   description of what went wrong.
//! - Panels and simulations are opaque handles created and destroyed through
//!   this API; never free them with anything but the matching `_free`.
//! - All matrices cross the boundary as dense row-major `double` buffers
//!   owned by the caller.
//! - The target asset index and window start follow the library conventions:
//!   assets are 0-based, window starts are 1-based interval indices.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::{DMatrix, DVector};

use charbeta::boot::{
    block_bootstrap_ci, cs_bootstrap_ci, integrated_bootstrap_ci, plugin_ci_full,
    plugin_ci_naive, BlockPartition, BootstrapPlan, ConfidenceInterval, FactorWindow, SpotBundle,
};
use charbeta::dgp::{simulate_factor_panel, DgpConfig};
use charbeta::error::Error;
use charbeta::factor::estimate_window;
use charbeta::harness::{run_coverage_study, ExperimentConfig, IngestedPanel};
use charbeta::latent::{
    bias_case1, bias_case2, estimate_g_latent, latent_residuals, projected_pca,
    threshold_covariance, ThresholdKind, WindowProjection,
};
use charbeta::panel::{make_windows, IncrementPanel, LocalWindow};
use charbeta::sieve::{build_basis, CharacteristicPanel, ProjectionOperator, SieveBasisSpec};

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbStatus {
    Ok = 0,
    ConfigError = 2,
    DataError = 3,
    NullPointer = 4,
    Panic = 5,
}

fn status_of(err: &Error) -> CbStatus {
    match err.exit_code() {
        3 => CbStatus::DataError,
        _ => CbStatus::ConfigError,
    }
}

fn guard<F: FnOnce() -> Result<(), (CbStatus, String)>>(f: F) -> CbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CbStatus::Ok,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside charbeta".to_string());
            CbStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CbStatus, String) {
    (status_of(&e), e.to_string())
}

/// Last error message for this thread, or NULL when the last call succeeded.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => ptr::null(),
    })
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must come from a charbeta function that documents string ownership
/// transfer, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version string (static storage).
#[no_mangle]
pub extern "C" fn cb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// An increment panel plus its per-interval characteristics and optional
/// factor increments.
pub struct CbPanel {
    inner: IngestedPanel,
}

unsafe fn cstr<'a>(s: *const c_char) -> Result<&'a str, (CbStatus, String)> {
    if s.is_null() {
        return Err((CbStatus::NullPointer, "null string argument".into()));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (CbStatus::DataError, "string is not valid UTF-8".into()))
}

/// Load a CSV panel (long format: interval_index, asset_id, dY,
/// x_1..x_{k_x}[, f_1..f_{k_factors}]).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cb_panel_load_csv(
    path: *const c_char,
    k_x: usize,
    k_factors: usize,
    delta_n: f64,
    drop_incomplete: bool,
    out: *mut *mut CbPanel,
) -> CbStatus {
    guard(|| {
        if out.is_null() {
            return Err((CbStatus::NullPointer, "null output pointer".into()));
        }
        let path = cstr(path)?;
        let schema = charbeta::harness::CsvSchema { k_x, k_factors, delta_n, drop_incomplete };
        let inner =
            charbeta::harness::ingest_csv_panel(Path::new(path), &schema).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CbPanel { inner }));
        Ok(())
    })
}

/// Build a panel from dense buffers: `dy` is `p × n` row-major, `x` is
/// `n` blocks of `p × k_x` row-major matrices (interval-major), `f` is
/// `k_factors × n` row-major or NULL when factors are absent.
///
/// # Safety
/// Buffers must hold the advertised number of doubles and `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cb_panel_from_arrays(
    dy: *const f64,
    x: *const f64,
    f: *const f64,
    p: usize,
    n: usize,
    k_x: usize,
    k_factors: usize,
    delta_n: f64,
    out: *mut *mut CbPanel,
) -> CbStatus {
    guard(|| {
        if out.is_null() || dy.is_null() || x.is_null() {
            return Err((CbStatus::NullPointer, "null buffer argument".into()));
        }
        let dy_s = std::slice::from_raw_parts(dy, p * n);
        let data = DMatrix::from_fn(p, n, |l, i| dy_s[l * n + i]);
        let x_s = std::slice::from_raw_parts(x, n * p * k_x);
        let characteristics: Vec<DMatrix<f64>> = (0..n)
            .map(|i| DMatrix::from_fn(p, k_x, |l, j| x_s[i * p * k_x + l * k_x + j]))
            .collect();
        let factors = if k_factors > 0 {
            if f.is_null() {
                return Err((CbStatus::NullPointer, "null factor buffer".into()));
            }
            let f_s = std::slice::from_raw_parts(f, k_factors * n);
            Some(DMatrix::from_fn(k_factors, n, |k, i| f_s[k * n + i]))
        } else {
            None
        };
        let panel = IncrementPanel::from_data(data, delta_n).map_err(lib_err)?;
        let inner = IngestedPanel { panel, characteristics, factors };
        *out = Box::into_raw(Box::new(CbPanel { inner }));
        Ok(())
    })
}

/// Simulate a panel from a JSON `DgpConfig` (see the CLI's
/// `example-config dgp` for the schema).
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string, `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn cb_panel_simulate_json(
    config_json: *const c_char,
    out: *mut *mut CbPanel,
) -> CbStatus {
    guard(|| {
        if out.is_null() {
            return Err((CbStatus::NullPointer, "null output pointer".into()));
        }
        let text = cstr(config_json)?;
        let config: DgpConfig = serde_json::from_str(text)
            .map_err(|e| (CbStatus::ConfigError, format!("bad DGP config: {e}")))?;
        let sim = simulate_factor_panel(&config).map_err(lib_err)?;
        let inner = IngestedPanel {
            panel: sim.increments_y.clone(),
            characteristics: sim.characteristics.clone(),
            factors: Some(sim.increments_f.clone()),
        };
        *out = Box::into_raw(Box::new(CbPanel { inner }));
        Ok(())
    })
}

/// Destroy a panel handle.
///
/// # Safety
/// `panel` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cb_panel_free(panel: *mut CbPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Asset count of a panel (0 on null).
///
/// # Safety
/// `panel` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cb_panel_p(panel: *const CbPanel) -> usize {
    panel.as_ref().map(|h| h.inner.panel.p()).unwrap_or(0)
}

/// Interval count of a panel (0 on null).
///
/// # Safety
/// `panel` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cb_panel_n(panel: *const CbPanel) -> usize {
    panel.as_ref().map(|h| h.inner.panel.n()).unwrap_or(0)
}

fn default_sieve() -> SieveBasisSpec {
    SieveBasisSpec { standardize: false, ..SieveBasisSpec::linear() }
}

unsafe fn sieve_from_json(sieve_json: *const c_char) -> Result<SieveBasisSpec, (CbStatus, String)> {
    if sieve_json.is_null() {
        return Ok(default_sieve());
    }
    let text = cstr(sieve_json)?;
    serde_json::from_str(text).map_err(|e| (CbStatus::ConfigError, format!("bad sieve spec: {e}")))
}

fn window_op(
    panel: &IngestedPanel,
    window: &LocalWindow,
    sieve: &SieveBasisSpec,
) -> Result<ProjectionOperator, (CbStatus, String)> {
    let chars = CharacteristicPanel::new(panel.characteristics[window.anchor0()].clone())
        .map_err(lib_err)?;
    build_basis(&chars, sieve).map_err(lib_err)
}

/// Spot estimation on one window. `beta`, `g`, `gamma` are caller-owned
/// `p × k_out` row-major buffers; `k_out` is the factor-column count in
/// known-factor mode (`latent_k = 0`) or `latent_k` otherwise.
///
/// # Safety
/// Output buffers must hold `p * k_out` doubles; `panel` must be live.
#[no_mangle]
pub unsafe extern "C" fn cb_estimate_spot(
    panel: *const CbPanel,
    window_start: usize,
    k_n: usize,
    latent_k: usize,
    sieve_json: *const c_char,
    beta: *mut f64,
    g: *mut f64,
    gamma: *mut f64,
) -> CbStatus {
    guard(|| {
        let handle = panel
            .as_ref()
            .ok_or((CbStatus::NullPointer, "null panel handle".to_string()))?;
        if beta.is_null() || g.is_null() || gamma.is_null() {
            return Err((CbStatus::NullPointer, "null output buffer".into()));
        }
        let ing = &handle.inner;
        let window = LocalWindow::new(window_start, k_n, ing.panel.n()).map_err(lib_err)?;
        let sieve = sieve_from_json(sieve_json)?;
        let op = window_op(ing, &window, &sieve)?;
        let delta = ing.panel.delta_n;

        let (b_mat, g_mat, gm_mat) = if latent_k > 0 {
            let y = ing.panel.window_view(&window);
            let est = projected_pca(&y, &WindowProjection::Anchor(&op), latent_k, delta)
                .map_err(lib_err)?;
            let (gh, gammah) =
                estimate_g_latent(&y, &est.f_hat, &op, delta).map_err(lib_err)?;
            (&gh + &gammah, gh, gammah)
        } else {
            let factors = ing.factors.as_ref().ok_or((
                CbStatus::ConfigError,
                "panel has no factor columns; pass latent_k > 0".to_string(),
            ))?;
            let dec =
                estimate_window(&ing.panel, factors, window, &op).map_err(lib_err)?;
            (dec.beta_hat, dec.g_hat, dec.gamma_hat)
        };
        let p = ing.panel.p();
        let k = b_mat.ncols();
        for (buf, m) in [(beta, &b_mat), (g, &g_mat), (gamma, &gm_mat)] {
            let s = std::slice::from_raw_parts_mut(buf, p * k);
            for l in 0..p {
                for j in 0..k {
                    s[l * k + j] = m[(l, j)];
                }
            }
        }
        Ok(())
    })
}

/// Interval method selector for [`cb_spot_ci`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbCiMethod {
    CsBootstrap = 0,
    BlockBootstrap = 1,
    Integrated = 2,
    PluginNaive = 3,
    PluginFull = 4,
}

/// Latent-mode bias correction selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbBiasCorrection {
    None = 0,
    Case1 = 1,
    Case2 = 2,
}

/// A confidence interval, plain-old-data.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CbInterval {
    pub lo: f64,
    pub hi: f64,
    pub point: f64,
    pub q_tau: f64,
    pub level: f64,
    /// Redraws caused by rank-deficient resampled bases.
    pub retries: usize,
}

impl From<ConfidenceInterval> for CbInterval {
    fn from(ci: ConfidenceInterval) -> Self {
        CbInterval {
            lo: ci.lo,
            hi: ci.hi,
            point: ci.point,
            q_tau: ci.q_tau,
            level: ci.level,
            retries: ci.retries,
        }
    }
}

/// Confidence interval for `v' g` of one asset on one window.
///
/// `latent_k = 0` uses the panel's factor columns; otherwise latent factors
/// are estimated by projected PCA and `bias` selects the correction. `v` has
/// length `k_factors` (known mode) or `latent_k`. `block_size` is only read
/// by the block bootstrap; `k_n`/`window_start` position the window
/// (`Integrated` sweeps all overlapping windows of length `k_n`).
///
/// # Safety
/// `panel` must be live, `v` must hold the advertised length, `out` must be
/// a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cb_spot_ci(
    panel: *const CbPanel,
    method: CbCiMethod,
    window_start: usize,
    k_n: usize,
    target_l: usize,
    v: *const f64,
    v_len: usize,
    level: f64,
    b: usize,
    seed: u64,
    latent_k: usize,
    bias: CbBiasCorrection,
    block_size: usize,
    sieve_json: *const c_char,
    out: *mut CbInterval,
) -> CbStatus {
    guard(|| {
        let handle = panel
            .as_ref()
            .ok_or((CbStatus::NullPointer, "null panel handle".to_string()))?;
        if v.is_null() || out.is_null() {
            return Err((CbStatus::NullPointer, "null v or out pointer".into()));
        }
        let ing = &handle.inner;
        let window = LocalWindow::new(window_start, k_n, ing.panel.n()).map_err(lib_err)?;
        let sieve = sieve_from_json(sieve_json)?;
        let op = window_op(ing, &window, &sieve)?;
        let delta = ing.panel.delta_n;
        let vv = DVector::from_column_slice(std::slice::from_raw_parts(v, v_len));
        let plan = BootstrapPlan::new(b, target_l, vv, level, seed);
        let y_view = ing.panel.window_view(&window);

        let ci: ConfidenceInterval = match method {
            CbCiMethod::CsBootstrap | CbCiMethod::BlockBootstrap => {
                let f_hat_store;
                let bias_vec;
                let factors = if latent_k > 0 {
                    let est =
                        projected_pca(&y_view, &WindowProjection::Anchor(&op), latent_k, delta)
                            .map_err(lib_err)?;
                    let (g_lat, gamma_lat) =
                        estimate_g_latent(&y_view, &est.f_hat, &op, delta).map_err(lib_err)?;
                    bias_vec = match bias {
                        CbBiasCorrection::None => None,
                        CbBiasCorrection::Case1 => {
                            let resid =
                                latent_residuals(&y_view, &g_lat, &gamma_lat, &est.f_hat);
                            Some(
                                bias_case1(
                                    &resid,
                                    &est.v_hat,
                                    &g_lat,
                                    &WindowProjection::Anchor(&op),
                                    target_l,
                                    delta,
                                )
                                .map_err(lib_err)?,
                            )
                        }
                        CbBiasCorrection::Case2 => {
                            let resid =
                                latent_residuals(&y_view, &g_lat, &gamma_lat, &est.f_hat);
                            let cov = threshold_covariance(
                                &resid,
                                delta,
                                op.phi(),
                                0.5,
                                ThresholdKind::Soft,
                            )
                            .map_err(lib_err)?;
                            Some(
                                bias_case2(
                                    &cov,
                                    &est.v_hat,
                                    &g_lat,
                                    &WindowProjection::Anchor(&op),
                                    window.k_n,
                                    target_l,
                                )
                                .map_err(lib_err)?,
                            )
                        }
                    };
                    f_hat_store = est.f_hat;
                    FactorWindow::Estimated(&f_hat_store)
                } else {
                    bias_vec = None;
                    let f = ing.factors.as_ref().ok_or((
                        CbStatus::ConfigError,
                        "panel has no factor columns; pass latent_k > 0".to_string(),
                    ))?;
                    FactorWindow::Known(
                        f.view((0, window.anchor0()), (f.nrows(), window.k_n)),
                    )
                };
                let bundle = SpotBundle {
                    y_window: y_view,
                    factors,
                    op: &op,
                    delta_n: delta,
                    bias: bias_vec,
                };
                if method == CbCiMethod::CsBootstrap {
                    cs_bootstrap_ci(&bundle, &plan).map_err(lib_err)?
                } else {
                    let partition = BlockPartition::contiguous(ing.panel.p(), block_size)
                        .map_err(lib_err)?;
                    block_bootstrap_ci(&bundle, &partition, &plan).map_err(lib_err)?
                }
            }
            CbCiMethod::Integrated => {
                let factors = ing.factors.as_ref().ok_or((
                    CbStatus::ConfigError,
                    "integrated inference needs factor columns".to_string(),
                ))?;
                let windows = make_windows(ing.panel.n(), k_n, 1).map_err(lib_err)?;
                let mut ops = Vec::with_capacity(windows.len());
                for w in &windows {
                    ops.push(window_op(ing, w, &sieve)?);
                }
                integrated_bootstrap_ci(&ing.panel, factors, &ops, k_n, &plan)
                    .map_err(lib_err)?
            }
            CbCiMethod::PluginNaive | CbCiMethod::PluginFull => {
                let factors = ing.factors.as_ref().ok_or((
                    CbStatus::ConfigError,
                    "plug-in intervals need factor columns".to_string(),
                ))?;
                let dec =
                    estimate_window(&ing.panel, factors, window, &op).map_err(lib_err)?;
                let f_view = factors.view((0, window.anchor0()), (factors.nrows(), window.k_n));
                if method == CbCiMethod::PluginNaive {
                    plugin_ci_naive(&dec, &y_view, &f_view, &op, delta, &plan)
                        .map_err(lib_err)?
                } else {
                    plugin_ci_full(&dec, &y_view, &f_view, &op, delta, &plan)
                        .map_err(lib_err)?
                }
            }
        };
        *out = ci.into();
        Ok(())
    })
}

/// Run a coverage study from a JSON `ExperimentConfig`; on success `*out`
/// receives a newly allocated JSON-lines report (free with
/// [`cb_string_free`]).
///
/// # Safety
/// `config_json` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cb_coverage_study_json(
    config_json: *const c_char,
    out: *mut *mut c_char,
) -> CbStatus {
    guard(|| {
        if out.is_null() {
            return Err((CbStatus::NullPointer, "null output pointer".into()));
        }
        let text = cstr(config_json)?;
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| (CbStatus::ConfigError, format!("bad experiment config: {e}")))?;
        let report = run_coverage_study(&config).map_err(lib_err)?;
        let jsonl = report.to_jsonl_string().map_err(lib_err)?;
        let c = CString::new(jsonl)
            .map_err(|_| (CbStatus::DataError, "report contained NUL".to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}
