//! Two-step estimation with observed factors: local time-series regressions
//! for spot betas, the cross-sectional sieve split into characteristic and
//! idiosyncratic betas, and the integrated characteristic beta.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::panel::{make_windows, IncrementPanel, LocalWindow};
use crate::sieve::ProjectionOperator;

/// Per-window estimates `(β̂, Ĝ, Γ̂)` and the realized factor quadratic
/// variation of the window.
#[derive(Debug, Clone)]
pub struct BetaDecomposition {
    /// `p × K` spot beta estimates.
    pub beta_hat: DMatrix<f64>,
    /// `p × K` characteristic betas `Ĝ = P β̂`.
    pub g_hat: DMatrix<f64>,
    /// `p × K` idiosyncratic betas `Γ̂ = β̂ - Ĝ`; the decomposition identity
    /// holds exactly by construction.
    pub gamma_hat: DMatrix<f64>,
    pub window: LocalWindow,
    /// `K × K` realized factor quadratic variation `ĉ_FF`.
    pub ff_qv: DMatrix<f64>,
}

/// Integrated characteristic beta for one target asset.
#[derive(Debug, Clone)]
pub struct IntegratedG {
    /// `K`-vector estimate of `∫ g_{lt} dt` over the covered window anchors.
    pub value: DVector<f64>,
    /// Number of overlapping windows entering the Riemann sum.
    pub windows_used: usize,
    pub delta_n: f64,
}

/// Spot beta by per-asset time-series regression on one window:
/// `β̂ = (Σ ΔY ΔF') (Σ ΔF ΔF')^{-1}`.
///
/// `y_win` is `p × k_n`, `f_win` is `K × k_n`. Returns `(β̂, ĉ_FF)`. The
/// jump-robust variant is obtained by passing pre-truncated increments.
pub fn estimate_beta_known(
    y_win: &DMatrixView<'_, f64>,
    f_win: &DMatrixView<'_, f64>,
    delta_n: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = f_win.nrows();
    let k_n = f_win.ncols();
    if y_win.ncols() != k_n {
        return Err(Error::config(format!(
            "panel window has {} intervals but factor window has {k_n}",
            y_win.ncols()
        )));
    }
    if k_n < k {
        return Err(Error::config(format!("need k_n >= K, got k_n = {k_n}, K = {k}")));
    }
    let s_ff = f_win * f_win.transpose();
    let chol = Cholesky::new(s_ff.clone()).ok_or_else(|| singular_factor_error(&s_ff))?;
    // β̂' = S_ff^{-1} (F Y').
    let fy = f_win * y_win.transpose(); // K × p
    let beta_t = chol.solve(&fy);
    let ff_qv = s_ff / (k_n as f64 * delta_n);
    Ok((beta_t.transpose(), ff_qv))
}

fn singular_factor_error(s_ff: &DMatrix<f64>) -> Error {
    let eig = SymmetricEigen::new(s_ff.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    Error::numerical(format!(
        "singular factor Gram matrix: eigenvalues in [{min:.3e}, {max:.3e}], condition {:.3e}",
        if min > 0.0 { max / min } else { f64::INFINITY }
    ))
}

/// Cross-sectional sieve split `Ĝ = P β̂`, `Γ̂ = (I - P) β̂`.
pub fn split_characteristic(
    beta_hat: DMatrix<f64>,
    ff_qv: DMatrix<f64>,
    window: LocalWindow,
    op: &ProjectionOperator,
) -> Result<BetaDecomposition> {
    if beta_hat.nrows() != op.p() {
        return Err(Error::config(format!(
            "beta has {} rows but projection operator has p = {}",
            beta_hat.nrows(),
            op.p()
        )));
    }
    let g_hat = op.project(&beta_hat)?;
    let gamma_hat = &beta_hat - &g_hat;
    Ok(BetaDecomposition { beta_hat, g_hat, gamma_hat, window, ff_qv })
}

/// Convenience pipeline: spot regression on `window` followed by the sieve
/// split with the window-anchor projection.
pub fn estimate_window(
    panel: &IncrementPanel,
    factors: &DMatrix<f64>,
    window: LocalWindow,
    op: &ProjectionOperator,
) -> Result<BetaDecomposition> {
    if factors.ncols() != panel.n() {
        return Err(Error::config(format!(
            "factor series has {} intervals, panel has {}",
            factors.ncols(),
            panel.n()
        )));
    }
    let y_win = panel.window_view(&window);
    let f_win = factors.view((0, window.start_index - 1), (factors.nrows(), window.k_n));
    let (beta_hat, ff_qv) = estimate_beta_known(&y_win, &f_win, panel.delta_n)?;
    split_characteristic(beta_hat, ff_qv, window, op)
}

/// Integrated characteristic beta of asset `target_l` via the Riemann sum of
/// overlapping spot estimates: `Σ_t ĝ_{lt} Δ_n` over windows starting at
/// `1, …, n - k_n + 1`.
///
/// `ops[w]` is the projection operator anchored at overlapping window `w`.
pub fn integrated_g(
    panel: &IncrementPanel,
    factors: &DMatrix<f64>,
    ops: &[ProjectionOperator],
    k_n: usize,
    target_l: usize,
) -> Result<IntegratedG> {
    let n = panel.n();
    if n <= k_n {
        return Err(Error::config(format!("integrated g needs n > k_n, got n = {n}, k_n = {k_n}")));
    }
    if target_l >= panel.p() {
        return Err(Error::config(format!(
            "target asset {target_l} out of range, p = {}",
            panel.p()
        )));
    }
    let windows = make_windows(n, k_n, 1)?;
    if ops.len() != windows.len() {
        return Err(Error::config(format!(
            "expected {} projection operators (one per overlapping window), got {}",
            windows.len(),
            ops.len()
        )));
    }
    let k = factors.nrows();
    let mut value = DVector::zeros(k);
    for (w, window) in windows.iter().enumerate() {
        let y_win = panel.window_view(window);
        let f_win = factors.view((0, window.start_index - 1), (k, window.k_n));
        let (beta_hat, _) = estimate_beta_known(&y_win, &f_win, panel.delta_n)?;
        // ĝ_{lt} = β̂' P_l.
        let p_l = ops[w].p_col(target_l)?;
        value += beta_hat.transpose() * p_l * panel.delta_n;
    }
    Ok(IntegratedG { value, windows_used: windows.len(), delta_n: panel.delta_n })
}
