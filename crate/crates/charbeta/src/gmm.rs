//! General two-step continuous-time GMM for many linear moment conditions:
//! per-asset closed-form solves from realized quadratic variations, the
//! cross-sectional sieve projection, built-in moment specifications, and
//! optimal weights.
//!
//! Moment functions are linear in the parameter, so step 1 never iterates:
//! `β̂ = -(D'ΩD)^{-1} D'Ω Ψ(0, ĉ)` with `D = ∇_β Ψ(ĉ)`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::panel::realized_qcov_mat;
use crate::sieve::ProjectionOperator;

type PsiFn = dyn Fn(&DVector<f64>, &DMatrix<f64>) -> DVector<f64> + Send + Sync;
type GradBetaFn = dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync;
type GradCFn = dyn Fn(&DVector<f64>, &DMatrix<f64>) -> DMatrix<f64> + Send + Sync;

/// A moment function `Ψ(β, c)`, linear in `β`, together with its gradients.
///
/// `c` is the `K_z × K_z` realized quadratic variation of the observed
/// process; `vec(c)` ordering is column-major. Functions must be pure: they
/// are called concurrently from per-asset solves.
#[derive(Clone)]
pub struct MomentSpec {
    /// Parameter dimension `K`.
    pub k: usize,
    /// Observed process dimension `K_z`.
    pub k_z: usize,
    /// Moment dimension `K_ψ >= K`.
    pub k_psi: usize,
    psi: Arc<PsiFn>,
    grad_beta: Arc<GradBetaFn>,
    grad_c: Arc<GradCFn>,
}

impl std::fmt::Debug for MomentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentSpec")
            .field("k", &self.k)
            .field("k_z", &self.k_z)
            .field("k_psi", &self.k_psi)
            .finish()
    }
}

impl MomentSpec {
    pub fn new(
        k: usize,
        k_z: usize,
        k_psi: usize,
        psi: Arc<PsiFn>,
        grad_beta: Arc<GradBetaFn>,
        grad_c: Arc<GradCFn>,
    ) -> Result<Self> {
        if k == 0 || k_z == 0 || k_psi < k {
            return Err(Error::config(format!(
                "moment dimensions must satisfy K >= 1, K_z >= 1, K_psi >= K; \
                 got K = {k}, K_z = {k_z}, K_psi = {k_psi}"
            )));
        }
        Ok(MomentSpec { k, k_z, k_psi, psi, grad_beta, grad_c })
    }

    pub fn psi(&self, beta: &DVector<f64>, c: &DMatrix<f64>) -> DVector<f64> {
        (self.psi)(beta, c)
    }

    /// `∇_β Ψ`, a `K_ψ × K` matrix independent of `β` by linearity.
    pub fn grad_beta(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        (self.grad_beta)(c)
    }

    /// `∇_c Ψ` with respect to `vec(c)` (column-major), `K_ψ × K_z²`.
    pub fn grad_c(&self, beta: &DVector<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
        (self.grad_c)(beta, c)
    }

    /// Verify linearity in `β` on the given draws:
    /// `Ψ(β₁+β₂) - Ψ(β₁) - Ψ(β₂) + Ψ(0) = 0`.
    pub fn check_linearity(&self, b1: &DVector<f64>, b2: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
        let zero = DVector::zeros(self.k);
        let lhs = self.psi(&(b1 + b2), c) - self.psi(b1, c) - self.psi(b2, c) + self.psi(&zero, c);
        lhs.abs().max()
    }
}

/// Weight matrix policy for the step-1 solves.
#[derive(Debug, Clone)]
pub enum WeightRule {
    Identity,
    /// Explicit per-asset weights (one entry reused for all assets, or `p`
    /// entries).
    User(Vec<DMatrix<f64>>),
    /// Two-pass optimal weighting: preliminary identity-weight solve, then
    /// `Ω = (∇_cΨ V̂ ∇_cΨ')^{-1}` with `V̂` the within-window sample variance
    /// of `vec(ΔZ ΔZ' / Δ_n)`.
    Optimal,
}

/// Result of a per-asset optimal-weight computation.
#[derive(Debug, Clone)]
pub struct OptimalWeight {
    pub omega: DMatrix<f64>,
    /// Set when the inner matrix was singular and the identity was used.
    pub fell_back_to_identity: bool,
}

/// Step-1 + step-2 output across a panel of assets.
#[derive(Debug, Clone)]
pub struct GmmFit {
    /// `p × K`.
    pub beta_hat: DMatrix<f64>,
    /// `p × K`, `Ĝ = P β̂`.
    pub g_hat: DMatrix<f64>,
    /// `p × K`, `Γ̂ = β̂ - Ĝ` (identity exact).
    pub gamma_hat: DMatrix<f64>,
    /// Per-asset realized quadratic variations.
    pub c_hat: Vec<DMatrix<f64>>,
    /// Per-asset GMM objective values at the solution.
    pub objective: Vec<f64>,
    /// Number of assets whose optimal weight fell back to the identity.
    pub weight_fallbacks: usize,
}

/// Closed-form linear GMM solve:
/// `β̂ = -(D'ΩD)^{-1} D'Ω Ψ(0, ĉ)` with `D = ∇_β Ψ(ĉ)`.
///
/// Returns the minimizer and the objective value at it.
pub fn gmm_solve_linear(
    spec: &MomentSpec,
    c_hat: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> Result<(DVector<f64>, f64)> {
    if c_hat.shape() != (spec.k_z, spec.k_z) {
        return Err(Error::config(format!(
            "c_hat must be {0} x {0}, got {1:?}",
            spec.k_z,
            c_hat.shape()
        )));
    }
    if omega.shape() != (spec.k_psi, spec.k_psi) {
        return Err(Error::config(format!(
            "weight matrix must be {0} x {0}, got {1:?}",
            spec.k_psi,
            omega.shape()
        )));
    }
    let d = spec.grad_beta(c_hat);
    if d.shape() != (spec.k_psi, spec.k) {
        return Err(Error::config(format!(
            "grad_beta returned {:?}, expected ({}, {})",
            d.shape(),
            spec.k_psi,
            spec.k
        )));
    }
    let dtw = d.transpose() * omega;
    let a = &dtw * &d;
    let chol = Cholesky::new(a.clone()).ok_or_else(|| {
        let eig = SymmetricEigen::new((&a + a.transpose()) * 0.5);
        Error::numerical(format!(
            "singular normal matrix ∇Ψ'Ω∇Ψ: eigenvalues in [{:.3e}, {:.3e}]",
            eig.eigenvalues.min(),
            eig.eigenvalues.max()
        ))
    })?;
    let psi0 = spec.psi(&DVector::zeros(spec.k), c_hat);
    let beta = -chol.solve(&(&dtw * &psi0));
    let resid = spec.psi(&beta, c_hat);
    let objective = (resid.transpose() * omega * &resid)[(0, 0)];
    Ok((beta, objective))
}

/// Moment specification of the multivariate continuous-time linear
/// regression `Ψ = c_FF β - c_YF` with `Z = (Y, F_1, …, F_K)`.
///
/// Layout: `c[(0,0)] = c_YY`, `c[(0, 1+r)] = c_YF[r]`,
/// `c[(1+r, 1+s)] = c_FF[r][s]`.
pub fn linear_regression_moment(k: usize) -> MomentSpec {
    let k_z = k + 1;
    let psi = Arc::new(move |beta: &DVector<f64>, c: &DMatrix<f64>| {
        let mut out = DVector::zeros(k);
        for r in 0..k {
            let mut acc = -c[(0, 1 + r)];
            for s in 0..k {
                acc += c[(1 + r, 1 + s)] * beta[s];
            }
            out[r] = acc;
        }
        out
    });
    let grad_beta = Arc::new(move |c: &DMatrix<f64>| {
        DMatrix::from_fn(k, k, |r, s| c[(1 + r, 1 + s)])
    });
    let grad_c = Arc::new(move |beta: &DVector<f64>, _c: &DMatrix<f64>| {
        let mut g = DMatrix::zeros(k, k_z * k_z);
        for r in 0..k {
            // ∂Ψ_r / ∂c[(1+r, 1+s)] = β_s
            for s in 0..k {
                g[(r, (1 + r) + (1 + s) * k_z)] = beta[s];
            }
            // ∂Ψ_r / ∂c[(0, 1+r)] = -1
            g[(r, (1 + r) * k_z)] = -1.0;
        }
        g
    });
    MomentSpec::new(k, k_z, k, psi, grad_beta, grad_c).expect("valid dimensions")
}

/// Moment specification of the idiosyncratic-variance beta:
/// `Ψ = β c_FF1 + c̄_l + c_YF' c_FF^{-1} c_YF - c_YY`, scalar `β`.
///
/// `Z = (Y, F_1, …, F_K)` with the market factor first; `c̄_l` is the known
/// per-asset intercept.
pub fn idio_variance_moment(k_factors: usize, c_bar_l: f64) -> MomentSpec {
    let k_z = k_factors + 1;
    let quad = move |c: &DMatrix<f64>| -> Result<(f64, DVector<f64>)> {
        // Returns (c_YF' c_FF^{-1} c_YF, c_FF^{-1} c_YF).
        let c_ff = DMatrix::from_fn(k_factors, k_factors, |a, b| c[(1 + a, 1 + b)]);
        let c_yf = DVector::from_fn(k_factors, |a, _| c[(0, 1 + a)]);
        let solved = c_ff
            .lu()
            .solve(&c_yf)
            .ok_or_else(|| Error::numerical("singular c_FF block in idio variance moment"))?;
        Ok(((c_yf.transpose() * &solved)[(0, 0)], solved))
    };
    let psi = Arc::new(move |beta: &DVector<f64>, c: &DMatrix<f64>| {
        let (q, _) = quad(c).expect("singular c_FF block");
        DVector::from_element(1, beta[0] * c[(1, 1)] + c_bar_l + q - c[(0, 0)])
    });
    let grad_beta =
        Arc::new(move |c: &DMatrix<f64>| DMatrix::from_element(1, 1, c[(1, 1)]));
    let grad_c = Arc::new(move |beta: &DVector<f64>, c: &DMatrix<f64>| {
        let (_, solved) = quad(c).expect("singular c_FF block");
        let mut g = DMatrix::zeros(1, k_z * k_z);
        // ∂/∂c_YY
        g[(0, 0)] = -1.0;
        // ∂/∂c[(0, 1+a)] = 2 (c_FF^{-1} c_YF)_a
        for a in 0..k_factors {
            g[(0, (1 + a) * k_z)] = 2.0 * solved[a];
        }
        // ∂/∂c[(1+a, 1+b)] = -(c_FF^{-1} c_YF)_a (c_FF^{-1} c_YF)_b
        for a in 0..k_factors {
            for b in 0..k_factors {
                g[(0, (1 + a) + (1 + b) * k_z)] = -solved[a] * solved[b];
            }
        }
        // The β c_FF1 term.
        g[(0, 1 + k_z)] += beta[0];
        g
    });
    MomentSpec::new(1, k_z, 1, psi, grad_beta, grad_c).expect("valid dimensions")
}

/// Optimal weight `Ω = (∇_cΨ V̂ ∇_cΨ')^{-1}` evaluated at a preliminary
/// `β`. Falls back to the identity with a flag when the inner matrix is
/// singular.
pub fn optimal_weight(
    spec: &MomentSpec,
    beta: &DVector<f64>,
    c_hat: &DMatrix<f64>,
    v_mt: &DMatrix<f64>,
) -> Result<OptimalWeight> {
    let k_z2 = spec.k_z * spec.k_z;
    if v_mt.shape() != (k_z2, k_z2) {
        return Err(Error::config(format!(
            "V_mt must be {k_z2} x {k_z2}, got {:?}",
            v_mt.shape()
        )));
    }
    let g = spec.grad_c(beta, c_hat);
    if g.shape() != (spec.k_psi, k_z2) {
        return Err(Error::config(format!(
            "grad_c returned {:?}, expected ({}, {k_z2})",
            g.shape(),
            spec.k_psi
        )));
    }
    let inner = &g * v_mt * g.transpose();
    match Cholesky::new(inner.clone()) {
        Some(chol) => Ok(OptimalWeight {
            omega: chol.inverse(),
            fell_back_to_identity: false,
        }),
        None => Ok(OptimalWeight {
            omega: DMatrix::identity(spec.k_psi, spec.k_psi),
            fell_back_to_identity: true,
        }),
    }
}

/// Within-window sample variance of `vec(ΔZ ΔZ' / Δ_n)`, the plug-in
/// estimate of `V_mt` for optimal weighting. `z_win` is `K_z × k_n`.
pub fn sample_qv_variance(z_win: &DMatrix<f64>, delta_n: f64) -> DMatrix<f64> {
    let (k_z, k_n) = z_win.shape();
    let dim = k_z * k_z;
    let mut ws = Vec::with_capacity(k_n);
    let mut mean = DVector::zeros(dim);
    for i in 0..k_n {
        let zi = z_win.column(i);
        let outer = zi * zi.transpose() / delta_n;
        let w = DVector::from_column_slice(outer.as_slice());
        mean += &w;
        ws.push(w);
    }
    mean /= k_n as f64;
    let mut v = DMatrix::zeros(dim, dim);
    for w in &ws {
        let d = w - &mean;
        v += &d * d.transpose();
    }
    v / k_n as f64
}

/// Step 2: the cross-sectional sieve split of stacked step-1 fits.
pub fn two_step_g(
    beta_hat: &DMatrix<f64>,
    op: &ProjectionOperator,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if beta_hat.nrows() != op.p() {
        return Err(Error::config(format!(
            "beta has {} rows, projection expects p = {}",
            beta_hat.nrows(),
            op.p()
        )));
    }
    let g = op.project(beta_hat)?;
    let gamma = beta_hat - &g;
    Ok((g, gamma))
}

/// Full window pipeline: per-asset realized QVs, step-1 solves under the
/// weight rule, step-2 projection.
///
/// `specs` has one entry reused for every asset or one entry per asset
/// (e.g. per-asset intercepts); `z_windows[m]` is the `K_z × k_n` increment
/// block of asset `m` (pass truncated increments for the jump-robust
/// variant).
pub fn gmm_fit_window(
    specs: &[MomentSpec],
    z_windows: &[DMatrix<f64>],
    delta_n: f64,
    weight: &WeightRule,
    op: &ProjectionOperator,
) -> Result<GmmFit> {
    let p = z_windows.len();
    if p == 0 {
        return Err(Error::config("empty panel"));
    }
    if specs.is_empty() || (specs.len() != 1 && specs.len() != p) {
        return Err(Error::config(format!(
            "specs must have length 1 or p = {p}, got {}",
            specs.len()
        )));
    }
    if op.p() != p {
        return Err(Error::config("projection operator p mismatch"));
    }
    let spec_for = |m: usize| if specs.len() == 1 { &specs[0] } else { &specs[m] };
    let k = spec_for(0).k;

    let mut beta_hat = DMatrix::zeros(p, k);
    let mut c_hats = Vec::with_capacity(p);
    let mut objective = Vec::with_capacity(p);
    let mut weight_fallbacks = 0usize;

    for m in 0..p {
        let spec = spec_for(m);
        let c_hat = realized_qcov_mat(&z_windows[m], &z_windows[m], delta_n)?;
        let identity = DMatrix::identity(spec.k_psi, spec.k_psi);
        let (beta, obj) = match weight {
            WeightRule::Identity => gmm_solve_linear(spec, &c_hat, &identity)?,
            WeightRule::User(ws) => {
                let w = if ws.len() == 1 { &ws[0] } else { ws.get(m).ok_or_else(|| Error::config("user weight list shorter than p"))? };
                gmm_solve_linear(spec, &c_hat, w)?
            }
            WeightRule::Optimal => {
                let (prelim, _) = gmm_solve_linear(spec, &c_hat, &identity)?;
                let v_mt = sample_qv_variance(&z_windows[m], delta_n);
                let ow = optimal_weight(spec, &prelim, &c_hat, &v_mt)?;
                if ow.fell_back_to_identity {
                    weight_fallbacks += 1;
                }
                let solved = gmm_solve_linear(spec, &c_hat, &ow.omega)?;
                if spec.k_psi == spec.k {
                    // Exactly identified: the weight cannot move the solution.
                    debug_assert!(
                        (&solved.0 - &prelim).abs().max()
                            <= 1e-8 * (1.0 + prelim.abs().max()),
                        "weight changed an exactly identified solve"
                    );
                }
                solved
            }
        };
        for kk in 0..k {
            beta_hat[(m, kk)] = beta[kk];
        }
        c_hats.push(c_hat);
        objective.push(obj);
    }

    let (g_hat, gamma_hat) = two_step_g(&beta_hat, op)?;
    Ok(GmmFit { beta_hat, g_hat, gamma_hat, c_hat: c_hats, objective, weight_fallbacks })
}
