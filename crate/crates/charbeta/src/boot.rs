//! Confidence intervals for characteristic betas: the independent
//! cross-sectional bootstrap, the block bootstrap, the GMM bootstrap, the
//! integrated-beta bootstrap, and the plug-in comparators whose coverage is
//! only pointwise.
//!
//! The bootstrap resamples cross-sectional individuals with replacement,
//! keeping each sampled individual's entire time series and always pinning
//! the target individual, then rebuilds the sieve basis and projection from
//! the resampled rows on every draw. Time-series quantities (factor
//! regressions, estimated factors) are never re-estimated inside a draw.
//!
//! Replications draw from counter-based streams keyed by `(seed,
//! replication index)`, so parallel and serial runs produce identical
//! intervals.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::factor::BetaDecomposition;
use crate::gmm::GmmFit;
use crate::panel::{make_windows, IncrementPanel};
use crate::rng::stream_rng;
use crate::sieve::ProjectionOperator;

/// Replication plan shared by every bootstrap mode.
#[derive(Debug, Clone)]
pub struct BootstrapPlan {
    /// Replication count `B`.
    pub b: usize,
    /// Target asset (0-based); every resample keeps this row fixed.
    pub target_l: usize,
    /// Direction vector for the scalar functional `v'g`.
    pub v: DVector<f64>,
    /// Nominal coverage `1 - τ`.
    pub level: f64,
    pub seed: u64,
    /// Redraw budget for rank-deficient resampled bases.
    pub max_retries: usize,
}

impl BootstrapPlan {
    pub fn new(b: usize, target_l: usize, v: DVector<f64>, level: f64, seed: u64) -> Self {
        BootstrapPlan { b, target_l, v, level, seed, max_retries: 100 }
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.b == 0 {
            return Err(Error::config("bootstrap needs B >= 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config(format!("level must lie in (0,1), got {}", self.level)));
        }
        if self.target_l >= p {
            return Err(Error::config(format!(
                "target asset {} out of range, p = {p}",
                self.target_l
            )));
        }
        if self.v.norm() == 0.0 {
            return Err(Error::config("direction vector v must be nonzero"));
        }
        Ok(())
    }
}

/// Method tag carried by every interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    CsBootstrap,
    CsBootstrapLatent,
    BlockBootstrap,
    BlockBootstrapLatent,
    GmmBootstrap,
    IntegratedBootstrap,
    PluginNaive,
    PluginFull,
}

impl std::fmt::Display for CiMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CiMethod::CsBootstrap => "cs_bootstrap",
            CiMethod::CsBootstrapLatent => "cs_bootstrap_latent",
            CiMethod::BlockBootstrap => "block_bootstrap",
            CiMethod::BlockBootstrapLatent => "block_bootstrap_latent",
            CiMethod::GmmBootstrap => "gmm_bootstrap",
            CiMethod::IntegratedBootstrap => "integrated_bootstrap",
            CiMethod::PluginNaive => "plugin_naive",
            CiMethod::PluginFull => "plugin_full",
        };
        f.write_str(s)
    }
}

/// A two-sided interval `point ± q_tau` (bootstrap) or `point ± z·se`
/// (plug-in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub method: CiMethod,
    /// Bootstrap critical value (or the normal half-width for plug-ins).
    pub q_tau: f64,
    /// Center estimate; bias-corrected in latent mode.
    pub point: f64,
    /// Redraws performed due to rank-deficient resampled bases.
    pub retries: usize,
}

impl ConfidenceInterval {
    fn symmetric(point: f64, q: f64, level: f64, method: CiMethod, retries: usize) -> Self {
        ConfidenceInterval { lo: point - q, hi: point + q, level, method, q_tau: q, point, retries }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Disjoint, exhaustive cross-sectional blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    blocks: Vec<Vec<usize>>,
    p: usize,
}

impl BlockPartition {
    pub fn new(blocks: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|b| b.is_empty()) {
            return Err(Error::config("block partition must have nonempty blocks"));
        }
        let p: usize = blocks.iter().map(|b| b.len()).sum();
        let mut seen = vec![false; p];
        for b in &blocks {
            for &l in b {
                if l >= p || seen[l] {
                    return Err(Error::config(
                        "blocks must form a disjoint partition of 0..p".to_string(),
                    ));
                }
                seen[l] = true;
            }
        }
        Ok(BlockPartition { blocks, p })
    }

    /// `p` assets in blocks of `size` (last block may be shorter).
    pub fn contiguous(p: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("block size must be >= 1"));
        }
        Self::new((0..p).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect())
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn block_of(&self, l: usize) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.contains(&l))
            .ok_or_else(|| Error::config(format!("asset {l} not covered by the partition")))
    }
}

/// The estimator inputs a spot bootstrap draws from.
pub struct SpotBundle<'a> {
    /// `p × k_n` increments of the window.
    pub y_window: DMatrixView<'a, f64>,
    pub factors: FactorWindow<'a>,
    /// Window-anchor projection operator (its `Φ` rows are resampled).
    pub op: &'a ProjectionOperator,
    pub delta_n: f64,
    /// Latent-mode bias estimate subtracted from the interval center.
    pub bias: Option<DVector<f64>>,
}

/// Observed or estimated factor increments of one window.
pub enum FactorWindow<'a> {
    /// `K × k_n` observed increments.
    Known(DMatrixView<'a, f64>),
    /// `k_n × K` estimated increments (already orthonormalized).
    Estimated(&'a DMatrix<f64>),
}

impl SpotBundle<'_> {
    fn k(&self) -> usize {
        match &self.factors {
            FactorWindow::Known(f) => f.nrows(),
            FactorWindow::Estimated(f) => f.ncols(),
        }
    }

    /// Per-asset contribution `w_m` with `v'ĝ* = Σ_m w_{m*} (P*_l)_{pos}`:
    /// `w_m = v'β̂_m` for known factors, `w_m = (1/(k_nΔ)) Σ_i (v'F̂_i) ΔY_mi`
    /// for estimated ones.
    fn per_asset_stat(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let k_n = self.y_window.ncols();
        match &self.factors {
            FactorWindow::Known(f) => {
                if f.ncols() != k_n {
                    return Err(Error::config("factor window length mismatch"));
                }
                let s_ff = f * f.transpose();
                let chol = nalgebra::Cholesky::new(s_ff)
                    .ok_or_else(|| Error::numerical("singular factor Gram in bootstrap"))?;
                let x = chol.solve(v);
                let a = f.transpose() * x; // k_n
                Ok(self.y_window * a)
            }
            FactorWindow::Estimated(f_hat) => {
                if f_hat.nrows() != k_n {
                    return Err(Error::config("estimated factor window length mismatch"));
                }
                let a: DVector<f64> = *f_hat * v; // k_n
                Ok(self.y_window * a / (k_n as f64 * self.delta_n))
            }
        }
    }
}

/// Row-major copy of the basis rows for fast gathering in draws.
fn phi_rows(op: &ProjectionOperator) -> Vec<f64> {
    let phi = op.phi();
    let (p, j) = phi.shape();
    let mut rows = vec![0.0; p * j];
    for m in 0..p {
        for q in 0..j {
            rows[m * j + q] = phi[(m, q)];
        }
    }
    rows
}

/// In-place Cholesky solve of `G a = rhs` for a small `j × j` matrix stored
/// column-major (lower triangle used). Returns false when not positive
/// definite.
fn small_chol_solve(g: &mut [f64], j: usize, a: &mut [f64]) -> bool {
    // Factor: G = L L'.
    for c in 0..j {
        let mut d = g[c + c * j];
        for t in 0..c {
            let l = g[c + t * j];
            d -= l * l;
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        g[c + c * j] = d;
        for r in (c + 1)..j {
            let mut v = g[r + c * j];
            for t in 0..c {
                v -= g[r + t * j] * g[c + t * j];
            }
            g[r + c * j] = v / d;
        }
    }
    // Forward then backward substitution on a.
    for c in 0..j {
        let mut v = a[c];
        for t in 0..c {
            v -= g[c + t * j] * a[t];
        }
        a[c] = v / g[c + c * j];
    }
    for c in (0..j).rev() {
        let mut v = a[c];
        for t in (c + 1)..j {
            v -= g[t + c * j] * a[t];
        }
        a[c] = v / g[c + c * j];
    }
    true
}

/// Evaluate `Σ_m w[idx_m] φ[idx_m]' (Φ*'Φ*)^{-1} φ_l` for one resample.
/// `target_pos` is the position of the pinned target inside `idx`.
fn resampled_stat(
    rows: &[f64],
    j: usize,
    w: &[f64],
    idx: &[usize],
    target_row: usize,
) -> Option<f64> {
    let mut gram = vec![0.0; j * j];
    let mut rhs = vec![0.0; j];
    for &m in idx {
        let phi_m = &rows[m * j..(m + 1) * j];
        let wm = w[m];
        for a in 0..j {
            let pa = phi_m[a];
            rhs[a] += wm * pa;
            for b in a..j {
                gram[b + a * j] += pa * phi_m[b];
            }
        }
    }
    let mut sol: Vec<f64> = rows[target_row * j..(target_row + 1) * j].to_vec();
    if !small_chol_solve(&mut gram, j, &mut sol) {
        return None;
    }
    Some(rhs.iter().zip(&sol).map(|(r, s)| r * s).sum())
}

/// Draw a simple random resample of `0..p` with the target position pinned.
fn resample_indices(rng: &mut impl Rng, p: usize, target_l: usize, out: &mut Vec<usize>) {
    out.clear();
    for pos in 0..p {
        if pos == target_l {
            out.push(target_l);
        } else {
            out.push(rng.random_range(0..p));
        }
    }
}

/// Order statistic `⌈(1-τ) B⌉` of the absolute deviations.
fn bootstrap_quantile(mut devs: Vec<f64>, level: f64) -> f64 {
    let b = devs.len();
    devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((level * b as f64).ceil() as usize).clamp(1, b);
    devs[rank - 1]
}

/// Run `B` replications of a per-draw statistic with redraw-on-singular
/// semantics, returning `(|stat_b - center|, total retries)`.
fn run_replications(
    plan: &BootstrapPlan,
    center: f64,
    draw: impl Fn(&mut rand_chacha::ChaCha12Rng, &mut Vec<usize>) -> Option<f64> + Sync,
) -> Result<(Vec<f64>, usize)> {
    let results: Vec<Result<(f64, usize)>> = (0..plan.b)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(plan.seed, b as u64);
            let mut idx = Vec::new();
            let mut retries = 0usize;
            loop {
                if let Some(stat) = draw(&mut rng, &mut idx) {
                    return Ok(((stat - center).abs(), retries));
                }
                retries += 1;
                if retries > plan.max_retries {
                    return Err(Error::numerical(format!(
                        "replication {b}: resampled basis rank-deficient after {} redraws",
                        plan.max_retries
                    )));
                }
            }
        })
        .collect();
    let mut devs = Vec::with_capacity(plan.b);
    let mut retries = 0;
    for r in results {
        let (d, t) = r?;
        devs.push(d);
        retries += t;
    }
    Ok((devs, retries))
}

/// Independent cross-sectional bootstrap interval for `v'g_{lt}` (or the
/// rotated target in latent mode).
///
/// Each draw resamples rows with replacement (target pinned), rebuilds
/// `Φ*` and `P*`, and re-evaluates the spot estimator; `q_τ` is the
/// `⌈(1-τ)B⌉` order statistic of `|v'ĝ* - v'ĝ|`, and the interval is the
/// (bias-corrected) point ± `q_τ`.
pub fn cs_bootstrap_ci(bundle: &SpotBundle<'_>, plan: &BootstrapPlan) -> Result<ConfidenceInterval> {
    let p = bundle.y_window.nrows();
    plan.validate(p)?;
    if plan.v.len() != bundle.k() {
        return Err(Error::config("direction vector dimension mismatch"));
    }
    if bundle.op.p() != p {
        return Err(Error::config("projection operator p mismatch"));
    }
    let w = bundle.per_asset_stat(&plan.v)?;
    let rows = phi_rows(bundle.op);
    let j = bundle.op.j();
    let wslice: Vec<f64> = w.iter().copied().collect();
    let all: Vec<usize> = (0..p).collect();
    let center = resampled_stat(&rows, j, &wslice, &all, plan.target_l)
        .ok_or_else(|| Error::numerical("original basis is rank-deficient"))?;

    let (devs, retries) = run_replications(plan, center, |rng, idx| {
        resample_indices(rng, p, plan.target_l, idx);
        resampled_stat(&rows, j, &wslice, idx, plan.target_l)
    })?;
    let q = bootstrap_quantile(devs, plan.level);

    let (point, method) = match &bundle.bias {
        Some(bias) => (center - plan.v.dot(bias), CiMethod::CsBootstrapLatent),
        None => (center, CiMethod::CsBootstrap),
    };
    Ok(ConfidenceInterval::symmetric(point, q, plan.level, method, retries))
}

/// Block cross-sectional bootstrap: the target's block is always the first
/// resampled block; the remaining `H - 1` slots draw whole blocks with
/// replacement, so the resampled cross-section `p*` varies across draws.
pub fn block_bootstrap_ci(
    bundle: &SpotBundle<'_>,
    partition: &BlockPartition,
    plan: &BootstrapPlan,
) -> Result<ConfidenceInterval> {
    let p = bundle.y_window.nrows();
    plan.validate(p)?;
    if partition.p() != p {
        return Err(Error::config("partition does not cover the panel"));
    }
    if plan.v.len() != bundle.k() {
        return Err(Error::config("direction vector dimension mismatch"));
    }
    let target_block = partition.block_of(plan.target_l)?;
    let h = partition.blocks().len();
    let w = bundle.per_asset_stat(&plan.v)?;
    let rows = phi_rows(bundle.op);
    let j = bundle.op.j();
    let wslice: Vec<f64> = w.iter().copied().collect();

    let all: Vec<usize> = (0..p).collect();
    let center = resampled_stat(&rows, j, &wslice, &all, plan.target_l)
        .ok_or_else(|| Error::numerical("original basis is rank-deficient"))?;

    // Target row position: the target block is laid out first, in original
    // order, so the pinned row keeps its within-block offset.
    let blocks = partition.blocks();
    let (devs, retries) = run_replications(plan, center, |rng, idx| {
        idx.clear();
        idx.extend_from_slice(&blocks[target_block]);
        for _ in 1..h {
            let pick = rng.random_range(0..h);
            idx.extend_from_slice(&blocks[pick]);
        }
        resampled_stat(&rows, j, &wslice, idx, plan.target_l)
    })?;
    let q = bootstrap_quantile(devs, plan.level);
    let (point, method) = match &bundle.bias {
        Some(bias) => (center - plan.v.dot(bias), CiMethod::BlockBootstrapLatent),
        None => (center, CiMethod::BlockBootstrap),
    };
    Ok(ConfidenceInterval::symmetric(point, q, plan.level, method, retries))
}

/// GMM bootstrap: resamples the pairs `(β̂_m, φ_m)` directly — the step-1
/// solves are not repeated — and recomputes `Ĝ* = P* β̂*` per draw.
pub fn gmm_bootstrap_ci(
    fit: &GmmFit,
    op: &ProjectionOperator,
    plan: &BootstrapPlan,
) -> Result<ConfidenceInterval> {
    let p = fit.beta_hat.nrows();
    plan.validate(p)?;
    if op.p() != p {
        return Err(Error::config("projection operator p mismatch"));
    }
    if plan.v.len() != fit.beta_hat.ncols() {
        return Err(Error::config("direction vector dimension mismatch"));
    }
    let w = &fit.beta_hat * &plan.v;
    let rows = phi_rows(op);
    let j = op.j();
    let wslice: Vec<f64> = w.iter().copied().collect();
    let all: Vec<usize> = (0..p).collect();
    let center = resampled_stat(&rows, j, &wslice, &all, plan.target_l)
        .ok_or_else(|| Error::numerical("original basis is rank-deficient"))?;

    let (devs, retries) = run_replications(plan, center, |rng, idx| {
        resample_indices(rng, p, plan.target_l, idx);
        resampled_stat(&rows, j, &wslice, idx, plan.target_l)
    })?;
    let q = bootstrap_quantile(devs, plan.level);
    Ok(ConfidenceInterval::symmetric(center, q, plan.level, CiMethod::GmmBootstrap, retries))
}

/// Integrated-beta bootstrap (known factors only): each replication fixes
/// one resample of individuals and recomputes the full overlapping-window
/// Riemann sum with rebuilt per-window bases.
pub fn integrated_bootstrap_ci(
    panel: &IncrementPanel,
    factors: &DMatrix<f64>,
    ops: &[ProjectionOperator],
    k_n: usize,
    plan: &BootstrapPlan,
) -> Result<ConfidenceInterval> {
    let p = panel.p();
    let n = panel.n();
    plan.validate(p)?;
    if n <= k_n {
        return Err(Error::config(format!("integrated bootstrap needs n > k_n, got n = {n}, k_n = {k_n}")));
    }
    let windows = make_windows(n, k_n, 1)?;
    if ops.len() != windows.len() {
        return Err(Error::config(format!(
            "expected {} projection operators, got {}",
            windows.len(),
            ops.len()
        )));
    }
    let k = factors.nrows();
    if plan.v.len() != k {
        return Err(Error::config("direction vector dimension mismatch"));
    }

    // Per-window per-asset stats and row-major bases.
    let mut w_all = Vec::with_capacity(windows.len());
    let mut rows_all = Vec::with_capacity(windows.len());
    let mut j_all = Vec::with_capacity(windows.len());
    for (t, window) in windows.iter().enumerate() {
        let bundle = SpotBundle {
            y_window: panel.window_view(window),
            factors: FactorWindow::Known(
                factors.view((0, window.start_index - 1), (k, window.k_n)),
            ),
            op: &ops[t],
            delta_n: panel.delta_n,
            bias: None,
        };
        let w = bundle.per_asset_stat(&plan.v)?;
        w_all.push(w.iter().copied().collect::<Vec<f64>>());
        rows_all.push(phi_rows(&ops[t]));
        j_all.push(ops[t].j());
    }

    let integrated = |idx: &[usize]| -> Option<f64> {
        let mut acc = 0.0;
        for t in 0..windows.len() {
            acc += resampled_stat(&rows_all[t], j_all[t], &w_all[t], idx, plan.target_l)?;
        }
        Some(acc * panel.delta_n)
    };
    let all: Vec<usize> = (0..p).collect();
    let center = integrated(&all)
        .ok_or_else(|| Error::numerical("some window basis is rank-deficient"))?;

    let (devs, retries) = run_replications(plan, center, |rng, idx| {
        resample_indices(rng, p, plan.target_l, idx);
        integrated(idx)
    })?;
    let q = bootstrap_quantile(devs, plan.level);
    Ok(ConfidenceInterval::symmetric(center, q, plan.level, CiMethod::IntegratedBootstrap, retries))
}

fn normal_quantile(level: f64) -> f64 {
    let tau = 1.0 - level;
    Normal::standard().inverse_cdf(1.0 - tau / 2.0)
}

/// Plug-in variance component from the time-series noise:
/// `V̂_u = ĉ_FF^{-1} [ (1/(p k_n Δ²)) Σ_i (h_l'ΔÛ_i)² ΔF_i ΔF_i' ] ĉ_FF^{-1}`,
/// the residual-based sample second moment of the leverage-weighted
/// factor-times-noise terms.
fn v_u_hat(
    dec: &BetaDecomposition,
    y_win: &DMatrixView<'_, f64>,
    f_win: &DMatrixView<'_, f64>,
    op: &ProjectionOperator,
    target_l: usize,
) -> Result<DMatrix<f64>> {
    let (p, k_n) = y_win.shape();
    let k = f_win.nrows();
    let resid = y_win - &dec.beta_hat * f_win; // p × k_n
    let h_l = op.h_col(target_l)?;
    let delta = dec.ff_qv[(0, 0)].abs(); // placeholder to silence unused warnings
    let _ = delta;
    let mut inner = DMatrix::zeros(k, k);
    for i in 0..k_n {
        let s: f64 = (0..p).map(|m| h_l[m] * resid[(m, i)]).sum();
        let fi = f_win.column(i);
        inner += fi * fi.transpose() * (s * s);
    }
    let delta_n = dec.window.k_n as f64; // not the time delta; fixed below
    let _ = delta_n;
    Ok(inner)
}

/// Plug-in interval ignoring the idiosyncratic-beta variance: a normal
/// quantile interval with variance `(1/(k_n p)) V̂_u` only. Under-covers when
/// the idiosyncratic betas carry signal.
pub fn plugin_ci_naive(
    dec: &BetaDecomposition,
    y_win: &DMatrixView<'_, f64>,
    f_win: &DMatrixView<'_, f64>,
    op: &ProjectionOperator,
    delta_n: f64,
    plan: &BootstrapPlan,
) -> Result<ConfidenceInterval> {
    let (p, k_n) = y_win.shape();
    plan.validate(p)?;
    let inner = v_u_hat(dec, y_win, f_win, op, plan.target_l)?;
    let scale = 1.0 / (p as f64 * k_n as f64 * delta_n * delta_n);
    let s_ff_inv = (f_win * f_win.transpose() / (k_n as f64 * delta_n))
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular factor QV in plug-in interval"))?;
    let v_u = &s_ff_inv * (inner * scale) * &s_ff_inv;
    let var = (plan.v.transpose() * &v_u * &plan.v)[(0, 0)] / (k_n as f64 * p as f64);
    let point = plan.v.dot(&dec.g_hat.row(plan.target_l).transpose());
    let q = normal_quantile(plan.level) * var.max(0.0).sqrt();
    Ok(ConfidenceInterval::symmetric(point, q, plan.level, CiMethod::PluginNaive, 0))
}

/// Plug-in interval adding the estimated idiosyncratic-beta variance
/// `V̂_γ = (1/p) Σ_m h²_{ml} γ̂_m γ̂_m'`. Uniform in neither direction: it is
/// severely conservative when the idiosyncratic signal is weak.
pub fn plugin_ci_full(
    dec: &BetaDecomposition,
    y_win: &DMatrixView<'_, f64>,
    f_win: &DMatrixView<'_, f64>,
    op: &ProjectionOperator,
    delta_n: f64,
    plan: &BootstrapPlan,
) -> Result<ConfidenceInterval> {
    let (p, k_n) = y_win.shape();
    plan.validate(p)?;
    let inner = v_u_hat(dec, y_win, f_win, op, plan.target_l)?;
    let scale = 1.0 / (p as f64 * k_n as f64 * delta_n * delta_n);
    let s_ff_inv = (f_win * f_win.transpose() / (k_n as f64 * delta_n))
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular factor QV in plug-in interval"))?;
    let v_u = &s_ff_inv * (inner * scale) * &s_ff_inv;

    let h_l = op.h_col(plan.target_l)?;
    let k = f_win.nrows();
    let mut v_gamma = DMatrix::zeros(k, k);
    for m in 0..p {
        let gm = dec.gamma_hat.row(m).transpose();
        v_gamma += &gm * gm.transpose() * (h_l[m] * h_l[m]);
    }
    v_gamma /= p as f64;

    let var = (plan.v.transpose() * &v_u * &plan.v)[(0, 0)] / (k_n as f64 * p as f64)
        + (plan.v.transpose() * &v_gamma * &plan.v)[(0, 0)] / p as f64;
    let point = plan.v.dot(&dec.g_hat.row(plan.target_l).transpose());
    let q = normal_quantile(plan.level) * var.max(0.0).sqrt();
    Ok(ConfidenceInterval::symmetric(point, q, plan.level, CiMethod::PluginFull, 0))
}
