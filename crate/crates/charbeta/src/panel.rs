//! Panel data model, local windows, jump truncation and realized quadratic
//! (co)variation.
//!
//! Increments are stored as a `p × n` matrix: one row per asset, one column
//! per sampling interval of length `delta_n`. Spot quantities are computed on
//! local windows of `k_n` consecutive intervals.

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A panel of per-interval increments `Δ_i Y` with its time grid metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementPanel {
    /// `p × n` matrix of increments (return units).
    pub data: DMatrix<f64>,
    /// Interval length in time units.
    pub delta_n: f64,
    /// Asset labels, length `p`.
    pub asset_ids: Vec<String>,
    /// Start time of the sample.
    pub t0: f64,
}

impl IncrementPanel {
    /// Validating constructor. Rejects empty panels, non-finite entries and
    /// non-positive interval lengths.
    pub fn new(data: DMatrix<f64>, delta_n: f64, asset_ids: Vec<String>, t0: f64) -> Result<Self> {
        let (p, n) = data.shape();
        if p == 0 || n == 0 {
            return Err(Error::config("increment panel must have p >= 1 and n >= 1"));
        }
        if !(delta_n > 0.0) || !delta_n.is_finite() {
            return Err(Error::config(format!("delta_n must be positive, got {delta_n}")));
        }
        if asset_ids.len() != p {
            return Err(Error::config(format!(
                "asset_ids length {} does not match p = {p}",
                asset_ids.len()
            )));
        }
        if let Some((l, i)) = first_nonfinite(&data) {
            return Err(Error::data(format!(
                "non-finite increment at asset row {l}, interval {}",
                i + 1
            )));
        }
        Ok(IncrementPanel { data, delta_n, asset_ids, t0 })
    }

    /// Constructor with generated asset labels `a0001, a0002, ...`.
    pub fn from_data(data: DMatrix<f64>, delta_n: f64) -> Result<Self> {
        let ids = (0..data.nrows()).map(|l| format!("a{:04}", l + 1)).collect();
        Self::new(data, delta_n, ids, 0.0)
    }

    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    /// View of the increments on a local window, shape `p × k_n`.
    pub fn window_view(&self, w: &LocalWindow) -> DMatrixView<'_, f64> {
        self.data.view((0, w.start_index - 1), (self.p(), w.k_n))
    }
}

fn first_nonfinite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for i in 0..m.ncols() {
        for l in 0..m.nrows() {
            if !m[(l, i)].is_finite() {
                return Some((l, i));
            }
        }
    }
    None
}

/// A block of `k_n` consecutive intervals starting at the 1-based interval
/// index `start_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalWindow {
    pub start_index: usize,
    pub k_n: usize,
}

impl LocalWindow {
    pub fn new(start_index: usize, k_n: usize, n: usize) -> Result<Self> {
        if start_index == 0 || k_n == 0 {
            return Err(Error::config("window start_index and k_n must be >= 1"));
        }
        if start_index + k_n - 1 > n {
            return Err(Error::config(format!(
                "window [{start_index}, {}] exceeds panel length n = {n}",
                start_index + k_n - 1
            )));
        }
        Ok(LocalWindow { start_index, k_n })
    }

    /// 0-based column range into the increment matrix.
    pub fn range0(&self) -> std::ops::Range<usize> {
        (self.start_index - 1)..(self.start_index - 1 + self.k_n)
    }

    /// 0-based index of the anchor interval (the first interval of the
    /// window); characteristics are frozen at its left endpoint.
    pub fn anchor0(&self) -> usize {
        self.start_index - 1
    }
}

/// Windows with start indices `1, 1+stride, ...` capped at `n - k_n + 1`.
///
/// `stride = 1` yields the overlapping family of `n - k_n + 1` windows used
/// by integrated-beta estimation (inclusive boundary convention: the window
/// anchored at the last feasible start is kept).
pub fn make_windows(n: usize, k_n: usize, stride: usize) -> Result<Vec<LocalWindow>> {
    if k_n == 0 || k_n > n {
        return Err(Error::config(format!("k_n must satisfy 1 <= k_n <= n, got k_n = {k_n}, n = {n}")));
    }
    if stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    let last_start = n - k_n + 1;
    Ok((1..=last_start).step_by(stride).map(|s| LocalWindow { start_index: s, k_n }).collect())
}

/// How the per-asset volatility scale is pre-estimated for truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IvEstimateMode {
    /// Realized variance after discarding the largest `trim_fraction` of
    /// absolute increments, rescaled by the kept count.
    TrimmedRv { trim_fraction: f64 },
    /// Bipower variation `(π/2) Σ |Δ_i| |Δ_{i-1}|`.
    Bipower,
}

/// Jump truncation rule: increments with `|Δ_i Z_l| > ψ_l` are zeroed, where
/// `ψ_l = c_mult · (IV_l / T)^{1/2} · Δ_n^ϖ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationRule {
    /// Exponent `ϖ ∈ (0, 1/2)`.
    pub varpi: f64,
    /// Multiplier on the volatility scale; typical values 3–5.
    pub c_mult: f64,
    pub iv_estimate_mode: IvEstimateMode,
}

impl Default for TruncationRule {
    fn default() -> Self {
        TruncationRule {
            varpi: 0.49,
            c_mult: 4.0,
            iv_estimate_mode: IvEstimateMode::TrimmedRv { trim_fraction: 0.05 },
        }
    }
}

impl TruncationRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.varpi > 0.0 && self.varpi < 0.5) {
            return Err(Error::config(format!("varpi must lie in (0, 1/2), got {}", self.varpi)));
        }
        if !(self.c_mult > 0.0) {
            return Err(Error::config(format!("c_mult must be positive, got {}", self.c_mult)));
        }
        if let IvEstimateMode::TrimmedRv { trim_fraction } = self.iv_estimate_mode {
            if !(0.0..1.0).contains(&trim_fraction) {
                return Err(Error::config(format!(
                    "trim_fraction must lie in [0, 1), got {trim_fraction}"
                )));
            }
        }
        Ok(())
    }
}

/// Pre-estimated integrated variance of one asset path per
/// [`IvEstimateMode`].
fn integrated_variance(row: &[f64], mode: IvEstimateMode) -> f64 {
    match mode {
        IvEstimateMode::TrimmedRv { trim_fraction } => {
            let n = row.len();
            let mut abs: Vec<f64> = row.iter().map(|x| x.abs()).collect();
            abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let kept = n - ((n as f64) * trim_fraction).floor() as usize;
            let kept = kept.max(1);
            let rv_kept: f64 = abs[..kept].iter().map(|x| x * x).sum();
            rv_kept * (n as f64) / (kept as f64)
        }
        IvEstimateMode::Bipower => {
            let s: f64 = row.windows(2).map(|w| w[0].abs() * w[1].abs()).sum();
            s * std::f64::consts::FRAC_PI_2
        }
    }
}

/// Per-asset truncation thresholds `ψ_l` for a panel under `rule`.
///
/// Exposed separately so a fixed scale can be re-applied (the convenience
/// wrapper [`truncate`] re-estimates the scale from its input, which is not
/// idempotent on already-truncated data).
pub fn truncation_thresholds(panel: &IncrementPanel, rule: &TruncationRule) -> Result<Vec<f64>> {
    rule.validate()?;
    let total_time = panel.n() as f64 * panel.delta_n;
    let mut psi = Vec::with_capacity(panel.p());
    for l in 0..panel.p() {
        let row: Vec<f64> = panel.data.row(l).iter().copied().collect();
        let iv = integrated_variance(&row, rule.iv_estimate_mode);
        psi.push(rule.c_mult * (iv / total_time).sqrt() * panel.delta_n.powf(rule.varpi));
    }
    Ok(psi)
}

/// Zero out increments exceeding the given per-asset thresholds.
///
/// A degenerate zero-variance asset gets `ψ = 0`; only its exactly-zero
/// increments survive, which leaves a constant path unchanged.
pub fn truncate_with_thresholds(panel: &IncrementPanel, psi: &[f64]) -> Result<IncrementPanel> {
    if psi.len() != panel.p() {
        return Err(Error::config(format!(
            "thresholds length {} does not match p = {}",
            psi.len(),
            panel.p()
        )));
    }
    let mut out = panel.clone();
    for l in 0..panel.p() {
        for i in 0..panel.n() {
            if out.data[(l, i)].abs() > psi[l] {
                out.data[(l, i)] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Estimate per-asset scales from `panel` and zero out flagged increments.
pub fn truncate(panel: &IncrementPanel, rule: &TruncationRule) -> Result<IncrementPanel> {
    let psi = truncation_thresholds(panel, rule)?;
    truncate_with_thresholds(panel, &psi)
}

/// Spot quadratic covariation of two increment blocks over one window:
/// `(1/(k_n Δ_n)) Σ_i Δ_i a · Δ_i b'`.
///
/// `a` is `K_a × k_n`, `b` is `K_b × k_n`; the result is `K_a × K_b`.
pub fn realized_qcov(
    a: &DMatrixView<'_, f64>,
    b: &DMatrixView<'_, f64>,
    delta_n: f64,
) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::config(format!(
            "window lengths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.ncols() == 0 {
        return Err(Error::config("realized_qcov requires k_n >= 1"));
    }
    let k_n = a.ncols() as f64;
    Ok((a * b.transpose()) / (k_n * delta_n))
}

/// Owned-matrix convenience wrapper over [`realized_qcov`].
pub fn realized_qcov_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, delta_n: f64) -> Result<DMatrix<f64>> {
    realized_qcov(&a.as_view(), &b.as_view(), delta_n)
}
