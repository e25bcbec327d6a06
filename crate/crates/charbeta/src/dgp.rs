//! Synthetic panels from the continuous-time factor DGP with controllable
//! idiosyncratic-beta signal strength, plus the discrete-time one-factor toy
//! model used in coverage heuristics.
//!
//! Paths are Euler–Maruyama discretized on the observation grid (estimators
//! only consume grid increments; the O(Δ_n) discretization bias is accepted).
//! Per-component randomness comes from dedicated counter-based streams, so
//! changing `gamma_strength` or toggling `jump_spec` leaves all other
//! channels bitwise unchanged under the same seed.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::IncrementPanel;
use crate::rng::stream_rng;

/// RNG stream ids per simulation channel.
mod streams {
    pub const FACTORS: u64 = 0;
    pub const IDIO: u64 = 1;
    pub const CHARS: u64 = 2;
    pub const GAMMA: u64 = 3;
    pub const JUMPS: u64 = 4;
    pub const DRIFT: u64 = 5;
}

/// Characteristic-function family mapping `X_{lt}` to the characteristic
/// beta `g_t(X_{lt})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GSpec {
    /// `g_k(x) = Σ_j theta[j][k] x_j` — lies exactly in the span of a linear
    /// sieve on the same characteristics.
    Linear { theta: DMatrix<f64> },
    /// Smooth bounded nonlinearity `g_k(x) = Σ_j theta[j][k] tanh(x_j)`.
    Tanh { theta: DMatrix<f64> },
}

impl GSpec {
    pub fn theta(&self) -> &DMatrix<f64> {
        match self {
            GSpec::Linear { theta } | GSpec::Tanh { theta } => theta,
        }
    }

    /// Evaluate `g` for a `p × K_x` characteristic matrix, giving `p × K`.
    pub fn evaluate(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            GSpec::Linear { theta } => x * theta,
            GSpec::Tanh { theta } => {
                let xt = x.map(|v| v.tanh());
                xt * theta
            }
        }
    }
}

/// Compound-Poisson jump component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    /// Expected jumps per asset per unit of time.
    pub intensity: f64,
    /// Jump sizes are drawn `N(0, size_sd²)` (two-sided).
    pub size_sd: f64,
    /// Also add jumps to the factor paths.
    #[serde(default)]
    pub in_factors: bool,
}

/// Marginal distribution of the fixed component of the characteristics,
/// standardized to unit variance. Real firm characteristics are heavy
/// tailed; the Student-t option reproduces that feature, which drives the
/// basis-norm term of the covariance-thresholding rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
#[derive(Default)]
pub enum XTail {
    #[default]
    Normal,
    StudentT { df: f64 },
}


/// Cross-sectional block structure inducing within-block dependence.
///
/// Assets are partitioned into contiguous blocks of `block_size` (the last
/// block may be shorter). `rho_*` are within-block correlations of the
/// idiosyncratic betas, the idiosyncratic returns, and the fixed component
/// of the characteristics. Correlated characteristics make block membership
/// matter for the leverage weights, which is what block dependence has to
/// move for inference purposes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_size: usize,
    #[serde(default)]
    pub rho_gamma: f64,
    #[serde(default)]
    pub rho_u: f64,
    #[serde(default)]
    pub rho_x: f64,
}

impl BlockSpec {
    /// Contiguous partition of `0..p`.
    pub fn partition(&self, p: usize) -> Vec<Vec<usize>> {
        (0..p)
            .collect::<Vec<_>>()
            .chunks(self.block_size)
            .map(|c| c.to_vec())
            .collect()
    }

    fn block_of(&self, p: usize) -> Vec<usize> {
        (0..p).map(|l| l / self.block_size).collect()
    }

    fn n_blocks(&self, p: usize) -> usize {
        p.div_ceil(self.block_size)
    }
}

/// Full configuration of the continuous-time simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Asset count.
    pub p: usize,
    /// Interval count.
    pub n: usize,
    /// Interval length in time units.
    pub delta_n: f64,
    /// Factor count `K`.
    pub k: usize,
    /// Characteristic count `K_x`.
    pub k_x: usize,
    pub g_spec: GSpec,
    /// Nonnegative scalar multiplying a unit-variance idiosyncratic-beta field.
    pub gamma_strength: f64,
    /// Idiosyncratic diffusion scale (per asset, annualized-vol units).
    pub vol_u: f64,
    /// `K × K` factor diffusion matrix; the factor spot covariance is
    /// `vol_f vol_f'`.
    pub vol_f: DMatrix<f64>,
    /// Drift magnitude (asset drifts are `drift_scale` times a fixed
    /// per-asset standard normal; factors get a constant drift of
    /// `0.5 drift_scale`).
    pub drift_scale: f64,
    #[serde(default)]
    pub jump_spec: Option<JumpSpec>,
    /// Stationary standard deviation of the slow-moving component of the
    /// characteristics.
    pub x_dynamics: f64,
    /// Tail shape of the fixed characteristic component.
    #[serde(default)]
    pub x_tail: XTail,
    #[serde(default)]
    pub block_spec: Option<BlockSpec>,
    /// Correlation between the idiosyncratic-beta drivers and the factor
    /// Brownian motion (allowed by the model; defaults to independence).
    #[serde(default)]
    pub gamma_factor_corr: f64,
    /// Mean-reversion rate of the idiosyncratic-beta field per unit time.
    /// The default gives a half-life of one trading day.
    #[serde(default = "default_gamma_mean_reversion")]
    pub gamma_mean_reversion: f64,
    /// Mean-reversion rate of the characteristic paths per unit time.
    #[serde(default = "default_x_mean_reversion")]
    pub x_mean_reversion: f64,
    /// When set, the characteristic channel draws from this seed instead of
    /// `seed`, holding `X` fixed across trials for conditional-on-X Monte
    /// Carlo designs.
    #[serde(default)]
    pub x_stream_seed: Option<u64>,
    pub seed: u64,
}

fn default_gamma_mean_reversion() -> f64 {
    252.0 * std::f64::consts::LN_2
}

fn default_x_mean_reversion() -> f64 {
    1.0
}

/// Five-minute bars over a trading year.
pub const FIVE_MINUTE_DELTA: f64 = 1.0 / (252.0 * 78.0);

impl DgpConfig {
    /// A reasonable desk-scale configuration: linear `g` with per-factor
    /// loadings of distinct strength, diagonal factor diffusion with distinct
    /// vols, five-minute sampling.
    pub fn standard(p: usize, n: usize, k: usize, k_x: usize, gamma_strength: f64, seed: u64) -> Self {
        let mut theta = DMatrix::zeros(k_x, k);
        for kk in 0..k {
            let scale = 0.75f64.powi(kk as i32);
            let mut col: Vec<f64> = (0..k_x)
                .map(|j| (((j + 2 * kk + 1) as f64) * 0.73).sin() + 0.3)
                .collect();
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut col {
                *v *= scale / norm;
            }
            for (j, v) in col.iter().enumerate() {
                theta[(j, kk)] = *v;
            }
        }
        let vol_f = DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                0.2 * 0.85f64.powi(a as i32)
            } else {
                0.0
            }
        });
        DgpConfig {
            p,
            n,
            delta_n: FIVE_MINUTE_DELTA,
            k,
            k_x,
            g_spec: GSpec::Linear { theta },
            gamma_strength,
            vol_u: 0.4,
            vol_f,
            drift_scale: 0.1,
            jump_spec: None,
            x_dynamics: 0.1,
            x_tail: XTail::Normal,
            block_spec: None,
            gamma_factor_corr: 0.0,
            gamma_mean_reversion: default_gamma_mean_reversion(),
            x_mean_reversion: default_x_mean_reversion(),
            x_stream_seed: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < self.k + 1 {
            return Err(Error::config(format!("need p >= K + 1, got p = {}, K = {}", self.p, self.k)));
        }
        if self.n < 2 {
            return Err(Error::config(format!("need n >= 2, got n = {}", self.n)));
        }
        if !(self.delta_n > 0.0) {
            return Err(Error::config("delta_n must be positive"));
        }
        if self.gamma_strength < 0.0 {
            return Err(Error::config("gamma_strength must be nonnegative"));
        }
        if self.k == 0 || self.k_x == 0 {
            return Err(Error::config("K and K_x must be >= 1"));
        }
        if self.vol_f.shape() != (self.k, self.k) {
            return Err(Error::config(format!(
                "vol_f must be {k} x {k}, got {:?}",
                self.vol_f.shape(),
                k = self.k
            )));
        }
        let sym_gap = (&self.vol_f - self.vol_f.transpose()).abs().max();
        if sym_gap > 1e-12 {
            return Err(Error::config("vol_f must be symmetric"));
        }
        if Cholesky::new(self.vol_f.clone()).is_none() {
            return Err(Error::config("vol_f must be positive definite"));
        }
        if self.g_spec.theta().shape() != (self.k_x, self.k) {
            return Err(Error::config(format!(
                "g_spec theta must be K_x x K = {} x {}, got {:?}",
                self.k_x,
                self.k,
                self.g_spec.theta().shape()
            )));
        }
        if self.vol_u < 0.0 {
            return Err(Error::config("vol_u must be nonnegative"));
        }
        if self.gamma_factor_corr.abs() > 1.0 {
            return Err(Error::config("gamma_factor_corr must lie in [-1, 1]"));
        }
        if let Some(b) = &self.block_spec {
            if b.block_size == 0 {
                return Err(Error::config("block_size must be >= 1"));
            }
            for (name, rho) in [("rho_gamma", b.rho_gamma), ("rho_u", b.rho_u), ("rho_x", b.rho_x)] {
                if !(0.0..1.0).contains(&rho) {
                    return Err(Error::config(format!("{name} must lie in [0, 1), got {rho}")));
                }
            }
        }
        if let Some(j) = &self.jump_spec {
            if j.intensity < 0.0 || j.size_sd < 0.0 {
                return Err(Error::config("jump intensity and size_sd must be nonnegative"));
            }
        }
        if let XTail::StudentT { df } = self.x_tail {
            if df <= 2.0 {
                return Err(Error::config(format!(
                    "x_tail student-t needs df > 2 for a finite variance, got {df}"
                )));
            }
        }
        Ok(())
    }
}

/// Idiosyncratic spot covariance implied by the configuration. Constant over
/// the sample in this DGP.
#[derive(Debug, Clone, PartialEq)]
pub enum CovTruth {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl CovTruth {
    pub fn as_dense(&self, p: usize) -> DMatrix<f64> {
        match self {
            CovTruth::Diagonal(d) => DMatrix::from_diagonal(d),
            CovTruth::Dense(m) => {
                debug_assert_eq!(m.nrows(), p);
                m.clone()
            }
        }
    }
}

/// A simulated panel with full knowledge of the latent truth.
///
/// Per-interval arrays are indexed `0..n`; entry `i` holds the state at the
/// left endpoint of interval `i + 1`, which is also the anchor of any window
/// starting at that interval.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub increments_y: IncrementPanel,
    /// `K × n` factor increments.
    pub increments_f: DMatrix<f64>,
    /// Characteristics `X` at interval anchors; `n` matrices of `p × K_x`.
    pub characteristics: Vec<DMatrix<f64>>,
    /// Characteristic betas `g_t(X_t)` at interval anchors; `p × K` each.
    pub true_g: Vec<DMatrix<f64>>,
    /// Idiosyncratic betas at interval anchors; `p × K` each.
    pub true_gamma: Vec<DMatrix<f64>>,
    /// Idiosyncratic spot covariance (constant path).
    pub true_cuu: CovTruth,
    pub config: DgpConfig,
}

impl SimulatedPanel {
    /// `β = g + γ` at the anchor of interval `i` (0-based). Exact by
    /// construction.
    pub fn true_beta_at(&self, i: usize) -> DMatrix<f64> {
        &self.true_g[i] + &self.true_gamma[i]
    }

    pub fn p(&self) -> usize {
        self.increments_y.p()
    }

    pub fn n(&self) -> usize {
        self.increments_y.n()
    }
}

/// Draw a unit-variance vector with optional within-block correlation
/// `rho`: each entry is `√rho · common(block) + √(1-rho) · idio`, using the
/// given unit-variance sampler for every component.
fn draw_block_correlated_with(
    rng: &mut ChaCha12Rng,
    p: usize,
    blocks: Option<(&[usize], usize, f64)>,
    mut unit: impl FnMut(&mut ChaCha12Rng) -> f64,
) -> DVector<f64> {
    match blocks {
        Some((block_of, n_blocks, rho)) if rho > 0.0 => {
            let commons: Vec<f64> = (0..n_blocks).map(|_| unit(rng)).collect();
            let sr = rho.sqrt();
            let si = (1.0 - rho).sqrt();
            DVector::from_fn(p, |l, _| {
                let idio = unit(rng);
                sr * commons[block_of[l]] + si * idio
            })
        }
        _ => DVector::from_fn(p, |_, _| unit(rng)),
    }
}

fn draw_block_correlated(
    rng: &mut ChaCha12Rng,
    p: usize,
    blocks: Option<(&[usize], usize, f64)>,
) -> DVector<f64> {
    draw_block_correlated_with(rng, p, blocks, |r| r.sample(StandardNormal))
}

/// Simulate a panel from the continuous-time DGP.
///
/// Pure function of the configuration: identical `config` (including seed)
/// yields a bitwise-identical panel, and concurrent invocations share no
/// state.
pub fn simulate_factor_panel(config: &DgpConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let &DgpConfig { p, n, delta_n, k, k_x, .. } = config;
    let sqrt_dt = delta_n.sqrt();

    // Factor increments: ΔF_i = α_F Δ + vol_f z √Δ.
    let mut f_rng = stream_rng(config.seed, streams::FACTORS);
    let alpha_f = 0.5 * config.drift_scale;
    let mut increments_f = DMatrix::zeros(k, n);
    let mut factor_z = DMatrix::zeros(k, n);
    for i in 0..n {
        for kk in 0..k {
            factor_z[(kk, i)] = f_rng.sample(StandardNormal);
        }
        let diff = &config.vol_f * factor_z.column(i) * sqrt_dt;
        for kk in 0..k {
            increments_f[(kk, i)] = alpha_f * delta_n + diff[kk];
        }
    }

    let block_of = config.block_spec.as_ref().map(|b| b.block_of(p));
    let n_blocks = config.block_spec.as_ref().map(|b| b.n_blocks(p)).unwrap_or(0);
    let block_args = |rho: f64| -> Option<(&[usize], usize, f64)> {
        block_of.as_ref().map(|bo| (bo.as_slice(), n_blocks, rho))
    };

    // Characteristics: fixed component plus a slow OU perturbation with
    // stationary sd x_dynamics, using exact OU transitions.
    let x_seed = config.x_stream_seed.unwrap_or(config.seed);
    let mut x_rng = stream_rng(x_seed, streams::CHARS);
    let rho_x = config.block_spec.map(|b| b.rho_x).unwrap_or(0.0);
    let mut x_fixed = DMatrix::zeros(p, k_x);
    for j in 0..k_x {
        let col = match config.x_tail {
            XTail::Normal => draw_block_correlated(&mut x_rng, p, block_args(rho_x)),
            XTail::StudentT { df } => {
                let t = rand_distr::StudentT::new(df)
                    .map_err(|e| Error::config(format!("invalid student-t df: {e}")))?;
                let scale = ((df - 2.0) / df).sqrt(); // unit variance
                draw_block_correlated_with(&mut x_rng, p, block_args(rho_x), |r| {
                    scale * t.sample(r)
                })
            }
        };
        x_fixed.set_column(j, &col);
    }
    let ax = (-config.x_mean_reversion * delta_n).exp();
    let sx = config.x_dynamics * (1.0 - ax * ax).sqrt();
    let mut xi = DMatrix::from_fn(p, k_x, |_, _| {
        config.x_dynamics * x_rng.sample::<f64, _>(StandardNormal)
    });
    let mut characteristics = Vec::with_capacity(n);
    for _ in 0..n {
        characteristics.push(&x_fixed + &xi);
        for j in 0..k_x {
            for l in 0..p {
                xi[(l, j)] = ax * xi[(l, j)] + sx * x_rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    // Idiosyncratic-beta field: unit-variance OU per (l, k) scaled by
    // gamma_strength; drawn independently of the characteristics so
    // E(γ | X) = 0 by construction. Innovations may be correlated with the
    // factor Brownian motion and within blocks.
    let mut g_rng = stream_rng(config.seed, streams::GAMMA);
    let rho_g = config.block_spec.map(|b| b.rho_gamma).unwrap_or(0.0);
    let rho_wf = config.gamma_factor_corr;
    let ag = (-config.gamma_mean_reversion * delta_n).exp();
    let sg = (1.0 - ag * ag).sqrt();
    let mut gamma_bar = DMatrix::zeros(p, k);
    for kk in 0..k {
        let col = draw_block_correlated(&mut g_rng, p, block_args(rho_g));
        gamma_bar.set_column(kk, &col);
    }
    let b = config.gamma_strength;
    let mut true_gamma = Vec::with_capacity(n);
    for i in 0..n {
        true_gamma.push(&gamma_bar * b);
        for kk in 0..k {
            let base = draw_block_correlated(&mut g_rng, p, block_args(rho_g));
            let zf = factor_z[(kk, i)];
            for l in 0..p {
                let w = rho_wf * zf + (1.0 - rho_wf * rho_wf).sqrt() * base[l];
                gamma_bar[(l, kk)] = ag * gamma_bar[(l, kk)] + sg * w;
            }
        }
    }

    // Characteristic betas.
    let true_g: Vec<DMatrix<f64>> =
        characteristics.iter().map(|x| config.g_spec.evaluate(x)).collect();

    // Idiosyncratic increments.
    let mut u_rng = stream_rng(config.seed, streams::IDIO);
    let rho_u = config.block_spec.map(|b| b.rho_u).unwrap_or(0.0);
    let mut increments_u = DMatrix::zeros(p, n);
    for i in 0..n {
        let z = draw_block_correlated(&mut u_rng, p, block_args(rho_u));
        for l in 0..p {
            increments_u[(l, i)] = config.vol_u * sqrt_dt * z[l];
        }
    }

    // Per-asset drifts.
    let mut d_rng = stream_rng(config.seed, streams::DRIFT);
    let alpha: DVector<f64> =
        DVector::from_fn(p, |_, _| config.drift_scale * d_rng.sample::<f64, _>(StandardNormal));

    // Assemble ΔY_i = α Δ + β_{i-1} ΔF_i + ΔU_i (+ jumps).
    let mut data = DMatrix::zeros(p, n);
    for i in 0..n {
        let beta_i = &true_g[i] + &true_gamma[i];
        let bf = beta_i * increments_f.column(i);
        for l in 0..p {
            data[(l, i)] = alpha[l] * delta_n + bf[l] + increments_u[(l, i)];
        }
    }

    if let Some(jump) = &config.jump_spec {
        let mut j_rng = stream_rng(config.seed, streams::JUMPS);
        if jump.intensity > 0.0 && jump.size_sd > 0.0 {
            let pois = Poisson::new(jump.intensity * delta_n)
                .map_err(|e| Error::config(format!("invalid jump intensity: {e}")))?;
            for l in 0..p {
                for i in 0..n {
                    let count = pois.sample(&mut j_rng) as u64;
                    for _ in 0..count {
                        let size: f64 = j_rng.sample::<f64, _>(StandardNormal) * jump.size_sd;
                        data[(l, i)] += size;
                    }
                }
            }
            if jump.in_factors {
                for kk in 0..k {
                    for i in 0..n {
                        let count = pois.sample(&mut j_rng) as u64;
                        for _ in 0..count {
                            let size: f64 = j_rng.sample::<f64, _>(StandardNormal) * jump.size_sd;
                            increments_f[(kk, i)] += size;
                        }
                    }
                }
            }
        }
    }

    // Idiosyncratic spot covariance truth.
    let vu2 = config.vol_u * config.vol_u;
    let true_cuu = match (&config.block_spec, rho_u > 0.0) {
        (Some(bs), true) => {
            let bo = bs.block_of(p);
            let mut c = DMatrix::zeros(p, p);
            for a in 0..p {
                for bcol in 0..p {
                    if a == bcol {
                        c[(a, bcol)] = vu2;
                    } else if bo[a] == bo[bcol] {
                        c[(a, bcol)] = vu2 * bs.rho_u;
                    }
                }
            }
            CovTruth::Dense(c)
        }
        _ => CovTruth::Diagonal(DVector::from_element(p, vu2)),
    };

    let increments_y = IncrementPanel::from_data(data, delta_n)?;
    Ok(SimulatedPanel {
        increments_y,
        increments_f,
        characteristics,
        true_g,
        true_gamma,
        true_cuu,
        config: config.clone(),
    })
}

/// The discrete-time one-factor toy panel
/// `y_mt = (x_m'θ + γ_m) f_t + u_mt` with `γ_m = b γ̄_m`.
#[derive(Debug, Clone)]
pub struct DiscreteToyPanel {
    /// `p × T` outcomes.
    pub y: DMatrix<f64>,
    /// Factor series, length `T`.
    pub f: DVector<f64>,
    /// `p × d` characteristics.
    pub x: DMatrix<f64>,
    /// Idiosyncratic loadings `γ_m`, length `p`.
    pub gamma: DVector<f64>,
    /// `p × T` noise.
    pub u: DMatrix<f64>,
    pub theta: DVector<f64>,
}

/// Simulate the discrete toy model. `sigma_u` scales the regression noise
/// (zero gives the exact-recovery regime).
pub fn simulate_discrete_toy(
    p: usize,
    t_len: usize,
    theta: &DVector<f64>,
    gamma_strength: f64,
    sigma_u: f64,
    seed: u64,
) -> Result<DiscreteToyPanel> {
    if p < 2 || t_len < 2 {
        return Err(Error::config(format!(
            "toy model needs p >= 2 and T >= 2, got p = {p}, T = {t_len}"
        )));
    }
    if gamma_strength < 0.0 || sigma_u < 0.0 {
        return Err(Error::config("gamma_strength and sigma_u must be nonnegative"));
    }
    let d = theta.len();
    let mut x_rng = stream_rng(seed, streams::CHARS);
    let x = DMatrix::from_fn(p, d, |_, _| x_rng.sample::<f64, _>(StandardNormal));
    let mut f_rng = stream_rng(seed, streams::FACTORS);
    let f = DVector::from_fn(t_len, |_, _| f_rng.sample::<f64, _>(StandardNormal));
    let mut g_rng = stream_rng(seed, streams::GAMMA);
    let gamma =
        DVector::from_fn(p, |_, _| gamma_strength * g_rng.sample::<f64, _>(StandardNormal));
    let mut u_rng = stream_rng(seed, streams::IDIO);
    let u = DMatrix::from_fn(p, t_len, |_, _| sigma_u * u_rng.sample::<f64, _>(StandardNormal));

    let mut y = DMatrix::zeros(p, t_len);
    for m in 0..p {
        let load = (x.row(m) * theta)[(0, 0)] + gamma[m];
        for t in 0..t_len {
            y[(m, t)] = load * f[t] + u[(m, t)];
        }
    }
    Ok(DiscreteToyPanel { y, f, x, gamma, u, theta: theta.clone() })
}

/// The toy estimator `θ̂ = s_f^{-1} s_x^{-1} (1/(pT)) Σ_t Σ_m x_m f_t y_mt`.
pub fn toy_theta_hat(panel: &DiscreteToyPanel) -> Result<DVector<f64>> {
    let (p, t_len) = panel.y.shape();
    let d = panel.x.ncols();
    let s_f = panel.f.iter().map(|v| v * v).sum::<f64>() / t_len as f64;
    let s_x = panel.x.transpose() * &panel.x / p as f64;
    let mut cross = DVector::zeros(d);
    for m in 0..p {
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += panel.f[t] * panel.y[(m, t)];
        }
        cross += panel.x.row(m).transpose() * acc;
    }
    cross /= (p * t_len) as f64;
    let chol =
        Cholesky::new(s_x).ok_or_else(|| Error::numerical("singular s_x in toy estimator"))?;
    Ok(chol.solve(&cross) / s_f)
}

/// The two leading terms of the toy estimator's expansion:
/// `θ̂ - θ = (b) + (a)` with
/// `(b) = s_x^{-1} (1/p) Σ_m x_m γ_m` (cross-sectional term) and
/// `(a) = s_f^{-1} s_x^{-1} (1/(pT)) Σ_t Σ_m x_m f_t u_mt` (time-series term).
/// The identity is exact in this model.
pub fn toy_expansion_terms(panel: &DiscreteToyPanel) -> Result<(DVector<f64>, DVector<f64>)> {
    let (p, t_len) = panel.y.shape();
    let d = panel.x.ncols();
    let s_f = panel.f.iter().map(|v| v * v).sum::<f64>() / t_len as f64;
    let s_x = panel.x.transpose() * &panel.x / p as f64;
    let chol =
        Cholesky::new(s_x).ok_or_else(|| Error::numerical("singular s_x in toy expansion"))?;

    let mut bx = DVector::zeros(d);
    for m in 0..p {
        bx += panel.x.row(m).transpose() * panel.gamma[m];
    }
    bx /= p as f64;
    let term_b = chol.solve(&bx);

    let mut ax = DVector::zeros(d);
    for m in 0..p {
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += panel.f[t] * panel.u[(m, t)];
        }
        ax += panel.x.row(m).transpose() * acc;
    }
    ax /= (p * t_len) as f64;
    let term_a = chol.solve(&ax) / s_f;

    Ok((term_a, term_b))
}
