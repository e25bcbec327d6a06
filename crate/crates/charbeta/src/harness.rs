//! Config-driven experiment runner: Monte Carlo coverage studies over
//! idiosyncratic-beta strength grids, CSV panel ingestion for real data, and
//! machine-readable reports.
//!
//! Trial-level parallelism uses one derived RNG stream per trial, so
//! parallel and serial runs of the same configuration emit identical
//! reports.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boot::{
    block_bootstrap_ci, cs_bootstrap_ci, gmm_bootstrap_ci, integrated_bootstrap_ci,
    plugin_ci_full, plugin_ci_naive, BlockPartition, BootstrapPlan, ConfidenceInterval,
    FactorWindow, SpotBundle,
};
use crate::dgp::{simulate_factor_panel, DgpConfig, SimulatedPanel};
use crate::error::{Error, Result};
use crate::factor::{estimate_window, BetaDecomposition};
use crate::gmm::{gmm_fit_window, linear_regression_moment, WeightRule};
use crate::latent::{
    align_signs_to_truth, bias_case1, bias_case2, estimate_g_latent, g_space_rotation,
    latent_residuals, projected_pca, threshold_covariance, ThresholdKind, WindowProjection,
};
use crate::panel::{make_windows, IncrementPanel, LocalWindow};
use crate::rng::derive_seed;
use crate::sieve::{build_basis, CharacteristicPanel, ProjectionOperator, SieveBasisSpec};

/// One point of the idiosyncratic-beta strength grid. The rescaled entries
/// resolve against `k_n` so grids like `{0, k_n^{-1}, k_n^{-1/2}, 1}` can be
/// written symbolically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaStrength {
    Fixed(f64),
    InvKn,
    InvSqrtKn,
}

impl GammaStrength {
    pub fn resolve(&self, k_n: usize) -> f64 {
        match self {
            GammaStrength::Fixed(b) => *b,
            GammaStrength::InvKn => 1.0 / k_n as f64,
            GammaStrength::InvSqrtKn => 1.0 / (k_n as f64).sqrt(),
        }
    }

    pub fn label(&self, k_n: usize) -> String {
        match self {
            GammaStrength::Fixed(b) => format!("{b}"),
            GammaStrength::InvKn => format!("kn^-1({:.5})", self.resolve(k_n)),
            GammaStrength::InvSqrtKn => format!("kn^-1/2({:.5})", self.resolve(k_n)),
        }
    }
}

/// Inference methods the harness can run per trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CsBootstrap,
    BlockBootstrap,
    GmmBootstrap,
    Integrated,
    PluginNaive,
    PluginFull,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::CsBootstrap => "cs_bootstrap",
            Method::BlockBootstrap => "block_bootstrap",
            Method::GmmBootstrap => "gmm_bootstrap",
            Method::Integrated => "integrated",
            Method::PluginNaive => "plugin_naive",
            Method::PluginFull => "plugin_full",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    Known,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasCorrection {
    None,
    Case1,
    Case2,
}

/// Full experiment description; JSON-serializable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Simulator template; its `seed` and `gamma_strength` are overridden
    /// per cell and trial.
    pub dgp: DgpConfig,
    pub gamma_grid: Vec<GammaStrength>,
    pub methods: Vec<Method>,
    pub trials: usize,
    /// Bootstrap replications per interval.
    pub b: usize,
    /// Nominal coverage level.
    pub level: f64,
    pub factor_mode: FactorMode,
    pub bias_correction: BiasCorrection,
    /// Spot window length.
    pub k_n: usize,
    /// Target asset (0-based).
    pub target_l: usize,
    /// Direction vector, length `K`.
    pub v: Vec<f64>,
    #[serde(default = "default_sieve")]
    pub sieve: SieveBasisSpec,
    /// Thresholding constant for CASE II corrections.
    #[serde(default = "default_c_bar")]
    pub threshold_c_bar: f64,
    #[serde(default = "default_threshold_kind")]
    pub threshold_kind: ThresholdKind,
    /// Align estimated-factor signs to the simulated truth before scoring
    /// latent estimates (simulation-only orientation fix).
    #[serde(default = "default_true")]
    pub align_to_truth: bool,
    pub seed: u64,
    /// Worker threads; 0 uses the global default.
    #[serde(default)]
    pub parallelism: usize,
}

fn default_sieve() -> SieveBasisSpec {
    SieveBasisSpec { standardize: false, ..SieveBasisSpec::linear() }
}

fn default_c_bar() -> f64 {
    0.5
}

fn default_threshold_kind() -> ThresholdKind {
    ThresholdKind::Soft
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Up-front feasibility checks with a rate-condition report.
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must be non-empty"));
        }
        if self.gamma_grid.is_empty() {
            return Err(Error::config("gamma_grid must be non-empty"));
        }
        if self.b == 0 {
            return Err(Error::config("bootstrap replications b must be >= 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config("level must lie in (0,1)"));
        }
        if self.k_n > self.dgp.n {
            return Err(Error::config(format!(
                "infeasible dimensions: k_n = {} exceeds n = {}",
                self.k_n, self.dgp.n
            )));
        }
        if self.dgp.k > self.k_n {
            return Err(Error::config(format!(
                "infeasible dimensions: K = {} exceeds k_n = {} (rate: K <= k_n required)",
                self.dgp.k, self.k_n
            )));
        }
        let j = self.sieve.dimension(self.dgp.k_x);
        if j > self.dgp.p {
            return Err(Error::config(format!(
                "infeasible dimensions: J = {j} exceeds p = {} (rate: J^2 = O(p))",
                self.dgp.p
            )));
        }
        if self.v.len() != self.dgp.k {
            return Err(Error::config(format!(
                "direction vector has length {}, expected K = {}",
                self.v.len(),
                self.dgp.k
            )));
        }
        if self.target_l >= self.dgp.p {
            return Err(Error::config("target asset out of range"));
        }
        if self.methods.contains(&Method::Integrated) && self.dgp.n <= self.k_n {
            return Err(Error::config("integrated method needs n > k_n"));
        }
        if self.methods.contains(&Method::BlockBootstrap) && self.dgp.block_spec.is_none() {
            return Err(Error::config("block_bootstrap needs dgp.block_spec"));
        }
        if self.factor_mode == FactorMode::Latent && self.methods.contains(&Method::GmmBootstrap)
        {
            return Err(Error::config("gmm_bootstrap runs in known-factor mode only"));
        }
        if self.factor_mode == FactorMode::Latent && self.methods.contains(&Method::Integrated) {
            return Err(Error::config("integrated inference runs in known-factor mode only"));
        }
        Ok(())
    }
}

/// Aggregates of one (method × strength) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub method: Method,
    pub gamma_label: String,
    pub gamma_strength: f64,
    pub trials: usize,
    pub coverage: f64,
    /// Binomial Monte Carlo standard error `√(c(1-c)/trials)`.
    pub mc_se: f64,
    pub median_width: f64,
    /// Mean of (point − target); the target is rotation-aligned in latent
    /// mode.
    pub mean_bias: f64,
    pub runtime_secs: f64,
}

/// Full study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub cells: Vec<CellReport>,
    pub level: f64,
    pub trials: usize,
    pub seed: u64,
}

struct TrialOutcome {
    hit: bool,
    width: f64,
    bias: f64,
}

struct TrialContext<'a> {
    config: &'a ExperimentConfig,
    strength: f64,
    cell: usize,
}

/// Everything estimated once per simulated panel and shared by the methods.
struct EstimatedTrial {
    sim: SimulatedPanel,
    window: LocalWindow,
    op: ProjectionOperator,
    dec: Option<BetaDecomposition>,
    f_hat: Option<DMatrix<f64>>,
    bias: Option<DVector<f64>>,
    /// Target value `v'g` (rotated in latent mode).
    spot_target: f64,
}

fn estimate_trial(ctx: &TrialContext<'_>, trial: u64) -> Result<EstimatedTrial> {
    let config = ctx.config;
    let mut dgp = config.dgp.clone();
    dgp.gamma_strength = ctx.strength;
    dgp.seed = derive_seed(config.seed, ctx.cell as u64, trial);
    let sim = simulate_factor_panel(&dgp)?;
    let window = LocalWindow::new(1, config.k_n, sim.n())?;
    let chars = CharacteristicPanel::new(sim.characteristics[window.anchor0()].clone())?;
    let op = build_basis(&chars, &config.sieve)?;
    let v = DVector::from_column_slice(&config.v);
    let l = config.target_l;

    match config.factor_mode {
        FactorMode::Known => {
            let dec = estimate_window(&sim.increments_y, &sim.increments_f, window, &op)?;
            let spot_target = v.dot(&sim.true_g[window.anchor0()].row(l).transpose());
            Ok(EstimatedTrial {
                sim,
                window,
                op,
                dec: Some(dec),
                f_hat: None,
                bias: None,
                spot_target,
            })
        }
        FactorMode::Latent => {
            let y = sim.increments_y.window_view(&window);
            let delta = sim.increments_y.delta_n;
            let proj = WindowProjection::Anchor(&op);
            let mut est = projected_pca(&y, &proj, dgp.k, delta)?;
            if config.align_to_truth {
                let f_true = sim
                    .increments_f
                    .view((0, window.anchor0()), (dgp.k, window.k_n));
                align_signs_to_truth(&mut est.f_hat, &f_true);
            }
            let (g_lat, gamma_lat) = estimate_g_latent(&y, &est.f_hat, &op, delta)?;
            let bias = match config.bias_correction {
                BiasCorrection::None => None,
                BiasCorrection::Case1 => {
                    let resid = latent_residuals(&y, &g_lat, &gamma_lat, &est.f_hat);
                    Some(bias_case1(&resid, &est.v_hat, &g_lat, &proj, l, delta)?)
                }
                BiasCorrection::Case2 => {
                    let resid = latent_residuals(&y, &g_lat, &gamma_lat, &est.f_hat);
                    let cov = threshold_covariance(
                        &resid,
                        delta,
                        op.phi(),
                        config.threshold_c_bar,
                        config.threshold_kind,
                    )?;
                    Some(bias_case2(&cov, &est.v_hat, &g_lat, &proj, window.k_n, l)?)
                }
            };
            // Rotated target per the latent theory: the estimator converges
            // to the rotation of g implied by the factor estimate.
            let f_true = sim
                .increments_f
                .view((0, window.anchor0()), (dgp.k, window.k_n));
            let rot = g_space_rotation(&est.f_hat, &f_true, delta)?;
            let spot_target =
                v.dot(&(&rot * sim.true_g[window.anchor0()].row(l).transpose()));
            let sim_out = sim;
            Ok(EstimatedTrial {
                sim: sim_out,
                window,
                op,
                dec: None,
                f_hat: Some(est.f_hat),
                bias,
                spot_target,
            })
        }
    }
}

fn run_method_on_trial(
    ctx: &TrialContext<'_>,
    method: Method,
    est: &EstimatedTrial,
) -> Result<(ConfidenceInterval, f64)> {
    let config = ctx.config;
    let v = DVector::from_column_slice(&config.v);
    let plan = BootstrapPlan::new(
        config.b,
        config.target_l,
        v.clone(),
        config.level,
        derive_seed(est.sim.config.seed, 0xB007, 0),
    );
    let sim = &est.sim;
    let window = &est.window;
    let k = config.dgp.k;
    let delta = sim.increments_y.delta_n;
    let y_view = sim.increments_y.window_view(window);
    let f_view = sim
        .increments_f
        .view((0, window.anchor0()), (k, window.k_n));

    let bundle = || -> SpotBundle<'_> {
        SpotBundle {
            y_window: y_view,
            factors: match (&est.f_hat, config.factor_mode) {
                (Some(f_hat), FactorMode::Latent) => FactorWindow::Estimated(f_hat),
                _ => FactorWindow::Known(f_view),
            },
            op: &est.op,
            delta_n: delta,
            bias: est.bias.clone(),
        }
    };

    match method {
        Method::CsBootstrap => Ok((cs_bootstrap_ci(&bundle(), &plan)?, est.spot_target)),
        Method::BlockBootstrap => {
            let bs = config.dgp.block_spec.as_ref().expect("validated");
            let partition = BlockPartition::new(bs.partition(sim.p()))?;
            Ok((block_bootstrap_ci(&bundle(), &partition, &plan)?, est.spot_target))
        }
        Method::GmmBootstrap => {
            let zw: Vec<DMatrix<f64>> = (0..sim.p())
                .map(|m| {
                    DMatrix::from_fn(k + 1, window.k_n, |row, i| {
                        let col = window.anchor0() + i;
                        if row == 0 {
                            sim.increments_y.data[(m, col)]
                        } else {
                            sim.increments_f[(row - 1, col)]
                        }
                    })
                })
                .collect();
            let fit = gmm_fit_window(
                &[linear_regression_moment(k)],
                &zw,
                delta,
                &WeightRule::Identity,
                &est.op,
            )?;
            Ok((gmm_bootstrap_ci(&fit, &est.op, &plan)?, est.spot_target))
        }
        Method::Integrated => {
            let windows = make_windows(sim.n(), config.k_n, 1)?;
            let ops: Result<Vec<ProjectionOperator>> = windows
                .iter()
                .map(|w| {
                    let chars =
                        CharacteristicPanel::new(sim.characteristics[w.anchor0()].clone())?;
                    build_basis(&chars, &config.sieve)
                })
                .collect();
            let ops = ops?;
            let ci = integrated_bootstrap_ci(
                &sim.increments_y,
                &sim.increments_f,
                &ops,
                config.k_n,
                &plan,
            )?;
            // Matched estimand: the Riemann sum of the true g over the
            // covered window anchors.
            let target: f64 = windows
                .iter()
                .map(|w| {
                    v.dot(&sim.true_g[w.anchor0()].row(config.target_l).transpose()) * delta
                })
                .sum();
            Ok((ci, target))
        }
        Method::PluginNaive => {
            let dec = est.dec.as_ref().ok_or_else(|| {
                Error::config("plug-in comparators run in known-factor mode only")
            })?;
            Ok((
                plugin_ci_naive(dec, &y_view, &f_view, &est.op, delta, &plan)?,
                est.spot_target,
            ))
        }
        Method::PluginFull => {
            let dec = est.dec.as_ref().ok_or_else(|| {
                Error::config("plug-in comparators run in known-factor mode only")
            })?;
            Ok((
                plugin_ci_full(dec, &y_view, &f_view, &est.op, delta, &plan)?,
                est.spot_target,
            ))
        }
    }
}

/// Run the full (method × strength) grid.
///
/// Every cell simulates `trials` independent panels (trial seeds derived
/// from the study seed), builds each method's interval, and scores coverage
/// against the simulated truth.
pub fn run_coverage_study(config: &ExperimentConfig) -> Result<CoverageReport> {
    config.validate()?;

    let run = || -> Result<CoverageReport> {
        let mut cells = Vec::new();
        for (si, strength_spec) in config.gamma_grid.iter().enumerate() {
            let strength = strength_spec.resolve(config.k_n);
            let ctx = TrialContext { config, strength, cell: si };
            let start = Instant::now();

            let outcomes: Result<Vec<Vec<TrialOutcome>>> = (0..config.trials as u64)
                .into_par_iter()
                .map(|trial| {
                    let est = estimate_trial(&ctx, trial)?;
                    config
                        .methods
                        .iter()
                        .map(|&m| {
                            let (ci, target) = run_method_on_trial(&ctx, m, &est)?;
                            Ok(TrialOutcome {
                                hit: ci.contains(target),
                                width: ci.width(),
                                bias: ci.point - target,
                            })
                        })
                        .collect()
                })
                .collect();
            let outcomes = outcomes?;
            let elapsed = start.elapsed().as_secs_f64();

            for (mi, &method) in config.methods.iter().enumerate() {
                let mut hits = 0usize;
                let mut widths = Vec::with_capacity(config.trials);
                let mut bias_sum = 0.0;
                for row in &outcomes {
                    let o = &row[mi];
                    hits += o.hit as usize;
                    widths.push(o.width);
                    bias_sum += o.bias;
                }
                widths.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let coverage = hits as f64 / config.trials as f64;
                cells.push(CellReport {
                    method,
                    gamma_label: strength_spec.label(config.k_n),
                    gamma_strength: strength,
                    trials: config.trials,
                    coverage,
                    mc_se: (coverage * (1.0 - coverage) / config.trials as f64).sqrt(),
                    median_width: median_of_sorted(&widths),
                    mean_bias: bias_sum / config.trials as f64,
                    runtime_secs: elapsed,
                });
            }
        }
        Ok(CoverageReport {
            cells,
            level: config.level,
            trials: config.trials,
            seed: config.seed,
        })
    };

    if config.parallelism > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    }
}

fn median_of_sorted(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ---------------------------------------------------------------------------
// CSV panel format
// ---------------------------------------------------------------------------

/// Schema of the long-format CSV panel: columns
/// `interval_index, asset_id, dY, x_1..x_{K_x}[, f_1..f_K]`, rows grouped by
/// non-decreasing interval index, one row per (interval, asset).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub k_x: usize,
    /// Factor columns present in the file (0 when factors are absent).
    pub k_factors: usize,
    pub delta_n: f64,
    /// Drop assets with missing intervals instead of failing.
    #[serde(default)]
    pub drop_incomplete: bool,
}

/// A parsed panel: increments, per-interval characteristics, optional
/// factor increments.
#[derive(Debug, Clone)]
pub struct IngestedPanel {
    pub panel: IncrementPanel,
    /// One `p × K_x` matrix per interval (anchored at its left endpoint).
    pub characteristics: Vec<DMatrix<f64>>,
    /// `K × n` factor increments when the file carries factor columns.
    pub factors: Option<DMatrix<f64>>,
}

/// Ingest a CSV panel. Schema violations, non-monotone interval indices and
/// non-finite values produce descriptive errors with line numbers.
pub fn ingest_csv_panel(path: &Path, schema: &CsvSchema) -> Result<IngestedPanel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut expected: Vec<String> = vec!["interval_index".into(), "asset_id".into(), "dY".into()];
    for j in 1..=schema.k_x {
        expected.push(format!("x_{j}"));
    }
    for j in 1..=schema.k_factors {
        expected.push(format!("f_{j}"));
    }
    let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if got != expected {
        return Err(Error::data(format!(
            "csv header mismatch: expected {expected:?}, got {got:?}"
        )));
    }

    struct Row {
        interval: usize,
        asset: String,
        dy: f64,
        x: Vec<f64>,
        f: Vec<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut last_interval = 0usize;
    for (ridx, rec) in reader.records().enumerate() {
        let line = ridx + 2; // header is line 1
        let rec = rec?;
        if rec.len() != expected.len() {
            return Err(Error::data(format!(
                "line {line}: expected {} fields, got {}",
                expected.len(),
                rec.len()
            )));
        }
        let interval: usize = rec[0]
            .parse()
            .map_err(|_| Error::data(format!("line {line}: bad interval_index '{}'", &rec[0])))?;
        if interval == 0 {
            return Err(Error::data(format!("line {line}: interval_index must be >= 1")));
        }
        if interval < last_interval {
            return Err(Error::data(format!(
                "line {line}: non-monotone time index ({interval} after {last_interval})"
            )));
        }
        last_interval = interval;
        let parse_f64 = |s: &str, col: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::data(format!("line {line}: bad {col} value '{s}'")))?;
            if !v.is_finite() {
                return Err(Error::data(format!("line {line}: non-finite {col}")));
            }
            Ok(v)
        };
        let dy = parse_f64(&rec[2], "dY")?;
        let mut x = Vec::with_capacity(schema.k_x);
        for j in 0..schema.k_x {
            x.push(parse_f64(&rec[3 + j], &format!("x_{}", j + 1))?);
        }
        let mut f = Vec::with_capacity(schema.k_factors);
        for j in 0..schema.k_factors {
            f.push(parse_f64(&rec[3 + schema.k_x + j], &format!("f_{}", j + 1))?);
        }
        rows.push(Row { interval, asset: rec[1].to_string(), dy, x, f });
    }
    if rows.is_empty() {
        return Err(Error::data("csv contains no data rows"));
    }

    let n = last_interval;
    // Collect the asset universe in first-appearance order.
    let mut asset_ids: Vec<String> = Vec::new();
    for r in &rows {
        if !asset_ids.contains(&r.asset) {
            asset_ids.push(r.asset.clone());
        }
    }
    let index_of = |id: &str| asset_ids.iter().position(|a| a == id).unwrap();

    // Presence matrix and duplicate detection.
    let mut seen = vec![vec![false; n]; asset_ids.len()];
    for r in &rows {
        let a = index_of(&r.asset);
        if seen[a][r.interval - 1] {
            return Err(Error::data(format!(
                "duplicate row for asset '{}' at interval {}",
                r.asset, r.interval
            )));
        }
        seen[a][r.interval - 1] = true;
    }
    let complete: Vec<bool> = seen.iter().map(|s| s.iter().all(|&b| b)).collect();
    let keep: Vec<usize> = if schema.drop_incomplete {
        (0..asset_ids.len()).filter(|&a| complete[a]).collect()
    } else {
        if let Some(a) = complete.iter().position(|&c| !c) {
            let missing: Vec<usize> = seen[a]
                .iter()
                .enumerate()
                .filter(|(_, &b)| !b)
                .map(|(i, _)| i + 1)
                .collect();
            return Err(Error::data(format!(
                "asset '{}' is missing intervals {missing:?} (pass drop_incomplete to drop such assets)",
                asset_ids[a]
            )));
        }
        (0..asset_ids.len()).collect()
    };
    if keep.is_empty() {
        return Err(Error::data("no complete assets after dropping"));
    }
    let p = keep.len();
    let keep_pos: std::collections::HashMap<usize, usize> =
        keep.iter().enumerate().map(|(pos, &a)| (a, pos)).collect();

    let mut data = DMatrix::zeros(p, n);
    let mut chars = vec![DMatrix::zeros(p, schema.k_x); n];
    let mut factors = if schema.k_factors > 0 {
        Some(DMatrix::from_element(schema.k_factors, n, f64::NAN))
    } else {
        None
    };
    for r in &rows {
        let a = index_of(&r.asset);
        let Some(&pos) = keep_pos.get(&a) else { continue };
        let i = r.interval - 1;
        data[(pos, i)] = r.dy;
        for j in 0..schema.k_x {
            chars[i][(pos, j)] = r.x[j];
        }
        if let Some(fm) = factors.as_mut() {
            for j in 0..schema.k_factors {
                let existing = fm[(j, i)];
                if existing.is_nan() {
                    fm[(j, i)] = r.f[j];
                } else if existing != r.f[j] {
                    return Err(Error::data(format!(
                        "inconsistent factor f_{} at interval {}: {} vs {}",
                        j + 1,
                        r.interval,
                        existing,
                        r.f[j]
                    )));
                }
            }
        }
    }
    if let Some(fm) = &factors {
        if fm.iter().any(|v| v.is_nan()) {
            return Err(Error::data("factor columns missing for some intervals"));
        }
    }

    let ids: Vec<String> = keep.iter().map(|&a| asset_ids[a].clone()).collect();
    let panel = IncrementPanel::new(data, schema.delta_n, ids, 0.0)?;
    Ok(IngestedPanel { panel, characteristics: chars, factors })
}

/// Export a simulated panel in the CSV schema (characteristics repeated per
/// interval, factor columns included).
pub fn export_simulated_panel(sim: &SimulatedPanel, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let k_x = sim.config.k_x;
    let k = sim.config.k;
    let mut header: Vec<String> = vec!["interval_index".into(), "asset_id".into(), "dY".into()];
    for j in 1..=k_x {
        header.push(format!("x_{j}"));
    }
    for j in 1..=k {
        header.push(format!("f_{j}"));
    }
    wtr.write_record(&header)?;
    for i in 0..sim.n() {
        for l in 0..sim.p() {
            let mut rec: Vec<String> = vec![
                format!("{}", i + 1),
                sim.increments_y.asset_ids[l].clone(),
                format!("{:.17e}", sim.increments_y.data[(l, i)]),
            ];
            for j in 0..k_x {
                rec.push(format!("{:.17e}", sim.characteristics[i][(l, j)]));
            }
            for j in 0..k {
                rec.push(format!("{:.17e}", sim.increments_f[(j, i)]));
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

impl CoverageReport {
    /// CSV table, one row per (method × strength) cell.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "method,gamma_label,gamma_strength,trials,coverage,mc_se,median_width,mean_bias,runtime_secs\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.method,
                c.gamma_label,
                c.gamma_strength,
                c.trials,
                c.coverage,
                c.mc_se,
                c.median_width,
                c.mean_bias,
                c.runtime_secs
            ));
        }
        out
    }

    /// Line-delimited JSON, one record per cell.
    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Write `coverage.csv` and `coverage.jsonl` under `dir`.
pub fn emit_report(report: &CoverageReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv_file = std::fs::File::create(dir.join("coverage.csv"))?;
    csv_file.write_all(report.to_csv_string().as_bytes())?;
    let mut jsonl = std::fs::File::create(dir.join("coverage.jsonl"))?;
    jsonl.write_all(report.to_jsonl_string()?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::GSpec;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dgp: DgpConfig::standard(12, 8, 1, 2, 0.0, 5),
            gamma_grid: vec![GammaStrength::Fixed(0.0), GammaStrength::InvSqrtKn],
            methods: vec![Method::CsBootstrap, Method::PluginNaive],
            trials: 2,
            b: 5,
            level: 0.95,
            factor_mode: FactorMode::Known,
            bias_correction: BiasCorrection::None,
            k_n: 8,
            target_l: 0,
            v: vec![1.0],
            sieve: default_sieve(),
            threshold_c_bar: 0.5,
            threshold_kind: ThresholdKind::Soft,
            align_to_truth: true,
            seed: 9,
            parallelism: 0,
        }
    }

    #[test]
    fn smoke_run_and_determinism() {
        let config = tiny_config();
        let r1 = run_coverage_study(&config).unwrap();
        assert_eq!(r1.cells.len(), 4);
        for c in &r1.cells {
            assert!((0.0..=1.0).contains(&c.coverage));
            // coverage + miss rate = 1 exactly: both derive from hit counts.
            let hits = (c.coverage * c.trials as f64).round();
            assert_eq!(hits as usize + (c.trials - hits as usize), c.trials);
        }
        // Identical statistics on a re-run (runtimes aside) and under a
        // different parallelism degree.
        let r2 = run_coverage_study(&config).unwrap();
        let mut par = tiny_config();
        par.parallelism = 2;
        let r3 = run_coverage_study(&par).unwrap();
        for other in [&r2, &r3] {
            for (a, b) in r1.cells.iter().zip(other.cells.iter()) {
                assert_eq!(a.coverage, b.coverage);
                assert_eq!(a.median_width, b.median_width);
                assert_eq!(a.mean_bias, b.mean_bias);
            }
        }
    }

    #[test]
    fn infeasible_dimensions_rejected() {
        let mut c = tiny_config();
        c.k_n = 100; // > n
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.dgp = DgpConfig::standard(12, 8, 9, 2, 0.0, 5); // K > k_n
        c.v = vec![1.0; 9];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.methods = vec![];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.methods = vec![Method::BlockBootstrap]; // no block_spec
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let mut cfg = DgpConfig::standard(6, 7, 2, 3, 0.4, 77);
        cfg.g_spec = GSpec::Linear { theta: cfg.g_spec.theta().clone() };
        let sim = simulate_factor_panel(&cfg).unwrap();
        let dir = std::env::temp_dir().join("charbeta_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("panel.csv");
        export_simulated_panel(&sim, &path).unwrap();
        let schema =
            CsvSchema { k_x: 3, k_factors: 2, delta_n: cfg.delta_n, drop_incomplete: false };
        let got = ingest_csv_panel(&path, &schema).unwrap();
        assert_eq!(got.panel.data, sim.increments_y.data);
        assert_eq!(got.factors.as_ref().unwrap(), &sim.increments_f);
        for i in 0..sim.n() {
            assert_eq!(got.characteristics[i], sim.characteristics[i]);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn csv_errors_name_offending_rows() {
        let dir = std::env::temp_dir().join("charbeta_csv_err");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(
            &path,
            "interval_index,asset_id,dY,x_1\n1,a,0.1,0.5\n1,b,NaN,0.2\n",
        )
        .unwrap();
        let schema = CsvSchema { k_x: 1, k_factors: 0, delta_n: 0.1, drop_incomplete: false };
        let err = ingest_csv_panel(&path, &schema).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 3"), "{msg}");

        std::fs::write(
            &path,
            "interval_index,asset_id,dY,x_1\n2,a,0.1,0.5\n1,a,0.0,0.2\n",
        )
        .unwrap();
        let err = ingest_csv_panel(&path, &schema).unwrap_err();
        assert!(format!("{err}").contains("non-monotone"), "{err}");

        // Missing asset row names the asset and intervals.
        std::fs::write(
            &path,
            "interval_index,asset_id,dY,x_1\n1,a,0.1,0.5\n1,b,0.1,0.5\n2,a,0.2,0.5\n",
        )
        .unwrap();
        let err = ingest_csv_panel(&path, &schema).unwrap_err();
        assert!(format!("{err}").contains("'b'"), "{err}");
        // With the drop flag the incomplete asset disappears instead.
        let schema_drop = CsvSchema { drop_incomplete: true, ..schema };
        let got = ingest_csv_panel(&path, &schema_drop).unwrap();
        assert_eq!(got.panel.p(), 1);
        assert_eq!(got.panel.asset_ids, vec!["a".to_string()]);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn report_emission_formats() {
        let report = CoverageReport {
            cells: vec![],
            level: 0.95,
            trials: 0,
            seed: 1,
        };
        // Header-only CSV for an empty grid.
        let csv = report.to_csv_string();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("method,"));
        assert_eq!(report.to_jsonl_string().unwrap(), "");

        let config = tiny_config();
        let r = run_coverage_study(&config).unwrap();
        let jsonl = r.to_jsonl_string().unwrap();
        // Schema round-trip.
        for line in jsonl.lines() {
            let cell: CellReport = serde_json::from_str(line).unwrap();
            assert!(cell.trials == 2);
        }
        let dir = std::env::temp_dir().join("charbeta_report_test");
        emit_report(&r, &dir).unwrap();
        assert!(dir.join("coverage.csv").exists());
        assert!(dir.join("coverage.jsonl").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
