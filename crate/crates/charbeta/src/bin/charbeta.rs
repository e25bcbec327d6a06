//! Experiment CLI: simulate panels, estimate characteristic betas, build
//! confidence intervals, run coverage studies, and validate CSV panels.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use charbeta::boot::{
    block_bootstrap_ci, cs_bootstrap_ci, gmm_bootstrap_ci, integrated_bootstrap_ci,
    plugin_ci_full, plugin_ci_naive, BlockPartition, BootstrapPlan, ConfidenceInterval,
    FactorWindow, SpotBundle,
};
use charbeta::dgp::{simulate_factor_panel, DgpConfig};
use charbeta::error::{Error, Result};
use charbeta::factor::estimate_window;
use charbeta::gmm::{gmm_fit_window, linear_regression_moment, WeightRule};
use charbeta::harness::{
    emit_report, export_simulated_panel, ingest_csv_panel, run_coverage_study, BiasCorrection,
    CsvSchema, ExperimentConfig, FactorMode, GammaStrength, IngestedPanel, Method,
};
use charbeta::latent::{
    bias_case1, bias_case2, estimate_g_latent, latent_residuals, projected_pca,
    threshold_covariance, ThresholdKind, WindowProjection,
};
use charbeta::panel::{make_windows, LocalWindow};
use charbeta::sieve::{build_basis, CharacteristicPanel, ProjectionOperator, SieveBasisSpec};

#[derive(Parser)]
#[command(
    name = "charbeta",
    about = "Characteristic-beta estimation and uniform bootstrap inference for high-frequency panels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel from a DGP config and export it as CSV.
    Simulate(SimulateArgs),
    /// Estimate per-asset beta decompositions on one window of a CSV panel.
    Estimate(EstimateArgs),
    /// Build a confidence interval for one asset's characteristic beta.
    Ci(CiArgs),
    /// Run a Monte Carlo coverage study from an experiment config.
    Coverage(CoverageArgs),
    /// Validate a CSV panel against the schema without estimating.
    IngestCheck(IngestArgs),
    /// Print a JSON config template (dgp or experiment).
    ExampleConfig(ExampleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON file holding a DgpConfig.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct SchemaArgs {
    /// Input CSV panel.
    #[arg(long)]
    panel: PathBuf,
    /// Number of characteristic columns x_1..x_Kx.
    #[arg(long)]
    k_x: usize,
    /// Number of factor columns f_1..f_K (0 when absent).
    #[arg(long, default_value_t = 0)]
    factors: usize,
    /// Interval length in time units.
    #[arg(long)]
    delta_n: f64,
    /// Drop assets with missing intervals instead of failing.
    #[arg(long, default_value_t = false)]
    drop_incomplete: bool,
}

#[derive(Args)]
struct WindowArgs {
    /// Window length in intervals.
    #[arg(long)]
    k_n: usize,
    /// 1-based start interval of the window.
    #[arg(long, default_value_t = 1)]
    window_start: usize,
}

#[derive(Args)]
struct SieveArgs {
    /// Sieve family.
    #[arg(long, value_enum, default_value_t = SieveFamilyArg::Linear)]
    sieve: SieveFamilyArg,
    /// B-spline degree (bspline family).
    #[arg(long, default_value_t = 3)]
    spline_degree: usize,
    /// B-spline interior knots (bspline family).
    #[arg(long, default_value_t = 4)]
    spline_knots: usize,
    /// Polynomial order (polynomial family).
    #[arg(long, default_value_t = 2)]
    poly_order: usize,
    /// Standardize characteristic columns before expansion.
    #[arg(long, default_value_t = false)]
    standardize: bool,
}

impl SieveArgs {
    fn spec(&self) -> SieveBasisSpec {
        use charbeta::sieve::SieveFamily;
        let family = match self.sieve {
            SieveFamilyArg::Linear => SieveFamily::Linear,
            SieveFamilyArg::Bspline => SieveFamily::Bspline {
                degree: self.spline_degree,
                interior_knots: self.spline_knots,
            },
            SieveFamilyArg::Polynomial => SieveFamily::Polynomial { order: self.poly_order },
        };
        SieveBasisSpec { family, standardize: self.standardize, condition_cap: 1e10 }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SieveFamilyArg {
    Linear,
    Bspline,
    Polynomial,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    sieve: SieveArgs,
    /// Estimate latent factors by projected PCA instead of using the factor
    /// columns.
    #[arg(long, default_value_t = false)]
    latent: bool,
    /// Latent factor count (required with --latent).
    #[arg(long)]
    k: Option<usize>,
    /// Output CSV of per-asset (beta, g, gamma).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CiMethodArg {
    CsBootstrap,
    BlockBootstrap,
    GmmBootstrap,
    Integrated,
    PluginNaive,
    PluginFull,
}

#[derive(Args)]
struct CiArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    sieve: SieveArgs,
    #[arg(long, value_enum)]
    method: CiMethodArg,
    /// Target asset id (as in the CSV) or 0-based index.
    #[arg(long)]
    target: String,
    /// Direction vector, comma-separated (defaults to the first factor).
    #[arg(long)]
    v: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Bootstrap replications.
    #[arg(long, default_value_t = 500)]
    b: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = false)]
    latent: bool,
    /// Latent factor count (required with --latent).
    #[arg(long)]
    k: Option<usize>,
    /// Bias correction in latent mode.
    #[arg(long, value_enum, default_value_t = BiasArg::None)]
    bias_correction: BiasArg,
    /// Thresholding constant for case2.
    #[arg(long, default_value_t = 0.5)]
    c_bar: f64,
    /// Block size for the block bootstrap (contiguous blocks).
    #[arg(long)]
    block_size: Option<usize>,
    /// Optional JSON output path (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BiasArg {
    None,
    Case1,
    Case2,
}

#[derive(Args)]
struct CoverageArgs {
    /// JSON file holding an ExperimentConfig.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for coverage.csv / coverage.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Args)]
struct ExampleArgs {
    /// Which template to print.
    #[arg(value_parser = ["dgp", "experiment"])]
    kind: String,
}

fn read_panel(schema: &SchemaArgs) -> Result<IngestedPanel> {
    let cs = CsvSchema {
        k_x: schema.k_x,
        k_factors: schema.factors,
        delta_n: schema.delta_n,
        drop_incomplete: schema.drop_incomplete,
    };
    ingest_csv_panel(&schema.panel, &cs)
}

fn op_for_window(
    ingested: &IngestedPanel,
    window: &LocalWindow,
    sieve: &SieveBasisSpec,
) -> Result<ProjectionOperator> {
    let chars = CharacteristicPanel::new(ingested.characteristics[window.anchor0()].clone())?;
    build_basis(&chars, sieve)
}

fn resolve_target(ingested: &IngestedPanel, target: &str) -> Result<usize> {
    if let Some(pos) = ingested.panel.asset_ids.iter().position(|a| a == target) {
        return Ok(pos);
    }
    target
        .parse::<usize>()
        .ok()
        .filter(|&l| l < ingested.panel.p())
        .ok_or_else(|| Error::config(format!("unknown target asset '{target}'")))
}

fn parse_v(raw: &Option<String>, k: usize) -> Result<DVector<f64>> {
    match raw {
        None => {
            let mut v = DVector::zeros(k);
            v[0] = 1.0;
            Ok(v)
        }
        Some(s) => {
            let vals: std::result::Result<Vec<f64>, _> =
                s.split(',').map(|x| x.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|_| Error::config(format!("bad direction vector '{s}'")))?;
            if vals.len() != k {
                return Err(Error::config(format!(
                    "direction vector has {} entries, expected K = {k}",
                    vals.len()
                )));
            }
            Ok(DVector::from_column_slice(&vals))
        }
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut config: DgpConfig =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("bad DGP config: {e}")))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let sim = simulate_factor_panel(&config)?;
    export_simulated_panel(&sim, &args.out)?;
    eprintln!("wrote {} assets x {} intervals to {}", sim.p(), sim.n(), args.out.display());
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let ingested = read_panel(&args.schema)?;
    let window = LocalWindow::new(args.window.window_start, args.window.k_n, ingested.panel.n())?;
    let op = op_for_window(&ingested, &window, &args.sieve.spec())?;
    let delta = ingested.panel.delta_n;

    let (beta, g, gamma) = if args.latent {
        let k = args.k.ok_or_else(|| Error::config("--latent requires --k"))?;
        let y = ingested.panel.window_view(&window);
        let est = projected_pca(&y, &WindowProjection::Anchor(&op), k, delta)?;
        let (g, gamma) = estimate_g_latent(&y, &est.f_hat, &op, delta)?;
        (&g + &gamma, g, gamma)
    } else {
        let factors = ingested
            .factors
            .as_ref()
            .ok_or_else(|| Error::config("panel has no factor columns; use --latent"))?;
        let dec = estimate_window(&ingested.panel, factors, window, &op)?;
        (dec.beta_hat, dec.g_hat, dec.gamma_hat)
    };

    let k = beta.ncols();
    let mut wtr = csv::Writer::from_path(&args.out)?;
    let mut header = vec!["asset_id".to_string()];
    for tag in ["beta", "g", "gamma"] {
        for j in 1..=k {
            header.push(format!("{tag}_{j}"));
        }
    }
    wtr.write_record(&header)?;
    for l in 0..ingested.panel.p() {
        let mut rec = vec![ingested.panel.asset_ids[l].clone()];
        for m in [&beta, &g, &gamma] {
            for j in 0..k {
                rec.push(format!("{:.17e}", m[(l, j)]));
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    eprintln!("wrote decomposition for {} assets to {}", ingested.panel.p(), args.out.display());
    Ok(())
}

fn cmd_ci(args: &CiArgs) -> Result<()> {
    let ingested = read_panel(&args.schema)?;
    let window = LocalWindow::new(args.window.window_start, args.window.k_n, ingested.panel.n())?;
    let sieve = args.sieve.spec();
    let op = op_for_window(&ingested, &window, &sieve)?;
    let delta = ingested.panel.delta_n;
    let target_l = resolve_target(&ingested, &args.target)?;

    let known_k = ingested.factors.as_ref().map(|f| f.nrows());
    let k = if args.latent {
        args.k.ok_or_else(|| Error::config("--latent requires --k"))?
    } else {
        known_k.ok_or_else(|| Error::config("panel has no factor columns; use --latent"))?
    };
    let v = parse_v(&args.v, k)?;
    let plan = BootstrapPlan::new(args.b, target_l, v.clone(), args.level, args.seed);
    let y_view = ingested.panel.window_view(&window);

    let ci: ConfidenceInterval = match args.method {
        CiMethodArg::CsBootstrap | CiMethodArg::BlockBootstrap => {
            let f_hat_store;
            let bias;
            let factors = if args.latent {
                let est = projected_pca(&y_view, &WindowProjection::Anchor(&op), k, delta)?;
                let (g_lat, gamma_lat) = estimate_g_latent(&y_view, &est.f_hat, &op, delta)?;
                bias = match args.bias_correction {
                    BiasArg::None => None,
                    BiasArg::Case1 => {
                        let resid = latent_residuals(&y_view, &g_lat, &gamma_lat, &est.f_hat);
                        Some(bias_case1(
                            &resid,
                            &est.v_hat,
                            &g_lat,
                            &WindowProjection::Anchor(&op),
                            target_l,
                            delta,
                        )?)
                    }
                    BiasArg::Case2 => {
                        let resid = latent_residuals(&y_view, &g_lat, &gamma_lat, &est.f_hat);
                        let cov = threshold_covariance(
                            &resid,
                            delta,
                            op.phi(),
                            args.c_bar,
                            ThresholdKind::Soft,
                        )?;
                        Some(bias_case2(
                            &cov,
                            &est.v_hat,
                            &g_lat,
                            &WindowProjection::Anchor(&op),
                            window.k_n,
                            target_l,
                        )?)
                    }
                };
                f_hat_store = est.f_hat;
                FactorWindow::Estimated(&f_hat_store)
            } else {
                bias = None;
                let f = ingested.factors.as_ref().unwrap();
                FactorWindow::Known(f.view((0, window.anchor0()), (k, window.k_n)))
            };
            let bundle = SpotBundle { y_window: y_view, factors, op: &op, delta_n: delta, bias };
            match args.method {
                CiMethodArg::CsBootstrap => cs_bootstrap_ci(&bundle, &plan)?,
                _ => {
                    let size = args
                        .block_size
                        .ok_or_else(|| Error::config("block bootstrap needs --block-size"))?;
                    let partition = BlockPartition::contiguous(ingested.panel.p(), size)?;
                    block_bootstrap_ci(&bundle, &partition, &plan)?
                }
            }
        }
        CiMethodArg::GmmBootstrap => {
            let factors = ingested
                .factors
                .as_ref()
                .ok_or_else(|| Error::config("gmm bootstrap needs factor columns"))?;
            let zw: Vec<DMatrix<f64>> = (0..ingested.panel.p())
                .map(|m| {
                    DMatrix::from_fn(k + 1, window.k_n, |row, i| {
                        let col = window.anchor0() + i;
                        if row == 0 {
                            ingested.panel.data[(m, col)]
                        } else {
                            factors[(row - 1, col)]
                        }
                    })
                })
                .collect();
            let fit = gmm_fit_window(
                &[linear_regression_moment(k)],
                &zw,
                delta,
                &WeightRule::Identity,
                &op,
            )?;
            gmm_bootstrap_ci(&fit, &op, &plan)?
        }
        CiMethodArg::Integrated => {
            let factors = ingested
                .factors
                .as_ref()
                .ok_or_else(|| Error::config("integrated inference needs factor columns"))?;
            let windows = make_windows(ingested.panel.n(), window.k_n, 1)?;
            let ops: Result<Vec<ProjectionOperator>> =
                windows.iter().map(|w| op_for_window(&ingested, w, &sieve)).collect();
            integrated_bootstrap_ci(&ingested.panel, factors, &ops?, window.k_n, &plan)?
        }
        CiMethodArg::PluginNaive | CiMethodArg::PluginFull => {
            let factors = ingested
                .factors
                .as_ref()
                .ok_or_else(|| Error::config("plug-in intervals need factor columns"))?;
            let dec = estimate_window(&ingested.panel, factors, window, &op)?;
            let f_view = factors.view((0, window.anchor0()), (k, window.k_n));
            match args.method {
                CiMethodArg::PluginNaive => {
                    plugin_ci_naive(&dec, &y_view, &f_view, &op, delta, &plan)?
                }
                _ => plugin_ci_full(&dec, &y_view, &f_view, &op, delta, &plan)?,
            }
        }
    };

    let json = serde_json::to_string_pretty(&ci)?;
    match &args.out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_coverage(args: &CoverageArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("bad experiment config: {e}")))?;
    let report = run_coverage_study(&config)?;
    emit_report(&report, &args.out_dir)?;
    print!("{}", report.to_csv_string());
    Ok(())
}

fn cmd_ingest_check(args: &IngestArgs) -> Result<()> {
    let ingested = read_panel(&args.schema)?;
    println!(
        "ok: {} assets x {} intervals, {} characteristic columns, factors: {}",
        ingested.panel.p(),
        ingested.panel.n(),
        args.schema.k_x,
        ingested.factors.as_ref().map(|f| f.nrows()).unwrap_or(0)
    );
    Ok(())
}

fn cmd_example(args: &ExampleArgs) -> Result<()> {
    match args.kind.as_str() {
        "dgp" => {
            let config = DgpConfig::standard(200, 78, 2, 4, 0.5, 42);
            println!("{}", serde_json::to_string_pretty(&config)?);
        }
        _ => {
            let config = ExperimentConfig {
                dgp: DgpConfig::standard(200, 78, 2, 4, 0.0, 42),
                gamma_grid: vec![
                    GammaStrength::Fixed(0.0),
                    GammaStrength::InvKn,
                    GammaStrength::InvSqrtKn,
                    GammaStrength::Fixed(1.0),
                ],
                methods: vec![Method::CsBootstrap, Method::PluginNaive, Method::PluginFull],
                trials: 1000,
                b: 500,
                level: 0.95,
                factor_mode: FactorMode::Known,
                bias_correction: BiasCorrection::None,
                k_n: 78,
                target_l: 0,
                v: vec![1.0, 0.0],
                sieve: SieveBasisSpec { standardize: false, ..SieveBasisSpec::linear() },
                threshold_c_bar: 0.5,
                threshold_kind: ThresholdKind::Soft,
                align_to_truth: true,
                seed: 42,
                parallelism: 0,
            };
            println!("{}", serde_json::to_string_pretty(&config)?);
        }
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Ci(a) => cmd_ci(a),
        Command::Coverage(a) => cmd_coverage(a),
        Command::IngestCheck(a) => cmd_ingest_check(a),
        Command::ExampleConfig(a) => cmd_example(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
