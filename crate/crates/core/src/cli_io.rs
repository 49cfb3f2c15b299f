//! Command-line surface: CSV ingestion, JSON configuration and the five
//! batch commands.
//!
//! Data files hold one curve per row (time runs down the file) and one grid
//! point per column. The column count defines the grid; nothing is resampled.
//!
//! Exit codes: 0 success, 2 data parse, 3 configuration, 4 numeric contract,
//! 5 statistical precondition.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{LrcovError, Result};
use crate::estimator::{
    default_pilot_bandwidth, estimate_lrcov, plugin_bandwidth, project_psd, EstimatorOptions, LrcovEstimate,
    PluginBandwidth,
};
use crate::fpca::{eigendecompose, eigenvalue_ci};
use crate::grid::{l2_norm_surface, CurveSample, Grid, Surface};
use crate::kernels::{Bandwidth, KernelSpec};
use crate::mc::{qq_points, run_experiment, ExperimentSpec, HRule, McOutcome};
use crate::simulate::{generate, truth, DgpSpec};

const AFTER_HELP: &str = "Data files are comma-separated with one curve per row and one grid point \
per column, optionally preceded by a single header row. The environment variable LRCOV_THREADS caps \
the number of worker threads used by mc-verify.\n\nExit codes: 0 success, 2 data parse error, \
3 invalid configuration, 4 numeric failure, 5 statistical precondition violated.";

#[derive(Debug, Parser)]
#[command(name = "lrcov", version, about = "Long-run covariance estimation for functional time series", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the long-run covariance surface and write it as a GxG CSV.
    Estimate(CommonArgs),
    /// Principal components of the estimate with eigenvalue confidence intervals.
    Fpca(CommonArgs),
    /// Plug-in bandwidth for a data file.
    Bandwidth(CommonArgs),
    /// Simulate a functional time series and write its exact second-order structure.
    Simulate(CommonArgs),
    /// Run a Monte Carlo experiment from a JSON specification.
    McVerify(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Input CSV (N rows by G columns).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// bartlett, parzen, tukey-hanning or flat-top:RHO.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Bandwidth rule: H, fixed:H, power:A,B, plugin or plugin:PILOT.
    #[arg(long)]
    pub h: Option<String>,
    /// Divide lag-i autocovariances by N - |i| instead of N.
    #[arg(long)]
    pub unbiased: bool,
    /// Clip negative eigenvalues of the estimate.
    #[arg(long)]
    pub psd: bool,
    /// Number of principal components.
    #[arg(long)]
    pub p: Option<usize>,
    /// Confidence level of the eigenvalue intervals.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// JSON configuration of `estimate`, `fpca` and `bandwidth`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub kernel: Option<KernelSpec>,
    pub h: Option<HRule>,
    pub unbiased: Option<bool>,
    pub centered: Option<bool>,
    pub psd: Option<bool>,
    pub p: Option<usize>,
    pub level: Option<f64>,
    pub m_trunc: Option<usize>,
    pub seed: Option<u64>,
}

/// Fully resolved settings, recorded in every metadata file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub kernel: KernelSpec,
    pub h: HRule,
    pub options: EstimatorOptions,
    pub psd: bool,
    pub p: usize,
    pub level: f64,
    pub m_trunc: Option<usize>,
    pub seed: Option<u64>,
}

/// JSON configuration of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    pub grid_size: usize,
    /// Kernel for the bias surface in the truth file.
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LrcovError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LrcovError::Config(format!("invalid config {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LrcovError::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn parse_cell(cell: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| LrcovError::Parse {
        row,
        column: Some(column),
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(LrcovError::Parse { row, column: Some(column), message: format!("'{cell}' is not finite") });
    }
    Ok(v)
}

/// Parse a curves-as-rows CSV. A first row that does not parse as numbers is
/// taken as a header. Rows and columns in errors are 1-based file positions.
pub fn read_curves_str(text: &str) -> Result<CurveSample> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| LrcovError::Parse { row, column: None, message: e.to_string() })?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        if row == 1 && record.iter().any(|c| c.parse::<f64>().is_err()) {
            width = Some(record.len());
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(LrcovError::Parse {
                    row,
                    column: None,
                    message: format!("expected {w} columns, found {}", record.len()),
                })
            }
            _ => {}
        }
        rows.push(record.iter().enumerate().map(|(j, c)| parse_cell(c, row, j + 1)).collect::<Result<_>>()?);
    }
    if rows.len() < 2 {
        return Err(LrcovError::Parse { row: rows.len(), column: None, message: format!("need at least 2 curves, found {}", rows.len()) });
    }
    CurveSample::from_rows(&rows).map_err(|e| LrcovError::Parse { row: 0, column: None, message: e.to_string() })
}

pub fn read_curves(path: &Path) -> Result<CurveSample> {
    let text = fs::read_to_string(path).map_err(|e| LrcovError::Io(format!("cannot read {}: {e}", path.display())))?;
    read_curves_str(&text)
}

/// Rows of numbers with shortest round-trip formatting.
pub fn write_rows(path: &Path, header: Option<&[&str]>, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LrcovError::Io(e.to_string()))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| LrcovError::Io(e.to_string()))?;
    }
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| LrcovError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_surface(path: &Path, s: &Surface) -> Result<()> {
    write_rows(path, None, s.0.row_iter().map(|r| r.iter().copied().collect()))
}

fn surface_rows(s: &Surface) -> Vec<Vec<f64>> {
    s.0.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn resolve(command: &str, args: &CommonArgs) -> Result<ResolvedConfig> {
    let cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let kernel = match &args.kernel {
        Some(k) => k.parse()?,
        None => cfg.kernel.unwrap_or(KernelSpec::Bartlett),
    };
    let h = match &args.h {
        Some(r) => r.parse()?,
        None => cfg.h.unwrap_or(HRule::Plugin { pilot: None }),
    };
    let level = args.level.or(cfg.level).unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(LrcovError::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let p = args.p.or(cfg.p).unwrap_or(1);
    if p == 0 {
        return Err(LrcovError::Config("p must be at least 1".into()));
    }
    Ok(ResolvedConfig {
        command: command.into(),
        data: args.data.clone().or(cfg.data),
        out: args.out.clone().or(cfg.out).unwrap_or_else(|| PathBuf::from(".")),
        kernel,
        h,
        options: EstimatorOptions {
            centered: cfg.centered.unwrap_or(true),
            unbiased: args.unbiased || cfg.unbiased.unwrap_or(false),
        },
        psd: args.psd || cfg.psd.unwrap_or(false),
        p,
        level,
        m_trunc: cfg.m_trunc,
        seed: args.seed.or(cfg.seed),
    })
}

fn load_data(cfg: &ResolvedConfig) -> Result<CurveSample> {
    let path = cfg.data.as_ref().ok_or_else(|| LrcovError::Config("no data file given (--data)".into()))?;
    read_curves(path)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LrcovError::Io(format!("cannot create {}: {e}", dir.display())))
}

/// Bandwidth from the configured rule, with the plug-in trace when used.
fn select_bandwidth(cfg: &ResolvedConfig, sample: &CurveSample) -> Result<(Bandwidth, Option<PluginBandwidth>)> {
    match cfg.h {
        HRule::Plugin { pilot } => {
            let pilot = Bandwidth::new(pilot.unwrap_or_else(|| default_pilot_bandwidth(sample.n_obs())))?;
            let trace = plugin_bandwidth(sample, &cfg.kernel, pilot, cfg.m_trunc, cfg.options)?;
            Ok((Bandwidth::new(trace.h_plugin)?, Some(trace)))
        }
        rule => Ok((rule.bandwidth(sample, &cfg.kernel, cfg.options)?, None)),
    }
}

fn estimate_for(cfg: &ResolvedConfig, sample: &CurveSample) -> Result<(LrcovEstimate, Option<PluginBandwidth>)> {
    let (h, trace) = select_bandwidth(cfg, sample)?;
    let mut est = estimate_lrcov(sample, &cfg.kernel, h, cfg.options)?;
    if cfg.psd {
        est = project_psd(&est)?;
    }
    Ok((est, trace))
}

pub fn cmd_estimate(args: &CommonArgs) -> Result<()> {
    let cfg = resolve("estimate", args)?;
    let sample = load_data(&cfg)?;
    let (est, trace) = estimate_for(&cfg, &sample)?;
    prepare_out(&cfg.out)?;
    write_surface(&cfg.out.join("lrcov.csv"), &est.surface)?;
    write_json(
        &cfg.out.join("metadata.json"),
        &json!({
            "config": cfg,
            "kernel": est.kernel,
            "h": est.bandwidth.value(),
            "n": sample.n_obs(),
            "grid_size": sample.grid().size(),
            "psd_applied": est.psd_projected,
            "bandwidth_selection": trace,
        }),
    )
}

pub fn cmd_fpca(args: &CommonArgs) -> Result<()> {
    let cfg = resolve("fpca", args)?;
    let sample = load_data(&cfg)?;
    let g = sample.grid().size();
    if cfg.p > g {
        return Err(LrcovError::Config(format!("p = {} exceeds the grid size {g}", cfg.p)));
    }
    let (est, trace) = estimate_for(&cfg, &sample)?;
    let eig = eigendecompose(&est.surface)?;
    let gaps = eig.gaps(cfg.p);
    eig.check_separation(cfg.p)?;
    prepare_out(&cfg.out)?;

    let h = est.bandwidth.value();
    let mut rows = Vec::with_capacity(cfg.p);
    for l in 1..=cfg.p {
        let (low, high) = match eigenvalue_ci(&eig, &cfg.kernel, sample.n_obs(), h, l, cfg.level) {
            Ok(ci) => (ci.low, ci.high),
            Err(LrcovError::Input(_)) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        rows.push(vec![l as f64, eig.eigenvalues[l - 1], low, high]);
    }
    write_rows(&cfg.out.join("eigenvalues.csv"), Some(&["ell", "lambda", "ci_low", "ci_high"]), rows)?;
    let header: Vec<String> = (1..=cfg.p).map(|l| format!("v{l}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        &cfg.out.join("eigenfunctions.csv"),
        Some(&header),
        (0..g).map(|t| (0..cfg.p).map(|l| eig.eigenfunctions[l].0[t]).collect()),
    )?;
    write_json(
        &cfg.out.join("metadata.json"),
        &json!({
            "config": cfg,
            "h": h,
            "n": sample.n_obs(),
            "grid_size": g,
            "psd_applied": est.psd_projected,
            "bandwidth_selection": trace,
            "eigenvalues": eig.eigenvalues,
            "separation": { "gaps": gaps, "passed": true },
        }),
    )
}

pub fn cmd_bandwidth(args: &CommonArgs) -> Result<()> {
    let mut cfg = resolve("bandwidth", args)?;
    let sample = load_data(&cfg)?;
    let pilot = match cfg.h {
        HRule::Plugin { pilot } => pilot,
        // a fixed or power rule supplies the pilot bandwidth
        rule => rule.deterministic(sample.n_obs()),
    };
    cfg.h = HRule::Plugin { pilot };
    let pilot = Bandwidth::new(pilot.unwrap_or_else(|| default_pilot_bandwidth(sample.n_obs())))?;
    let result = plugin_bandwidth(&sample, &cfg.kernel, pilot, cfg.m_trunc, cfg.options)?;
    prepare_out(&cfg.out)?;
    write_json(&cfg.out.join("bandwidth.json"), &result)?;
    write_json(&cfg.out.join("metadata.json"), &json!({ "config": cfg, "n": sample.n_obs(), "grid_size": sample.grid().size(), "result": result }))
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let path = args.config.as_ref().ok_or_else(|| LrcovError::Config("simulate needs --config".into()))?;
    let mut cfg: SimulateConfig = read_json(path)?;
    if let Some(seed) = args.seed {
        cfg.dgp.seed = seed;
    }
    if let Some(k) = &args.kernel {
        cfg.kernel = Some(k.parse()?);
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if cfg.n == 0 {
        return Err(LrcovError::Config("sample size must be positive".into()));
    }
    let grid = Grid::new(cfg.grid_size).map_err(|e| LrcovError::Config(e.to_string()))?;
    let kernel = cfg.kernel.unwrap_or(KernelSpec::Bartlett);
    let sample = generate(&cfg.dgp, cfg.n, grid)?;
    let t = truth(&cfg.dgp, grid, &kernel)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    prepare_out(&out)?;
    write_rows(&out.join("sample.csv"), None, sample.data().row_iter().map(|r| r.iter().copied().collect()))?;
    let gamma_norms: Vec<f64> = t.gammas.nonnegative().iter().map(l2_norm_surface).collect();
    write_json(
        &out.join("truth.json"),
        &json!({
            "C": surface_rows(&t.c),
            "gamma_norms": gamma_norms,
            "gamma_factors": t.gamma_factors,
            "long_run_factor": t.long_run_factor,
            "eigenvalues": t.eigen.eigenvalues,
            "C_integral": t.c.integral(),
            "Sigma_integral": t.noise_covariance.integral(),
            "F_norm": t.f_bias.as_ref().map(|f| l2_norm_surface(&f.surface)),
        }),
    )?;
    write_json(&out.join("metadata.json"), &json!({ "config": cfg, "kernel": kernel }))
}

pub fn cmd_mc_verify(args: &CommonArgs) -> Result<()> {
    let path = args.config.as_ref().ok_or_else(|| LrcovError::Config("mc-verify needs --config".into()))?;
    let mut spec: ExperimentSpec = read_json(path)?;
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    if let Some(k) = &args.kernel {
        spec.kernel = k.parse()?;
    }
    if let Some(h) = &args.h {
        spec.h_rule = h.parse()?;
    }
    if args.unbiased {
        spec.options.unbiased = true;
    }
    spec.validate()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let McOutcome { report, records } = run_experiment(&spec, None)?;
    prepare_out(&out)?;
    write_json(&out.join("report.json"), &report)?;

    let mut header = vec!["replication".to_string(), "h".to_string()];
    header.extend(spec.projections.iter().map(|p| format!("proj_{}", p.label())));
    header.extend(spec.eigen_levels.iter().map(|l| format!("lambda_{l}")));
    header.extend(spec.eigen_levels.iter().map(|l| format!("eigfun_dev_{l}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        &out.join("replications.csv"),
        Some(&header),
        records.iter().map(|r| {
            let mut row = vec![r.index as f64, r.h];
            row.extend(&r.projections);
            row.extend(&r.eigenvalues);
            row.extend(&r.eigenfunction_deviation);
            row
        }),
    )?;

    let n = spec.n as f64;
    for (i, p) in spec.projections.iter().enumerate() {
        let z: Vec<f64> = records.iter().map(|r| (n / r.h).sqrt() * r.projections[i]).collect();
        write_rows(
            &out.join(format!("qq_{}.csv", p.label())),
            Some(&["normal_quantile", "standardized_value"]),
            qq_points(&z).into_iter().map(|(a, b)| vec![a, b]),
        )?;
    }
    if let Some(b) = &report.bias_rate {
        write_rows(
            &out.join("bias_rate.csv"),
            Some(&["h", "log_h", "error", "log_error", "noise_se"]),
            b.h_grid.iter().zip(&b.errors).zip(&b.noise_se).map(|((h, e), se)| vec![*h, h.ln(), *e, e.ln(), *se]),
        )?;
    }
    write_json(&out.join("metadata.json"), &json!({ "config": spec, "runtime": report.runtime }))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Fpca(a) => cmd_fpca(a),
        Command::Bandwidth(a) => cmd_bandwidth(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::McVerify(a) => cmd_mc_verify(a),
    }
}
