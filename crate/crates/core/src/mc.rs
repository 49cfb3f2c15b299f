//! Monte Carlo checks of the limit theory for the lag-window estimator.
//!
//! [`run_experiment`] simulates `R` independent paths, estimates `Ĉ_N` on each
//! and collects
//!
//! - projections `(N/h)^{1/2} ∬(Ĉ_N - E*) f`, centred by the across-replication
//!   mean `E*`, compared with the variance `∬∬ L f f` of the Gaussian limit;
//! - normalized eigenvalue errors `(N/h)^{1/2}(λ̂_ℓ - λ_ℓ)` and eigenfunction
//!   deviations `(N/h)‖ŝ v̂_ℓ - v_ℓ‖²` against the exact eigensystem.
//!
//! [`bias_rate_check`] measures `‖E Ĉ_N - C‖` over a bandwidth grid and fits
//! its log-log slope; [`mse_curve`] tabulates `E‖Ĉ_N - C‖²` over a grid.
//!
//! Replication `r` draws from RNG stream `r` of `master_seed`. Replications are
//! computed in parallel, collected in index order, and reduced sequentially, so
//! a report does not depend on the worker count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LrcovError, Result};
use crate::estimator::{
    autocov_set, default_pilot_bandwidth, estimate_lrcov, plugin_bandwidth, EstimatorOptions,
};
use crate::fpca::{
    a_limit_at, align_sign, eigendecompose, eigenfunction_deviation_msd, eigenvalue_clt_params,
};
use crate::grid::{fourier_basis, l2_norm_surface, CurveSample, Grid, Surface};
use crate::kernels::{Bandwidth, KernelSpec};
use crate::simulate::{generate_replication, truth, DgpKind, DgpSpec, TruthSet};
use crate::stats::{correlation, ks_distance, moments, normal_quantile, weighted_slope};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "LRCOV_THREADS";

/// How the bandwidth is chosen for each replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HRule {
    Fixed(f64),
    /// `h = a N^b`.
    Power { a: f64, b: f64 },
    /// Plug-in bandwidth with an optional pilot (default `N^{1/5}`).
    Plugin { pilot: Option<f64> },
}

impl HRule {
    /// Bandwidth for a sample; only the plug-in rule looks at the data.
    pub fn bandwidth(&self, sample: &CurveSample, kernel: &KernelSpec, options: EstimatorOptions) -> Result<Bandwidth> {
        let n = sample.n_obs();
        match *self {
            HRule::Fixed(h) => Bandwidth::new(h),
            HRule::Power { a, b } => Bandwidth::new(a * (n as f64).powf(b)),
            HRule::Plugin { pilot } => {
                let pilot = Bandwidth::new(pilot.unwrap_or_else(|| default_pilot_bandwidth(n)))?;
                Bandwidth::new(plugin_bandwidth(sample, kernel, pilot, None, options)?.h_plugin)
            }
        }
    }

    /// Bandwidth when it does not depend on the data.
    pub fn deterministic(&self, n: usize) -> Option<f64> {
        match *self {
            HRule::Fixed(h) => Some(h),
            HRule::Power { a, b } => Some(a * (n as f64).powf(b)),
            HRule::Plugin { .. } => None,
        }
    }
}

impl fmt::Display for HRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HRule::Fixed(h) => write!(f, "fixed:{h}"),
            HRule::Power { a, b } => write!(f, "power:{a},{b}"),
            HRule::Plugin { pilot: None } => f.write_str("plugin"),
            HRule::Plugin { pilot: Some(p) } => write!(f, "plugin:{p}"),
        }
    }
}

impl FromStr for HRule {
    type Err = LrcovError;

    /// `fixed:H`, a bare number `H`, `power:A,B`, `plugin` or `plugin:PILOT`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| LrcovError::Config(format!("bad number '{t}' in bandwidth rule: {e}")))
        };
        let rule = match s.split_once(':') {
            None if s == "plugin" => HRule::Plugin { pilot: None },
            None => HRule::Fixed(num(&s)?),
            Some(("fixed", v)) => HRule::Fixed(num(v)?),
            Some(("plugin", v)) => HRule::Plugin { pilot: Some(num(v)?) },
            Some(("power", v)) => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| LrcovError::Config("power rule needs 'power:A,B'".into()))?;
                HRule::Power { a: num(a)?, b: num(b)? }
            }
            Some((other, _)) => return Err(LrcovError::Config(format!("unknown bandwidth rule '{other}'"))),
        };
        let bad = match rule {
            HRule::Fixed(h) => !(h > 0.0 && h.is_finite()),
            HRule::Power { a, b } => !(a > 0.0 && a.is_finite() && b.is_finite()),
            HRule::Plugin { pilot } => pilot.is_some_and(|p| !(p > 0.0 && p.is_finite())),
        };
        if bad {
            return Err(LrcovError::Config(format!("bandwidth rule '{s}' has non-positive parameters")));
        }
        Ok(rule)
    }
}

impl TryFrom<String> for HRule {
    type Error = LrcovError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HRule> for String {
    fn from(r: HRule) -> String {
        r.to_string()
    }
}

/// Test surface `f` for a projection `∬ Ĉ f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProjectionSpec {
    /// `f ≡ 1`.
    Constant,
    /// `f(t, s) = φ_j(t) φ_k(s)`, 1-based Fourier indices.
    FourierProduct { j: usize, k: usize },
    Custom { values: Vec<Vec<f64>> },
}

impl ProjectionSpec {
    pub fn surface(&self, grid: Grid) -> Result<Surface> {
        match self {
            ProjectionSpec::Constant => Ok(Surface::constant(grid.size(), 1.0)),
            ProjectionSpec::FourierProduct { j, k } => {
                if *j == 0 || *k == 0 {
                    return Err(LrcovError::Config("Fourier indices are 1-based".into()));
                }
                let basis = fourier_basis(grid, (*j).max(*k)).map_err(|e| LrcovError::Config(e.to_string()))?;
                Ok(basis[j - 1].outer(&basis[k - 1]))
            }
            ProjectionSpec::Custom { values } => {
                let s = Surface::from_rows(values).map_err(|e| LrcovError::Config(e.to_string()))?;
                if s.size() != grid.size() {
                    return Err(LrcovError::Config(format!(
                        "projection surface is {}x{} but the grid has {} points",
                        s.size(),
                        s.size(),
                        grid.size()
                    )));
                }
                Ok(s)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            ProjectionSpec::Constant => "constant".into(),
            ProjectionSpec::FourierProduct { j, k } => format!("fourier_{j}_{k}"),
            ProjectionSpec::Custom { .. } => "custom".into(),
        }
    }
}

fn default_projections() -> Vec<ProjectionSpec> {
    vec![ProjectionSpec::Constant]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// The process; its `seed` is replaced by `master_seed`.
    pub dgp: DgpSpec,
    pub kernel: KernelSpec,
    pub n: usize,
    pub grid_size: usize,
    pub h_rule: HRule,
    pub replications: usize,
    #[serde(default = "default_projections")]
    pub projections: Vec<ProjectionSpec>,
    /// 1-based eigen levels to track.
    #[serde(default)]
    pub eigen_levels: Vec<usize>,
    pub master_seed: u64,
    #[serde(default)]
    pub options: EstimatorOptions,
    /// Bandwidths for an accompanying bias-rate check.
    #[serde(default)]
    pub bias_h_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub bias_replications: Option<usize>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<Grid> {
        let grid = Grid::new(self.grid_size).map_err(|e| LrcovError::Config(e.to_string()))?;
        if self.replications < 2 {
            return Err(LrcovError::Config("at least 2 replications are required".into()));
        }
        if self.n < 2 {
            return Err(LrcovError::Config("sample size must be at least 2".into()));
        }
        self.dgp.validate(grid)?;
        for &l in &self.eigen_levels {
            if l == 0 || l > self.grid_size {
                return Err(LrcovError::Config(format!("eigen level {l} outside 1..={}", self.grid_size)));
            }
        }
        for p in &self.projections {
            p.surface(grid)?;
        }
        Ok(grid)
    }

    fn dgp_for_run(&self) -> DgpSpec {
        DgpSpec { seed: self.master_seed, ..self.dgp.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionReport {
    pub label: String,
    pub mean: f64,
    pub variance: f64,
    /// Mean square of the projection centred at the true `C` instead of `E*`.
    pub variance_truth_centered: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_distance: f64,
    pub predicted_variance: f64,
    pub variance_ratio: f64,
    /// Approximate standard errors of the variance, skewness and kurtosis.
    pub variance_se: f64,
    pub skewness_se: f64,
    pub kurtosis_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenLevelReport {
    pub level: usize,
    pub lambda_true: f64,
    pub mean_estimate: f64,
    pub empirical_mean_error: f64,
    pub empirical_sd: f64,
    pub predicted_sd: f64,
    pub predicted_mean_shift: f64,
    pub sd_ratio: f64,
    pub eigenfunction_msd_empirical: f64,
    pub eigenfunction_msd_predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeInfo {
    pub workers: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub replications: usize,
    pub n: usize,
    pub grid_size: usize,
    pub kernel: KernelSpec,
    pub h_rule: HRule,
    pub mean_bandwidth: f64,
    pub a_limit: Option<f64>,
    pub projections: Vec<ProjectionReport>,
    pub eigen_levels: Vec<EigenLevelReport>,
    /// Correlations of the normalized eigenvalue errors, indexed like `eigen_levels`.
    pub eigen_error_correlation: Vec<Vec<f64>>,
    pub bias_rate: Option<BiasRateReport>,
    pub runtime: RuntimeInfo,
}

impl McReport {
    /// The report with run-time metadata blanked, for reproducibility checks.
    pub fn statistics_only(&self) -> McReport {
        McReport { runtime: RuntimeInfo { workers: 0, seconds: 0.0 }, ..self.clone() }
    }
}

/// Raw per-replication output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub h: f64,
    /// `∬ Ĉ_N f` for each projection.
    pub projections: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// `(N/h)‖ŝ v̂_ℓ - v_ℓ‖²` for each tracked level.
    pub eigenfunction_deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOutcome {
    pub report: McReport,
    pub records: Vec<ReplicationRecord>,
}

/// Worker count: explicit request, else `LRCOV_THREADS`, else all cores.
pub fn resolve_workers(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .filter(|w| *w > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn par_map<T: Send>(workers: usize, count: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LrcovError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|r| f(r).map_err(|e| LrcovError::Replication { replication: r, source: Box::new(e) }))
            .collect()
    })
}

/// `∬∬ L(t,s,t',s') f(t,s) f(t',s')`, contracted as
/// `∫K² [ (∬Cf)² + Σ C ∘ (f C fᵀ) / G⁴ ]` without forming `L`.
pub fn predicted_projection_variance(c: &Surface, kernel: &KernelSpec, f: &Surface) -> Result<f64> {
    let first = c.integral_against(f)?;
    let g4 = (c.size() as f64).powi(4);
    let fcf = &f.0 * &c.0 * f.0.transpose();
    let second = c.0.dot(&fcf) / g4;
    Ok(kernel.ksq_integral() * (first * first + second))
}

fn replication(
    spec: &ExperimentSpec,
    dgp: &DgpSpec,
    grid: Grid,
    tests: &[Surface],
    truth: &TruthSet,
    r: usize,
) -> Result<ReplicationRecord> {
    let sample = generate_replication(dgp, spec.n, grid, r as u64)?;
    let h = spec.h_rule.bandwidth(&sample, &spec.kernel, spec.options)?;
    let est = estimate_lrcov(&sample, &spec.kernel, h, spec.options)?;
    let projections = tests
        .iter()
        .map(|f| est.surface.integral_against(f))
        .collect::<Result<Vec<_>>>()?;
    let (eigenvalues, eigenfunction_deviation) = if spec.eigen_levels.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let eig = eigendecompose(&est.surface)?;
        let scale = spec.n as f64 / h.value();
        let mut lams = Vec::with_capacity(spec.eigen_levels.len());
        let mut devs = Vec::with_capacity(spec.eigen_levels.len());
        for &l in &spec.eigen_levels {
            let v_true = &truth.eigen.eigenfunctions[l - 1];
            let aligned = align_sign(&eig.eigenfunctions[l - 1], v_true)?;
            let diff = crate::grid::Curve(aligned.0 - &v_true.0);
            lams.push(eig.eigenvalues[l - 1]);
            devs.push(scale * diff.norm().powi(2));
        }
        (lams, devs)
    };
    Ok(ReplicationRecord { index: r, h: h.value(), projections, eigenvalues, eigenfunction_deviation })
}

/// Run every replication of `spec` and summarize.
pub fn run_experiment(spec: &ExperimentSpec, workers: Option<usize>) -> Result<McOutcome> {
    let started = Instant::now();
    let grid = spec.validate()?;
    let workers = resolve_workers(workers);
    let truth = truth(&spec.dgp, grid, &spec.kernel)?;
    let tests = spec
        .projections
        .iter()
        .map(|p| p.surface(grid))
        .collect::<Result<Vec<_>>>()?;
    let dgp = spec.dgp_for_run();

    let records = par_map(workers, spec.replications, |r| replication(spec, &dgp, grid, &tests, &truth, r))?;

    let n = spec.n as f64;
    let big_r = records.len() as f64;
    let mean_h = records.iter().map(|r| r.h).sum::<f64>() / big_r;

    let mut projections = Vec::with_capacity(tests.len());
    for (p, f) in tests.iter().enumerate() {
        let raw: Vec<f64> = records.iter().map(|r| r.projections[p]).collect();
        let centre = raw.iter().sum::<f64>() / big_r;
        let target = truth.c.integral_against(f)?;
        let z: Vec<f64> = records.iter().map(|r| (n / r.h).sqrt() * (r.projections[p] - centre)).collect();
        let zt: Vec<f64> = records.iter().map(|r| (n / r.h).sqrt() * (r.projections[p] - target)).collect();
        let m = moments(&z);
        let predicted = predicted_projection_variance(&truth.c, &spec.kernel, f)?;
        let sd = m.variance.sqrt();
        let ks = if sd > 0.0 && z.len() >= 8 { ks_distance(&z, m.mean, sd)? } else { f64::NAN };
        projections.push(ProjectionReport {
            label: spec.projections[p].label(),
            mean: centre,
            variance: m.variance,
            variance_truth_centered: zt.iter().map(|x| x * x).sum::<f64>() / big_r,
            skewness: m.skewness,
            excess_kurtosis: m.excess_kurtosis,
            ks_distance: ks,
            predicted_variance: predicted,
            variance_ratio: m.variance / predicted,
            variance_se: m.variance * ((2.0 / (big_r - 1.0)) + m.excess_kurtosis / big_r).max(0.0).sqrt(),
            skewness_se: (6.0 / big_r).sqrt(),
            kurtosis_se: (24.0 / big_r).sqrt(),
        });
    }

    let a_limit = a_limit_at(spec.n, mean_h, &spec.kernel);
    let mut eigen_levels = Vec::with_capacity(spec.eigen_levels.len());
    let mut errors: Vec<Vec<f64>> = Vec::with_capacity(spec.eigen_levels.len());
    for (i, &l) in spec.eigen_levels.iter().enumerate() {
        let lambda = truth.eigen.eigenvalues[l - 1];
        let e: Vec<f64> = records.iter().map(|r| (n / r.h).sqrt() * (r.eigenvalues[i] - lambda)).collect();
        let m = moments(&e);
        let (predicted_sd, predicted_mean_shift, msd_pred) = match eigenvalue_clt_params(
            &truth.eigen,
            &spec.kernel,
            truth.f_bias.as_ref(),
            a_limit.unwrap_or(0.0),
            l,
        ) {
            Ok(p) => {
                let msd = eigenfunction_deviation_msd(&truth.eigen, &spec.kernel, l, truth.eigen.len())
                    .map(|d| d.mean)
                    .unwrap_or(f64::NAN);
                (p.sd, p.mean_shift, msd)
            }
            Err(LrcovError::Separation { .. }) => (f64::NAN, f64::NAN, f64::NAN),
            Err(err) => return Err(err),
        };
        let mean_estimate = records.iter().map(|r| r.eigenvalues[i]).sum::<f64>() / big_r;
        let msd_emp = records.iter().map(|r| r.eigenfunction_deviation[i]).sum::<f64>() / big_r;
        let sd = m.variance.sqrt();
        eigen_levels.push(EigenLevelReport {
            level: l,
            lambda_true: lambda,
            mean_estimate,
            empirical_mean_error: m.mean,
            empirical_sd: sd,
            predicted_sd,
            predicted_mean_shift,
            sd_ratio: sd / predicted_sd,
            eigenfunction_msd_empirical: msd_emp,
            eigenfunction_msd_predicted: msd_pred,
        });
        errors.push(e);
    }
    let eigen_error_correlation = errors
        .iter()
        .map(|a| errors.iter().map(|b| correlation(a, b)).collect())
        .collect();

    let bias_rate = match &spec.bias_h_grid {
        Some(h_grid) => Some(bias_rate_check(
            &BiasRateSpec {
                dgp: spec.dgp.clone(),
                kernel: spec.kernel,
                n: spec.n,
                grid_size: spec.grid_size,
                h_grid: h_grid.clone(),
                replications: spec.bias_replications.unwrap_or(spec.replications),
                master_seed: spec.master_seed,
                options: BiasRateSpec::default_options(),
            },
            Some(workers),
        )?),
        None => None,
    };

    let report = McReport {
        replications: records.len(),
        n: spec.n,
        grid_size: spec.grid_size,
        kernel: spec.kernel,
        h_rule: spec.h_rule,
        mean_bandwidth: mean_h,
        a_limit,
        projections,
        eigen_levels,
        eigen_error_correlation,
        bias_rate,
        runtime: RuntimeInfo { workers, seconds: started.elapsed().as_secs_f64() },
    };
    Ok(McOutcome { report, records })
}

/// Standardized normal quantile-quantile points `(theoretical, empirical)`.
pub fn qq_points(xs: &[f64]) -> Vec<(f64, f64)> {
    let m = moments(xs);
    let sd = m.variance.sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let q = normal_quantile((i as f64 + 0.5) / n).unwrap_or(f64::NAN);
            (q, if sd > 0.0 { (x - m.mean) / sd } else { 0.0 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasRateSpec {
    pub dgp: DgpSpec,
    pub kernel: KernelSpec,
    pub n: usize,
    pub grid_size: usize,
    pub h_grid: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default = "BiasRateSpec::default_options")]
    pub options: EstimatorOptions,
}

impl BiasRateSpec {
    /// The simulated processes have mean zero, so the bias check skips centring
    /// and uses the `N - |i|` divisor: `E γ̂_i = γ_i` exactly and `E Ĉ_N - C` is
    /// the pure lag-window bias `Σ (K(i/h) - 1) γ_i`.
    pub fn default_options() -> EstimatorOptions {
        EstimatorOptions { centered: false, unbiased: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRateReport {
    pub h_grid: Vec<f64>,
    /// `‖mean_r Ĉ_N - C‖` at each bandwidth.
    pub errors: Vec<f64>,
    /// Monte Carlo standard error of that norm (L² norm of the pointwise errors).
    pub noise_se: Vec<f64>,
    /// Ordinary least-squares slope of `log error` on `log h`.
    pub ols_slope: f64,
    /// Slope with inverse-variance weights `(error/noise_se)²` from the delta method.
    pub wls_slope: f64,
    pub expected_slope: f64,
    /// `h^q ‖mean - C‖`, which should approach `‖F‖`.
    pub scaled_errors: Vec<f64>,
    pub f_norm: f64,
    pub no_bias_detected: bool,
}

/// Per-replication lag-window estimates at every bandwidth of a grid.
fn bandwidth_sweep(
    dgp: &DgpSpec,
    kernel: &KernelSpec,
    n: usize,
    grid: Grid,
    h_grid: &[f64],
    replications: usize,
    seed: u64,
    options: EstimatorOptions,
    workers: Option<usize>,
) -> Result<Vec<Vec<Surface>>> {
    let hs = h_grid.iter().map(|h| Bandwidth::new(*h)).collect::<Result<Vec<_>>>()?;
    let max_lag = hs.iter().map(|h| kernel.max_lag(h.value())).max().unwrap_or(0);
    let dgp = DgpSpec { seed, ..dgp.clone() };
    par_map(resolve_workers(workers), replications, |r| {
        let sample = generate_replication(&dgp, n, grid, r as u64)?;
        let set = autocov_set(&sample, max_lag, options);
        hs.iter().map(|h| set.lag_window_sum(kernel, *h)).collect()
    })
}

/// Mean surface and L² standard error of that mean for each bandwidth.
fn sweep_means(sweep: &[Vec<Surface>], h_count: usize) -> Vec<(Surface, f64)> {
    let r = sweep.len() as f64;
    (0..h_count)
        .map(|k| {
            let g = sweep[0][k].size();
            let mut mean = Surface::zeros(g);
            for rep in sweep {
                mean = mean.add(&rep[k]);
            }
            mean = mean.scale(1.0 / r);
            let mut sq = 0.0;
            for rep in sweep {
                sq += l2_norm_surface(&rep[k].sub(&mean)).powi(2);
            }
            let se = (sq / (r - 1.0) / r).sqrt();
            (mean, se)
        })
        .collect()
}

/// Fit the decay of `‖E Ĉ_N - C‖` in `h`; the expected slope is `-q`.
pub fn bias_rate_check(spec: &BiasRateSpec, workers: Option<usize>) -> Result<BiasRateReport> {
    if spec.h_grid.len() < 3 {
        return Err(LrcovError::Config("bias-rate check needs at least 3 bandwidths".into()));
    }
    if spec.replications < 2 {
        return Err(LrcovError::Config("bias-rate check needs at least 2 replications".into()));
    }
    let q = spec.kernel.char_exponent().finite().ok_or_else(|| {
        LrcovError::Unsupported("bias rate is undefined for the flat-top kernel".into())
    })?;
    if matches!(spec.dgp.kind, DgpKind::Far1 { .. }) {
        return Err(LrcovError::Unsupported("bias-rate check needs a finite-memory (iid or moving-average) process".into()));
    }
    let grid = Grid::new(spec.grid_size).map_err(|e| LrcovError::Config(e.to_string()))?;
    let truth = truth(&spec.dgp, grid, &spec.kernel)?;
    let sweep = bandwidth_sweep(
        &spec.dgp,
        &spec.kernel,
        spec.n,
        grid,
        &spec.h_grid,
        spec.replications,
        spec.master_seed,
        spec.options,
        workers,
    )?;
    let summaries = sweep_means(&sweep, spec.h_grid.len());
    let errors: Vec<f64> = summaries.iter().map(|(m, _)| l2_norm_surface(&m.sub(&truth.c))).collect();
    let noise_se: Vec<f64> = summaries.iter().map(|(_, se)| *se).collect();
    let log_h: Vec<f64> = spec.h_grid.iter().map(|h| h.ln()).collect();
    let log_e: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let ols_slope = weighted_slope(&log_h, &log_e, &vec![1.0; log_h.len()]);
    let weights: Vec<f64> = errors
        .iter()
        .zip(&noise_se)
        .map(|(e, se)| if *se > 0.0 { (e / se).powi(2) } else { 1.0 })
        .collect();
    let wls_slope = weighted_slope(&log_h, &log_e, &weights);
    let f_norm = truth.f_bias.as_ref().map(|f| l2_norm_surface(&f.surface)).unwrap_or(0.0);
    Ok(BiasRateReport {
        scaled_errors: errors.iter().zip(&spec.h_grid).map(|(e, h)| e * h.powf(q)).collect(),
        no_bias_detected: errors.iter().zip(&noise_se).all(|(e, se)| *e < 3.0 * se),
        h_grid: spec.h_grid.clone(),
        errors,
        noise_se,
        ols_slope,
        wls_slope,
        expected_slope: -q,
        f_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseCurve {
    pub h_grid: Vec<f64>,
    /// Monte Carlo `E‖Ĉ_N - C‖²`.
    pub mse: Vec<f64>,
}

impl MseCurve {
    /// Smallest Monte Carlo MSE and its bandwidth.
    pub fn minimum(&self) -> (f64, f64) {
        self.h_grid
            .iter()
            .zip(&self.mse)
            .fold((f64::NAN, f64::INFINITY), |best, (h, m)| if *m < best.1 { (*h, *m) } else { best })
    }
}

/// Monte Carlo mean integrated squared error over a bandwidth grid, with common
/// random numbers across bandwidths.
pub fn mse_curve(spec: &BiasRateSpec, workers: Option<usize>) -> Result<MseCurve> {
    if spec.h_grid.is_empty() || spec.replications == 0 {
        return Err(LrcovError::Config("MSE curve needs bandwidths and replications".into()));
    }
    let grid = Grid::new(spec.grid_size).map_err(|e| LrcovError::Config(e.to_string()))?;
    let truth = truth(&spec.dgp, grid, &spec.kernel)?;
    let sweep = bandwidth_sweep(
        &spec.dgp,
        &spec.kernel,
        spec.n,
        grid,
        &spec.h_grid,
        spec.replications,
        spec.master_seed,
        spec.options,
        workers,
    )?;
    let r = sweep.len() as f64;
    let mse = (0..spec.h_grid.len())
        .map(|k| sweep.iter().map(|rep| l2_norm_surface(&rep[k].sub(&truth.c)).powi(2)).sum::<f64>() / r)
        .collect();
    Ok(MseCurve { h_grid: spec.h_grid.clone(), mse })
}
