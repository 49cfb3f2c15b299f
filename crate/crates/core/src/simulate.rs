//! Curve-valued processes with closed-form autocovariances.
//!
//! Innovations are finite Fourier expansions `ε(t) = Σ_j σ_j Z_j φ_j(t)` with
//! iid standard normal scores, so their covariance `Σ(t,s) = Σ_j σ_j² φ_j(t)φ_j(s)`
//! is exact on the grid. Scalar moving-average and autoregressive coefficients
//! act pointwise, which keeps every `γ_ℓ` and `C` a multiple of `Σ`.
//!
//! Random numbers come from ChaCha8 seeded with the 64-bit `seed`; replication
//! `r` of an experiment reads stream `r` of that generator, so replications can
//! be produced in any order or in parallel.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LrcovError, Result};
use crate::estimator::{bias_kernel, AutocovSet, BiasKernel, EstimatorOptions};
use crate::fpca::{eigendecompose, EigenSystem};
use crate::grid::{fourier_basis, CurveSample, Grid, Surface};
use crate::kernels::KernelSpec;

pub const DEFAULT_BURN_IN: usize = 200;
/// Relative tail at which the autoregressive autocovariance sum is truncated.
pub const AR_TAIL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianNoiseSpec {
    /// Standard deviations of the basis scores; the basis size is `sigmas.len()`.
    pub sigmas: Vec<f64>,
}

impl GaussianNoiseSpec {
    pub fn basis_size(&self) -> usize {
        self.sigmas.len()
    }

    /// `Σ(t, s) = Σ_j σ_j² φ_j(t) φ_j(s)`.
    pub fn covariance(&self, grid: Grid) -> Result<Surface> {
        let basis = fourier_basis(grid, self.basis_size())?;
        let mut out = Surface::zeros(grid.size());
        for (sigma, phi) in self.sigmas.iter().zip(&basis) {
            out = out.add(&phi.outer(phi).scale(sigma * sigma));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpKind {
    Iid,
    /// `X_j = ε_j + Σ_k θ_k ε_{j-k}`.
    Fma { theta: Vec<f64> },
    /// `X_j = ρ X_{j-1} + ε_j`.
    Far1 { rho: f64 },
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub noise: GaussianNoiseSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, sigmas: Vec<f64>, seed: u64) -> Self {
        Self { kind, noise: GaussianNoiseSpec { sigmas }, seed, burn_in: DEFAULT_BURN_IN }
    }

    pub fn validate(&self, grid: Grid) -> Result<()> {
        if self.noise.sigmas.is_empty() {
            return Err(LrcovError::Config("noise needs at least one basis function".into()));
        }
        if self.noise.basis_size() > grid.size() {
            return Err(LrcovError::Config(format!(
                "noise basis of {} functions exceeds the grid size {}",
                self.noise.basis_size(),
                grid.size()
            )));
        }
        if self.noise.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(LrcovError::Config("noise standard deviations must be finite and non-negative".into()));
        }
        match &self.kind {
            DgpKind::Iid => Ok(()),
            DgpKind::Fma { theta } if theta.iter().all(|t| t.is_finite()) => Ok(()),
            DgpKind::Fma { .. } => Err(LrcovError::Config("moving-average coefficients must be finite".into())),
            DgpKind::Far1 { rho } if rho.is_finite() && rho.abs() < 1.0 => Ok(()),
            DgpKind::Far1 { rho } => Err(LrcovError::Config(format!("autoregressive coefficient must satisfy |rho| < 1, got {rho}"))),
        }
    }
}

/// One path using stream 0 of the spec's seed.
pub fn generate(spec: &DgpSpec, n: usize, grid: Grid) -> Result<CurveSample> {
    generate_replication(spec, n, grid, 0)
}

/// Path number `replication` of the spec's seed.
pub fn generate_replication(spec: &DgpSpec, n: usize, grid: Grid, replication: u64) -> Result<CurveSample> {
    spec.validate(grid)?;
    if n == 0 {
        return Err(LrcovError::Config("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(replication);
    let basis = fourier_basis(grid, spec.noise.basis_size())?;
    // G x J loading matrix with columns σ_j φ_j
    let loading = DMatrix::from_fn(grid.size(), basis.len(), |g, j| spec.noise.sigmas[j] * basis[j].0[g]);
    let mut draw = |count: usize| -> DMatrix<f64> {
        let scores = DMatrix::from_fn(basis.len(), count, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&loading * scores).transpose()
    };

    let data = match &spec.kind {
        DgpKind::Iid => draw(n),
        DgpKind::Fma { theta } => {
            // ε_1..ε_N are drawn first so that θ = 0 reproduces the iid path
            let eps = draw(n);
            let m = theta.len();
            let pre = draw(m); // row r holds ε_{-r} (0-based: ε_0, ε_{-1}, ...)
            let innovation = |j: i64| {
                if j >= 0 {
                    eps.row(j as usize).into_owned()
                } else {
                    pre.row((-j - 1) as usize).into_owned()
                }
            };
            let mut out = eps.clone();
            for j in 0..n as i64 {
                let mut row = out.row_mut(j as usize);
                for (k, th) in theta.iter().enumerate() {
                    if *th != 0.0 {
                        row += innovation(j - k as i64 - 1) * *th;
                    }
                }
            }
            out
        }
        DgpKind::Far1 { rho } => {
            let total = spec.burn_in + n;
            let eps = draw(total);
            let mut out = DMatrix::zeros(n, grid.size());
            let mut state = eps.row(0).into_owned();
            for j in 0..total {
                if j > 0 {
                    state = state * *rho + eps.row(j);
                }
                if j >= spec.burn_in {
                    out.row_mut(j - spec.burn_in).copy_from(&state);
                }
            }
            out
        }
    };
    CurveSample::new(data)
}

/// Exact second-order structure of a process.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSet {
    pub gammas: AutocovSet,
    /// Scalar factors `γ_ℓ = factor_ℓ · Σ`.
    pub gamma_factors: Vec<f64>,
    /// `C = long_run_factor · Σ`.
    pub long_run_factor: f64,
    pub noise_covariance: Surface,
    pub c: Surface,
    pub eigen: EigenSystem,
    /// `None` for kernels with `q = ∞`.
    pub f_bias: Option<BiasKernel>,
}

fn scalar_autocov_factors(kind: &DgpKind) -> (Vec<f64>, f64) {
    match kind {
        DgpKind::Iid => (vec![1.0], 1.0),
        DgpKind::Fma { theta } => {
            let coeffs: Vec<f64> = std::iter::once(1.0).chain(theta.iter().copied()).collect();
            let m = theta.len();
            let factors = (0..=m)
                .map(|l| (0..=m - l).map(|k| coeffs[k] * coeffs[k + l]).sum())
                .collect();
            let total: f64 = coeffs.iter().sum();
            (factors, total * total)
        }
        DgpKind::Far1 { rho } => {
            let v0 = 1.0 / (1.0 - rho * rho);
            let mut factors = vec![v0];
            let r = rho.abs();
            let mut l = 1;
            // Σ_{ℓ>L} |ρ|^ℓ ℓ² bounds the tail of every weighted sum used here
            while r > 0.0 && r.powi(l) * (l as f64).powi(2) / (1.0 - r) > AR_TAIL_TOL * v0 {
                factors.push(rho.powi(l) * v0);
                l += 1;
            }
            (factors, 1.0 / (1.0 - rho).powi(2))
        }
    }
}

/// `γ_ℓ`, `C`, its eigensystem and the bias surface for `kernel`.
pub fn truth(spec: &DgpSpec, grid: Grid, kernel: &KernelSpec) -> Result<TruthSet> {
    spec.validate(grid)?;
    let sigma = spec.noise.covariance(grid)?;
    let (gamma_factors, long_run_factor) = scalar_autocov_factors(&spec.kind);
    let surfaces = gamma_factors.iter().map(|f| sigma.scale(*f)).collect();
    let gammas = AutocovSet::from_surfaces(surfaces, true, EstimatorOptions::default())?;
    let c = sigma.scale(long_run_factor);
    let eigen = eigendecompose(&c)?;
    let f_bias = match kernel.char_exponent().finite() {
        Some(_) => Some(bias_kernel(&gammas, kernel, gammas.max_lag().max(1))?),
        None => None,
    };
    Ok(TruthSet { gammas, gamma_factors, long_run_factor, noise_covariance: sigma, c, eigen, f_bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::autocov;
    use crate::grid::l2_norm_surface;
    use approx::assert_abs_diff_eq;

    fn grid(g: usize) -> Grid {
        Grid::new(g).unwrap()
    }

    #[test]
    fn zero_noise_gives_zero_curves() {
        for kind in [DgpKind::Iid, DgpKind::Fma { theta: vec![0.3, 0.2] }, DgpKind::Far1 { rho: 0.4 }] {
            let spec = DgpSpec::new(kind, vec![0.0, 0.0], 1);
            let s = generate(&spec, 30, grid(8)).unwrap();
            assert!(s.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_theta_reproduces_iid() {
        let iid = DgpSpec::new(DgpKind::Iid, vec![1.0, 0.5], 42);
        let fma = DgpSpec::new(DgpKind::Fma { theta: vec![0.0] }, vec![1.0, 0.5], 42);
        assert_eq!(generate(&iid, 50, grid(8)).unwrap(), generate(&fma, 50, grid(8)).unwrap());
    }

    #[test]
    fn reproducible_and_streams_differ() {
        let spec = DgpSpec::new(DgpKind::Far1 { rho: 0.5 }, vec![1.0, 1.0, 1.0], 9);
        let a = generate_replication(&spec, 40, grid(8), 3).unwrap();
        assert_eq!(a, generate_replication(&spec, 40, grid(8), 3).unwrap());
        assert_ne!(a, generate_replication(&spec, 40, grid(8), 4).unwrap());
    }

    #[test]
    fn invalid_specs() {
        let bad = DgpSpec::new(DgpKind::Far1 { rho: 1.0 }, vec![1.0], 0);
        assert!(matches!(generate(&bad, 10, grid(4)), Err(LrcovError::Config(_))));
        let ok = DgpSpec::new(DgpKind::Iid, vec![1.0], 0);
        assert!(generate(&ok, 0, grid(4)).is_err());
        let too_wide = DgpSpec::new(DgpKind::Iid, vec![1.0; 5], 0);
        assert!(generate(&too_wide, 10, grid(4)).is_err());
    }

    #[test]
    fn ma1_lag_one_autocovariance() {
        let spec = DgpSpec::new(DgpKind::Fma { theta: vec![0.5] }, vec![1.0], 123);
        let s = generate(&spec, 100_000, grid(1)).unwrap();
        let g1 = autocov(&s, 1, EstimatorOptions::default()).surface.get(0, 0);
        assert!((g1 - 0.5).abs() < 0.02, "{g1}");
    }

    #[test]
    fn truth_examples() {
        let g = grid(16);
        let sigma = GaussianNoiseSpec { sigmas: vec![1.0, 0.7, 0.3] }.covariance(g).unwrap();
        let k = KernelSpec::Bartlett;
        let iid = truth(&DgpSpec::new(DgpKind::Iid, vec![1.0, 0.7, 0.3], 0), g, &k).unwrap();
        assert!(iid.c.sub(&sigma).max_abs() < 1e-14);
        assert_eq!(iid.gammas.get(1).unwrap().max_abs(), 0.0);
        assert_eq!(iid.f_bias.as_ref().unwrap().surface.max_abs(), 0.0);

        let ma = truth(&DgpSpec::new(DgpKind::Fma { theta: vec![0.5] }, vec![1.0, 0.7, 0.3], 0), g, &k).unwrap();
        assert!(ma.c.sub(&sigma.scale(2.25)).max_abs() < 1e-13);
        assert_abs_diff_eq!(ma.c.integral(), 2.25 * sigma.integral(), epsilon = 1e-12);

        let ar = truth(&DgpSpec::new(DgpKind::Far1 { rho: 0.5 }, vec![1.0, 0.7, 0.3], 0), g, &k).unwrap();
        assert!(ar.c.sub(&sigma.scale(4.0)).max_abs() < 1e-13);
        let summed: f64 = ar.gamma_factors[0] + 2.0 * ar.gamma_factors[1..].iter().sum::<f64>();
        assert!((summed - 4.0).abs() < 1e-10);
    }

    #[test]
    fn fma_long_run_equals_sum_of_gammas() {
        let spec = DgpSpec::new(DgpKind::Fma { theta: vec![0.4, -0.3, 0.2] }, vec![1.0, 0.5], 0);
        let t = truth(&spec, grid(8), &KernelSpec::Parzen).unwrap();
        let mut sum = Surface::zeros(8);
        for lag in -3..=3 {
            sum = sum.add(&t.gammas.get(lag).unwrap());
        }
        assert!(sum.sub(&t.c).max_abs() <= 1e-14 * t.c.max_abs());
        // bias truncation past the memory does not change F
        let f_more = bias_kernel(&t.gammas, &KernelSpec::Parzen, 8).unwrap();
        assert_eq!(f_more.surface, t.f_bias.unwrap().surface);
    }

    #[test]
    fn fma_sample_gammas_match_truth() {
        let spec = DgpSpec::new(DgpKind::Fma { theta: vec![0.5, 0.25] }, vec![1.0, 0.6, 0.3], 2024);
        let g = grid(12);
        let s = generate(&spec, 100_000, g).unwrap();
        let t = truth(&spec, g, &KernelSpec::Bartlett).unwrap();
        for lag in 0..=2 {
            let est = autocov(&s, lag, EstimatorOptions::default()).surface;
            let exact = t.gammas.get(lag).unwrap();
            let rel = l2_norm_surface(&est.sub(&exact)) / l2_norm_surface(&exact);
            assert!(rel < 0.03, "lag {lag}: {rel}");
        }
    }

    #[test]
    fn fma_gammas_past_memory_shrink_at_root_n() {
        let spec = DgpSpec::new(DgpKind::Fma { theta: vec![0.5] }, vec![1.0], 77);
        let g = grid(1);
        // average over many paths to stabilize the ratio of typical magnitudes
        let rms = |n: usize| -> f64 {
            let reps = 200;
            let mut acc = 0.0;
            for r in 0..reps {
                let s = generate_replication(&spec, n, g, r).unwrap();
                for lag in 3..=6 {
                    acc += autocov(&s, lag, EstimatorOptions::default()).surface.get(0, 0).powi(2);
                }
            }
            (acc / (reps * 4) as f64).sqrt()
        };
        let ratio = rms(4000) / rms(1000);
        assert!((0.35..=0.72).contains(&ratio), "{ratio}");
    }

    #[test]
    fn far1_initialization_is_negligible() {
        let spec = DgpSpec::new(DgpKind::Far1 { rho: 0.9 }, vec![1.0], 5);
        assert!(0.9f64.powi(DEFAULT_BURN_IN as i32) < 1e-9);
        let s = generate(&spec, 10, grid(1)).unwrap();
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = DgpSpec::new(DgpKind::Fma { theta: vec![0.5] }, vec![1.0, 2.0], 17);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<DgpSpec>(&text).unwrap(), spec);
        let parsed: DgpSpec = serde_json::from_str(r#"{"kind":{"type":"far1","rho":0.3},"noise":{"sigmas":[1]}}"#).unwrap();
        assert_eq!(parsed.burn_in, DEFAULT_BURN_IN);
        assert!(serde_json::from_str::<DgpSpec>(r#"{"kind":{"type":"iid"},"noise":{"sigmas":[1]},"extra":1}"#).is_err());
    }
}
