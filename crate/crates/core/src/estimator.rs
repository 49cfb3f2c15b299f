//! Lag-window estimation of the long-run covariance kernel.
//!
//! ```text
//! Ĉ_N(t,s) = Σ_i K(i/h) γ̂_i(t,s)
//! γ̂_i(t,s) = (1/D_i) Σ_j (X_j(t) - x̄(t)) (X_{j+i}(s) - x̄(s)),   i ≥ 0
//! γ̂_{-i}(t,s) = γ̂_i(s,t)
//! ```
//!
//! with `D_i = N` (default) or `N - |i|` (unbiased). Only lags with
//! `|i| ≤ min(N - 1, floor(c h))` carry weight. The fast path forms each lag as
//! one cross-product of shifted, centered data blocks and accumulates the
//! weighted sum in place, so at most one lag surface is alive at a time.
//!
//! The module also houses the bias surface `F = κ Σ |ℓ|^q γ_ℓ`, the limiting
//! covariance `L` of the normalized estimation error, the asymptotic MSE and
//! its minimizing bandwidth, a plug-in bandwidth, and eigenvalue clipping.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{LrcovError, Result};
use crate::grid::{l2_norm_surface, CurveSample, Quartic, Surface};
use crate::kernels::{Bandwidth, KernelSpec};

/// Relative tolerance for treating a surface as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// Subtract the sample mean curve before forming lag products.
    pub centered: bool,
    /// Divide lag `i` by `N - |i|` instead of `N`.
    pub unbiased: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { centered: true, unbiased: false }
    }
}

impl EstimatorOptions {
    pub fn unbiased() -> Self {
        Self { centered: true, unbiased: true }
    }

    fn divisor(&self, n: usize, lag: usize) -> f64 {
        if self.unbiased {
            (n - lag) as f64
        } else {
            n as f64
        }
    }
}

/// A single empirical autocovariance surface.
#[derive(Debug, Clone, PartialEq)]
pub struct LagAutocov {
    pub surface: Surface,
    /// `|i| ≥ N`: the surface is zero by convention.
    pub beyond_sample: bool,
}

/// Autocovariance surfaces for lags `0..=max_lag`; negative lags are transposes.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocovSet {
    surfaces: Vec<Surface>,
    /// Lags past `max_lag` are exactly zero (exhausted sample or finite-memory truth).
    zero_beyond: bool,
    pub options: EstimatorOptions,
}

impl AutocovSet {
    /// Wrap known autocovariances, e.g. the exact ones of a simulated process.
    pub fn from_surfaces(surfaces: Vec<Surface>, zero_beyond: bool, options: EstimatorOptions) -> Result<Self> {
        let g = surfaces
            .first()
            .ok_or_else(|| LrcovError::Input("autocovariance set needs at least lag 0".into()))?
            .size();
        if let Some(bad) = surfaces.iter().find(|s| s.size() != g) {
            return Err(LrcovError::Dimension { expected: g, found: bad.size() });
        }
        Ok(Self { surfaces, zero_beyond, options })
    }

    pub fn max_lag(&self) -> usize {
        self.surfaces.len() - 1
    }

    pub fn grid_size(&self) -> usize {
        self.surfaces[0].size()
    }

    /// `γ_i` for any integer lag, or `None` when the lag was not computed.
    pub fn get(&self, lag: i64) -> Option<Surface> {
        let a = lag.unsigned_abs() as usize;
        match self.surfaces.get(a) {
            Some(s) if lag >= 0 => Some(s.clone()),
            Some(s) => Some(s.transpose()),
            None if self.zero_beyond => Some(Surface::zeros(self.grid_size())),
            None => None,
        }
    }

    pub fn nonnegative(&self) -> &[Surface] {
        &self.surfaces
    }

    /// `Σ_i K(i/h) γ_i` over the stored lags.
    pub fn lag_window_sum(&self, kernel: &KernelSpec, h: Bandwidth) -> Result<Surface> {
        let max = kernel.max_lag(h.value());
        if max > self.max_lag() && !self.zero_beyond {
            return Err(LrcovError::Input(format!(
                "bandwidth needs lags up to {max} but only {} were computed",
                self.max_lag()
            )));
        }
        let g = self.grid_size();
        let mut half = &self.surfaces[0].0 * (0.5 * kernel.weight(0, h.value()));
        for lag in 1..=max.min(self.max_lag()) {
            let w = kernel.weight(lag as i64, h.value());
            if w != 0.0 {
                half += &self.surfaces[lag].0 * w;
            }
        }
        debug_assert_eq!(half.nrows(), g);
        Ok(symmetric_sum(half))
    }
}

/// `A + Aᵀ`, exactly symmetric in floating point.
fn symmetric_sum(a: DMatrix<f64>) -> Surface {
    let t = a.transpose();
    Surface(a + t)
}

fn prepared_data(sample: &CurveSample, options: EstimatorOptions) -> DMatrix<f64> {
    if options.centered {
        sample.centered()
    } else {
        sample.data().clone()
    }
}

/// Non-normalized lag product `Σ_j Y_j Y_{j+lag}ᵀ`.
fn lag_product(y: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let n = y.nrows();
    let head = y.rows(0, n - lag);
    let tail = y.rows(lag, n - lag);
    head.transpose() * tail
}

/// Empirical autocovariance at integer lag `lag`.
pub fn autocov(sample: &CurveSample, lag: i64, options: EstimatorOptions) -> LagAutocov {
    let n = sample.n_obs();
    let a = lag.unsigned_abs() as usize;
    let g = sample.grid().size();
    if a >= n {
        return LagAutocov { surface: Surface::zeros(g), beyond_sample: true };
    }
    let y = prepared_data(sample, options);
    let m = lag_product(&y, a) / options.divisor(n, a);
    let surface = if lag >= 0 { Surface(m) } else { Surface(m.transpose()) };
    LagAutocov { surface, beyond_sample: false }
}

/// Autocovariances for lags `0..=min(max_lag, N - 1)`.
pub fn autocov_set(sample: &CurveSample, max_lag: usize, options: EstimatorOptions) -> AutocovSet {
    let n = sample.n_obs();
    let top = max_lag.min(n - 1);
    let y = prepared_data(sample, options);
    let surfaces = (0..=top)
        .map(|lag| Surface(lag_product(&y, lag) / options.divisor(n, lag)))
        .collect();
    AutocovSet { surfaces, zero_beyond: top == n - 1, options }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrcovEstimate {
    pub surface: Surface,
    pub kernel: KernelSpec,
    pub bandwidth: Bandwidth,
    pub n_obs: usize,
    pub options: EstimatorOptions,
    pub psd_projected: bool,
}

fn validate_sample(sample: &CurveSample) -> Result<()> {
    if sample.n_obs() < 2 {
        return Err(LrcovError::Input(format!("need at least 2 curves, got {}", sample.n_obs())));
    }
    Ok(())
}

/// Lag-window estimate `Ĉ_N` by weighted accumulation of lag cross-products.
pub fn estimate_lrcov(
    sample: &CurveSample,
    kernel: &KernelSpec,
    h: Bandwidth,
    options: EstimatorOptions,
) -> Result<LrcovEstimate> {
    validate_sample(sample)?;
    let n = sample.n_obs();
    let y = prepared_data(sample, options);
    let max = kernel.max_lag(h.value()).min(n - 1);
    let mut half = lag_product(&y, 0) * (0.5 * kernel.weight(0, h.value()) / options.divisor(n, 0));
    for lag in 1..=max {
        let w = kernel.weight(lag as i64, h.value());
        if w == 0.0 {
            continue;
        }
        half += lag_product(&y, lag) * (w / options.divisor(n, lag));
    }
    Ok(LrcovEstimate {
        surface: symmetric_sum(half),
        kernel: *kernel,
        bandwidth: h,
        n_obs: n,
        options,
        psd_projected: false,
    })
}

/// Literal evaluation of the defining double sum over all lags `|i| < N`.
/// Quadratic in `N`; kept as a reference for [`estimate_lrcov`].
pub fn estimate_lrcov_naive(
    sample: &CurveSample,
    kernel: &KernelSpec,
    h: Bandwidth,
    options: EstimatorOptions,
) -> Result<LrcovEstimate> {
    validate_sample(sample)?;
    let n = sample.n_obs();
    let g = sample.grid().size();
    let x = sample.data();
    let mut mean = vec![0.0; g];
    if options.centered {
        for (t, m) in mean.iter_mut().enumerate() {
            *m = (0..n).map(|j| x[(j, t)]).sum::<f64>() / n as f64;
        }
    }
    let mut out = DMatrix::zeros(g, g);
    for i in -(n as i64 - 1)..=(n as i64 - 1) {
        let w = kernel.weight(i, h.value());
        if w == 0.0 {
            continue;
        }
        let d = options.divisor(n, i.unsigned_abs() as usize);
        // j ranges over 1..=N-i for i ≥ 0 and 1-i..=N for i < 0 (1-based)
        let (lo, hi) = if i >= 0 { (1, n as i64 - i) } else { (1 - i, n as i64) };
        for t in 0..g {
            for s in 0..g {
                let mut acc = 0.0;
                for j in lo..=hi {
                    let a = (j - 1) as usize;
                    let b = (j + i - 1) as usize;
                    acc += (x[(a, t)] - mean[t]) * (x[(b, s)] - mean[s]);
                }
                out[(t, s)] += w * acc / d;
            }
        }
    }
    Ok(LrcovEstimate {
        surface: Surface(out),
        kernel: *kernel,
        bandwidth: h,
        n_obs: n,
        options,
        psd_projected: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDensityEstimate {
    pub omega: f64,
    pub real_part: Surface,
    pub imag_part: Surface,
}

/// `f̂_ω = (1/2π) Σ_j K(j/h) e^{-iωj} γ̂_j`, split into real and imaginary surfaces.
pub fn estimate_spectral_density(
    sample: &CurveSample,
    kernel: &KernelSpec,
    h: Bandwidth,
    omega: f64,
    options: EstimatorOptions,
) -> Result<SpectralDensityEstimate> {
    validate_sample(sample)?;
    if !(0.0..2.0 * PI).contains(&omega) {
        return Err(LrcovError::Input(format!("frequency must lie in [0, 2π), got {omega}")));
    }
    let n = sample.n_obs();
    let g = sample.grid().size();
    let y = prepared_data(sample, options);
    let max = kernel.max_lag(h.value()).min(n - 1);
    // real part: γ_0 + Σ_{j≥1} K cos(ωj) (γ_j + γ_jᵀ)
    // imag part: -Σ_{j≥1} K sin(ωj) (γ_j - γ_jᵀ)
    let mut re_half = lag_product(&y, 0) * (0.5 * kernel.weight(0, h.value()) / options.divisor(n, 0));
    let mut im = DMatrix::<f64>::zeros(g, g);
    for lag in 1..=max {
        let w = kernel.weight(lag as i64, h.value());
        if w == 0.0 {
            continue;
        }
        let m = lag_product(&y, lag) * (w / options.divisor(n, lag));
        let (sin, cos) = (omega * lag as f64).sin_cos();
        re_half += &m * cos;
        if sin != 0.0 {
            im -= (&m - m.transpose()) * sin;
        }
    }
    let scale = 1.0 / (2.0 * PI);
    Ok(SpectralDensityEstimate {
        omega,
        real_part: symmetric_sum(re_half).scale(scale),
        imag_part: Surface(im * scale),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasKernel {
    pub surface: Surface,
    pub q_char: f64,
    pub max_lag: usize,
}

/// Leading bias surface `F = κ Σ_{|ℓ| ≤ M} |ℓ|^q γ_ℓ`, so that `E Ĉ_N - C ≈ h^{-q} F`.
pub fn bias_kernel(autocovs: &AutocovSet, kernel: &KernelSpec, max_lag: usize) -> Result<BiasKernel> {
    let q = kernel.char_exponent().finite().ok_or_else(|| {
        LrcovError::Unsupported("bias surface is undefined for the flat-top kernel (q = ∞)".into())
    })?;
    if max_lag == 0 {
        return Err(LrcovError::Input("bias truncation lag must be at least 1".into()));
    }
    let g = autocovs.grid_size();
    let mut half = DMatrix::zeros(g, g);
    for lag in 1..=max_lag {
        let gamma = autocovs.get(lag as i64).ok_or_else(|| {
            LrcovError::Input(format!("lag {lag} needed for the bias surface was not computed"))
        })?;
        half += gamma.0 * (lag as f64).powf(q);
    }
    Ok(BiasKernel {
        surface: symmetric_sum(half * kernel.kappa()),
        q_char: q,
        max_lag,
    })
}

/// Covariance `L(t,s,t',s') = [C(t,s)C(t',s') + C(t,t')C(s,s')] ∫K²` of the
/// Gaussian limit of `(N/h)^{1/2}(Ĉ_N - E Ĉ_N)`.
pub fn asymptotic_covariance_l(c: &Surface, kernel: &KernelSpec) -> Result<Quartic> {
    let k2 = kernel.ksq_integral();
    Quartic::from_fn(c.size(), |t, s, tp, sp| {
        (c.get(t, s) * c.get(tp, sp) + c.get(t, tp) * c.get(s, sp)) * k2
    })
}

/// `E‖Γ₁‖² = 2 (∬C)² ∫K²`.
pub fn gamma1_norm_sq(c: &Surface, kernel: &KernelSpec) -> f64 {
    2.0 * c.integral().powi(2) * kernel.ksq_integral()
}

fn finite_q(kernel: &KernelSpec) -> Result<f64> {
    kernel.char_exponent().finite().ok_or_else(|| {
        LrcovError::Unsupported(
            "flat-top kernel has q = ∞; use a fixed-rate bandwidth rule instead".into(),
        )
    })
}

/// `(h/N) E‖Γ₁‖² + h^{-2q} ‖F‖²`.
pub fn amse(c: &Surface, bias: &Surface, kernel: &KernelSpec, h: f64, n: usize) -> Result<f64> {
    let q = finite_q(kernel)?;
    if !(h > 0.0) || n == 0 {
        return Err(LrcovError::Input("amse needs h > 0 and N ≥ 1".into()));
    }
    let f2 = l2_norm_surface(bias).powi(2);
    Ok(h / n as f64 * gamma1_norm_sq(c, kernel) + h.powf(-2.0 * q) * f2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    pub h: f64,
    /// `c₀`; `None` on the fallback path.
    pub c0: Option<f64>,
    /// `‖F‖ = 0`: no interior minimum, `h = N^{1/(1+2q)}` returned instead.
    pub fallback: bool,
    /// `h^q > N`, outside the regime where the bias expansion is valid.
    pub rate_warning: bool,
}

/// Minimizer `h_opt = c₀ N^{1/(1+2q)}` of [`amse`], with
/// `c₀ = (q‖F‖²)^{1/(1+2q)} ((∬C)² ∫K²)^{-1/(1+2q)}`.
pub fn optimal_bandwidth(c: &Surface, bias: &Surface, kernel: &KernelSpec, n: usize) -> Result<BandwidthChoice> {
    let q = finite_q(kernel)?;
    if n == 0 {
        return Err(LrcovError::Input("N must be at least 1".into()));
    }
    let p = 1.0 / (1.0 + 2.0 * q);
    let rate = (n as f64).powf(p);
    let f2 = l2_norm_surface(bias).powi(2);
    let variance_const = c.integral().powi(2) * kernel.ksq_integral();
    if !(variance_const > 0.0) {
        return Err(LrcovError::Input(
            "∬C vanishes: the variance term is degenerate and no optimal bandwidth exists".into(),
        ));
    }
    let (h, c0, fallback) = if f2 > 0.0 {
        let c0 = (q * f2).powf(p) * variance_const.powf(-p);
        (c0 * rate, Some(c0), false)
    } else {
        (rate, None, true)
    };
    Ok(BandwidthChoice { h, c0, fallback, rate_warning: h.powf(q) > n as f64 })
}

/// Pilot bandwidth used by [`plugin_bandwidth`] when the caller has none: `N^{1/5}`.
pub fn default_pilot_bandwidth(n: usize) -> f64 {
    (n as f64).powf(0.2).max(1.0)
}

/// Bias truncation default: `floor(pilot)`, capped at `N^{1/2}`, at least 1.
pub fn default_bias_truncation(pilot: f64, n: usize) -> usize {
    let cap = (n as f64).sqrt().floor() as usize;
    (pilot.floor() as usize).min(cap).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginBandwidth {
    pub h_plugin: f64,
    pub c0_hat: Option<f64>,
    #[serde(rename = "F_norm_hat")]
    pub f_norm_hat: f64,
    #[serde(rename = "C_integral_hat")]
    pub c_integral_hat: f64,
    pub fallback_used: bool,
    pub clamped: bool,
    pub rate_warning: bool,
    pub pilot_h: f64,
    pub m_trunc: usize,
}

/// Data-driven bandwidth: estimate `F` and `C` from the sample (pilot bandwidth
/// for `Ĉ`, lags up to `m_trunc` for `F̂`), plug both into
/// [`optimal_bandwidth`], and clamp the result to `[1, N/2]`.
pub fn plugin_bandwidth(
    sample: &CurveSample,
    kernel: &KernelSpec,
    pilot: Bandwidth,
    m_trunc: Option<usize>,
    options: EstimatorOptions,
) -> Result<PluginBandwidth> {
    validate_sample(sample)?;
    finite_q(kernel)?;
    let n = sample.n_obs();
    let m = m_trunc.unwrap_or_else(|| default_bias_truncation(pilot.value(), n)).max(1);
    let set = autocov_set(sample, m.max(kernel.max_lag(pilot.value())), options);
    if set.nonnegative()[0].max_abs() == 0.0 {
        return Err(LrcovError::Input("sample has zero variance; bandwidth selection is degenerate".into()));
    }
    let c_hat = set.lag_window_sum(kernel, pilot)?;
    let f_hat = bias_kernel(&set, kernel, m)?;
    let c_integral_hat = c_hat.integral();
    let f_norm_hat = l2_norm_surface(&f_hat.surface);
    let q = kernel.char_exponent().finite().unwrap_or(1.0);
    let rule_of_thumb = (n as f64).powf(1.0 / (1.0 + 2.0 * q));
    let (raw, c0_hat, fallback_used) = match optimal_bandwidth(&c_hat, &f_hat.surface, kernel, n) {
        Ok(choice) => (choice.h, choice.c0, choice.fallback),
        Err(LrcovError::Input(_)) => (rule_of_thumb, None, true),
        Err(e) => return Err(e),
    };
    let upper = (n as f64 / 2.0).max(1.0);
    let h_plugin = raw.clamp(1.0, upper);
    Ok(PluginBandwidth {
        h_plugin,
        c0_hat,
        f_norm_hat,
        c_integral_hat,
        fallback_used,
        clamped: h_plugin != raw,
        rate_warning: h_plugin.powf(q) > n as f64,
        pilot_h: pilot.value(),
        m_trunc: m,
    })
}

/// Symmetric eigendecomposition of the operator `(1/G) S`: eigenvalues and
/// unit-Euclidean eigenvectors (columns).
pub(crate) fn operator_eigen(s: &Surface) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !s.is_symmetric(SYMMETRY_TOL) {
        return Err(LrcovError::Contract(format!(
            "surface is not symmetric (asymmetry {:e})",
            s.asymmetry()
        )));
    }
    let g = s.size() as f64;
    Ok(SymmetricEigen::new(&s.0 / g))
}

/// Nearest positive semidefinite operator: clip negative eigenvalues to zero.
pub fn project_psd(est: &LrcovEstimate) -> Result<LrcovEstimate> {
    let eig = operator_eigen(&est.surface)?;
    let g = est.surface.size() as f64;
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clipped) * v.transpose() * g;
    let sym = (&rebuilt + rebuilt.transpose()) * 0.5;
    Ok(LrcovEstimate { surface: Surface(sym), psd_projected: true, ..est.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{fourier_basis, Grid};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_sample(values: &[f64]) -> CurveSample {
        CurveSample::from_rows(&values.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap()
    }

    fn random_sample(rng: &mut ChaCha8Rng, n: usize, g: usize) -> CurveSample {
        CurveSample::new(DMatrix::from_fn(n, g, |_, _| rng.sample::<f64, _>(StandardNormal))).unwrap()
    }

    fn bw(h: f64) -> Bandwidth {
        Bandwidth::new(h).unwrap()
    }

    fn max_diff(a: &Surface, b: &Surface) -> f64 {
        a.sub(b).max_abs()
    }

    #[test]
    fn autocov_two_points() {
        let s = scalar_sample(&[1.0, 3.0]);
        let opts = EstimatorOptions::default();
        assert_abs_diff_eq!(autocov(&s, 0, opts).surface.get(0, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(autocov(&s, 1, opts).surface.get(0, 0), -0.5, epsilon = 1e-15);
        let beyond = autocov(&s, 2, opts);
        assert!(beyond.beyond_sample);
        assert_eq!(beyond.surface.max_abs(), 0.0);
    }

    #[test]
    fn autocov_negative_lag_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_sample(&mut rng, 20, 5);
        for opts in [EstimatorOptions::default(), EstimatorOptions { centered: false, unbiased: true }] {
            for lag in 1..6 {
                let pos = autocov(&s, lag, opts).surface;
                let neg = autocov(&s, -lag, opts).surface;
                assert_eq!(pos.transpose(), neg);
            }
        }
    }

    #[test]
    fn autocov_centers_each_factor_with_its_own_mean() {
        // 2 curves on 2 points; literal sums using x̄(t) and x̄(s)
        let s = CurveSample::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0]]).unwrap();
        let g0 = autocov(&s, 0, EstimatorOptions::default()).surface;
        // x̄ = (2, 15); deviations (-1, -5), (1, 5)
        assert_abs_diff_eq!(g0.get(0, 1), ((-1.0) * (-5.0) + 1.0 * 5.0) / 2.0, epsilon = 1e-14);
        let g1 = autocov(&s, 1, EstimatorOptions::default()).surface;
        assert_abs_diff_eq!(g1.get(0, 1), (-1.0 * 5.0) / 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g1.get(1, 0), (-5.0 * 1.0) / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn lrcov_two_points() {
        let s = scalar_sample(&[1.0, 3.0]);
        let est = estimate_lrcov(&s, &KernelSpec::Bartlett, bw(1.0), EstimatorOptions::default()).unwrap();
        assert_abs_diff_eq!(est.surface.get(0, 0), 1.0, epsilon = 1e-15);
        let naive = estimate_lrcov_naive(&s, &KernelSpec::Bartlett, bw(1.0), EstimatorOptions::default()).unwrap();
        assert_abs_diff_eq!(naive.surface.get(0, 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn lrcov_input_errors() {
        let one = scalar_sample(&[1.0]);
        assert!(matches!(
            estimate_lrcov(&one, &KernelSpec::Bartlett, bw(2.0), EstimatorOptions::default()),
            Err(LrcovError::Input(_))
        ));
        assert!(CurveSample::from_rows(&[vec![1.0], vec![f64::NAN]]).is_err());
        assert!(CurveSample::from_rows(&[]).is_err());
    }

    #[test]
    fn single_lag_weight_gives_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_sample(&mut rng, 50, 6);
        let est = estimate_lrcov(&s, &KernelSpec::Bartlett, bw(0.9), EstimatorOptions::default()).unwrap();
        // Ĉ^s_N(t,s) = (1/N) Σ (X_i(t) - x̄(t))(X_i(s) - x̄(s))
        let y = s.centered();
        let cs = y.transpose() * &y / 50.0;
        assert!(max_diff(&est.surface, &Surface(cs)) < 1e-12);
        for h in [0.3, 1.0] {
            let e = estimate_lrcov(&s, &KernelSpec::Bartlett, bw(h), EstimatorOptions::default()).unwrap();
            let via_set = autocov_set(&s, 1, EstimatorOptions::default()).lag_window_sum(&KernelSpec::Bartlett, bw(h)).unwrap();
            assert!(max_diff(&e.surface, &via_set) < 1e-14);
        }
    }

    #[test]
    fn fast_matches_naive_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let s = random_sample(&mut rng, 30, 8);
        let fast = estimate_lrcov(&s, &KernelSpec::Bartlett, bw(4.0), EstimatorOptions::default()).unwrap();
        let slow = estimate_lrcov_naive(&s, &KernelSpec::Bartlett, bw(4.0), EstimatorOptions::default()).unwrap();
        assert!(max_diff(&fast.surface, &slow.surface) <= 1e-10);
        let zero = CurveSample::new(DMatrix::zeros(10, 3)).unwrap();
        let z = estimate_lrcov_naive(&zero, &KernelSpec::Parzen, bw(3.0), EstimatorOptions::default()).unwrap();
        assert_eq!(z.surface.max_abs(), 0.0);
    }

    #[test]
    fn lrcov_iid_scalar_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let s = random_sample(&mut rng, 4000, 1);
        let h = 4000f64.powf(1.0 / 3.0);
        let est = estimate_lrcov(&s, &KernelSpec::Bartlett, bw(h), EstimatorOptions::default()).unwrap();
        assert!((est.surface.get(0, 0) - 1.0).abs() < 0.15);
    }

    #[test]
    fn spectral_density_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sample(&mut rng, 60, 4);
        for k in [KernelSpec::Bartlett, KernelSpec::Parzen] {
            let est = estimate_lrcov(&s, &k, bw(6.0), EstimatorOptions::default()).unwrap();
            let f0 = estimate_spectral_density(&s, &k, bw(6.0), 0.0, EstimatorOptions::default()).unwrap();
            assert!(f0.imag_part.max_abs() <= 1e-10);
            assert!(max_diff(&f0.real_part.scale(2.0 * PI), &est.surface) <= 1e-10);
            let fpi = estimate_spectral_density(&s, &k, bw(6.0), PI, EstimatorOptions::default()).unwrap();
            assert!(fpi.imag_part.max_abs() <= 1e-10);
        }
        assert!(estimate_spectral_density(&s, &KernelSpec::Bartlett, bw(2.0), 2.0 * PI, EstimatorOptions::default()).is_err());
    }

    #[test]
    fn spectral_density_white_noise_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let s = random_sample(&mut rng, 20_000, 1);
        let g0 = autocov(&s, 0, EstimatorOptions::default()).surface.get(0, 0);
        for omega in [0.0, PI / 2.0, PI] {
            let f = estimate_spectral_density(&s, &KernelSpec::Bartlett, bw(10.0), omega, EstimatorOptions::default()).unwrap();
            assert!((f.real_part.get(0, 0) - g0 / (2.0 * PI)).abs() < 0.1 / (2.0 * PI), "omega {omega}");
        }
    }

    fn ma1_truth(theta: f64) -> AutocovSet {
        let g0 = Surface::constant(1, 1.0 + theta * theta);
        let g1 = Surface::constant(1, theta);
        AutocovSet::from_surfaces(vec![g0, g1], true, EstimatorOptions::default()).unwrap()
    }

    #[test]
    fn bias_kernel_examples() {
        let iid = AutocovSet::from_surfaces(vec![Surface::constant(3, 1.0)], true, EstimatorOptions::default()).unwrap();
        assert_eq!(bias_kernel(&iid, &KernelSpec::Bartlett, 5).unwrap().surface.max_abs(), 0.0);

        let theta = 0.5;
        let f = bias_kernel(&ma1_truth(theta), &KernelSpec::Bartlett, 1).unwrap();
        assert_abs_diff_eq!(f.surface.get(0, 0), -1.0 * 2.0 * theta, epsilon = 1e-15);
        let f6 = bias_kernel(&ma1_truth(theta), &KernelSpec::Bartlett, 6).unwrap();
        assert_eq!(f.surface, f6.surface);
        assert!(matches!(
            bias_kernel(&ma1_truth(theta), &KernelSpec::FlatTop(0.5), 1),
            Err(LrcovError::Unsupported(_))
        ));
        assert!(bias_kernel(&ma1_truth(theta), &KernelSpec::Bartlett, 0).is_err());
    }

    #[test]
    fn l_tensor_examples() {
        assert_eq!(asymptotic_covariance_l(&Surface::zeros(3), &KernelSpec::Bartlett).unwrap().contract(&Surface::constant(3, 1.0)).unwrap(), 0.0);
        let c = Grid::new(4).unwrap().surface_from_fn(|t, s| (t * s).exp());
        let l = asymptotic_covariance_l(&c, &KernelSpec::Parzen).unwrap();
        let k2 = KernelSpec::Parzen.ksq_integral();
        for t in 0..4 {
            for s in 0..4 {
                let expected = (c.get(t, s).powi(2) + c.get(t, t) * c.get(s, s)) * k2;
                assert_abs_diff_eq!(l.get(t, s, t, s), expected, epsilon = 1e-14);
            }
        }
        let scalar = asymptotic_covariance_l(&Surface::constant(1, 1.5), &KernelSpec::Bartlett).unwrap();
        assert_abs_diff_eq!(scalar.get(0, 0, 0, 0), 2.0 * 1.5f64.powi(2) * 2.0 / 3.0, epsilon = 1e-14);
        assert!(asymptotic_covariance_l(&Surface::zeros(65), &KernelSpec::Bartlett).is_err());
    }

    #[test]
    fn gamma1_examples() {
        assert_eq!(gamma1_norm_sq(&Surface::zeros(4), &KernelSpec::Bartlett), 0.0);
        assert_abs_diff_eq!(gamma1_norm_sq(&Surface::constant(4, 1.0), &KernelSpec::Bartlett), 4.0 / 3.0, epsilon = 1e-14);
        let g = Grid::new(32).unwrap();
        let phi = &fourier_basis(g, 2).unwrap()[1];
        assert!(gamma1_norm_sq(&phi.outer(phi), &KernelSpec::Bartlett).abs() < 1e-20);
    }

    #[test]
    fn amse_monotone_in_degenerate_cases() {
        let c = Surface::constant(2, 2.0);
        let zero = Surface::zeros(2);
        let f = Surface::constant(2, -1.0);
        let mut prev_var = 0.0;
        let mut prev_bias = f64::INFINITY;
        for h in 1..50 {
            let v = amse(&c, &zero, &KernelSpec::Bartlett, h as f64, 100).unwrap();
            let b = amse(&zero, &f, &KernelSpec::Bartlett, h as f64, 100).unwrap();
            assert!(v > prev_var);
            assert!(b < prev_bias);
            prev_var = v;
            prev_bias = b;
        }
        assert!(amse(&c, &f, &KernelSpec::FlatTop(0.5), 2.0, 100).is_err());
    }

    /// Grid-search minimizer of the AMSE over a fine h grid.
    fn grid_argmin(c: &Surface, f: &Surface, k: &KernelSpec, n: usize, step: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        let mut h = step;
        while h < 200.0 {
            let v = amse(c, f, k, h, n).unwrap();
            if v < best.0 {
                best = (v, h);
            }
            h += step;
        }
        best.1
    }

    #[test]
    fn optimal_bandwidth_matches_grid_search() {
        let truth = ma1_truth(0.5);
        let c = Surface::constant(1, 2.25);
        for k in [KernelSpec::Bartlett, KernelSpec::Parzen, KernelSpec::TukeyHanning] {
            let f = bias_kernel(&truth, &k, 1).unwrap().surface;
            for n in [200, 1000, 5000] {
                let choice = optimal_bandwidth(&c, &f, &k, n).unwrap();
                let step = 0.01;
                let argmin = grid_argmin(&c, &f, &k, n, step);
                assert!((choice.h - argmin).abs() <= step, "{k} n={n}: {} vs {argmin}", choice.h);
            }
        }
        let f = bias_kernel(&truth, &KernelSpec::Bartlett, 1).unwrap().surface;
        let choice = optimal_bandwidth(&c, &f, &KernelSpec::Bartlett, 1000).unwrap();
        assert!((choice.h - grid_argmin(&c, &f, &KernelSpec::Bartlett, 1000, 0.01)).abs() <= 0.05 * choice.h);
    }

    #[test]
    fn optimal_bandwidth_rate_and_fallback() {
        let c = Surface::constant(3, 1.3);
        let f = Surface::constant(3, -0.7);
        let a = optimal_bandwidth(&c, &f, &KernelSpec::Bartlett, 1000).unwrap();
        let b = optimal_bandwidth(&c, &f, &KernelSpec::Bartlett, 2000).unwrap();
        assert_abs_diff_eq!(b.h / a.h, 2f64.powf(1.0 / 3.0), epsilon = 1e-12);
        let fb = optimal_bandwidth(&c, &Surface::zeros(3), &KernelSpec::Bartlett, 1000).unwrap();
        assert!(fb.fallback);
        assert_abs_diff_eq!(fb.h, 10.0, epsilon = 1e-9);
        assert!(optimal_bandwidth(&c, &f, &KernelSpec::FlatTop(0.2), 1000).is_err());
    }

    #[test]
    fn plugin_rejects_constant_curves() {
        let s = CurveSample::new(DMatrix::from_element(50, 3, 2.5)).unwrap();
        assert!(matches!(
            plugin_bandwidth(&s, &KernelSpec::Bartlett, bw(3.0), None, EstimatorOptions::default()),
            Err(LrcovError::Input(_))
        ));
    }

    #[test]
    fn plugin_stays_in_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sample(&mut rng, 300, 4);
        let p = plugin_bandwidth(&s, &KernelSpec::Parzen, bw(default_pilot_bandwidth(300)), None, EstimatorOptions::default()).unwrap();
        assert!(p.h_plugin >= 1.0 && p.h_plugin <= 150.0);
        assert_eq!(p.m_trunc, 3);
    }

    #[test]
    fn psd_projection_examples() {
        let g = Grid::new(16).unwrap();
        let basis = fourier_basis(g, 3).unwrap();
        let psd = basis[0].outer(&basis[0]).scale(2.0).add(&basis[2].outer(&basis[2]));
        let wrap = |s: Surface| LrcovEstimate {
            surface: s,
            kernel: KernelSpec::Bartlett,
            bandwidth: bw(1.0),
            n_obs: 10,
            options: EstimatorOptions::default(),
            psd_projected: false,
        };
        let out = project_psd(&wrap(psd.clone())).unwrap();
        assert!(max_diff(&out.surface, &psd) <= 1e-10);
        assert!(out.psd_projected);
        let neg = basis[1].outer(&basis[1]).scale(-1.0);
        assert!(project_psd(&wrap(neg)).unwrap().surface.max_abs() <= 1e-12);
        let mut asym = Surface::zeros(3);
        asym.0[(0, 1)] = 1.0;
        assert!(matches!(project_psd(&wrap(asym)), Err(LrcovError::Contract(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn fast_equals_naive(
            n in 2usize..=40,
            g in 1usize..=8,
            h in 0.2f64..10.0,
            seed in any::<u64>(),
            kernel_idx in 0usize..4,
            centered in any::<bool>(),
            unbiased in any::<bool>(),
        ) {
            let kernel = [KernelSpec::Bartlett, KernelSpec::Parzen, KernelSpec::TukeyHanning, KernelSpec::FlatTop(0.4)][kernel_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sample(&mut rng, n, g);
            let opts = EstimatorOptions { centered, unbiased };
            let fast = estimate_lrcov(&s, &kernel, bw(h), opts).unwrap();
            let slow = estimate_lrcov_naive(&s, &kernel, bw(h), opts).unwrap();
            prop_assert!(max_diff(&fast.surface, &slow.surface) <= 1e-10);
            prop_assert_eq!(fast.surface.asymmetry(), 0.0);
        }

        #[test]
        fn bartlett_small_bandwidth_is_lag_zero(n in 2usize..30, g in 1usize..5, h in 0.05f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sample(&mut rng, n, g);
            let est = estimate_lrcov(&s, &KernelSpec::Bartlett, bw(h), EstimatorOptions::default()).unwrap();
            let g0 = autocov(&s, 0, EstimatorOptions::default()).surface;
            prop_assert!(max_diff(&est.surface, &g0) <= 1e-14 * (1.0 + g0.max_abs()));
        }

        #[test]
        fn psd_clipping_identity(g in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(g, g, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = Surface(&m + m.transpose());
            let est = LrcovEstimate {
                surface: s.clone(),
                kernel: KernelSpec::Parzen,
                bandwidth: bw(2.0),
                n_obs: 10,
                options: EstimatorOptions::default(),
                psd_projected: false,
            };
            let out = project_psd(&est).unwrap();
            let eig = SymmetricEigen::new(&s.0 / g as f64);
            let clipped: f64 = eig.eigenvalues.iter().filter(|l| **l < 0.0).map(|l| l * l).sum();
            prop_assert!((l2_norm_surface(&out.surface.sub(&s)) - clipped.sqrt()).abs() <= 1e-8);
            let after = SymmetricEigen::new(&out.surface.0 / g as f64);
            prop_assert!(after.eigenvalues.iter().all(|l| *l >= -1e-12));
        }

        #[test]
        fn amse_variance_only_orders_by_h(h1 in 0.5f64..100.0, h2 in 0.5f64..100.0, n in 10usize..10_000) {
            let c = Surface::constant(2, 1.7);
            let a1 = amse(&c, &Surface::zeros(2), &KernelSpec::Parzen, h1, n).unwrap();
            let a2 = amse(&c, &Surface::zeros(2), &KernelSpec::Parzen, h2, n).unwrap();
            prop_assert_eq!((a1 - a2).partial_cmp(&0.0), (h1 - h2).partial_cmp(&0.0));
        }
    }
}
