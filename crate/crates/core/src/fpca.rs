//! Dynamic functional principal components of a long-run covariance operator.
//!
//! A surface `S` is decomposed through the symmetric matrix `(1/G) S`: its
//! eigenvalues are the operator eigenvalues, and its unit eigenvectors scaled
//! by `√G` are eigenfunctions with `⟨v, v⟩ = 1` under the midpoint rule.
//!
//! Limit laws used for inference, with `Λ = ∫K²` and `a = lim N/h^{1+2q}`:
//!
//! ```text
//! (N/h)^{1/2}(λ̂_ℓ - λ_ℓ)  ⇒  λ_ℓ (2Λ)^{1/2} N_ℓℓ + a ∬F v_ℓ v_ℓ
//! (N/h)‖ŝ v̂_ℓ - v_ℓ‖²    ⇒  λ_ℓ Λ Σ_{k≠ℓ} λ_k/(λ_ℓ - λ_k)² N_ℓk²      (a = 0)
//! ```

use serde::Serialize;

use crate::error::{LrcovError, Result};
use crate::estimator::{operator_eigen, BiasKernel};
use crate::grid::{apply_operator, inner_product, Curve, Surface};
use crate::kernels::KernelSpec;
use crate::stats::two_sided_z;

/// Eigenvalue gaps smaller than this fraction of `|λ̂_1|` count as ties.
pub const SEPARATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// L²-orthonormal, in eigenvalue order.
    pub eigenfunctions: Vec<Curve>,
    pub source: Surface,
}

impl EigenSystem {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Reconstruct `Σ λ_i v_i(t) v_i(s)`.
    pub fn reconstruct(&self) -> Surface {
        let g = self.source.size();
        let mut acc = Surface::zeros(g);
        for (l, v) in self.eigenvalues.iter().zip(&self.eigenfunctions) {
            acc = acc.add(&v.outer(v).scale(*l));
        }
        acc
    }

    /// Gaps `λ_ℓ - λ_{ℓ+1}` for `ℓ = 1..=p` (the last uses 0 past the end).
    pub fn gaps(&self, p: usize) -> Vec<f64> {
        (0..p.min(self.len()))
            .map(|i| self.eigenvalues[i] - self.eigenvalues.get(i + 1).copied().unwrap_or(0.0))
            .collect()
    }

    /// Require `λ_1 > … > λ_p > λ_{p+1}` with gaps of at least `SEPARATION_TOL·|λ_1|`.
    pub fn check_separation(&self, p: usize) -> Result<()> {
        if p == 0 || p > self.len() {
            return Err(LrcovError::Input(format!("level {p} outside 1..={}", self.len())));
        }
        let tolerance = SEPARATION_TOL * self.eigenvalues[0].abs();
        for (i, gap) in self.gaps(p).into_iter().enumerate() {
            if gap < tolerance || gap <= 0.0 {
                return Err(LrcovError::Separation { level: i + 1, gap, tolerance });
            }
        }
        Ok(())
    }
}

/// Eigenpairs of the integral operator with kernel `S`, sorted by eigenvalue.
/// Each eigenvector's largest-magnitude coordinate is made positive.
pub fn eigendecompose(s: &Surface) -> Result<EigenSystem> {
    let eig = operator_eigen(s)?;
    let g = s.size();
    let scale = (g as f64).sqrt();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut eigenvalues = Vec::with_capacity(g);
    let mut eigenfunctions = Vec::with_capacity(g);
    for idx in order {
        let col = eig.eigenvectors.column(idx);
        let pivot = col.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        eigenvalues.push(eig.eigenvalues[idx]);
        eigenfunctions.push(Curve(col.into_owned() * (sign * scale)));
    }
    Ok(EigenSystem { eigenvalues, eigenfunctions, source: s.clone() })
}

/// `ŝ v̂` with `ŝ = sign⟨v̂, v_ref⟩`, taking `ŝ = +1` on an exact tie.
pub fn align_sign(vhat: &Curve, v_ref: &Curve) -> Result<Curve> {
    let ip = inner_product(vhat, v_ref)?;
    Ok(if ip < 0.0 { vhat.scale(-1.0) } else { vhat.clone() })
}

/// Residual `‖S v - λ v‖` of an eigenpair.
pub fn eigen_residual(s: &Surface, lambda: f64, v: &Curve) -> Result<f64> {
    let sv = apply_operator(s, v)?;
    Ok(Curve(sv.0 - &v.0 * lambda).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CltParams {
    pub mean_shift: f64,
    pub sd: f64,
}

/// Mean and standard deviation of the normal limit of `(N/h)^{1/2}(λ̂_ℓ - λ_ℓ)`.
/// `level` is 1-based.
pub fn eigenvalue_clt_params(
    truth: &EigenSystem,
    kernel: &KernelSpec,
    bias: Option<&BiasKernel>,
    a_limit: f64,
    level: usize,
) -> Result<CltParams> {
    truth.check_separation(level)?;
    let i = level - 1;
    let lambda = truth.eigenvalues[i];
    let sd = lambda.abs() * (2.0 * kernel.ksq_integral()).sqrt();
    let mean_shift = match bias {
        Some(f) if a_limit != 0.0 => {
            let v = &truth.eigenfunctions[i];
            a_limit * f.surface.bilinear(v, v)?
        }
        _ => 0.0,
    };
    Ok(CltParams { mean_shift, sd })
}

/// Deterministic shift of the eigenfunction limit,
/// `a Σ_{k≠ℓ} v_k ∬F(u,s) v_ℓ(u) v_k(s) du ds / (λ_ℓ - λ_k)`.
pub fn eigenfunction_bias_shift(truth: &EigenSystem, bias: &BiasKernel, a_limit: f64, level: usize) -> Result<Curve> {
    truth.check_separation(level)?;
    let i = level - 1;
    let vl = &truth.eigenfunctions[i];
    let mut acc = Curve(vl.0.map(|_| 0.0));
    for (k, (lk, vk)) in truth.eigenvalues.iter().zip(&truth.eigenfunctions).enumerate() {
        if k == i {
            continue;
        }
        let gap = truth.eigenvalues[i] - lk;
        if gap == 0.0 {
            return Err(LrcovError::Separation { level, gap, tolerance: 0.0 });
        }
        let coef = bias.surface.bilinear(vl, vk)? / gap;
        acc = Curve(acc.0 + &vk.0 * coef);
    }
    Ok(acc.scale(a_limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationPrediction {
    /// Limit mean of `(N/h)‖ŝ v̂_ℓ - v_ℓ‖²` over the first `terms` components.
    pub mean: f64,
    /// Upper bound on the contribution of components past `terms`.
    pub tail_bound: f64,
}

/// `λ_ℓ ∫K² Σ_{k≠ℓ, k ≤ terms} λ_k/(λ_ℓ - λ_k)²`, the mean of the limit law
/// of `(N/h)‖ŝ v̂_ℓ - v_ℓ‖²`.
pub fn eigenfunction_deviation_msd(
    truth: &EigenSystem,
    kernel: &KernelSpec,
    level: usize,
    terms: usize,
) -> Result<DeviationPrediction> {
    if level == 0 || level > terms {
        return Err(LrcovError::Input(format!("level {level} must lie in 1..={terms}")));
    }
    if terms > truth.len() {
        return Err(LrcovError::Input(format!("{terms} terms requested but only {} eigenvalues", truth.len())));
    }
    truth.check_separation(level)?;
    let i = level - 1;
    let lambda = truth.eigenvalues[i];
    let tol = SEPARATION_TOL * truth.eigenvalues[0].abs();
    let k2 = kernel.ksq_integral();
    let mut sum = 0.0;
    for k in 0..terms {
        if k == i {
            continue;
        }
        let gap = lambda - truth.eigenvalues[k];
        if gap.abs() <= tol {
            return Err(LrcovError::Separation { level: k + 1, gap, tolerance: tol });
        }
        sum += truth.eigenvalues[k] / (gap * gap);
    }
    let tail_bound = match truth.eigenvalues.get(terms) {
        Some(&next) if next < lambda => {
            let rest: f64 = truth.eigenvalues[terms..].iter().map(|l| l.max(0.0)).sum();
            lambda * k2 * rest / (lambda - next).powi(2)
        }
        Some(_) => f64::INFINITY,
        None => 0.0,
    };
    Ok(DeviationPrediction { mean: lambda * k2 * sum, tail_bound })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
    pub half_width: f64,
}

/// `λ̂_ℓ ± z (h/N)^{1/2} λ̂_ℓ (2∫K²)^{1/2}`, valid when the bias shift is negligible.
pub fn eigenvalue_ci(
    est: &EigenSystem,
    kernel: &KernelSpec,
    n: usize,
    h: f64,
    level_index: usize,
    confidence: f64,
) -> Result<ConfidenceInterval> {
    if level_index == 0 || level_index > est.len() {
        return Err(LrcovError::Input(format!("component {level_index} outside 1..={}", est.len())));
    }
    let lambda = est.eigenvalues[level_index - 1];
    // eigenvalues at round-off level of the leading one count as zero
    if !(lambda > SEPARATION_TOL * est.eigenvalues[0].abs()) {
        return Err(LrcovError::Input(format!(
            "eigenvalue {level_index} is non-positive ({lambda}); no confidence interval"
        )));
    }
    if n == 0 || !(h > 0.0) {
        return Err(LrcovError::Input("confidence interval needs N ≥ 1 and h > 0".into()));
    }
    let z = two_sided_z(confidence)?;
    let half_width = z * (h / n as f64).sqrt() * lambda * (2.0 * kernel.ksq_integral()).sqrt();
    Ok(ConfidenceInterval { estimate: lambda, low: lambda - half_width, high: lambda + half_width, half_width })
}

/// Per-level summary of the limiting distributions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenInference {
    pub levels: usize,
    pub a_limit: f64,
    pub eigenvalue_sd: Vec<f64>,
    pub eigenvalue_mean_shift: Vec<f64>,
    pub eigenfunction_msd: Vec<f64>,
    /// `‖bias shift‖` of each eigenfunction limit.
    pub eigenfunction_bias_norm: Vec<f64>,
}

/// `N / h^{1+2q}` evaluated at a finite sample.
pub fn a_limit_at(n: usize, h: f64, kernel: &KernelSpec) -> Option<f64> {
    kernel.char_exponent().finite().map(|q| n as f64 / h.powf(1.0 + 2.0 * q))
}

pub fn eigen_inference(
    eig: &EigenSystem,
    kernel: &KernelSpec,
    bias: Option<&BiasKernel>,
    a_limit: f64,
    levels: usize,
) -> Result<EigenInference> {
    eig.check_separation(levels)?;
    let terms = eig.len();
    let mut out = EigenInference {
        levels,
        a_limit,
        eigenvalue_sd: Vec::with_capacity(levels),
        eigenvalue_mean_shift: Vec::with_capacity(levels),
        eigenfunction_msd: Vec::with_capacity(levels),
        eigenfunction_bias_norm: Vec::with_capacity(levels),
    };
    for level in 1..=levels {
        let clt = eigenvalue_clt_params(eig, kernel, bias, a_limit, level)?;
        out.eigenvalue_sd.push(clt.sd);
        out.eigenvalue_mean_shift.push(clt.mean_shift);
        out.eigenfunction_msd.push(match eigenfunction_deviation_msd(eig, kernel, level, terms) {
            Ok(pred) => pred.mean,
            // ties further down the spectrum leave the sum undefined
            Err(LrcovError::Separation { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        });
        out.eigenfunction_bias_norm.push(match bias {
            Some(f) if a_limit != 0.0 => eigenfunction_bias_shift(eig, f, a_limit, level)?.norm(),
            _ => 0.0,
        });
    }
    Ok(out)
}
