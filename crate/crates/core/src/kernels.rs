//! Compactly supported lag-window kernels.
//!
//! Each kernel satisfies `K(0) = 1`, `K(u) = K(-u)`, `K(u) = 0` for `|u| > c`
//! and is Lipschitz on `[-c, c]`. Alongside the weight function a kernel carries
//! its characteristic exponent `q` and constant `κ = lim (K(x) - 1)/|x|^q`.
//! `κ` is stored with its sign (negative for every kernel here).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LrcovError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelSpec {
    Bartlett,
    Parzen,
    TukeyHanning,
    /// Equal to one on `|u| <= rho`, linear down to zero at `|u| = 1`.
    FlatTop(f64),
}

/// Order of flatness of a kernel at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CharExponent {
    Finite(f64),
    Infinite,
}

impl CharExponent {
    pub fn finite(self) -> Option<f64> {
        match self {
            CharExponent::Finite(q) => Some(q),
            CharExponent::Infinite => None,
        }
    }
}

impl KernelSpec {
    pub fn flat_top(rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(LrcovError::KernelSpec(format!("flat-top rho must lie in [0, 1), got {rho}")));
        }
        Ok(KernelSpec::FlatTop(rho))
    }

    pub fn value(&self, u: f64) -> f64 {
        let a = u.abs();
        match *self {
            KernelSpec::Bartlett => (1.0 - a).max(0.0),
            KernelSpec::Parzen => {
                if a <= 0.5 {
                    1.0 - 6.0 * a * a + 6.0 * a * a * a
                } else if a <= 1.0 {
                    2.0 * (1.0 - a).powi(3)
                } else {
                    0.0
                }
            }
            KernelSpec::TukeyHanning => {
                if a <= 1.0 {
                    0.5 * (1.0 + (PI * a).cos())
                } else {
                    0.0
                }
            }
            KernelSpec::FlatTop(rho) => {
                if a <= rho {
                    1.0
                } else if a <= 1.0 {
                    (1.0 - a) / (1.0 - rho)
                } else {
                    0.0
                }
            }
        }
    }

    /// Support bound `c`.
    pub fn support(&self) -> f64 {
        1.0
    }

    pub fn char_exponent(&self) -> CharExponent {
        match self {
            KernelSpec::Bartlett => CharExponent::Finite(1.0),
            KernelSpec::Parzen | KernelSpec::TukeyHanning => CharExponent::Finite(2.0),
            KernelSpec::FlatTop(_) => CharExponent::Infinite,
        }
    }

    /// Signed `κ`; zero for the flat-top kernel where it plays no role.
    pub fn kappa(&self) -> f64 {
        match self {
            KernelSpec::Bartlett => -1.0,
            KernelSpec::Parzen => -6.0,
            KernelSpec::TukeyHanning => -PI * PI / 4.0,
            KernelSpec::FlatTop(_) => 0.0,
        }
    }

    /// `∫ K²(z) dz` over `[-c, c]`.
    pub fn ksq_integral(&self) -> f64 {
        match *self {
            KernelSpec::Bartlett => 2.0 / 3.0,
            KernelSpec::Parzen => 151.0 / 280.0,
            KernelSpec::TukeyHanning => 0.75,
            KernelSpec::FlatTop(rho) => 2.0 * (rho + (1.0 - rho) / 3.0),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            KernelSpec::Bartlett => 1.0,
            // max |K'| is attained at |u| = 1/3 on the inner cubic
            KernelSpec::Parzen => 2.0,
            KernelSpec::TukeyHanning => PI / 2.0,
            KernelSpec::FlatTop(rho) => 1.0 / (1.0 - rho),
        }
    }

    /// Weight of lag `i` at bandwidth `h`.
    pub fn weight(&self, lag: i64, h: f64) -> f64 {
        self.value(lag as f64 / h)
    }

    /// Largest lag with a possibly non-zero weight, `floor(c h)`.
    pub fn max_lag(&self, h: f64) -> usize {
        (self.support() * h).floor().max(0.0) as usize
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Bartlett => "bartlett",
            KernelSpec::Parzen => "parzen",
            KernelSpec::TukeyHanning => "tukey-hanning",
            KernelSpec::FlatTop(_) => "flat-top",
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::FlatTop(rho) => write!(f, "flat-top:{rho}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = LrcovError;

    /// Accepts `bartlett`, `parzen`, `tukey-hanning` and `flat-top:RHO`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('_', "-");
        let (name, param) = match lower.split_once(':') {
            Some((n, p)) => (n.to_string(), Some(p.to_string())),
            None => (lower.clone(), None),
        };
        let no_param = |k: KernelSpec| match &param {
            None => Ok(k),
            Some(_) => Err(LrcovError::Config(format!("kernel '{name}' takes no parameter"))),
        };
        match name.as_str() {
            "bartlett" => no_param(KernelSpec::Bartlett),
            "parzen" => no_param(KernelSpec::Parzen),
            "tukey-hanning" | "tukeyhanning" => no_param(KernelSpec::TukeyHanning),
            "flat-top" | "flattop" => {
                let rho = param
                    .as_deref()
                    .unwrap_or("0.5")
                    .parse::<f64>()
                    .map_err(|e| LrcovError::Config(format!("bad flat-top rho: {e}")))?;
                KernelSpec::flat_top(rho).map_err(|e| LrcovError::Config(e.to_string()))
            }
            other => Err(LrcovError::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

impl TryFrom<String> for KernelSpec {
    type Error = LrcovError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KernelSpec> for String {
    fn from(k: KernelSpec) -> String {
        k.to_string()
    }
}

/// Smoothing parameter `h`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(LrcovError::Input(format!("bandwidth must be positive and finite, got {h}")));
        }
        Ok(Self(h))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// `h < 1` zeroes every non-zero lag for unit-support kernels.
    pub fn is_degenerate(&self) -> bool {
        self.0 < 1.0
    }
}

/// Estimate `lim_{x→0} (K(x) - 1)/|x|^q` from `x ∈ {1e-2, 1e-3, 1e-4}` with two
/// rounds of Richardson extrapolation (error terms of order `x` then `x²`), and
/// check it against the stored constant.
pub fn char_exponent_check(spec: &KernelSpec) -> Result<f64> {
    let q = spec.char_exponent().finite().ok_or_else(|| {
        LrcovError::Unsupported("characteristic exponent is infinite for the flat-top kernel".into())
    })?;
    let ratio = |x: f64| (spec.value(x) - 1.0) / x.abs().powf(q);
    let (r1, r2, r3) = (ratio(1e-2), ratio(1e-3), ratio(1e-4));
    let lin_a = (10.0 * r2 - r1) / 9.0;
    let lin_b = (10.0 * r3 - r2) / 9.0;
    let estimate = (100.0 * lin_b - lin_a) / 99.0;
    let stored = spec.kappa();
    if (estimate - stored).abs() > 0.01 * stored.abs() {
        return Err(LrcovError::KernelSpec(format!(
            "{spec}: extrapolated limit {estimate} disagrees with stored constant {stored}"
        )));
    }
    Ok(estimate)
}
