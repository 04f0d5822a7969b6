//! A-contrario match threshold.
//!
//! Under the background model two descriptors of the same content differ
//! by independent Gaussian noise of variance `2σ²` per compared value, so
//! each squared difference divided by `2σ²` is χ²₁. Requiring all `E`
//! values to pass gives a per-pair match probability of
//! `F(τ / 2σ²)^E`; choosing `τ` so that this equals `ε / n_tests` bounds
//! the expected number of false matches by `ε`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Error function. Absolute error below 1e-15 on the real line.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        erf_series(x)
    } else {
        1.0 - erfc_fraction(x)
    }
}

/// Complementary error function, accurate in relative terms in the tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        1.0 - erf_series(x)
    } else {
        erfc_fraction(x)
    }
}

/// `erf(x) = 2/√π · e^{-x²} · Σ (2x²)^k x / (1·3·…·(2k+1))`; every term is
/// positive so there is no cancellation.
fn erf_series(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for k in 1..200 {
        term *= 2.0 * x2 / (2.0 * k as f64 + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    (FRAC_2_SQRT_PI * (-x2).exp() * sum).min(1.0)
}

/// Continued fraction `erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …))))`,
/// evaluated with the modified Lentz method. Used for `x >= 2.5`.
fn erfc_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = x + a / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (PI.sqrt() * f)
}

fn check_dof(dof: u32) -> Result<()> {
    if dof == 1 || dof == 2 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("only 1 or 2 degrees of freedom are supported, got {dof}")))
    }
}

/// χ² cumulative distribution function for 1 or 2 degrees of freedom.
pub fn chi2_cdf(x: f64, dof: u32) -> Result<f64> {
    check_dof(dof)?;
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("chi2_cdf needs x >= 0, got {x}")));
    }
    Ok(match dof {
        1 => erf((x / 2.0).sqrt()),
        _ => -(-x / 2.0).exp_m1(),
    })
}

/// Upper tail `1 - chi2_cdf(x, dof)`, without cancellation.
pub fn chi2_sf(x: f64, dof: u32) -> Result<f64> {
    check_dof(dof)?;
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("chi2_sf needs x >= 0, got {x}")));
    }
    Ok(match dof {
        1 => erfc((x / 2.0).sqrt()),
        _ => (-x / 2.0).exp(),
    })
}

/// Quantile of the χ² distribution: the `x` with `chi2_cdf(x, dof) = p`.
///
/// One degree of freedom is solved in `z = sqrt(x/2)` by Newton steps kept
/// inside a bisection bracket; above the median the upper tail `erfc(z) =
/// 1 - p` is solved instead, which is exact to form for `p >= 0.5`.
pub fn chi2_inv(p: f64, dof: u32) -> Result<f64> {
    check_dof(dof)?;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "chi2_inv needs 0 <= p < 1 (the quantile of 1 is unbounded), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if dof == 2 {
        return Ok(-2.0 * (-p).ln_1p());
    }
    let upper = p > 0.5;
    let q = 1.0 - p;
    // Residual with the same sign convention in both branches: increasing in z.
    let residual = |z: f64| if upper { q - erfc(z) } else { erf(z) - p };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while residual(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = residual(z);
        if r == 0.0 {
            break;
        }
        if r < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let slope = FRAC_2_SQRT_PI * (-z * z).exp();
        let newton = z - r / slope;
        let next = if newton > lo && newton < hi && slope > 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let done = (next - z).abs() <= 1e-16 * z.max(1e-300) || hi - lo <= 4.0 * f64::EPSILON * hi;
        z = next;
        if done {
            break;
        }
    }
    Ok(2.0 * z * z)
}

/// How descriptor differences are grouped into independent tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// One test per `(k, l, c)` cell on the squared norm of its gradient
    /// 2-vector difference; `E = n²·C`.
    PerCell,
    /// One test per scalar gradient component; `E = 2·n²·C`.
    PerScalar,
}

impl ThresholdMode {
    pub fn exponent(self, n: usize, channels: usize) -> u64 {
        let cells = (n * n * channels) as u64;
        match self {
            ThresholdMode::PerCell => cells,
            ThresholdMode::PerScalar => 2 * cells,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ThresholdMode::PerCell => "cell",
            ThresholdMode::PerScalar => "scalar",
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cell" | "per-cell" => Ok(ThresholdMode::PerCell),
            "scalar" | "per-scalar" => Ok(ThresholdMode::PerScalar),
            other => Err(Error::Config(format!("unknown threshold mode '{other}' (expected cell or scalar)"))),
        }
    }
}

/// Noise level, false-alarm budget and test count of the background model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AContrarioParams {
    /// Noise standard deviation on the `[0, 1]` intensity scale.
    pub sigma: f64,
    /// Expected number of false matches allowed.
    pub epsilon: f64,
    /// Number of descriptor comparisons the budget is spread over.
    pub n_tests: f64,
    /// Number of independent per-value tests in one comparison.
    pub exponent: u64,
    pub mode: ThresholdMode,
}

impl AContrarioParams {
    /// Parameters for descriptors of side `n` with `channels` channels.
    pub fn for_descriptor(
        sigma: f64,
        epsilon: f64,
        n_tests: f64,
        n: usize,
        channels: usize,
        mode: ThresholdMode,
    ) -> Self {
        Self {
            sigma,
            epsilon,
            n_tests,
            exponent: mode.exponent(n, channels),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.n_tests >= 1.0) || !self.n_tests.is_finite() {
            return Err(Error::Config(format!("n_tests must be at least 1, got {}", self.n_tests)));
        }
        if self.exponent < 1 {
            return Err(Error::Config("exponent must be at least 1".into()));
        }
        if self.epsilon / self.n_tests >= 1.0 {
            return Err(Error::Config(format!(
                "epsilon / n_tests must be below 1 (got {} / {}); the threshold would be unbounded",
                self.epsilon, self.n_tests
            )));
        }
        Ok(())
    }

    /// Target per-comparison false-match probability `ε / n_tests`.
    pub fn target_rate(&self) -> f64 {
        self.epsilon / self.n_tests
    }
}

/// A squared-difference bound together with the parameters it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub params: AContrarioParams,
}

/// `τ = 2σ² · chi2_inv((ε / n_tests)^(1/E), 1)`.
pub fn compute_threshold(params: &AContrarioParams) -> Result<Threshold> {
    params.validate()?;
    let per_value = (params.target_rate().ln() / params.exponent as f64).exp();
    let quantile = chi2_inv(per_value, 1)?;
    let tau = 2.0 * params.sigma * params.sigma * quantile;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "threshold is not a positive finite number ({tau}); check sigma and the test budget"
        )));
    }
    Ok(Threshold {
        tau,
        params: *params,
    })
}

/// Probability that one comparison of two descriptors differing only by
/// background noise passes the threshold: `F(τ / 2σ²)^E`.
pub fn predicted_false_match_probability(threshold: &Threshold) -> f64 {
    let p = &threshold.params;
    let scaled = threshold.tau / (2.0 * p.sigma * p.sigma);
    let single = chi2_cdf(scaled.max(0.0), 1).unwrap_or(0.0);
    (single.ln() * p.exponent as f64).exp()
}
