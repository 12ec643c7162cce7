//! Closed-form and asymptotic quantities, used as oracles by the
//! verification suite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{z_lambda, ModelParams};

/// Eventual monotonicity of the speed in the bias, decided by the sign of
/// `μ² - p(1-p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub discriminant: f64,
    pub verdict: Regime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    EventuallyIncreasing,
    EventuallyDecreasing,
    Critical,
}

/// Speed of the totally asymmetric walk on `Z`: `μp / (1 - p + μ)`.
pub fn speed_totally_asymmetric_1d(p: f64, mu: f64) -> f64 {
    mu * p / (1.0 - p + mu)
}

/// Large-bias expansion of the speed (without its `O(e^{-2λ})` remainder):
/// `μp/(1-p+μ) - (2d-2)p (μ²-p(1-p)) / (1-p+μ)² · Z_λ^{-1}`.
pub fn asymptotic_speed(params: &ModelParams) -> f64 {
    let limit = speed_totally_asymmetric_1d(params.p, params.mu);
    let denom = 1.0 - params.p + params.mu;
    let coeff = (2.0 * params.d as f64 - 2.0) * params.p / (denom * denom);
    let discriminant = params.mu * params.mu - params.p * (1.0 - params.p);
    limit - coeff * discriminant / params.z_lambda()
}

/// Leading derivative constant for large bias: `v'(λ) ≈ C_{μ,p} e^{-λ}`
/// with `C_{μ,p} = (2d-2)p (μ²-p(1-p)) / (1-p+μ)²`.
pub fn derivative_constant(d: usize, p: f64, mu: f64) -> f64 {
    let denom = 1.0 - p + mu;
    (2.0 * d as f64 - 2.0) * p * (mu * mu - p * (1.0 - p)) / (denom * denom)
}

pub fn classify_regime(p: f64, mu: f64) -> RegimeVerdict {
    let discriminant = mu * mu - p * (1.0 - p);
    let verdict = if discriminant > 0.0 {
        Regime::EventuallyIncreasing
    } else if discriminant < 0.0 {
        Regime::EventuallyDecreasing
    } else {
        Regime::Critical
    };
    RegimeVerdict {
        discriminant,
        verdict,
    }
}

/// Point-colouring rates of the two-bias coupling.
///
/// `q_g` (good: both walks attempt `+e1`), `q_b` (bad: both attempt the same
/// non-`+e1` direction), `q_vb` (very bad: the attempts differ). The three
/// masses partition the attempt law: `q_g + q_b + q_vb = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingRates {
    pub q_g: f64,
    pub q_b: f64,
    pub q_vb: f64,
    /// Width of the very-bad sub-case in which the lower-bias walk attempts
    /// `-e1` rather than a lateral direction.
    pub residual: f64,
}

pub fn coupling_rates(params: &ModelParams, eps: f64) -> Result<CouplingRates> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParams(format!("eps must be > 0, got {eps}")));
    }
    let lam = params.lambda;
    let z = params.z_lambda();
    let z_hi = z_lambda(params.d, lam + eps);
    let lateral = 2.0 * params.d as f64 - 2.0;
    let q_g = lam.exp() / z;
    let q_b = (lateral + (-lam - eps).exp()) / z_hi;
    let q_vb = (lam + eps).exp() / z_hi - lam.exp() / z;
    if !(q_vb > 0.0) {
        return Err(Error::InvalidParams(format!(
            "non-positive q_vb = {q_vb} for lambda={lam}, eps={eps}"
        )));
    }
    let total = q_g + q_b + q_vb;
    assert!(total <= 1.0 + 1e-12, "coupling masses exceed 1: {total}");
    let residual = 1.0 - lam.exp() / z - lateral / z - (-lam - eps).exp() / z_hi;
    Ok(CouplingRates {
        q_g,
        q_b,
        q_vb,
        residual,
    })
}

/// Speed on the always-open lattice: `v(λ, p=1) = (e^λ - e^{-λ}) / Z_λ`.
pub fn speed_static_full_lattice(params: &ModelParams) -> f64 {
    (params.lambda.exp() - (-params.lambda).exp()) / params.z_lambda()
}
