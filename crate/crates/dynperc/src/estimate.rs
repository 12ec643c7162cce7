//! Estimators of the speed, its derivative and the diffusivity from
//! regeneration blocks, the reweighting route from unbiased blocks, and the
//! exact-identity checks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::engine::{self, BlockStats};
use crate::error::{Error, Result};
use crate::model::{z_lambda, ModelParams};
use crate::stats::{self, Estimate, Method};

/// Importance sampling beyond this bias triggers a warning: the weight
/// variance grows like `e^{2λ(R_a - L_a)}` and the effective sample size
/// collapses.
pub const IMPORTANCE_LAMBDA_WARN: f64 = 1.5;

/// Ratio estimator `mean(R-L) / mean(τ)` with delta-method standard error.
pub fn estimate_speed_direct(blocks: &[BlockStats]) -> Result<Estimate> {
    if blocks.is_empty() {
        return Err(Error::EmptySample);
    }
    let num: Vec<f64> = blocks.iter().map(|b| b.disp_e1() as f64).collect();
    let den: Vec<f64> = blocks.iter().map(|b| b.tau).collect();
    let (v, se) = stats::ratio_estimate(&num, &den)?;
    Ok(Estimate::new(v, se, blocks.len(), Method::Direct))
}

/// Diffusivity `σ² = Var(R-L) / mean(τ)` with bootstrap standard error.
pub fn estimate_sigma2(blocks: &[BlockStats], boot_rng: &mut impl Rng) -> Result<Estimate> {
    if blocks.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: blocks.len(),
        });
    }
    let disp: Vec<f64> = blocks.iter().map(|b| b.disp_e1() as f64).collect();
    let tau: Vec<f64> = blocks.iter().map(|b| b.tau).collect();
    let value = stats::variance(&disp) / stats::mean(&tau);
    let se = stats::bootstrap_stderr(boot_rng, blocks.len(), 200, |idx| {
        let d: Vec<f64> = idx.iter().map(|&i| disp[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| tau[i]).collect();
        stats::variance(&d) / stats::mean(&t)
    });
    Ok(Estimate::new(value, se, blocks.len(), Method::Identity))
}

/// Result of the change-of-measure estimator, including its effective
/// sample size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImportanceEstimate {
    pub estimate: Estimate,
    pub effective_sample_size: f64,
    pub low_ess: bool,
}

/// Radon-Nikodym weight reweighting unbiased blocks to bias `target_lambda`:
/// `w = e^{λ(R_a - L_a)} (2d / Z_λ)^{U_a}`.
pub fn importance_weight(d: usize, target_lambda: f64, block: &BlockStats) -> f64 {
    let z = z_lambda(d, target_lambda);
    let drift = block.r_a as f64 - block.l_a as f64;
    (target_lambda * drift).exp() * (2.0 * d as f64 / z).powi(block.u_a as i32)
}

/// Estimates `v(target_lambda)` from blocks simulated at `λ = 0` with the
/// same `(d, p, μ)`.
pub fn estimate_speed_importance(
    blocks: &[BlockStats],
    d: usize,
    target_lambda: f64,
) -> Result<ImportanceEstimate> {
    if blocks.is_empty() {
        return Err(Error::EmptySample);
    }
    let weighted: Vec<f64> = blocks
        .iter()
        .map(|b| b.disp_e1() as f64 * importance_weight(d, target_lambda, b))
        .collect();
    let tau: Vec<f64> = blocks.iter().map(|b| b.tau).collect();
    let (v, se) = stats::ratio_estimate(&weighted, &tau)?;
    let weights: Vec<f64> = blocks
        .iter()
        .map(|b| importance_weight(d, target_lambda, b))
        .collect();
    let sum: f64 = stats::compensated_sum(weights.iter().copied());
    let sum_sq: f64 = stats::compensated_sum(weights.iter().map(|w| w * w));
    let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 };
    Ok(ImportanceEstimate {
        estimate: Estimate::new(v, se, blocks.len(), Method::Importance),
        effective_sample_size: ess,
        low_ess: ess < 100.0,
    })
}

/// Plug-in estimator of the derivative of the speed at the blocks' own bias:
/// `v'(λ) = ( mean[(R-L)(R_a-L_a)] - Z'_λ/Z_λ · mean[(R-L) U_a] ) / mean(τ)`.
pub fn estimate_derivative_formula(
    blocks: &[BlockStats],
    params: &ModelParams,
    boot_rng: &mut impl Rng,
) -> Result<Estimate> {
    if blocks.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: blocks.len(),
        });
    }
    let z = params.z_lambda();
    let z_prime = params.lambda.exp() - (-params.lambda).exp();
    let ratio = z_prime / z;
    let a: Vec<f64> = blocks
        .iter()
        .map(|b| b.disp_e1() as f64 * (b.r_a as f64 - b.l_a as f64))
        .collect();
    let c: Vec<f64> = blocks
        .iter()
        .map(|b| b.disp_e1() as f64 * b.u_a as f64)
        .collect();
    let tau: Vec<f64> = blocks.iter().map(|b| b.tau).collect();
    let point = |ai: &[f64], ci: &[f64], ti: &[f64]| {
        (stats::mean(ai) - ratio * stats::mean(ci)) / stats::mean(ti)
    };
    let value = point(&a, &c, &tau);
    let se = stats::bootstrap_stderr(boot_rng, blocks.len(), 200, |idx| {
        let ai: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let ci: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
        let ti: Vec<f64> = idx.iter().map(|&i| tau[i]).collect();
        point(&ai, &ci, &ti)
    });
    Ok(Estimate::new(value, se, blocks.len(), Method::DerivativeFormula))
}

/// Histogram of unbiased block signatures `(R_a, L_a, R, L, U_a)`.
///
/// The exponential tails of `U_a(τ₁)` keep the key space small, so one
/// histogram supports the whole speed curve.
#[derive(Debug, Clone, Default)]
pub struct BlockHistogram {
    pub counts: HashMap<(u32, u32, u32, u32, u32), u64>,
    pub total: u64,
}

impl BlockHistogram {
    pub fn from_blocks(blocks: &[BlockStats]) -> Self {
        let mut counts: HashMap<(u32, u32, u32, u32, u32), u64> = HashMap::new();
        for b in blocks {
            let key = (
                b.r_a as u32,
                b.l_a as u32,
                b.r as u32,
                b.l as u32,
                b.u_a as u32,
            );
            *counts.entry(key).or_insert(0) += 1;
        }
        Self {
            counts,
            total: blocks.len() as u64,
        }
    }
}

/// One point of the reweighted speed curve.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub lambda: f64,
    pub speed: Estimate,
    pub derivative: Estimate,
}

/// Evaluates the whole speed curve and its derivative from one unbiased
/// block histogram:
/// `f(λ) = Σ (k-ℓ) e^{λ(k_a-ℓ_a)} (2d/Z_λ)^m p̂₀` and the derivative with
/// the extra factor `(k_a - ℓ_a - m Z'_λ/Z_λ)`; the speed is `f/mean(τ)`.
pub fn speed_curve_from_unbiased(
    hist: &BlockHistogram,
    mean_tau: f64,
    d: usize,
    lambdas: &[f64],
) -> Result<Vec<CurvePoint>> {
    if hist.total == 0 {
        return Err(Error::EmptySample);
    }
    let n = hist.total as f64;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let z = z_lambda(d, lam);
        let z_prime = lam.exp() - (-lam).exp();
        let base = 2.0 * d as f64 / z;
        let mut sum_f = 0.0;
        let mut sum_f2 = 0.0;
        let mut sum_g = 0.0;
        let mut sum_g2 = 0.0;
        for (&(ka, la, k, l, m), &count) in &hist.counts {
            let c = count as f64;
            let drift = ka as f64 - la as f64;
            let w = (k as f64 - l as f64) * (lam * drift).exp() * base.powi(m as i32);
            let wd = w * (drift - m as f64 * z_prime / z);
            sum_f += c * w;
            sum_f2 += c * w * w;
            sum_g += c * wd;
            sum_g2 += c * wd * wd;
        }
        let f_hat = sum_f / n;
        let g_hat = sum_g / n;
        let var_f = ((sum_f2 / n) - f_hat * f_hat).max(0.0) / (n - 1.0);
        let var_g = ((sum_g2 / n) - g_hat * g_hat).max(0.0) / (n - 1.0);
        out.push(CurvePoint {
            lambda: lam,
            speed: Estimate::new(
                f_hat / mean_tau,
                var_f.sqrt() / mean_tau,
                hist.total as usize,
                Method::Importance,
            ),
            derivative: Estimate::new(
                g_hat / mean_tau,
                var_g.sqrt() / mean_tau,
                hist.total as usize,
                Method::Importance,
            ),
        });
    }
    Ok(out)
}

/// Checks `E_λ[e^{-2λ(R(t)-L(t))}] = 1` over `n` fixed-horizon trajectories.
pub fn check_martingale_identity(
    params: &ModelParams,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    let trajectories = engine::collect_trajectories(params, horizon, n, seed)?;
    let values: Vec<f64> = trajectories
        .iter()
        .map(|t| {
            let (r, l, _, _, _) = t.e1_counters();
            (-2.0 * params.lambda * (r as f64 - l as f64)).exp()
        })
        .collect();
    let (m, se) = stats::mean_stderr(&values);
    Ok(Estimate::new(m, se, n, Method::Identity))
}

/// Checks `E₀[(R(t)-L(t))(R_supp(t)-L_supp(t))] = 0`; requires `λ = 0`.
pub fn check_orthogonality(
    params: &ModelParams,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    if params.lambda != 0.0 {
        return Err(Error::InvalidParams(
            "orthogonality identity requires lambda = 0".into(),
        ));
    }
    let trajectories = engine::collect_trajectories(params, horizon, n, seed)?;
    let values: Vec<f64> = trajectories
        .iter()
        .map(|t| {
            let (r, l, ra, la, _) = t.e1_counters();
            let supp = (ra - r) as f64 - (la - l) as f64;
            (r as f64 - l as f64) * supp
        })
        .collect();
    let (m, se) = stats::mean_stderr(&values);
    Ok(Estimate::new(m, se, n, Method::Identity))
}

/// Normality report for standardized block-group sums.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CltReport {
    pub n_groups: usize,
    pub group_size: usize,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub const DEFAULT_CLT_GROUP_SIZE: usize = 200;

/// Standardizes sums of `R-L` over disjoint groups of blocks and tests them
/// against the standard normal.
pub fn check_clt(blocks: &[BlockStats], group_size: usize) -> Result<CltReport> {
    let n_groups = blocks.len() / group_size;
    if n_groups < 50 {
        return Err(Error::InsufficientSamples {
            need: group_size * 50,
            got: blocks.len(),
        });
    }
    let disp: Vec<f64> = blocks.iter().map(|b| b.disp_e1() as f64).collect();
    let mean_disp = stats::mean(&disp);
    let var_disp = stats::variance(&disp);
    let scale = (group_size as f64 * var_disp).sqrt();
    let standardized: Vec<f64> = (0..n_groups)
        .map(|g| {
            let sum: f64 = disp[g * group_size..(g + 1) * group_size].iter().sum();
            (sum - group_size as f64 * mean_disp) / scale
        })
        .collect();
    let (ks, p) = stats::ks_test_standard_normal(&standardized);
    Ok(CltReport {
        n_groups,
        group_size,
        ks_statistic: ks,
        ks_p_value: p,
        skewness: stats::skewness(&standardized),
        excess_kurtosis: stats::excess_kurtosis(&standardized),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{collect_blocks, substream};

    fn params(d: usize, p: f64, mu: f64, lambda: f64) -> ModelParams {
        ModelParams::new(d, p, mu, lambda).unwrap()
    }

    #[test]
    fn direct_speed_zero_at_no_bias() {
        let pr = params(2, 0.5, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 100_000, 1).unwrap();
        let est = estimate_speed_direct(&blocks).unwrap();
        assert!(est.within(0.0, 3.0), "v = {} (se {})", est.value, est.stderr);
    }

    #[test]
    fn direct_speed_rejects_empty() {
        assert!(estimate_speed_direct(&[]).is_err());
    }

    #[test]
    fn importance_identity_weight_at_target_zero() {
        let pr = params(2, 0.5, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 5_000, 2).unwrap();
        let direct = estimate_speed_direct(&blocks).unwrap();
        let imp = estimate_speed_importance(&blocks, 2, 0.0).unwrap();
        assert_eq!(imp.estimate.value, direct.value);
        assert!((imp.effective_sample_size - blocks.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn importance_weights_have_unit_mean() {
        // E₀[M_{τ₁}] = 1
        let pr = params(2, 0.5, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 100_000, 3).unwrap();
        let weights: Vec<f64> = blocks
            .iter()
            .map(|b| importance_weight(2, 0.5, b))
            .collect();
        assert!(weights.iter().all(|&w| w > 0.0));
        let (m, se) = stats::mean_stderr(&weights);
        assert!((m - 1.0).abs() <= 3.0 * se, "mean weight {m} (se {se})");
    }

    #[test]
    fn importance_agrees_with_direct() {
        let unbiased = params(2, 0.5, 1.0, 0.0);
        let biased = params(2, 0.5, 1.0, 0.5);
        let blocks0 = collect_blocks(&unbiased, 200_000, 4).unwrap();
        let blocks1 = collect_blocks(&biased, 200_000, 5).unwrap();
        let imp = estimate_speed_importance(&blocks0, 2, 0.5).unwrap();
        let direct = estimate_speed_direct(&blocks1).unwrap();
        let combined = (imp.estimate.stderr.powi(2) + direct.stderr.powi(2)).sqrt();
        assert!(
            (imp.estimate.value - direct.value).abs() <= 3.0 * combined,
            "importance {} vs direct {} (combined se {})",
            imp.estimate.value,
            direct.value,
            combined
        );
    }

    #[test]
    fn sigma2_positive() {
        let pr = params(2, 0.5, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 50_000, 6).unwrap();
        let mut rng = substream(6, 99, 0);
        let est = estimate_sigma2(&blocks, &mut rng).unwrap();
        assert!(est.value > 0.0);
        assert!(est.z_score() > 3.0);
    }

    #[test]
    fn sigma2_near_static_limit_for_p_close_to_one() {
        // p → 1: the walk along e1 performs (almost) every ±e1 attempt, so
        // R-L per block approaches the p=1 oracle below.
        let pr = params(1, 0.999, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 100_000, 7).unwrap();
        let mut rng = substream(7, 99, 0);
        let est = estimate_sigma2(&blocks, &mut rng).unwrap();

        // p=1 oracle: every attempt is performed; per block R-L is a lazy
        // ±1 walk over the attempts of the block. Simulated directly.
        let oracle_pr = params(1, 0.9999999, 1.0, 0.0);
        let oracle_blocks = collect_blocks(&oracle_pr, 100_000, 8).unwrap();
        let mut rng2 = substream(8, 99, 0);
        let oracle = estimate_sigma2(&oracle_blocks, &mut rng2).unwrap();
        assert!(
            (est.value - oracle.value).abs() / oracle.value < 0.10,
            "sigma2 {} vs p=1 oracle {}",
            est.value,
            oracle.value
        );
    }

    #[test]
    fn sigma2_continuous_in_lambda() {
        let blocks_a = collect_blocks(&params(2, 0.5, 1.0, 0.0), 50_000, 9).unwrap();
        let blocks_b = collect_blocks(&params(2, 0.5, 1.0, 0.01), 50_000, 10).unwrap();
        let mut rng = substream(9, 99, 0);
        let a = estimate_sigma2(&blocks_a, &mut rng).unwrap();
        let b = estimate_sigma2(&blocks_b, &mut rng).unwrap();
        let combined = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 5.0 * combined);
    }

    #[test]
    fn derivative_formula_matches_sigma2_at_zero() {
        // Einstein relation at λ = 0
        let pr = params(2, 0.5, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 100_000, 11).unwrap();
        let mut rng = substream(11, 99, 0);
        let deriv = estimate_derivative_formula(&blocks, &pr, &mut rng).unwrap();
        let sigma2 = estimate_sigma2(&blocks, &mut rng).unwrap();
        let combined = (deriv.stderr.powi(2) + sigma2.stderr.powi(2)).sqrt();
        assert!(
            (deriv.value - sigma2.value).abs() <= 3.0 * combined,
            "v'(0) = {} vs sigma2 = {} (combined {})",
            deriv.value,
            sigma2.value,
            combined
        );
    }

    #[test]
    fn curve_from_unbiased_agrees_with_importance() {
        let pr = params(2, 0.5, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 100_000, 12).unwrap();
        let hist = BlockHistogram::from_blocks(&blocks);
        let mean_tau = stats::mean(&blocks.iter().map(|b| b.tau).collect::<Vec<_>>());
        let curve = speed_curve_from_unbiased(&hist, mean_tau, 2, &[0.0, 0.5]).unwrap();
        // λ=0 point vanishes by symmetry
        assert!(curve[0].speed.within(0.0, 3.0));
        let imp = estimate_speed_importance(&blocks, 2, 0.5).unwrap();
        let combined = (curve[1].speed.stderr.powi(2) + imp.estimate.stderr.powi(2)).sqrt();
        // same mathematical object evaluated on the same blocks
        assert!(
            (curve[1].speed.value - imp.estimate.value).abs() <= 3.0 * combined + 1e-9,
            "curve {} vs importance {}",
            curve[1].speed.value,
            imp.estimate.value
        );
    }

    #[test]
    fn curve_derivative_matches_sigma2_at_zero() {
        // f'(0)/mean_tau = σ² via E₀[X¹(R_a-L_a)] = E₀[(X¹)²]
        let pr = params(2, 0.5, 1.0, 0.0);
        let blocks = collect_blocks(&pr, 100_000, 13).unwrap();
        let hist = BlockHistogram::from_blocks(&blocks);
        let mean_tau = stats::mean(&blocks.iter().map(|b| b.tau).collect::<Vec<_>>());
        let curve = speed_curve_from_unbiased(&hist, mean_tau, 2, &[0.0]).unwrap();
        let mut rng = substream(13, 99, 0);
        let sigma2 = estimate_sigma2(&blocks, &mut rng).unwrap();
        let combined = (curve[0].derivative.stderr.powi(2) + sigma2.stderr.powi(2)).sqrt();
        assert!(
            (curve[0].derivative.value - sigma2.value).abs() <= 3.0 * combined,
            "f'(0)/mean_tau = {} vs sigma2 = {}",
            curve[0].derivative.value,
            sigma2.value
        );
    }

    #[test]
    fn martingale_identity_trivial_at_zero() {
        let pr = params(2, 0.5, 1.0, 0.0);
        let est = check_martingale_identity(&pr, 5.0, 1000, 14).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn martingale_identity_holds() {
        // moderate λ·t keeps the weight tail light enough for the sample
        // mean to see the whole mass
        for (lam, horizon, seed) in [(0.3, 5.0, 15), (0.5, 5.0, 16), (1.0, 2.0, 17)] {
            let pr = params(2, 0.5, 1.0, lam);
            let est = check_martingale_identity(&pr, horizon, 200_000, seed).unwrap();
            assert!(
                est.within(1.0, 3.5),
                "lam={lam} t={horizon}: mean {} (se {})",
                est.value,
                est.stderr
            );
        }
    }

    #[test]
    fn orthogonality_holds() {
        let pr = params(2, 0.5, 1.0, 0.0);
        let est = check_orthogonality(&pr, 20.0, 100_000, 16).unwrap();
        assert!(est.within(0.0, 3.0), "mean {} (se {})", est.value, est.stderr);
    }

    #[test]
    fn orthogonality_rejects_bias() {
        let pr = params(2, 0.5, 1.0, 0.5);
        assert!(check_orthogonality(&pr, 5.0, 10, 17).is_err());
    }

    #[test]
    fn orthogonality_zero_horizon_exact() {
        let pr = params(2, 0.5, 1.0, 0.0);
        let est = check_orthogonality(&pr, 0.0, 100, 18).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn clt_group_sums_normal() {
        let pr = params(2, 0.5, 1.0, 1.0);
        let blocks = collect_blocks(&pr, 100_000, 19).unwrap();
        let report = check_clt(&blocks, DEFAULT_CLT_GROUP_SIZE).unwrap();
        assert!(report.ks_p_value > 0.01, "KS p = {}", report.ks_p_value);
        let se_skew = (6.0 / report.n_groups as f64).sqrt();
        assert!(report.skewness.abs() < 3.0 * se_skew);
    }

    #[test]
    fn clt_insufficient_blocks_rejected() {
        let pr = params(2, 0.5, 1.0, 1.0);
        let blocks = collect_blocks(&pr, 1_000, 20).unwrap();
        assert!(check_clt(&blocks, 200).is_err());
    }

    #[test]
    fn estimators_are_deterministic() {
        let pr = params(2, 0.5, 1.0, 0.5);
        let blocks = collect_blocks(&pr, 5_000, 21).unwrap();
        let mut rng_a = substream(21, 99, 0);
        let mut rng_b = substream(21, 99, 0);
        let a = estimate_derivative_formula(&blocks, &pr, &mut rng_a).unwrap();
        let b = estimate_derivative_formula(&blocks, &pr, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }
}
