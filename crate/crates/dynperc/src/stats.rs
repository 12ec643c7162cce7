//! Monte Carlo summaries and the statistical toolbox used by the
//! estimators and the verification suite.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Which estimation route produced an [`Estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Direct,
    Importance,
    DerivativeFormula,
    CoupledFd,
    Identity,
}

/// A Monte Carlo summary: point value, standard error and replica count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub method: Method,
}

impl Estimate {
    pub fn new(value: f64, stderr: f64, n: usize, method: Method) -> Self {
        debug_assert!(stderr >= 0.0);
        debug_assert!(n >= 2 || stderr == 0.0);
        Self {
            value,
            stderr,
            n,
            method,
        }
    }

    /// Whether `target` lies within `k` standard errors of the value.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }

    /// |value| / stderr, the z-score against zero.
    pub fn z_score(&self) -> f64 {
        if self.stderr == 0.0 {
            if self.value == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.value / self.stderr
        }
    }
}

/// Neumaier compensated sum; reductions stay reproducible and accurate.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() - 1) as f64
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (variance(xs) / xs.len() as f64).sqrt())
}

/// Ratio estimator `mean(num) / mean(den)` with delta-method standard error
/// on the joint sample.
pub fn ratio_estimate(num: &[f64], den: &[f64]) -> Result<(f64, f64)> {
    if num.is_empty() || num.len() != den.len() {
        return Err(Error::EmptySample);
    }
    let n = num.len() as f64;
    let mx = mean(num);
    let my = mean(den);
    let r = mx / my;
    if num.len() < 2 {
        return Ok((r, 0.0));
    }
    // Var(r) ≈ (Var(x) - 2r Cov(x,y) + r² Var(y)) / (n ȳ²)
    let vx = variance(num);
    let vy = variance(den);
    let cov = compensated_sum(
        num.iter()
            .zip(den)
            .map(|(x, y)| (x - mx) * (y - my)),
    ) / (n - 1.0);
    let var_r = (vx - 2.0 * r * cov + r * r * vy) / (n * my * my);
    Ok((r, var_r.max(0.0).sqrt()))
}

/// Nonparametric bootstrap standard error of a statistic over index samples.
pub fn bootstrap_stderr<F>(rng: &mut impl Rng, n: usize, resamples: usize, stat: F) -> f64
where
    F: Fn(&[usize]) -> f64,
{
    let mut values = Vec::with_capacity(resamples);
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..n);
        }
        values.push(stat(&idx));
    }
    variance(&values).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test against the standard normal. Returns `(D, p)`.
pub fn ks_test_standard_normal(samples: &[f64]) -> (f64, f64) {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let cdf = normal_cdf(x);
        let hi = (i as f64 + 1.0) / n - cdf;
        let lo = cdf - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    let stat = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    (d, kolmogorov_sf(stat))
}

/// Two-sample KS test. Returns `(D, p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    xb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let mut i = 0;
    let mut j = 0;
    let mut d = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let (va, vb) = (xa[i], xb[j]);
        if va <= vb {
            i += 1;
        }
        if vb <= va {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let stat = (ne + 0.12 + 0.11 / ne) * d;
    (d, kolmogorov_sf(stat))
}

/// Upper-tail probability of a chi-square distribution.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    use statrs::distribution::ChiSquared;
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - ChiSquared::new(dof).unwrap().cdf(x)
}

pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let s2 = variance(xs);
    let m3 = compensated_sum(xs.iter().map(|x| (x - m).powi(3))) / n;
    m3 / s2.powf(1.5)
}

pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let s2 = variance(xs);
    let m4 = compensated_sum(xs.iter().map(|x| (x - m).powi(4))) / n;
    m4 / (s2 * s2) - 3.0
}

/// Least-squares slope of the log empirical survival function over the
/// upper decade of the sample, with a bootstrap confidence interval.
///
/// A clearly negative slope with a CI excluding zero is the fingerprint of
/// an exponential tail.
pub fn fit_tail_exponent(
    samples: &[f64],
    rng: &mut impl Rng,
) -> Result<(f64, (f64, f64))> {
    if samples.len() < 10_000 {
        return Err(Error::InsufficientSamples {
            need: 10_000,
            got: samples.len(),
        });
    }
    let slope = tail_slope(samples)?;
    let resamples = 200;
    let mut slopes = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; samples.len()];
    for _ in 0..resamples {
        for slot in buf.iter_mut() {
            *slot = samples[rng.gen_range(0..samples.len())];
        }
        if let Ok(s) = tail_slope(&buf) {
            slopes.push(s);
        }
    }
    if slopes.len() < resamples / 2 {
        return Err(Error::DegenerateSample("bootstrap tail fits failed".into()));
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = slopes[(slopes.len() as f64 * 0.025) as usize];
    let hi = slopes[((slopes.len() as f64 * 0.975) as usize).min(slopes.len() - 1)];
    Ok((slope, (lo, hi)))
}

fn tail_slope(samples: &[f64]) -> Result<f64> {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    // survival between the 90th percentile and the last ~10 order statistics
    let start = (n as f64 * 0.90) as usize;
    let end = n - 10;
    if end <= start + 10 {
        return Err(Error::DegenerateSample("tail too short".into()));
    }
    let points: Vec<(f64, f64)> = (start..end)
        .map(|i| (xs[i], ((n - i) as f64 / n as f64).ln()))
        .collect();
    let mx = mean(&points.iter().map(|p| p.0).collect::<Vec<_>>());
    let my = mean(&points.iter().map(|p| p.1).collect::<Vec<_>>());
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateSample("constant tail".into()));
    }
    Ok(sxy / sxx)
}
