//! Model parameters and the attempted-jump distribution of the walker.
//!
//! The walker on `Z^d` attempts jumps at rate 1. A jump in direction
//! `+e1` is chosen with probability `e^λ / Z_λ`, `-e1` with `e^{-λ} / Z_λ`
//! and every other axis direction with `1 / Z_λ`, where
//! `Z_λ = e^λ + e^{-λ} + 2d - 2`.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use std::fmt;

use crate::error::{Error, Result};

/// Parameter quadruple `(d, p, μ, λ)` of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub p: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl ModelParams {
    /// Validates `d ≥ 1`, `0 < p < 1`, `μ > 0`, `λ ≥ 0`.
    pub fn new(d: usize, p: f64, mu: f64, lambda: f64) -> Result<Self> {
        if d < 1 {
            return Err(Error::InvalidParams(format!("d must be >= 1, got {d}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParams(format!("p must be in (0,1), got {p}")));
        }
        if !(mu > 0.0) {
            return Err(Error::InvalidParams(format!("mu must be > 0, got {mu}")));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(Self { d, p, mu, lambda })
    }

    /// Normalization `Z_λ = e^λ + e^{-λ} + 2d - 2`.
    pub fn z_lambda(&self) -> f64 {
        z_lambda(self.d, self.lambda)
    }

    /// Same parameters with a different bias.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.d, self.p, self.mu, lambda)
    }
}

/// `Z_λ` for dimension `d` and bias `λ` (also defined for negative `λ`).
pub fn z_lambda(d: usize, lambda: f64) -> f64 {
    lambda.exp() + (-lambda).exp() + 2.0 * d as f64 - 2.0
}

/// One of the `2d` axis directions of `Z^d`.
///
/// `axis` is 1-based; `positive` selects `+e_axis` or `-e_axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Direction {
    pub axis: u8,
    pub positive: bool,
}

impl Direction {
    pub fn new(axis: u8, positive: bool) -> Self {
        debug_assert!(axis >= 1);
        Self { axis, positive }
    }

    /// All `2d` directions in the fixed CDF order:
    /// `+e1, -e1, +e2, -e2, ..., +ed, -ed`.
    pub fn all(d: usize) -> impl Iterator<Item = Direction> {
        (1..=d as u8).flat_map(|axis| {
            [Direction::new(axis, true), Direction::new(axis, false)].into_iter()
        })
    }

    pub fn sign(&self) -> i32 {
        if self.positive {
            1
        } else {
            -1
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}e{}", if self.positive { '+' } else { '-' }, self.axis)
    }
}

/// A lattice site, `d` integer coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Site(pub SmallVec<[i32; 4]>);

impl Site {
    pub fn origin(d: usize) -> Self {
        Site(smallvec::smallvec![0; d])
    }

    /// Neighbouring site in the given direction.
    pub fn step(&self, dir: Direction) -> Site {
        let mut coords = self.0.clone();
        coords[(dir.axis - 1) as usize] += dir.sign();
        Site(coords)
    }
}

/// Canonical key for the edge `{base, base + e_axis}`.
///
/// The edge is always keyed by its lower endpoint along `axis`, so the two
/// sites incident to an edge map to exactly one `EdgeId`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeId {
    pub base: Site,
    pub axis: u8,
}

impl EdgeId {
    /// The edge examined when attempting to move from `from` in `dir`.
    pub fn from_step(from: &Site, dir: Direction) -> EdgeId {
        if dir.positive {
            EdgeId {
                base: from.clone(),
                axis: dir.axis,
            }
        } else {
            EdgeId {
                base: from.step(dir),
                axis: dir.axis,
            }
        }
    }
}

/// Jump probabilities in the fixed CDF order `+e1, -e1, +e2, -e2, ...`.
pub fn jump_probabilities(params: &ModelParams) -> Vec<(Direction, f64)> {
    let z = params.z_lambda();
    Direction::all(params.d)
        .map(|dir| {
            let mass = if dir.axis == 1 {
                (params.lambda * dir.sign() as f64).exp()
            } else {
                1.0
            };
            (dir, mass / z)
        })
        .collect()
}

/// Inverse-CDF map from a uniform `u ∈ [0,1)` to a direction.
///
/// The threshold layout follows the fixed CDF order so the two-bias
/// coupling can compare cumulative masses directly.
pub fn sample_direction(params: &ModelParams, u: f64) -> Direction {
    debug_assert!((0.0..1.0).contains(&u));
    let z = params.z_lambda();
    let right = params.lambda.exp() / z;
    if u < right {
        return Direction::new(1, true);
    }
    let left = (-params.lambda).exp() / z;
    if u < right + left || params.d == 1 {
        return Direction::new(1, false);
    }
    // remaining 2d-2 directions carry 1/Z each
    let idx = ((u - right - left) * z).floor() as usize;
    let idx = idx.min(2 * params.d - 3); // guard the top edge of the interval
    let axis = (idx / 2 + 2) as u8;
    Direction::new(axis, idx % 2 == 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn z_lambda_values() {
        let p = ModelParams::new(1, 0.5, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(p.z_lambda(), 2.0, epsilon = 1e-15);
        let p = ModelParams::new(2, 0.5, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(p.z_lambda(), 4.0, epsilon = 1e-15);
        let p = ModelParams::new(2, 0.5, 1.0, 2.0_f64.ln()).unwrap();
        assert_abs_diff_eq!(p.z_lambda(), 4.5, epsilon = 1e-14);
    }

    #[test]
    fn z_lambda_is_even() {
        for lam in [0.1, 0.7, 2.3, 5.0] {
            assert_abs_diff_eq!(z_lambda(3, lam), z_lambda(3, -lam), epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ModelParams::new(0, 0.5, 1.0, 0.0).is_err());
        assert!(ModelParams::new(2, 0.0, 1.0, 0.0).is_err());
        assert!(ModelParams::new(2, 1.0, 1.0, 0.0).is_err());
        assert!(ModelParams::new(2, 0.5, 0.0, 0.0).is_err());
        assert!(ModelParams::new(2, 0.5, 1.0, -0.1).is_err());
        assert!(ModelParams::new(2, 0.5, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn jump_probabilities_sum_to_one() {
        for (d, lam) in [(1, 0.0), (2, 0.0), (2, 1.5), (3, 4.0), (4, 0.3)] {
            let p = ModelParams::new(d, 0.4, 1.0, lam).unwrap();
            let probs = jump_probabilities(&p);
            assert_eq!(probs.len(), 2 * d);
            let total: f64 = probs.iter().map(|(_, q)| q).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            assert!(probs.iter().all(|(_, q)| *q > 0.0));
        }
    }

    #[test]
    fn jump_probabilities_symmetric_unbiased() {
        let p = ModelParams::new(2, 0.5, 1.0, 0.0).unwrap();
        for (_, q) in jump_probabilities(&p) {
            assert_abs_diff_eq!(q, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn jump_probabilities_substitution() {
        // d=2, λ=ln2: +e1 ↦ 2/4.5, -e1 ↦ 0.5/4.5, ±e2 ↦ 1/4.5
        let p = ModelParams::new(2, 0.5, 1.0, 2.0_f64.ln()).unwrap();
        let probs = jump_probabilities(&p);
        assert_abs_diff_eq!(probs[0].1, 2.0 / 4.5, epsilon = 1e-14);
        assert_abs_diff_eq!(probs[1].1, 0.5 / 4.5, epsilon = 1e-14);
        assert_abs_diff_eq!(probs[2].1, 1.0 / 4.5, epsilon = 1e-14);
        assert_abs_diff_eq!(probs[3].1, 1.0 / 4.5, epsilon = 1e-14);
    }

    #[test]
    fn large_bias_limit() {
        let p = ModelParams::new(1, 0.5, 1.0, 20.0).unwrap();
        let probs = jump_probabilities(&p);
        assert!(probs[1].1 < 1e-17);
        assert!((probs[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_direction_thresholds() {
        let p = ModelParams::new(2, 0.5, 1.0, 0.0).unwrap();
        assert_eq!(sample_direction(&p, 0.10), Direction::new(1, true));
        assert_eq!(sample_direction(&p, 0.30), Direction::new(1, false));
        let p = ModelParams::new(2, 0.5, 1.0, 2.0_f64.ln()).unwrap();
        // cumulative: 2/4.5 ≈ 0.444 < 0.5 < 2.5/4.5 ≈ 0.556
        assert_eq!(sample_direction(&p, 0.50), Direction::new(1, false));
    }

    #[test]
    fn sample_direction_matches_cdf_enumeration() {
        // independent oracle: walk the CDF in declared order
        let oracle = |params: &ModelParams, u: f64| -> Direction {
            let mut acc = 0.0;
            let probs = jump_probabilities(params);
            for &(dir, q) in &probs {
                acc += q;
                if u < acc {
                    return dir;
                }
            }
            probs.last().unwrap().0
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for d in 1..=4 {
            for lam in [0.0, 0.3, 1.0, 3.0] {
                let p = ModelParams::new(d, 0.5, 1.0, lam).unwrap();
                for _ in 0..2000 {
                    let u: f64 = rng.gen();
                    assert_eq!(sample_direction(&p, u), oracle(&p, u));
                }
            }
        }
    }

    #[test]
    fn sample_direction_chi_square() {
        // push-forward of the uniform law equals jump_probabilities
        let p = ModelParams::new(3, 0.5, 1.0, 0.8).unwrap();
        let probs = jump_probabilities(&p);
        let n = 10_000_000usize;
        let mut counts = vec![0u64; 2 * p.d];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            let dir = sample_direction(&p, rng.gen());
            let idx = (dir.axis as usize - 1) * 2 + usize::from(!dir.positive);
            counts[idx] += 1;
        }
        let mut chi2 = 0.0;
        for (i, &(_, q)) in probs.iter().enumerate() {
            let expected = q * n as f64;
            let diff = counts[i] as f64 - expected;
            chi2 += diff * diff / expected;
        }
        let dof = (2 * p.d - 1) as f64;
        let pval = crate::stats::chi_square_sf(chi2, dof);
        assert!(pval > 0.001, "chi2={chi2}, p={pval}");
    }

    #[test]
    fn edge_id_canonical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let d = rng.gen_range(1..=4);
            let coords: SmallVec<[i32; 4]> = (0..d).map(|_| rng.gen_range(-50..50)).collect();
            let site = Site(coords);
            for dir in Direction::all(d) {
                let neighbour = site.step(dir);
                let e1 = EdgeId::from_step(&site, dir);
                let back = Direction::new(dir.axis, !dir.positive);
                let e2 = EdgeId::from_step(&neighbour, back);
                assert_eq!(e1, e2);
            }
        }
    }
}
