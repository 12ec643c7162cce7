//! Couplings of two walks: the two-bias coupling with a shared regeneration
//! time (for derivative estimation by finite differences) and the monotone
//! coupling of two 1-d walks in one shared environment.

use rand::Rng;
use smallvec::SmallVec;

use crate::engine::{exp_sample, substream, streams, BlockStats, InfectedSet, DEFAULT_MAX_EVENTS};
use crate::env::EnvStore;
use crate::error::{Error, Result};
use crate::model::{z_lambda, Direction, EdgeId, ModelParams, Site};
use crate::stats::{self, Estimate, Method};

/// Colour of one attempt point of the two-bias coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    /// Both walks attempt `+e1`.
    Good,
    /// Both walks attempt the same direction other than `+e1`.
    Bad,
    /// The attempted directions differ.
    VeryBad,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ColorCounts {
    pub good: u64,
    pub bad: u64,
    pub very_bad: u64,
}

impl ColorCounts {
    fn record(&mut self, c: Color) {
        match c {
            Color::Good => self.good += 1,
            Color::Bad => self.bad += 1,
            Color::VeryBad => self.very_bad += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.good + self.bad + self.very_bad
    }
}

fn lateral(idx: usize) -> Direction {
    Direction::new((idx / 2 + 2) as u8, idx % 2 == 0)
}

/// Maximal coupling of the attempt laws at biases `λ` and `λ + ε` from one
/// shared uniform.
///
/// Interval layout, with `a = e^λ/Z_λ` and `a' = e^{λ+ε}/Z_{λ+ε}`:
/// `[0, a)` both `+e1`; `[a, a')` the higher-bias walk attempts `+e1` while
/// the lower one attempts a lateral direction or `-e1` (split by the mass
/// deficits `1/Z_λ - 1/Z_{λ+ε}` per lateral direction, remainder `-e1`);
/// then `2d-2` pieces of width `1/Z_{λ+ε}` on which both attempt the same
/// lateral direction; the final piece of width `e^{-λ-ε}/Z_{λ+ε}` gives
/// both `-e1`.
pub fn coupled_directions(params: &ModelParams, eps: f64, u: f64) -> (Direction, Direction, Color) {
    debug_assert!((0.0..1.0).contains(&u) && eps > 0.0);
    let d = params.d;
    let z = params.z_lambda();
    let zh = z_lambda(d, params.lambda + eps);
    let a = params.lambda.exp() / z;
    let a_hi = (params.lambda + eps).exp() / zh;
    if u < a {
        return (Direction::new(1, true), Direction::new(1, true), Color::Good);
    }
    if u < a_hi {
        let offset = u - a;
        let w = 1.0 / z - 1.0 / zh;
        let lateral_deficit = (2 * d - 2) as f64 * w;
        let lo = if d > 1 && offset < lateral_deficit {
            lateral(((offset / w).floor() as usize).min(2 * d - 3))
        } else {
            Direction::new(1, false)
        };
        return (lo, Direction::new(1, true), Color::VeryBad);
    }
    let offset = u - a_hi;
    if d > 1 && offset < (2 * d - 2) as f64 / zh {
        let dir = lateral(((offset * zh).floor() as usize).min(2 * d - 3));
        return (dir, dir, Color::Bad);
    }
    (Direction::new(1, false), Direction::new(1, false), Color::Bad)
}

struct PairWalker {
    pos: Site,
    r: u64,
    l: u64,
    r_a: u64,
    l_a: u64,
    u: u64,
    u_a: u64,
}

impl PairWalker {
    fn at_origin(d: usize) -> Self {
        PairWalker {
            pos: Site::origin(d),
            r: 0,
            l: 0,
            r_a: 0,
            l_a: 0,
            u: 0,
            u_a: 0,
        }
    }

    fn apply(&mut self, dir: Direction, open: bool) {
        self.u_a += 1;
        if dir.axis == 1 {
            if dir.positive {
                self.r_a += 1;
            } else {
                self.l_a += 1;
            }
        }
        if open {
            self.u += 1;
            if dir.axis == 1 {
                if dir.positive {
                    self.r += 1;
                } else {
                    self.l += 1;
                }
            }
            self.pos = self.pos.step(dir);
        }
    }

    fn into_stats(self, tau: f64) -> BlockStats {
        let displacement: SmallVec<[i64; 4]> = self.pos.0.iter().map(|&c| c as i64).collect();
        BlockStats {
            tau,
            displacement,
            r: self.r,
            l: self.l,
            r_a: self.r_a,
            l_a: self.l_a,
            u: self.u,
            u_a: self.u_a,
        }
    }
}

/// One regeneration block of the coupled pair. The regeneration time is
/// shared between the two walks by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledBlock {
    pub lo: BlockStats,
    pub hi: BlockStats,
    pub colors: ColorCounts,
    /// Attempt index (0-based) of the first very-bad point, if one occurred
    /// before regeneration. Absent iff the walks never decoupled.
    pub first_very_bad_index: Option<u64>,
}

fn pair_attempt(
    params_p: f64,
    params_mu: f64,
    env: &mut EnvStore,
    infected: &mut InfectedSet,
    walker: &mut PairWalker,
    dir: Direction,
    t: f64,
    removal_time: f64,
    rng: &mut impl Rng,
) {
    let edge = EdgeId::from_step(&walker.pos, dir);
    let open = env.examine(params_p, params_mu, &edge, t, rng);
    walker.apply(dir, open);
    let copy_index = infected.insert_scheduled(&edge, removal_time);
    if copy_index == 1 {
        env.mark_managed(&edge);
    }
}

/// Runs the walks at biases `λ` and `λ + ε` together: one attempt clock,
/// one direction uniform and one removal lifetime per attempt are shared,
/// so the infected-set sizes coincide and regeneration happens at the same
/// time for both. Environments are shared until the first very-bad point
/// and branch there.
pub fn run_coupled_block(
    params: &ModelParams,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<CoupledBlock> {
    run_coupled_block_with_guard(params, eps, rng, DEFAULT_MAX_EVENTS)
}

pub fn run_coupled_block_with_guard(
    params: &ModelParams,
    eps: f64,
    rng: &mut impl Rng,
    max_events: u64,
) -> Result<CoupledBlock> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParams(format!("eps must be > 0, got {eps}")));
    }
    let mut env_lo = EnvStore::new();
    let mut inf_lo = InfectedSet::new();
    let mut walker_lo = PairWalker::at_origin(params.d);
    let mut walker_hi = PairWalker::at_origin(params.d);
    // environment and infected set of the higher-bias walk, cloned from the
    // shared ones at the first very-bad point
    let mut branch: Option<(EnvStore, InfectedSet)> = None;
    let mut colors = ColorCounts::default();
    let mut first_very_bad_index = None;
    let mut next_attempt = exp_sample(rng, 1.0);
    let mut events = 0u64;
    let tau;
    loop {
        events += 1;
        if events > max_events {
            return Err(Error::Censored { events });
        }
        match inf_lo.next_removal_time() {
            Some(rt) if rt <= next_attempt => {
                let (t, copy) = inf_lo.pop_removal().expect("scheduled removal missing");
                if copy.copy_index == 1 {
                    env_lo.apply_forced_refresh(&copy.edge, t);
                }
                if let Some((env_hi, inf_hi)) = branch.as_mut() {
                    let (t_hi, copy_hi) = inf_hi.pop_removal().expect("schedules diverged");
                    assert_eq!(t_hi, t, "coupled removal schedules diverged");
                    if copy_hi.copy_index == 1 {
                        env_hi.apply_forced_refresh(&copy_hi.edge, t_hi);
                    }
                    assert_eq!(inf_hi.len(), inf_lo.len());
                }
                if inf_lo.is_empty() {
                    tau = t;
                    break;
                }
            }
            _ => {
                let t = next_attempt;
                let (dir_lo, dir_hi, color) = coupled_directions(params, eps, rng.gen());
                if color == Color::VeryBad && first_very_bad_index.is_none() {
                    first_very_bad_index = Some(colors.total());
                }
                colors.record(color);
                let removal_time = t + exp_sample(rng, params.mu);
                match branch.as_mut() {
                    None if dir_lo == dir_hi => {
                        // identical histories: one examination serves both
                        let edge = EdgeId::from_step(&walker_lo.pos, dir_lo);
                        let open = env_lo.examine(params.p, params.mu, &edge, t, rng);
                        walker_lo.apply(dir_lo, open);
                        walker_hi.apply(dir_hi, open);
                        let copy_index = inf_lo.insert_scheduled(&edge, removal_time);
                        if copy_index == 1 {
                            env_lo.mark_managed(&edge);
                        }
                    }
                    None => {
                        let mut env_hi = env_lo.clone();
                        let mut inf_hi = inf_lo.clone();
                        pair_attempt(
                            params.p, params.mu, &mut env_lo, &mut inf_lo, &mut walker_lo,
                            dir_lo, t, removal_time, rng,
                        );
                        pair_attempt(
                            params.p, params.mu, &mut env_hi, &mut inf_hi, &mut walker_hi,
                            dir_hi, t, removal_time, rng,
                        );
                        branch = Some((env_hi, inf_hi));
                    }
                    Some((env_hi, inf_hi)) => {
                        pair_attempt(
                            params.p, params.mu, &mut env_lo, &mut inf_lo, &mut walker_lo,
                            dir_lo, t, removal_time, rng,
                        );
                        pair_attempt(
                            params.p, params.mu, env_hi, inf_hi, &mut walker_hi,
                            dir_hi, t, removal_time, rng,
                        );
                    }
                }
                next_attempt += exp_sample(rng, 1.0);
            }
        }
    }
    let lo = walker_lo.into_stats(tau);
    let hi = walker_hi.into_stats(tau);
    lo.assert_invariants();
    hi.assert_invariants();
    Ok(CoupledBlock {
        lo,
        hi,
        colors,
        first_very_bad_index,
    })
}

/// Collects `n` coupled blocks; reproducible per `(seed, index)` and
/// thread-count independent.
pub fn collect_coupled_blocks(
    params: &ModelParams,
    eps: f64,
    n_blocks: usize,
    seed: u64,
) -> Result<Vec<CoupledBlock>> {
    use rayon::prelude::*;
    (0..n_blocks as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, streams::COUPLED, i);
            run_coupled_block(params, eps, &mut rng)
        })
        .collect()
}

/// Finite-difference estimator of `v'(λ)` from coupled blocks:
/// `mean[(X_hi - X_lo)/ε] / mean(τ)` with delta-method standard error.
pub fn estimate_derivative_coupled(blocks: &[CoupledBlock], eps: f64) -> Result<Estimate> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::InvalidParams(format!(
            "eps must be in (0, 0.1] for the finite-difference estimator, got {eps}"
        )));
    }
    if blocks.is_empty() {
        return Err(Error::EmptySample);
    }
    let num: Vec<f64> = blocks
        .iter()
        .map(|b| {
            assert_eq!(b.lo.tau, b.hi.tau);
            (b.hi.disp_e1() - b.lo.disp_e1()) as f64 / eps
        })
        .collect();
    let den: Vec<f64> = blocks.iter().map(|b| b.lo.tau).collect();
    let (value, se) = stats::ratio_estimate(&num, &den)?;
    Ok(Estimate::new(value, se, blocks.len(), Method::CoupledFd))
}

/// One examination by a 1-d walker at `pos` in the shared environment,
/// adding one copy to the shared infected set.
fn examine_and_infect_1d(
    env: &mut EnvStore,
    infected: &mut InfectedSet,
    p: f64,
    mu: f64,
    pos: i32,
    dir: Direction,
    t: f64,
    rng: &mut impl Rng,
) -> bool {
    let mut site = Site::origin(1);
    site.0[0] = pos;
    let edge = EdgeId::from_step(&site, dir);
    let open = env.examine(p, mu, &edge, t, rng);
    let copy_index = infected.insert(&edge, t, mu, rng);
    if copy_index == 1 {
        env.mark_managed(&edge);
    }
    open
}

/// Probability of attempting `+e1` rather than `-e1` for a 1-d walk.
fn right_prob(lambda: f64) -> f64 {
    lambda.exp() / (lambda.exp() + (-lambda).exp())
}

/// Lower bound on the probability that the monotone pair is strictly
/// separated at its regeneration time:
/// `(θ(λ_hi) - θ(λ_lo)) · (μ/(μ+1))²`.
pub fn monotone_separation_bound(mu: f64, lambda_lo: f64, lambda_hi: f64) -> f64 {
    let theta = right_prob(lambda_hi) - right_prob(lambda_lo);
    theta * (mu / (mu + 1.0)).powi(2)
}

/// Outcome of one regeneration block of the monotone 1-d pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonePair {
    pub disp_lo: i64,
    pub disp_hi: i64,
    pub tau: f64,
    /// Strict separation at the regeneration time.
    pub separated: bool,
}

/// Runs two 1-d walks with biases `λ_lo ≤ λ_hi` in one shared environment.
///
/// Co-located walks attempt at shared clock points with monotone direction
/// coupling (both right iff `U < θ(λ_lo)`, higher-bias walk alone right iff
/// `θ(λ_lo) ≤ U < θ(λ_hi)`); separated walks attempt on independent rate-1
/// clocks. Every examination by either walk adds a copy to one shared
/// infected set, whose emptying is the pair's regeneration time. The
/// displacement ordering `X_lo ≤ X_hi` is a hard invariant.
pub fn run_monotone_pair_1d(
    p: f64,
    mu: f64,
    lambda_lo: f64,
    lambda_hi: f64,
    rng: &mut impl Rng,
) -> Result<MonotonePair> {
    run_monotone_pair_1d_with_guard(p, mu, lambda_lo, lambda_hi, rng, DEFAULT_MAX_EVENTS)
}

pub fn run_monotone_pair_1d_with_guard(
    p: f64,
    mu: f64,
    lambda_lo: f64,
    lambda_hi: f64,
    rng: &mut impl Rng,
    max_events: u64,
) -> Result<MonotonePair> {
    ModelParams::new(1, p, mu, lambda_lo)?;
    ModelParams::new(1, p, mu, lambda_hi)?;
    if !(lambda_lo > 0.0 && lambda_lo < lambda_hi) {
        return Err(Error::InvalidParams(format!(
            "need 0 < lambda_lo < lambda_hi, got {lambda_lo}, {lambda_hi}"
        )));
    }
    let theta_lo = right_prob(lambda_lo);
    let theta_hi = right_prob(lambda_hi);
    let mut env = EnvStore::new();
    let mut infected = InfectedSet::new();
    let mut pos_lo: i32 = 0;
    let mut pos_hi: i32 = 0;
    // while co-located the two clocks are kept equal and fire together
    let mut next_lo = exp_sample(rng, 1.0);
    let mut next_hi = next_lo;
    let mut events = 0u64;
    let tau;

    loop {
        events += 1;
        if events > max_events {
            return Err(Error::Censored { events });
        }
        let colocated = pos_lo == pos_hi;
        let next_attempt = if colocated {
            debug_assert_eq!(next_lo, next_hi);
            next_lo
        } else {
            next_lo.min(next_hi)
        };
        match infected.next_removal_time() {
            Some(rt) if rt <= next_attempt => {
                let (t, copy) = infected.pop_removal().expect("scheduled removal missing");
                if copy.copy_index == 1 {
                    env.apply_forced_refresh(&copy.edge, t);
                }
                if infected.is_empty() {
                    tau = t;
                    break;
                }
            }
            _ if colocated => {
                let t = next_lo;
                let u: f64 = rng.gen();
                let dir_lo = Direction::new(1, u < theta_lo);
                let dir_hi = Direction::new(1, u < theta_hi);
                if dir_lo == dir_hi {
                    let open = examine_and_infect_1d(&mut env, &mut infected, p, mu, pos_lo, dir_lo, t, rng);
                    if open {
                        let step = dir_lo.sign();
                        pos_lo += step;
                        pos_hi += step;
                    }
                    next_lo = t + exp_sample(rng, 1.0);
                    next_hi = next_lo;
                } else {
                    // lower-bias walk left, higher-bias walk right
                    let open_lo =
                        examine_and_infect_1d(&mut env, &mut infected, p, mu, pos_lo, dir_lo, t, rng);
                    let open_hi =
                        examine_and_infect_1d(&mut env, &mut infected, p, mu, pos_hi, dir_hi, t, rng);
                    if open_lo {
                        pos_lo -= 1;
                    }
                    if open_hi {
                        pos_hi += 1;
                    }
                    if pos_lo == pos_hi {
                        next_lo = t + exp_sample(rng, 1.0);
                        next_hi = next_lo;
                    } else {
                        // separated: independent clocks from here on
                        next_lo = t + exp_sample(rng, 1.0);
                        next_hi = t + exp_sample(rng, 1.0);
                    }
                }
            }
            _ => {
                // separated walks attempt independently
                let lo_first = next_lo <= next_hi;
                let t = if lo_first { next_lo } else { next_hi };
                let theta = if lo_first { theta_lo } else { theta_hi };
                let pos = if lo_first { pos_lo } else { pos_hi };
                let dir = Direction::new(1, rng.gen::<f64>() < theta);
                let open = examine_and_infect_1d(&mut env, &mut infected, p, mu, pos, dir, t, rng);
                if lo_first {
                    if open {
                        pos_lo += dir.sign();
                    }
                    next_lo = t + exp_sample(rng, 1.0);
                } else {
                    if open {
                        pos_hi += dir.sign();
                    }
                    next_hi = t + exp_sample(rng, 1.0);
                }
                if pos_lo == pos_hi {
                    // re-coalesced: resume the shared clock. The other
                    // walk's pending attempt is memoryless, so redrawing a
                    // shared residual preserves both marginals.
                    next_lo = t + exp_sample(rng, 1.0);
                    next_hi = next_lo;
                }
            }
        }
        assert!(
            pos_lo <= pos_hi,
            "monotonicity violated: {pos_lo} > {pos_hi}"
        );
    }
    Ok(MonotonePair {
        disp_lo: pos_lo as i64,
        disp_hi: pos_hi as i64,
        tau,
        separated: pos_lo < pos_hi,
    })
}

/// Collects `n` monotone pairs; reproducible per `(seed, index)`.
pub fn collect_monotone_pairs(
    p: f64,
    mu: f64,
    lambda_lo: f64,
    lambda_hi: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<MonotonePair>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, streams::MONOTONE, i);
            run_monotone_pair_1d(p, mu, lambda_lo, lambda_hi, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::coupling_rates;
    use crate::engine::collect_blocks;
    use crate::estimate;
    use crate::model::jump_probabilities;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, p: f64, mu: f64, lambda: f64) -> ModelParams {
        ModelParams::new(d, p, mu, lambda).unwrap()
    }

    #[test]
    fn coupled_directions_agree_unless_very_bad() {
        let pr = params(3, 0.5, 1.0, 1.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let (lo, hi, color) = coupled_directions(&pr, 0.1, rng.gen());
            assert_eq!(lo == hi, color != Color::VeryBad);
            if color == Color::Good {
                assert_eq!(lo, Direction::new(1, true));
            }
            if color == Color::VeryBad {
                assert_eq!(hi, Direction::new(1, true));
                assert_ne!(lo, Direction::new(1, true));
            }
        }
    }

    #[test]
    fn coupled_directions_marginals_chi_square() {
        for (d, lam, eps) in [(2, 0.8, 0.1), (3, 2.0, 0.05), (1, 1.0, 0.2)] {
            let pr = params(d, 0.5, 1.0, lam);
            let pr_hi = pr.with_lambda(lam + eps).unwrap();
            let n = 1_000_000usize;
            let mut counts_lo = vec![0u64; 2 * d];
            let mut counts_hi = vec![0u64; 2 * d];
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let slot = |dir: Direction| (dir.axis as usize - 1) * 2 + usize::from(!dir.positive);
            for _ in 0..n {
                let (lo, hi, _) = coupled_directions(&pr, eps, rng.gen());
                counts_lo[slot(lo)] += 1;
                counts_hi[slot(hi)] += 1;
            }
            for (counts, probs) in [
                (&counts_lo, jump_probabilities(&pr)),
                (&counts_hi, jump_probabilities(&pr_hi)),
            ] {
                let mut chi2 = 0.0;
                for (i, &(_, q)) in probs.iter().enumerate() {
                    let expected = q * n as f64;
                    let diff = counts[i] as f64 - expected;
                    chi2 += diff * diff / expected;
                }
                let pval = stats::chi_square_sf(chi2, (2 * d - 1) as f64);
                assert!(pval > 0.001, "d={d} lam={lam}: chi2={chi2}, p={pval}");
            }
        }
    }

    #[test]
    fn colour_frequencies_match_rates() {
        let pr = params(2, 0.5, 1.0, 1.5);
        let eps = 0.1;
        let rates = coupling_rates(&pr, eps).unwrap();
        let n = 1_000_000usize;
        let mut counts = ColorCounts::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..n {
            counts.record(coupled_directions(&pr, eps, rng.gen()).2);
        }
        for (observed, q) in [
            (counts.good, rates.q_g),
            (counts.bad, rates.q_b),
            (counts.very_bad, rates.q_vb),
        ] {
            let se = (q * (1.0 - q) / n as f64).sqrt();
            let frac = observed as f64 / n as f64;
            assert!((frac - q).abs() < 4.0 * se, "frac {frac} vs rate {q}");
        }
    }

    #[test]
    fn coupled_block_shares_tau() {
        let pr = params(2, 0.5, 1.0, 0.5);
        let blocks = collect_coupled_blocks(&pr, 0.1, 2_000, 4).unwrap();
        for b in &blocks {
            assert_eq!(b.lo.tau, b.hi.tau);
            assert_eq!(b.colors.total(), b.lo.u_a);
            if b.first_very_bad_index.is_none() {
                assert_eq!(b.lo, b.hi);
                assert_eq!(b.colors.very_bad, 0);
            } else {
                assert!(b.colors.very_bad > 0);
                assert!(b.first_very_bad_index.unwrap() < b.lo.u_a);
            }
        }
        let taus: Vec<f64> = blocks.iter().map(|b| b.lo.tau).collect();
        let (m, se) = stats::mean_stderr(&taus);
        let expected = 1.0f64.exp();
        assert!((m - expected).abs() <= 3.0 * se, "mean tau {m} (se {se})");
    }

    #[test]
    fn coupled_marginals_match_independent_runs() {
        let pr = params(2, 0.5, 1.0, 0.5);
        let eps = 0.1;
        let coupled = collect_coupled_blocks(&pr, eps, 30_000, 5).unwrap();
        let solo_lo = collect_blocks(&pr, 30_000, 6).unwrap();
        let solo_hi = collect_blocks(&pr.with_lambda(0.6).unwrap(), 30_000, 7).unwrap();
        let disp = |b: &[BlockStats]| -> Vec<f64> {
            b.iter().map(|s| s.disp_e1() as f64).collect()
        };
        let lo: Vec<f64> = coupled.iter().map(|b| b.lo.disp_e1() as f64).collect();
        let hi: Vec<f64> = coupled.iter().map(|b| b.hi.disp_e1() as f64).collect();
        let (_, p_lo) = stats::ks_two_sample(&lo, &disp(&solo_lo));
        let (_, p_hi) = stats::ks_two_sample(&hi, &disp(&solo_hi));
        assert!(p_lo > 0.01, "lo marginal KS p = {p_lo}");
        assert!(p_hi > 0.01, "hi marginal KS p = {p_hi}");
        let t_c: Vec<f64> = coupled.iter().map(|b| b.lo.tau).collect();
        let t_s: Vec<f64> = solo_lo.iter().map(|b| b.tau).collect();
        let (_, p_tau) = stats::ks_two_sample(&t_c, &t_s);
        assert!(p_tau > 0.01, "tau KS p = {p_tau}");
    }

    #[test]
    fn coupled_derivative_matches_formula() {
        let pr = params(2, 0.5, 1.0, 0.5);
        let eps = 0.05;
        let coupled = collect_coupled_blocks(&pr, eps, 150_000, 8).unwrap();
        let fd = estimate_derivative_coupled(&coupled, eps).unwrap();
        let blocks = collect_blocks(&pr, 150_000, 9).unwrap();
        let mut rng = substream(8, 99, 0);
        let formula = estimate::estimate_derivative_formula(&blocks, &pr, &mut rng).unwrap();
        let combined = (fd.stderr.powi(2) + formula.stderr.powi(2)).sqrt();
        // O(ε) discretization slack on top of the statistical tolerance
        assert!(
            (fd.value - formula.value).abs() <= 3.0 * combined + eps,
            "fd {} vs formula {} (combined se {combined})",
            fd.value,
            formula.value
        );
    }

    #[test]
    fn coupled_runs_deterministic() {
        let pr = params(2, 0.5, 1.0, 1.0);
        let a = collect_coupled_blocks(&pr, 0.1, 100, 10).unwrap();
        let b = collect_coupled_blocks(&pr, 0.1, 100, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coupled_rejects_bad_eps() {
        let pr = params(2, 0.5, 1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(run_coupled_block(&pr, 0.0, &mut rng).is_err());
        assert!(run_coupled_block(&pr, -0.1, &mut rng).is_err());
    }

    #[test]
    fn very_bad_fraction_matches_plugin_oracle() {
        // colours are i.i.d. and independent of the attempt count, so
        // P(no very-bad point | U_a = m) = (1 - q_vb)^m
        let pr = params(2, 0.5, 1.0, 1.5);
        let eps = 0.02;
        let q_vb = coupling_rates(&pr, eps).unwrap().q_vb;
        let blocks = collect_coupled_blocks(&pr, eps, 50_000, 17).unwrap();
        let diffs: Vec<f64> = blocks
            .iter()
            .map(|b| {
                let observed = f64::from(b.first_very_bad_index.is_some());
                let plugin = 1.0 - (1.0 - q_vb).powi(b.lo.u_a as i32);
                observed - plugin
            })
            .collect();
        let (m, se) = stats::mean_stderr(&diffs);
        assert!(m.abs() <= 3.0 * se, "paired diff {m} (se {se})");
    }

    #[test]
    fn monotone_pair_ordered_and_sometimes_separated() {
        let (p, mu, l_lo, l_hi) = (0.5, 1.0, 0.5, 1.0);
        let pairs = collect_monotone_pairs(p, mu, l_lo, l_hi, 20_000, 12).unwrap();
        let n = pairs.len() as f64;
        let mut separated = 0u64;
        for pr in &pairs {
            assert!(pr.disp_lo <= pr.disp_hi);
            assert_eq!(pr.separated, pr.disp_lo < pr.disp_hi);
            if pr.separated {
                separated += 1;
            }
        }
        let frac = separated as f64 / n;
        let bound = monotone_separation_bound(mu, l_lo, l_hi);
        let se = (frac * (1.0 - frac) / n).sqrt();
        assert!(
            frac + 3.0 * se >= bound,
            "separation fraction {frac} below bound {bound}"
        );
    }

    #[test]
    fn monotone_gap_grows_with_bias_difference() {
        let gaps = |l_hi: f64, seed: u64| {
            let pairs = collect_monotone_pairs(0.5, 1.0, 0.2, l_hi, 20_000, seed).unwrap();
            let g: Vec<f64> = pairs
                .iter()
                .map(|p| (p.disp_hi - p.disp_lo) as f64)
                .collect();
            stats::mean_stderr(&g)
        };
        let (g_small, se_small) = gaps(0.3, 14);
        let (g_large, se_large) = gaps(1.5, 15);
        let combined = (se_small.powi(2) + se_large.powi(2)).sqrt();
        assert!(g_large - g_small > 3.0 * combined);
        assert!(g_small > 0.0);
    }

    #[test]
    fn monotone_rejects_degenerate_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        assert!(run_monotone_pair_1d(0.5, 1.0, 1.0, 0.5, &mut rng).is_err());
        assert!(run_monotone_pair_1d(0.5, 1.0, 0.7, 0.7, &mut rng).is_err());
        assert!(run_monotone_pair_1d(0.5, 1.0, 0.0, 0.5, &mut rng).is_err());
        assert!(run_monotone_pair_1d(0.5, 1.0, -0.5, 0.5, &mut rng).is_err());
    }
}
