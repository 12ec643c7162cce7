//! Event-driven simulation of the walker and the infected set.
//!
//! The walker attempts jumps at the points of a rate-1 Poisson process. Every
//! examined edge contributes one fresh copy to the infected set; each copy
//! carries an independent Exp(μ) lifetime in a priority queue, which realizes
//! the removal process with total rate `μ |I_t|` and uniform victim choice.
//! Emptiness of the infected set after it has been non-empty marks a
//! regeneration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smallvec::SmallVec;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::env::EnvStore;
use crate::error::{Error, Result};
use crate::model::{sample_direction, Direction, EdgeId, ModelParams, Site};

/// Default max-event guard; censored blocks fail loudly.
pub const DEFAULT_MAX_EVENTS: u64 = 10_000_000;

/// One copy of an edge inside the infected set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeCopy {
    pub edge: EdgeId,
    pub copy_index: u32,
}

#[derive(Debug, Clone)]
struct Removal {
    time: f64,
    seq: u64,
    copy: EdgeCopy,
}

impl PartialEq for Removal {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Removal {}
impl PartialOrd for Removal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Removal {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap via Reverse at the call sites; ties broken by insertion
        // order so runs are bit-for-bit reproducible
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Multiset of edge copies with scheduled Exp(μ) removal times.
#[derive(Debug, Clone, Default)]
pub struct InfectedSet {
    present: HashMap<EdgeId, u64>, // bit j-1 set iff copy j is alive
    queue: BinaryHeap<std::cmp::Reverse<Removal>>,
    size: usize,
    seq: u64,
}

impl InfectedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Adds the lowest-index absent copy of `edge`, scheduling its removal
    /// at `now + Exp(mu)`. Returns the copy index.
    pub fn insert(&mut self, edge: &EdgeId, now: f64, mu: f64, rng: &mut impl Rng) -> u32 {
        self.insert_scheduled(edge, now + exp_sample(rng, mu))
    }

    /// Same as [`insert`](Self::insert) with a caller-supplied removal time;
    /// couplings use this to share one lifetime draw between two sets.
    pub fn insert_scheduled(&mut self, edge: &EdgeId, removal_time: f64) -> u32 {
        let mask = self.present.entry(edge.clone()).or_insert(0);
        let copy_index = mask.trailing_ones() + 1;
        assert!(copy_index <= 64, "infected set copy index overflow");
        *mask |= 1u64 << (copy_index - 1);
        self.seq += 1;
        self.queue.push(std::cmp::Reverse(Removal {
            time: removal_time,
            seq: self.seq,
            copy: EdgeCopy {
                edge: edge.clone(),
                copy_index,
            },
        }));
        self.size += 1;
        copy_index
    }

    pub fn next_removal_time(&self) -> Option<f64> {
        self.queue.peek().map(|r| r.0.time)
    }

    /// Pops the earliest scheduled removal.
    pub fn pop_removal(&mut self) -> Option<(f64, EdgeCopy)> {
        let removal = self.queue.pop()?.0;
        let mask = self
            .present
            .get_mut(&removal.copy.edge)
            .expect("removal for an edge with no copies");
        let bit = 1u64 << (removal.copy.copy_index - 1);
        debug_assert!(*mask & bit != 0);
        *mask &= !bit;
        if *mask == 0 {
            self.present.remove(&removal.copy.edge);
        }
        self.size -= 1;
        Some((removal.time, removal.copy))
    }

    pub fn clear(&mut self) {
        self.present.clear();
        self.queue.clear();
        self.size = 0;
        self.seq = 0;
    }
}

/// Statistics of one regeneration block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    pub tau: f64,
    pub displacement: SmallVec<[i64; 4]>,
    pub r: u64,
    pub l: u64,
    pub r_a: u64,
    pub l_a: u64,
    pub u: u64,
    pub u_a: u64,
}

impl BlockStats {
    /// Displacement along `e1`, always equal to `R - L`.
    pub fn disp_e1(&self) -> i64 {
        self.displacement[0]
    }

    pub fn r_supp(&self) -> u64 {
        self.r_a - self.r
    }

    pub fn l_supp(&self) -> u64 {
        self.l_a - self.l
    }

    pub(crate) fn assert_invariants(&self) {
        assert!(self.r <= self.r_a && self.l <= self.l_a);
        assert!(self.u <= self.u_a);
        assert!(self.r_a + self.l_a <= self.u_a);
        assert_eq!(self.disp_e1(), self.r as i64 - self.l as i64);
    }
}

#[derive(Debug, Clone)]
pub struct TrajEvent {
    pub time: f64,
    pub attempted: Direction,
    pub performed: bool,
}

/// Full event log of a fixed-horizon run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub horizon: f64,
    pub events: Vec<TrajEvent>,
    pub final_position: Site,
}

impl Trajectory {
    /// Performed-minus-suppressed step counts along `e1` up to the horizon:
    /// `(R, L, R_a, L_a, U_a)`.
    pub fn e1_counters(&self) -> (u64, u64, u64, u64, u64) {
        let (mut r, mut l, mut ra, mut la) = (0u64, 0u64, 0u64, 0u64);
        for ev in &self.events {
            if ev.attempted.axis == 1 {
                if ev.attempted.positive {
                    ra += 1;
                    if ev.performed {
                        r += 1;
                    }
                } else {
                    la += 1;
                    if ev.performed {
                        l += 1;
                    }
                }
            }
        }
        (r, l, ra, la, self.events.len() as u64)
    }
}

pub(crate) fn exp_sample(rng: &mut impl Rng, rate: f64) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln() / rate
}

struct Walker {
    pos: Site,
    r: u64,
    l: u64,
    r_a: u64,
    l_a: u64,
    u: u64,
    u_a: u64,
}

impl Walker {
    fn at_origin(d: usize) -> Self {
        Walker {
            pos: Site::origin(d),
            r: 0,
            l: 0,
            r_a: 0,
            l_a: 0,
            u: 0,
            u_a: 0,
        }
    }

    /// One jump attempt at time `t`; examines the chosen edge and moves if
    /// it is open. Returns the attempted direction and whether it was
    /// performed.
    fn attempt(
        &mut self,
        params: &ModelParams,
        env: &mut EnvStore,
        infected: &mut InfectedSet,
        t: f64,
        rng: &mut impl Rng,
    ) -> (Direction, bool) {
        let dir = sample_direction(params, rng.gen());
        let edge = EdgeId::from_step(&self.pos, dir);
        let open = env.examine(params.p, params.mu, &edge, t, rng);
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
        let copy_index = infected.insert(&edge, t, params.mu, rng);
        if copy_index == 1 {
            env.mark_managed(&edge);
        }
        (dir, open)
    }
}

fn process_removal(env: &mut EnvStore, infected: &mut InfectedSet) -> f64 {
    let (time, copy) = infected.pop_removal().expect("removal from empty set");
    if copy.copy_index == 1 {
        env.apply_forced_refresh(&copy.edge, time);
    }
    time
}

/// Simulates one regeneration block from a fresh environment.
pub fn run_block(params: &ModelParams, rng: &mut impl Rng) -> Result<BlockStats> {
    run_block_with_guard(params, rng, DEFAULT_MAX_EVENTS)
}

pub fn run_block_with_guard(
    params: &ModelParams,
    rng: &mut impl Rng,
    max_events: u64,
) -> Result<BlockStats> {
    let mut env = EnvStore::new();
    let mut infected = InfectedSet::new();
    let mut walker = Walker::at_origin(params.d);
    let mut next_attempt = exp_sample(rng, 1.0);
    let mut events = 0u64;
    let tau;
    loop {
        events += 1;
        if events > max_events {
            return Err(Error::Censored { events });
        }
        // removals win ties so runs are reproducible
        match infected.next_removal_time() {
            Some(rt) if rt <= next_attempt => {
                let t = process_removal(&mut env, &mut infected);
                if infected.is_empty() {
                    tau = t;
                    break;
                }
            }
            _ => {
                walker.attempt(params, &mut env, &mut infected, next_attempt, rng);
                next_attempt += exp_sample(rng, 1.0);
            }
        }
    }
    let displacement: SmallVec<[i64; 4]> = walker.pos.0.iter().map(|&c| c as i64).collect();
    let stats = BlockStats {
        tau,
        displacement,
        r: walker.r,
        l: walker.l,
        r_a: walker.r_a,
        l_a: walker.l_a,
        u: walker.u,
        u_a: walker.u_a,
    };
    stats.assert_invariants();
    Ok(stats)
}

/// Same dynamics as [`run_block`] but run to a fixed horizon without reset;
/// returns the full attempted/performed event log.
pub fn run_trajectory(
    params: &ModelParams,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    run_trajectory_with_guard(params, horizon, rng, DEFAULT_MAX_EVENTS)
}

pub fn run_trajectory_with_guard(
    params: &ModelParams,
    horizon: f64,
    rng: &mut impl Rng,
    max_events: u64,
) -> Result<Trajectory> {
    let mut env = EnvStore::new();
    let mut infected = InfectedSet::new();
    let mut walker = Walker::at_origin(params.d);
    let mut events_log = Vec::new();
    let mut next_attempt = exp_sample(rng, 1.0);
    let mut events = 0u64;
    loop {
        events += 1;
        if events > max_events {
            return Err(Error::Censored { events });
        }
        let next_removal = infected.next_removal_time();
        match next_removal {
            Some(rt) if rt <= next_attempt => {
                if rt > horizon {
                    break;
                }
                process_removal(&mut env, &mut infected);
            }
            _ => {
                if next_attempt > horizon {
                    break;
                }
                let t = next_attempt;
                let (dir, performed) =
                    walker.attempt(params, &mut env, &mut infected, t, rng);
                events_log.push(TrajEvent {
                    time: t,
                    attempted: dir,
                    performed,
                });
                next_attempt += exp_sample(rng, 1.0);
            }
        }
    }
    Ok(Trajectory {
        horizon,
        events: events_log,
        final_position: walker.pos,
    })
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable counter construction: an independent ChaCha stream for every
/// `(seed, stream, index)` triple. Used for per-block and per-trajectory
/// randomness so aggregation is order- and thread-count-independent.
pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ GOLDEN_GAMMA.wrapping_mul(stream).wrapping_add(index);
    let mut key = [0u8; 32];
    let words = [
        splitmix64(&mut state) ^ seed,
        splitmix64(&mut state) ^ stream,
        splitmix64(&mut state) ^ index,
        splitmix64(&mut state),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream tags keeping the different randomness consumers disjoint.
pub mod streams {
    pub const BLOCKS: u64 = 1;
    pub const TRAJECTORIES: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const COUPLED: u64 = 4;
    pub const MONOTONE: u64 = 5;
}

/// `n` independent regeneration blocks, reproducible per `(seed, index)`.
pub fn block_sequence<'a>(
    params: &'a ModelParams,
    n_blocks: usize,
    seed: u64,
) -> impl Iterator<Item = Result<BlockStats>> + 'a {
    (0..n_blocks as u64).map(move |i| {
        let mut rng = substream(seed, streams::BLOCKS, i);
        run_block(params, &mut rng)
    })
}

/// Collects `n` blocks, using worker threads when available. The output is
/// ordered by block index and bit-identical regardless of thread count.
pub fn collect_blocks(params: &ModelParams, n_blocks: usize, seed: u64) -> Result<Vec<BlockStats>> {
    use rayon::prelude::*;
    (0..n_blocks as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, streams::BLOCKS, i);
            run_block(params, &mut rng)
        })
        .collect()
}

/// Collects `n` fixed-horizon trajectories, one independent stream each.
pub fn collect_trajectories(
    params: &ModelParams,
    horizon: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, streams::TRAJECTORIES, i);
            run_trajectory(params, horizon, &mut rng)
        })
        .collect()
}
