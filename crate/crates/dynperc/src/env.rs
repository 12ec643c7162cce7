//! Lazy, exact simulation of the dynamical-percolation environment on the
//! edges the walker has examined.
//!
//! Each edge refreshes at rate `μ` to an independent Bernoulli(p) state,
//! except while its first infected-set copy is alive, during which free
//! refreshes are suppressed. Memorylessness of the refresh clock lets us
//! determine states lazily: an unmanaged edge last seen at time `s` keeps
//! its state at time `t` with probability `e^{-μ(t-s)}` and is resampled
//! otherwise.

use rand::Rng;
use std::collections::HashMap;

use crate::model::EdgeId;

#[derive(Debug, Clone)]
pub struct EdgeRecord {
    pub open: bool,
    pub determined_at: f64,
    /// True iff copy 1 of this edge is currently in the infected set.
    pub managed: bool,
    /// Time of the most recent copy-1 removal not yet folded into `open`.
    pub pending_forced_refresh_at: Option<f64>,
}

/// Map from examined edges to their lazily determined states.
#[derive(Debug, Clone, Default)]
pub struct EnvStore {
    records: HashMap<EdgeId, EdgeRecord>,
    clock: f64,
}

impl EnvStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Exact marginal state of edge `e` at time `t ≥ clock`, given the
    /// per-edge record history. Advances the store clock to `t`.
    pub fn examine(
        &mut self,
        params_p: f64,
        params_mu: f64,
        e: &EdgeId,
        t: f64,
        rng: &mut impl Rng,
    ) -> bool {
        assert!(
            t >= self.clock,
            "time regression: examine at {t} but clock is {}",
            self.clock
        );
        self.clock = t;
        match self.records.get_mut(e) {
            None => {
                // stationary initial law
                let open = rng.gen::<f64>() < params_p;
                self.records.insert(
                    e.clone(),
                    EdgeRecord {
                        open,
                        determined_at: t,
                        managed: false,
                        pending_forced_refresh_at: None,
                    },
                );
                open
            }
            Some(rec) => {
                assert!(
                    t >= rec.determined_at,
                    "time regression on edge record: {t} < {}",
                    rec.determined_at
                );
                if rec.managed {
                    // refreshes suppressed while copy 1 is infected
                    return rec.open;
                }
                if rec.pending_forced_refresh_at.is_some() {
                    // a forced refresh happened; any further free refreshes
                    // leave the marginal at Bernoulli(p)
                    rec.open = rng.gen::<f64>() < params_p;
                    rec.pending_forced_refresh_at = None;
                    rec.determined_at = t;
                    return rec.open;
                }
                let keep = (-params_mu * (t - rec.determined_at)).exp();
                if rng.gen::<f64>() >= keep {
                    rec.open = rng.gen::<f64>() < params_p;
                }
                rec.determined_at = t;
                rec.open
            }
        }
    }

    /// Called exactly when copy 1 of `e` enters the infected set.
    pub fn mark_managed(&mut self, e: &EdgeId) {
        let rec = self
            .records
            .get_mut(e)
            .expect("mark_managed on an edge that was never examined");
        assert!(!rec.managed, "double management of edge {e:?}");
        rec.managed = true;
    }

    /// Called exactly when copy 1 of `e` is removed at time `r`; the edge
    /// state is forcibly resampled (folded lazily into the next examine).
    pub fn apply_forced_refresh(&mut self, e: &EdgeId, r: f64) {
        let rec = self
            .records
            .get_mut(e)
            .expect("forced refresh on an edge that was never examined");
        assert!(rec.managed, "forced refresh on an unmanaged edge {e:?}");
        assert!(r >= rec.determined_at);
        rec.managed = false;
        rec.pending_forced_refresh_at = Some(r);
    }

    /// Drops all records and resets the clock to zero.
    pub fn reset(&mut self) {
        self.records.clear();
        self.clock = 0.0;
    }
}
