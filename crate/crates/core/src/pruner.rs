//! Mean-at-same-epoch pruning rule for asynchronous successive halving.
//!
//! A trial reporting an ensemble accuracy strictly below the mean of all
//! earlier reports at the same checkpoint epoch is stopped, once that epoch
//! has at least `min_reports` earlier reports. Every report is folded into
//! the running statistics afterwards, whatever the decision.

use alloc::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Default number of earlier reports required before pruning kicks in.
pub const DEFAULT_MIN_REPORTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub sum: f64,
    pub count: usize,
}

impl EpochStats {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunerState {
    pub min_reports: usize,
    stats: BTreeMap<u32, EpochStats>,
}

impl Default for PrunerState {
    fn default() -> Self {
        Self::new(DEFAULT_MIN_REPORTS)
    }
}

impl PrunerState {
    pub fn new(min_reports: usize) -> Self {
        Self {
            min_reports,
            stats: BTreeMap::new(),
        }
    }

    /// Rebuilds the state by replaying `(epoch, accuracy)` reports in order.
    pub fn replay(min_reports: usize, reports: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut s = Self::new(min_reports);
        for (epoch, acc) in reports {
            s.record(epoch, acc);
        }
        s
    }

    /// What [`decide`](Self::decide) would answer, without recording.
    pub fn peek(&self, epoch: u32, acc: f64) -> Decision {
        match self.stats.get(&epoch) {
            Some(st) if st.count >= self.min_reports && st.count > 0 => {
                if acc < st.sum / st.count as f64 {
                    Decision::Stop
                } else {
                    Decision::Continue
                }
            }
            _ => Decision::Continue,
        }
    }

    pub fn decide(&mut self, epoch: u32, acc: f64) -> Decision {
        let d = self.peek(epoch, acc);
        self.record(epoch, acc);
        d
    }

    pub fn record(&mut self, epoch: u32, acc: f64) {
        let st = self.stats.entry(epoch).or_default();
        st.sum += acc;
        st.count += 1;
    }

    pub fn mean_at(&self, epoch: u32) -> Option<f64> {
        self.stats.get(&epoch).and_then(EpochStats::mean)
    }

    pub fn count_at(&self, epoch: u32) -> usize {
        self.stats.get(&epoch).map_or(0, |s| s.count)
    }

    pub fn epochs(&self) -> impl Iterator<Item = (u32, EpochStats)> + '_ {
        self.stats.iter().map(|(&e, &s)| (e, s))
    }
}
