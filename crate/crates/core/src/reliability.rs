//! Incremental restore-probability estimation for `(n, k)`-dispersed items.
//!
//! A [`ReliabilityTable`] holds `P^0 ..= P^k`, where `P^l` is the probability
//! that at least `l` of the fragments saved so far can be retrieved. Saving one
//! more fragment, retrievable with probability `p`, updates the table with
//!
//! ```text
//! P^l <- (1 - p) * P^l + p * P^(l-1)        for l = k, k-1, ..., 1
//! ```
//!
//! in exactly `k` multiply-adds. `P^0` stays 1 and `P^l` stays 0 until at
//! least `l` fragments exist. `m` fragments handed to the same terminal in one
//! session share their fate (all retrieved or none), which replaces
//! `P^(l-1)` with `P^(l-m)` (clamped at `P^0`).
//! The restore probability of the item is `P^k`.
//!
//! Newer versions that only make sense on top of older ones multiply in the
//! success of every distinct transitive dependency, see [`composite_success`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DataItem, VersionKey};

#[derive(Debug, Error, PartialEq)]
pub enum ReliabilityError {
    #[error("reconstruction threshold k must be at least 1")]
    ZeroThreshold,
    #[error("a same-terminal batch needs at least one fragment")]
    EmptyBatch,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("no reliability information for dependency {0}")]
    MissingDependency(VersionKey),
}

/// Probability that a fragment saved on a given terminal at a given time can
/// later be retrieved.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelEstimate(f64);

impl ChannelEstimate {
    pub fn new(p: f64) -> Result<Self, ReliabilityError> {
        if (0.0..=1.0).contains(&p) {
            Ok(ChannelEstimate(p))
        } else {
            Err(ReliabilityError::BadProbability(p))
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn clamped(p: f64) -> Self {
        if p.is_nan() {
            ChannelEstimate(0.0)
        } else {
            ChannelEstimate(p.clamp(0.0, 1.0))
        }
    }

    pub fn p(self) -> f64 {
        self.0
    }
}

/// Dynamic-programming state for one item version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    table: Vec<f64>,
    fragments_saved: u32,
}

impl ReliabilityTable {
    pub fn new(k: u8) -> Result<Self, ReliabilityError> {
        if k == 0 {
            return Err(ReliabilityError::ZeroThreshold);
        }
        let mut table = vec![0.0; usize::from(k) + 1];
        table[0] = 1.0;
        Ok(ReliabilityTable {
            table,
            fragments_saved: 0,
        })
    }

    pub fn k(&self) -> u8 {
        (self.table.len() - 1) as u8
    }

    pub fn fragments_saved(&self) -> u32 {
        self.fragments_saved
    }

    /// `[P^0, P^1, ..., P^k]`.
    pub fn entries(&self) -> &[f64] {
        &self.table
    }

    /// Probability of retrieving at least `l` fragments; 1 for `l = 0`, 0 past `k`.
    pub fn at_least(&self, l: usize) -> f64 {
        self.table.get(l).copied().unwrap_or(0.0)
    }

    /// Records one fragment saved on an independent channel.
    pub fn add_fragment(&mut self, channel: ChannelEstimate) {
        self.apply(channel.p(), 1);
    }

    /// Records `m` fragments saved on the same terminal in the same session.
    pub fn add_batch_same_terminal(&mut self, channel: ChannelEstimate, m: u32) -> Result<(), ReliabilityError> {
        if m == 0 {
            return Err(ReliabilityError::EmptyBatch);
        }
        self.apply(channel.p(), m);
        Ok(())
    }

    fn apply(&mut self, p: f64, m: u32) {
        let step = m as usize;
        // Descending so table[l - step] still holds the previous count's value.
        for l in (1..self.table.len()).rev() {
            let fewer = self.table[l.saturating_sub(step)];
            self.table[l] = (1.0 - p) * self.table[l] + p * fewer;
        }
        self.fragments_saved += m;
    }

    /// Probability that the item can be reconstructed from its own fragments.
    pub fn success(&self) -> f64 {
        self.table[self.table.len() - 1]
    }

    /// Builder-style [`add_fragment`](Self::add_fragment).
    pub fn with(mut self, p: f64) -> Self {
        self.add_fragment(ChannelEstimate::clamped(p));
        self
    }
}

/// What the estimator knows about one version while computing a composite.
#[derive(Debug, Clone, Copy)]
pub enum DepState<'a> {
    /// Already safe on the server: contributes a factor of 1.
    OnServer,
    Partial {
        table: &'a ReliabilityTable,
        deps: &'a [VersionKey],
    },
}

/// Source of per-version reliability state.
pub trait TableLookup {
    fn lookup(&self, key: &VersionKey) -> Option<DepState<'_>>;
}

/// Restore probability of `item` including its temporal dependencies: the
/// item's own success times the success of every distinct version reachable
/// through `temporal_deps`. Versions on the server contribute 1 and stop the
/// walk; a version reached along several paths is counted once.
pub fn composite_success(item: &DataItem, tables: &impl TableLookup) -> Result<f64, ReliabilityError> {
    let own = match tables.lookup(&item.key()) {
        Some(DepState::OnServer) => return Ok(1.0),
        Some(DepState::Partial { table, .. }) => table.success(),
        None => return Err(ReliabilityError::MissingDependency(item.key())),
    };
    let mut product = own;
    let mut seen: BTreeSet<VersionKey> = BTreeSet::new();
    let mut stack: Vec<VersionKey> = item.temporal_deps.clone();
    while let Some(key) = stack.pop() {
        if !seen.insert(key) {
            continue;
        }
        match tables.lookup(&key) {
            Some(DepState::OnServer) => {}
            Some(DepState::Partial { table, deps }) => {
                product *= table.success();
                stack.extend_from_slice(deps);
            }
            None => return Err(ReliabilityError::MissingDependency(key)),
        }
    }
    Ok(product)
}
