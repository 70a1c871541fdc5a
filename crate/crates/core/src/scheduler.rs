//! Epoch scheduling over heterogeneous corpora.
//!
//! Each step draws one batch from exactly one source pool. Pools are chosen
//! with probability proportional to their remaining instance counts and
//! consumed without replacement, so every instance is visited exactly once
//! per epoch and source frequencies match corpus-size proportions.

use crate::error::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Weakly supervised: text-only and image-only batches, no pairing.
    W,
    /// Supervised: paired batches (+ optional text-only corpus).
    S,
    /// Hybrid: paired batches plus extra unpaired images.
    H,
    /// No pretraining at all.
    Base,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::W => "w",
            Regime::S => "s",
            Regime::H => "h",
            Regime::Base => "base",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Text,
    Image,
    Pair,
    ExtraImage,
}

/// One scheduled batch: which pool, and which instance indices within it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledBatch {
    pub source: Source,
    pub indices: Vec<usize>,
}

/// Without-replacement scheduler over shuffled per-pool orders for one epoch.
pub struct SchedulerState {
    pools: Vec<(Source, Vec<usize>)>,
    cursors: Vec<usize>,
    batch_size: usize,
}

impl SchedulerState {
    /// `pool_sizes` lists each live source with its instance count; pools are
    /// shuffled up front with the provided rng.
    pub fn new(
        pool_sizes: &[(Source, usize)],
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        let mut pools = Vec::new();
        for &(source, n) in pool_sizes {
            if n == 0 {
                continue;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            pools.push((source, order));
        }
        if pools.is_empty() {
            return Err(CoreError::Config("scheduler needs a non-empty corpus".into()));
        }
        Ok(SchedulerState {
            cursors: vec![0; pools.len()],
            pools,
            batch_size,
        })
    }

    pub fn remaining(&self) -> usize {
        self.pools
            .iter()
            .zip(&self.cursors)
            .map(|((_, order), &c)| order.len() - c)
            .sum()
    }

    /// Total batches this epoch will yield (partial tail batches included).
    pub fn total_batches(&self) -> usize {
        self.pools
            .iter()
            .map(|(_, order)| order.len().div_ceil(self.batch_size))
            .sum()
    }

    /// Draw the next batch, or `None` at epoch end.
    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Option<ScheduledBatch> {
        let total = self.remaining();
        if total == 0 {
            return None;
        }
        // pick a pool with probability proportional to remaining count
        let mut pick = rng.gen_range(0..total);
        let mut chosen = 0;
        for (i, ((_, order), &cursor)) in self.pools.iter().zip(&self.cursors).enumerate() {
            let rem = order.len() - cursor;
            if pick < rem {
                chosen = i;
                break;
            }
            pick -= rem;
        }
        let (source, order) = &self.pools[chosen];
        let cursor = self.cursors[chosen];
        let take = self.batch_size.min(order.len() - cursor);
        let indices = order[cursor..cursor + take].to_vec();
        self.cursors[chosen] += take;
        Some(ScheduledBatch {
            source: *source,
            indices,
        })
    }
}
