//! Hot/cold file placement: a decayed-frequency policy with hysteresis and
//! an exact offline optimum for small instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trace::AccessTrace;
use super::StorageError;

pub const MAX_OPTIMAL_FILES: usize = 12;
pub const MAX_OPTIMAL_ACCESSES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hot,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    /// Per-access multiplicative decay of every score.
    pub decay: f64,
    pub promote: f64,
    pub demote: f64,
    /// Files the hot tier can hold.
    pub hot_capacity: usize,
    pub hot_cost: u64,
    pub cold_cost: u64,
    pub migration_cost: u64,
}

impl Default for TierConfig {
    fn default() -> Self {
        TierConfig {
            decay: 0.75,
            promote: 1.2,
            demote: 0.05,
            hot_capacity: 2,
            hot_cost: 1,
            cold_cost: 10,
            migration_cost: 25,
        }
    }
}

impl TierConfig {
    pub fn check(&self) -> Result<(), StorageError> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(StorageError::InvalidConfig(format!("decay {} outside (0, 1)", self.decay)));
        }
        if self.promote <= self.demote {
            return Err(StorageError::InvalidConfig("promote threshold must exceed demote threshold".into()));
        }
        Ok(())
    }

    pub fn access_cost(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Hot => self.hot_cost,
            Tier::Cold => self.cold_cost,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierAssignment {
    pub tiers: BTreeMap<u32, Tier>,
    pub scores: BTreeMap<u32, f64>,
}

impl TierAssignment {
    pub fn tier(&self, file: u32) -> Tier {
        self.tiers.get(&file).copied().unwrap_or(Tier::Cold)
    }

    pub fn hot_count(&self) -> usize {
        self.tiers.values().filter(|t| **t == Tier::Hot).count()
    }

    /// Decays every score by `decay`, then credits one access to `file`.
    pub fn observe(&mut self, file: Option<u32>, decay: f64) {
        for s in self.scores.values_mut() {
            *s *= decay;
        }
        if let Some(f) = file {
            *self.scores.entry(f).or_insert(0.0) += 1.0;
        }
    }
}

/// Applies the thresholds to the current scores: hot files at or below
/// `demote` go cold, then cold files at or above `promote` go hot, highest
/// score first, while the hot tier has room. Files inside the band keep
/// their tier.
pub fn assign_tiers(prev: &TierAssignment, cfg: &TierConfig) -> TierAssignment {
    let mut next = prev.clone();
    for (file, score) in &prev.scores {
        if prev.tier(*file) == Tier::Hot && *score <= cfg.demote {
            next.tiers.insert(*file, Tier::Cold);
        }
    }
    let mut candidates: Vec<(u32, f64)> = prev
        .scores
        .iter()
        .filter(|(f, s)| next.tier(**f) == Tier::Cold && prev.tier(**f) == Tier::Cold && **s >= cfg.promote)
        .map(|(f, s)| (*f, *s))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let room = cfg.hot_capacity.saturating_sub(next.hot_count());
    for (file, _) in candidates.into_iter().take(room) {
        next.tiers.insert(file, Tier::Hot);
    }
    next
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCost {
    pub access: u64,
    pub migrations: u64,
    pub total: u64,
}

/// The online policy over one access stream.
#[derive(Debug, Clone)]
pub struct OnlineTiering {
    pub cfg: TierConfig,
    pub assignment: TierAssignment,
    pub cost: TierCost,
}

impl OnlineTiering {
    pub fn new(cfg: TierConfig) -> Result<Self, StorageError> {
        cfg.check()?;
        Ok(OnlineTiering { cfg, assignment: TierAssignment::default(), cost: TierCost::default() })
    }

    /// Charges the access at the file's current tier, then updates scores
    /// and placement, charging each move.
    pub fn access(&mut self, file: u32) {
        self.cost.access += self.cfg.access_cost(self.assignment.tier(file));
        self.assignment.observe(Some(file), self.cfg.decay);
        let next = assign_tiers(&self.assignment, &self.cfg);
        let moves = next.tiers.iter().filter(|(f, t)| self.assignment.tier(**f) != **t).count() as u64;
        self.cost.migrations += moves;
        self.assignment = next;
        self.cost.total = self.cost.access + self.cost.migrations * self.cfg.migration_cost;
    }
}

pub fn online_tiering_cost(trace: &AccessTrace, cfg: &TierConfig) -> Result<TierCost, StorageError> {
    let mut policy = OnlineTiering::new(*cfg)?;
    for r in trace.records() {
        policy.access(r.file_id);
    }
    Ok(policy.cost)
}

/// Minimum total cost over every schedule of hot sets (at most
/// `hot_capacity` files, all cold at the start) chosen before each access.
///
/// Dynamic program over hot-set bitmasks. Moving between two sets costs one
/// migration per file in their symmetric difference; doing the demotions
/// before the promotions never exceeds the capacity, so each step relaxes
/// demotions over supersets and then promotions over subsets.
pub fn offline_optimal_tiering(trace: &AccessTrace, cfg: &TierConfig) -> Result<u64, StorageError> {
    let files = trace.files();
    if files.len() > MAX_OPTIMAL_FILES || trace.len() > MAX_OPTIMAL_ACCESSES {
        return Err(StorageError::InstanceTooLarge { files: files.len(), accesses: trace.len() });
    }
    let n = files.len();
    let states = 1usize << n;
    let fits = |s: usize| (s.count_ones() as usize) <= cfg.hot_capacity;
    const INF: u64 = u64::MAX / 4;
    let mut dp = vec![INF; states];
    dp[0] = 0;
    for r in trace.records() {
        for bit in 0..n {
            let b = 1 << bit;
            for s in 0..states {
                if s & b == 0 && fits(s | b) {
                    dp[s] = dp[s].min(dp[s | b] + cfg.migration_cost);
                }
            }
        }
        for bit in 0..n {
            let b = 1 << bit;
            for s in 0..states {
                if s & b == 0 && fits(s | b) {
                    dp[s | b] = dp[s | b].min(dp[s] + cfg.migration_cost);
                }
            }
        }
        let idx = files.binary_search(&r.file_id).expect("file listed");
        for (s, cost) in dp.iter_mut().enumerate() {
            if *cost < INF {
                let tier = if s & (1 << idx) != 0 { Tier::Hot } else { Tier::Cold };
                *cost += cfg.access_cost(tier);
            }
        }
    }
    Ok(dp.into_iter().min().unwrap_or(0))
}
