//! Trace-driven storage lab: read-ahead tuning, hot/cold tiering and a
//! learned block index, run together by [`simulate`].

pub mod index;
pub mod readahead;
pub mod tiering;
pub mod trace;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{block_key, random_mapping, LearnedIndex, Lookup, Segment};
pub use readahead::{best_fixed_readahead, fixed_totals, FixedChoice, ReadaheadState, ReadaheadTotals, CANDIDATES};
pub use tiering::{
    assign_tiers, offline_optimal_tiering, online_tiering_cost, OnlineTiering, Tier, TierAssignment, TierConfig,
    TierCost,
};
pub use trace::{generate, Access, AccessTrace, Op, Workload, BLOCK_SIZE};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("candidate set must be non-empty and positive")]
    InvalidCandidates,
    #[error("instance too large for the exact optimum: {files} files, {accesses} accesses")]
    InstanceTooLarge { files: usize, accesses: usize },
    #[error("cannot index an empty mapping")]
    EmptyMapping,
    #[error("mapping keys must be strictly increasing")]
    UnsortedKeys,
    #[error("key {0:#x} not in mapping")]
    KeyNotFound(u64),
    #[error("trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub epsilon: f64,
    pub alpha: f64,
    pub candidates: Vec<u32>,
    pub tier: TierConfig,
    pub index_epsilon: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            epsilon: readahead::DEFAULT_EPSILON,
            alpha: readahead::DEFAULT_ALPHA,
            candidates: CANDIDATES.to_vec(),
            tier: TierConfig::default(),
            index_epsilon: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub keys: usize,
    pub segments: usize,
    pub probes_mean: f64,
    pub fallbacks: u64,
    pub index_bytes: usize,
    pub flat_bytes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub accesses: usize,
    pub reads: u64,
    pub hit_ratio: f64,
    pub wasted_ratio: f64,
    /// Peak prefetched blocks held but not yet read.
    pub memory_blocks: u64,
    /// Sum of `useful - alpha * wasted` over all read-ahead runs.
    pub prefetch_score: f64,
    /// Window with the best mean reward at the end of the run.
    pub chosen_window: u32,
    pub tier_cost: TierCost,
    pub index: IndexStats,
}

/// Runs the read-ahead tuner over the reads, online tiering over every
/// access, and resolves every access through a learned index whose
/// addresses are allocated in first-touch order.
pub fn simulate(trace: &AccessTrace, cfg: &SimConfig) -> Result<SimReport, StorageError> {
    let mut tuner = ReadaheadState::new(&cfg.candidates, cfg.epsilon, cfg.alpha, cfg.seed)?;
    let mut tiers = OnlineTiering::new(cfg.tier)?;
    if trace.is_empty() {
        return Ok(SimReport::default());
    }
    tuner.run(trace);
    let mut addresses: HashMap<u64, u64> = HashMap::new();
    for r in trace.records() {
        tiers.access(r.file_id);
        let next = addresses.len() as u64;
        addresses.entry(r.key()).or_insert(next);
    }
    let mut table: Vec<(u64, u64)> = addresses.into_iter().collect();
    table.sort_unstable();
    let idx = LearnedIndex::build(table, cfg.index_epsilon)?;
    let (mut probes, mut fallbacks) = (0u64, 0u64);
    for r in trace.records() {
        let l = idx.lookup(r.key())?;
        probes += u64::from(l.probes);
        fallbacks += u64::from(l.fallback);
    }
    let t = tuner.totals;
    Ok(SimReport {
        accesses: trace.len(),
        reads: t.reads,
        hit_ratio: t.hit_ratio(),
        wasted_ratio: t.wasted_ratio(),
        memory_blocks: t.peak_outstanding,
        prefetch_score: t.score,
        chosen_window: tuner.best_window(),
        tier_cost: tiers.cost,
        index: IndexStats {
            keys: idx.len(),
            segments: idx.segments().len(),
            probes_mean: probes as f64 / trace.len() as f64,
            fallbacks,
            index_bytes: idx.index_bytes(),
            flat_bytes: idx.flat_bytes(),
        },
    })
}

pub fn simulate_csv(text: &str, cfg: &SimConfig) -> Result<SimReport, StorageError> {
    simulate(&AccessTrace::from_csv(text)?, cfg)
}
