//! Online read-ahead tuning as an epsilon-greedy choice over window sizes.
//!
//! Each file is a stream. A read that continues the stream's run is served
//! from the prefetch buffer when it is there; any other read is a demand miss
//! that prefetches the next `window` blocks. A run ends when a read does not
//! continue it (or at the end of the trace); its unused buffer is wasted and
//! the arm that picked its window is credited `useful - alpha * wasted`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{AccessTrace, Op};
use super::StorageError;

pub const CANDIDATES: [u32; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub reward: f64,
    pub pulls: u64,
}

impl ArmStats {
    pub fn mean(&self) -> Option<f64> {
        (self.pulls > 0).then(|| self.reward / self.pulls as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub last_block: u64,
    pub run_length: u64,
    pub window: u32,
    /// Last block currently in the prefetch buffer.
    pub buffered_to: u64,
    pub prefetched: u64,
    pub useful: u64,
}

impl StreamState {
    fn outstanding(&self) -> u64 {
        self.buffered_to.saturating_sub(self.last_block)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub file_id: u32,
    pub window: u32,
    pub length: u64,
    pub prefetched: u64,
    pub useful: u64,
    pub wasted: u64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadOutcome {
    pub hit: bool,
    /// Inclusive block range fetched ahead, if any.
    pub prefetch: Option<(u64, u64)>,
    /// The run this read ended, if it ended one.
    pub finished: Option<RunOutcome>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadaheadTotals {
    pub reads: u64,
    pub hits: u64,
    pub prefetched: u64,
    pub useful: u64,
    pub wasted: u64,
    pub runs: u64,
    pub score: f64,
    /// Peak number of prefetched blocks held but not yet read.
    pub peak_outstanding: u64,
}

impl ReadaheadTotals {
    pub fn misses(&self) -> u64 {
        self.reads - self.hits
    }

    pub fn hit_ratio(&self) -> f64 {
        if self.reads == 0 {
            0.0
        } else {
            self.hits as f64 / self.reads as f64
        }
    }

    /// Share of all blocks fetched from the device (demand plus ahead)
    /// that were never read.
    pub fn wasted_ratio(&self) -> f64 {
        let fetched = self.misses() + self.prefetched;
        if fetched == 0 {
            0.0
        } else {
            self.wasted as f64 / fetched as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReadaheadState {
    candidates: Vec<u32>,
    arms: Vec<ArmStats>,
    /// Runs started per arm, including ones still open.
    started: Vec<u64>,
    epsilon: f64,
    alpha: f64,
    streams: HashMap<u32, StreamState>,
    rng: ChaCha8Rng,
    outstanding: u64,
    pub totals: ReadaheadTotals,
}

impl ReadaheadState {
    pub fn new(candidates: &[u32], epsilon: f64, alpha: f64, seed: u64) -> Result<Self, StorageError> {
        if candidates.is_empty() || candidates.contains(&0) {
            return Err(StorageError::InvalidCandidates);
        }
        let mut candidates = candidates.to_vec();
        candidates.sort_unstable();
        candidates.dedup();
        Ok(ReadaheadState {
            arms: vec![ArmStats::default(); candidates.len()],
            started: vec![0; candidates.len()],
            candidates,
            epsilon,
            alpha,
            streams: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            outstanding: 0,
            totals: ReadaheadTotals::default(),
        })
    }

    /// A tuner that can only ever pick `window`.
    pub fn fixed(window: u32, alpha: f64) -> Result<Self, StorageError> {
        Self::new(&[window], 0.0, alpha, 0)
    }

    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    pub fn arms(&self) -> &[ArmStats] {
        &self.arms
    }

    pub fn stream(&self, file_id: u32) -> Option<&StreamState> {
        self.streams.get(&file_id)
    }

    /// The arm with the best mean reward so far, smallest on ties; untried
    /// arms never win over tried ones.
    pub fn best_window(&self) -> u32 {
        let mut best = (f64::NEG_INFINITY, self.candidates[0]);
        for (arm, &w) in self.arms.iter().zip(&self.candidates) {
            if let Some(m) = arm.mean() {
                if m > best.0 {
                    best = (m, w);
                }
            }
        }
        best.1
    }

    fn choose(&mut self) -> usize {
        let i = if let Some(i) = self.started.iter().position(|n| *n == 0) {
            i
        } else if self.rng.gen_bool(self.epsilon.clamp(0.0, 1.0)) {
            self.rng.gen_range(0..self.arms.len())
        } else {
            let w = self.best_window();
            self.candidates.iter().position(|&c| c == w).unwrap_or(0)
        };
        self.started[i] += 1;
        i
    }

    fn close(&mut self, file_id: u32, s: StreamState) -> RunOutcome {
        self.outstanding -= s.outstanding();
        let wasted = s.prefetched - s.useful;
        let reward = s.useful as f64 - self.alpha * wasted as f64;
        if let Some(i) = self.candidates.iter().position(|&c| c == s.window) {
            self.arms[i].reward += reward;
            self.arms[i].pulls += 1;
        }
        self.totals.useful += s.useful;
        self.totals.wasted += wasted;
        self.totals.runs += 1;
        self.totals.score += reward;
        RunOutcome {
            file_id,
            window: s.window,
            length: s.run_length,
            prefetched: s.prefetched,
            useful: s.useful,
            wasted,
            reward,
        }
    }

    pub fn on_read(&mut self, file_id: u32, block: u64) -> ReadOutcome {
        self.totals.reads += 1;
        let continuing = self.streams.get(&file_id).is_some_and(|s| block == s.last_block + 1);
        let mut finished = None;
        if !continuing {
            if let Some(old) = self.streams.remove(&file_id) {
                finished = Some(self.close(file_id, old));
            }
            let arm = self.choose();
            let window = self.candidates[arm];
            self.streams.insert(
                file_id,
                StreamState { last_block: block, run_length: 0, window, buffered_to: block, prefetched: 0, useful: 0 },
            );
        }
        let s = self.streams.get_mut(&file_id).expect("stream exists");
        let before = s.outstanding();
        s.run_length += 1;
        s.last_block = block;
        let hit = continuing && block <= s.buffered_to;
        let mut prefetch = None;
        if hit {
            s.useful += 1;
        } else {
            let w = u64::from(s.window);
            s.buffered_to = block + w;
            s.prefetched += w;
            prefetch = Some((block + 1, block + w));
        }
        let after = s.outstanding();
        self.outstanding = self.outstanding + after - before;
        self.totals.hits += u64::from(hit);
        self.totals.prefetched += prefetch.map_or(0, |(a, b)| b - a + 1);
        self.totals.peak_outstanding = self.totals.peak_outstanding.max(self.outstanding);
        ReadOutcome { hit, prefetch, finished }
    }

    /// Ends every open run, crediting its arm.
    pub fn finish(&mut self) -> Vec<RunOutcome> {
        let mut ids: Vec<u32> = self.streams.keys().copied().collect();
        ids.sort_unstable();
        ids.into_iter()
            .map(|id| {
                let s = self.streams.remove(&id).expect("stream exists");
                self.close(id, s)
            })
            .collect()
    }

    /// Feeds every read of `trace`, then closes all runs.
    pub fn run(&mut self, trace: &AccessTrace) -> Vec<RunOutcome> {
        let mut runs = Vec::new();
        for r in trace.records().iter().filter(|r| r.op == Op::Read) {
            runs.extend(self.on_read(r.file_id, r.block).finished);
        }
        runs.extend(self.finish());
        runs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedChoice {
    pub size: u32,
    pub score: f64,
    pub totals: ReadaheadTotals,
}

/// Simulates each fixed window over `trace` and returns the best score,
/// smallest window on ties.
pub fn best_fixed_readahead(trace: &AccessTrace, candidates: &[u32], alpha: f64) -> Result<FixedChoice, StorageError> {
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(StorageError::InvalidCandidates);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<FixedChoice> = None;
    for w in sorted {
        let totals = fixed_totals(trace, w, alpha)?;
        if best.is_none_or(|b| totals.score > b.score) {
            best = Some(FixedChoice { size: w, score: totals.score, totals });
        }
    }
    Ok(best.expect("at least one candidate"))
}

pub fn fixed_totals(trace: &AccessTrace, window: u32, alpha: f64) -> Result<ReadaheadTotals, StorageError> {
    let mut st = ReadaheadState::fixed(window, alpha)?;
    st.run(trace);
    Ok(st.totals)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::storage::trace::{generate, Access, Workload};

    fn seq(len: u64) -> AccessTrace {
        AccessTrace::new((0..len).map(|b| Access { timestamp_ms: b, file_id: 0, block: b, op: Op::Read }).collect())
            .unwrap()
    }

    #[test]
    fn cold_start_prefetches_one_block() {
        let mut st = ReadaheadState::new(&CANDIDATES, DEFAULT_EPSILON, DEFAULT_ALPHA, 1).unwrap();
        let out = st.on_read(3, 100);
        assert!(!out.hit);
        assert_eq!(out.prefetch, Some((101, 101)));
        assert_eq!(st.stream(3).unwrap().window, 1);
    }

    #[test]
    fn sixty_four_block_run_rewards_by_window() {
        // hand count: w=1 -> 32 misses each prefetching one useful block;
        // w=2 -> 22 misses, 44 fetched, 42 useful, 2 wasted; w>=64 -> 1 miss
        let expected =
            [(1, 32.0), (2, 41.0), (4, 50.5), (8, 52.0), (16, 58.0), (32, 61.0), (64, 62.5), (128, 30.5), (256, -33.5)];
        for (w, score) in expected {
            let t = fixed_totals(&seq(64), w, DEFAULT_ALPHA).unwrap();
            assert_eq!(t.score, score, "window {w}");
            assert_eq!(t.useful + t.wasted, t.prefetched);
        }
    }

    #[test]
    fn best_fixed_oracle() {
        assert!(matches!(best_fixed_readahead(&seq(8), &[], 0.5), Err(StorageError::InvalidCandidates)));
        assert_eq!(best_fixed_readahead(&seq(64), &[16], 0.5).unwrap().size, 16);
        assert_eq!(best_fixed_readahead(&seq(64), &[1, 2, 4, 8], 0.5).unwrap().size, 8);
        // eight blocks: w=1 -> 4, w=2 -> 5 - 0.5 (3 misses, 6 fetched, 5 useful), w=4 -> 6 - 1 = 5,
        // w=8 -> 7 - 0.5 = 6.5
        let b = best_fixed_readahead(&seq(8), &[1, 2, 4, 8], 0.5).unwrap();
        assert_eq!((b.size, b.score), (8, 6.5));
        assert_eq!(fixed_totals(&seq(8), 4, 0.5).unwrap().score, 5.0);
        assert_eq!(fixed_totals(&seq(8), 2, 0.5).unwrap().score, 4.5);
    }

    #[test]
    fn tuner_finds_eight_on_repeated_runs() {
        let w = Workload::Sequential { files: 1, runs: 20, run_len: 64 };
        let mut wins = 0;
        for seed in 0..100 {
            let trace = generate(&w, seed);
            let mut st = ReadaheadState::new(&[1, 2, 4, 8], DEFAULT_EPSILON, DEFAULT_ALPHA, seed).unwrap();
            st.run(&trace);
            wins += usize::from(st.best_window() == 8);
        }
        assert!(wins >= 90, "{wins}");
    }

    #[test]
    fn random_reads_pick_the_smallest_window() {
        let trace = generate(&Workload::Random { files: 4, blocks: 1 << 20, accesses: 2000 }, 5);
        let mut st = ReadaheadState::new(&CANDIDATES, DEFAULT_EPSILON, DEFAULT_ALPHA, 5).unwrap();
        st.run(&trace);
        assert_eq!(st.best_window(), 1);
        let pulls: Vec<u64> = st.arms().iter().map(|a| a.pulls).collect();
        assert_eq!(pulls.iter().max(), Some(&pulls[0]));
    }

    proptest! {
        #[test]
        fn runs_conserve_prefetched_blocks(
            reads in proptest::collection::vec((0u32..3, 0u64..40), 0..200),
            seed in any::<u64>(),
        ) {
            let mut st = ReadaheadState::new(&CANDIDATES, 0.3, DEFAULT_ALPHA, seed).unwrap();
            let mut runs = Vec::new();
            for (f, b) in reads {
                let out = st.on_read(f, b);
                prop_assert!(st.candidates().contains(&st.stream(f).unwrap().window));
                runs.extend(out.finished);
            }
            runs.extend(st.finish());
            for r in &runs {
                prop_assert_eq!(r.useful + r.wasted, r.prefetched);
            }
            let t = st.totals;
            prop_assert_eq!(t.useful + t.wasted, t.prefetched);
            prop_assert!((0.0..=1.0).contains(&t.hit_ratio()) && (0.0..=1.0).contains(&t.wasted_ratio()));
        }
    }
}
