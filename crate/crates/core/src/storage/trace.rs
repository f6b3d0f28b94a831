//! Block access traces and synthetic workload generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StorageError;

pub const BLOCK_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Read,
    Write,
    Create,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub timestamp_ms: u64,
    pub file_id: u32,
    pub block: u64,
    pub op: Op,
}

impl Access {
    /// Index key: file id in the high 32 bits, block number below.
    pub fn key(&self) -> u64 {
        (u64::from(self.file_id) << 32) | (self.block & 0xffff_ffff)
    }
}

/// Accesses in non-decreasing timestamp order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    records: Vec<Access>,
}

impl AccessTrace {
    pub fn new(records: Vec<Access>) -> Result<Self, StorageError> {
        if let Some(i) = records.windows(2).position(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
            return Err(StorageError::TraceParse { line: i + 3, reason: "timestamps go backwards".into() });
        }
        if let Some(i) = records.iter().position(|r| r.block > u64::from(u32::MAX)) {
            return Err(StorageError::TraceParse { line: i + 2, reason: "block number exceeds 32 bits".into() });
        }
        Ok(AccessTrace { records })
    }

    pub fn records(&self) -> &[Access] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn files(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.file_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Parses `timestamp_ms,file_id,block,op` CSV with a header row.
    pub fn from_csv(text: &str) -> Result<Self, StorageError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| StorageError::TraceParse { line: 1, reason: e.to_string() })?;
        if header.iter().collect::<Vec<_>>() != ["timestamp_ms", "file_id", "block", "op"] {
            return Err(StorageError::TraceParse { line: 1, reason: format!("unexpected header {header:?}") });
        }
        let records = reader
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e: csv::Error| StorageError::TraceParse { line: i + 2, reason: e.to_string() }))
            .collect::<Result<Vec<Access>, _>>()?;
        Self::new(records)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }
}

/// Workload shapes for the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Workload {
    /// `runs` sequential reads of `run_len` blocks, each starting somewhere new.
    Sequential { files: u32, runs: usize, run_len: u64 },
    /// Uniformly random block reads.
    Random { files: u32, blocks: u64, accesses: usize },
    /// Skewed file popularity: `hot` files take `hot_share` of accesses, and
    /// the hot set moves to other files halfway through when `shift` is set.
    Skewed { files: u32, hot: u32, hot_share: f64, accesses: usize, write_share: f64, shift: bool },
}

impl Workload {
    pub fn read_heavy() -> Self {
        Workload::Skewed { files: 10, hot: 3, hot_share: 0.8, accesses: 2000, write_share: 0.1, shift: false }
    }

    pub fn write_heavy() -> Self {
        Workload::Skewed { files: 10, hot: 3, hot_share: 0.8, accesses: 2000, write_share: 0.7, shift: false }
    }
}

/// Deterministic trace for `(workload, seed)`. Timestamps advance 1 ms per access.
pub fn generate(workload: &Workload, seed: u64) -> AccessTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut push = |file_id: u32, block: u64, op: Op| {
        let timestamp_ms = records.len() as u64;
        records.push(Access { timestamp_ms, file_id, block, op });
    };
    match *workload {
        Workload::Sequential { files, runs, run_len } => {
            let mut next_free = vec![0u64; files.max(1) as usize];
            for r in 0..runs {
                let file = (r as u32) % files.max(1);
                // a gap keeps consecutive runs on one file from joining up
                let start = next_free[file as usize] + rng.gen_range(1..=8) * run_len;
                for b in start..start + run_len {
                    push(file, b, Op::Read);
                }
                next_free[file as usize] = start + run_len;
            }
        }
        Workload::Random { files, blocks, accesses } => {
            for _ in 0..accesses {
                push(rng.gen_range(0..files.max(1)), rng.gen_range(0..blocks.max(1)), Op::Read);
            }
        }
        Workload::Skewed { files, hot, hot_share, accesses, write_share, shift } => {
            let files = files.max(1);
            let hot = hot.clamp(1, files);
            for i in 0..accesses {
                let offset = if shift && i >= accesses / 2 { hot } else { 0 };
                let file = if rng.gen_bool(hot_share.clamp(0.0, 1.0)) {
                    (rng.gen_range(0..hot) + offset) % files
                } else {
                    rng.gen_range(0..files)
                };
                let op = if rng.gen_bool(write_share.clamp(0.0, 1.0)) { Op::Write } else { Op::Read };
                push(file, rng.gen_range(0..64), op);
            }
        }
    }
    AccessTrace { records }
}

pub fn sequential_fixture() -> AccessTrace {
    AccessTrace::from_csv(include_str!("../../data/traces/sequential.csv")).expect("shipped trace parses")
}

pub fn random_fixture() -> AccessTrace {
    AccessTrace::from_csv(include_str!("../../data/traces/random.csv")).expect("shipped trace parses")
}

/// The small tiering instances shipped for comparison with the exact
/// optimum, generated from seeds 1 to 5.
pub fn tiering_instances() -> [AccessTrace; 5] {
    [
        include_str!("../../data/traces/tiering-1.csv"),
        include_str!("../../data/traces/tiering-2.csv"),
        include_str!("../../data/traces/tiering-3.csv"),
        include_str!("../../data/traces/tiering-4.csv"),
        include_str!("../../data/traces/tiering-5.csv"),
    ]
    .map(|text| AccessTrace::from_csv(text).expect("shipped trace parses"))
}

pub const TIERING_INSTANCE: Workload =
    Workload::Skewed { files: 8, hot: 2, hot_share: 0.9, accesses: 200, write_share: 0.3, shift: false };

/// Parameters the shipped fixtures were generated with.
pub const SEQUENTIAL_FIXTURE: (Workload, u64) = (Workload::Sequential { files: 6, runs: 150, run_len: 64 }, 7);
pub const RANDOM_FIXTURE: (Workload, u64) = (Workload::Random { files: 8, blocks: 100_000, accesses: 5000 }, 11);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let t = generate(&Workload::read_heavy(), 3);
        assert_eq!(AccessTrace::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn shipped_fixtures_match_generator() {
        let (w, seed) = SEQUENTIAL_FIXTURE;
        assert_eq!(sequential_fixture(), generate(&w, seed));
        let (w, seed) = RANDOM_FIXTURE;
        assert_eq!(random_fixture(), generate(&w, seed));
        for (seed, t) in (1..).zip(tiering_instances()) {
            assert_eq!(t, generate(&TIERING_INSTANCE, seed));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(AccessTrace::from_csv("a,b\n").is_err());
        let bad = "timestamp_ms,file_id,block,op\n5,1,1,read\n4,1,2,read\n";
        assert!(matches!(AccessTrace::from_csv(bad), Err(StorageError::TraceParse { .. })));
        let bad = "timestamp_ms,file_id,block,op\n5,1,1,seek\n";
        assert!(matches!(AccessTrace::from_csv(bad), Err(StorageError::TraceParse { line: 2, .. })));
        assert!(AccessTrace::from_csv("timestamp_ms,file_id,block,op\n").unwrap().is_empty());
    }
}
