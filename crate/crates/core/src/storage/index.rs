//! Piecewise-linear learned index over a sorted (key, address) table.
//!
//! Each segment predicts a key's position in the table from its first key.
//! The fit is a greedy shrinking cone: a segment keeps absorbing keys while
//! some slope still puts every covered key within `epsilon` of its position.
//! Lookups search only the predicted window and fall back to a full binary
//! search, so an answer is never wrong.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StorageError;

/// Key for block `block` of file `file_id`.
pub fn block_key(file_id: u32, block: u32) -> u64 {
    (u64::from(file_id) << 32) | u64::from(block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_key: u64,
    pub slope_num: u64,
    pub slope_den: u64,
    /// Table position of `start_key`.
    pub intercept: u64,
    /// Largest measured prediction error over the covered keys.
    pub max_error: u32,
}

impl Segment {
    fn predict(&self, key: u64) -> u64 {
        let dx = u128::from(key - self.start_key);
        self.intercept + (dx * u128::from(self.slope_num) / u128::from(self.slope_den)) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lookup {
    pub address: u64,
    /// Table entries compared.
    pub probes: u32,
    /// Whether the segment window missed and the full table was searched.
    pub fallback: bool,
}

/// Exact fraction `num / den` with `den > 0`.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: i128,
    den: i128,
}

impl Ratio {
    fn lt(self, other: Ratio) -> bool {
        self.num * other.den < other.num * self.den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedIndex {
    epsilon: u32,
    segments: Vec<Segment>,
    table: Vec<(u64, u64)>,
}

impl LearnedIndex {
    pub fn build(table: Vec<(u64, u64)>, epsilon: u32) -> Result<Self, StorageError> {
        if table.is_empty() {
            return Err(StorageError::EmptyMapping);
        }
        if table.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(StorageError::UnsortedKeys);
        }
        let eps = i128::from(epsilon);
        let mut segments = Vec::new();
        let mut start = 0usize;
        while start < table.len() {
            let x0 = table[start].0;
            let mut lo = Ratio { num: 0, den: 1 };
            let mut hi: Option<Ratio> = None;
            let mut end = start + 1;
            while end < table.len() {
                let dx = i128::from(table[end].0 - x0);
                let dy = (end - start) as i128;
                let cand_lo = Ratio { num: dy - eps, den: dx };
                let cand_hi = Ratio { num: dy + eps, den: dx };
                let new_lo = if lo.lt(cand_lo) { cand_lo } else { lo };
                let new_hi = match hi {
                    Some(h) if h.lt(cand_hi) => h,
                    _ => cand_hi,
                };
                if new_hi.lt(new_lo) {
                    break;
                }
                lo = new_lo;
                hi = Some(new_hi);
                end += 1;
            }
            // the chord to the last covered key, pulled into the cone
            let slope = if end - start < 2 {
                lo
            } else {
                let chord = Ratio { num: (end - 1 - start) as i128, den: i128::from(table[end - 1].0 - x0) };
                match hi {
                    Some(h) if h.lt(chord) => h,
                    _ if chord.lt(lo) => lo,
                    _ => chord,
                }
            };
            let mut seg = Segment {
                start_key: x0,
                slope_num: slope.num as u64,
                slope_den: slope.den as u64,
                intercept: start as u64,
                max_error: 0,
            };
            seg.max_error = (start..end).map(|i| seg.predict(table[i].0).abs_diff(i as u64) as u32).max().unwrap_or(0);
            segments.push(seg);
            start = end;
        }
        Ok(LearnedIndex { epsilon, segments, table })
    }

    pub fn epsilon(&self) -> u32 {
        self.epsilon
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn index_bytes(&self) -> usize {
        self.segments.len() * std::mem::size_of::<Segment>()
    }

    /// Size of a plain key/address table holding the same mapping.
    pub fn flat_bytes(&self) -> usize {
        self.table.len() * std::mem::size_of::<(u64, u64)>()
    }

    /// Table positions `[first, last]` covered by segment `i`.
    fn segment_span(&self, i: usize) -> (usize, usize) {
        let first = self.segments[i].intercept as usize;
        let last = self.segments.get(i + 1).map_or(self.table.len(), |s| s.intercept as usize) - 1;
        (first, last)
    }

    pub fn lookup(&self, key: u64) -> Result<Lookup, StorageError> {
        let i = self.segments.partition_point(|s| s.start_key <= key);
        if i == 0 {
            return Err(StorageError::KeyNotFound(key));
        }
        let seg = &self.segments[i - 1];
        let (first, last) = self.segment_span(i - 1);
        let pred = (seg.predict(key) as usize).clamp(first, last);
        let err = seg.max_error as usize;
        let (mut a, mut b) = (pred.saturating_sub(err).max(first), (pred + err).min(last) + 1);
        let mut probes = 0;
        while a < b {
            let mid = a + (b - a) / 2;
            probes += 1;
            match self.table[mid].0.cmp(&key) {
                std::cmp::Ordering::Equal => return Ok(Lookup { address: self.table[mid].1, probes, fallback: false }),
                std::cmp::Ordering::Less => a = mid + 1,
                std::cmp::Ordering::Greater => b = mid,
            }
        }
        let (mut a, mut b) = (0, self.table.len());
        while a < b {
            let mid = a + (b - a) / 2;
            probes += 1;
            match self.table[mid].0.cmp(&key) {
                std::cmp::Ordering::Equal => return Ok(Lookup { address: self.table[mid].1, probes, fallback: true }),
                std::cmp::Ordering::Less => a = mid + 1,
                std::cmp::Ordering::Greater => b = mid,
            }
        }
        Err(StorageError::KeyNotFound(key))
    }
}

/// `n` distinct block keys spread uniformly over 64 files, sorted, each
/// mapped to a random device address.
pub fn random_mapping(n: usize, seed: u64) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = std::collections::BTreeSet::new();
    while keys.len() < n {
        keys.insert(block_key(rng.gen_range(0..64), rng.gen()));
    }
    keys.into_iter().map(|k| (k, rng.gen_range(0..1u64 << 40))).collect()
}
