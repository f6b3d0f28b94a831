//! Polling watchdog: registered triggers, normalized event records and an
//! append-only event log per workspace.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::os::unix::fs::MetadataExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use globset::{Glob, GlobMatcher};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workspace::{hash_file, walk, STATE_DIR};

pub const EVENT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DEBOUNCE_MS: u64 = 200;
pub const DEFAULT_POLL_MS: u64 = 200;

#[derive(Debug, Error)]
pub enum WatchError {
    #[error("trigger `{0}` already registered")]
    DuplicateId(String),
    #[error("glob `{0}` reaches outside the workspace")]
    GlobOutsideSandbox(String),
    #[error("invalid glob `{glob}`: {reason}")]
    BadGlob { glob: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("corrupt watchdog state: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Create,
    Modify,
    Delete,
    Rename,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub id: String,
    pub kind: EventKind,
    /// Workspace-relative glob; a leading `/` anchors at the root.
    pub glob: String,
    #[serde(default = "default_debounce")]
    pub debounce_ms: u64,
}

fn default_debounce() -> u64 {
    DEFAULT_DEBOUNCE_MS
}

impl TriggerSpec {
    pub fn new(id: &str, kind: EventKind, glob: &str) -> Self {
        TriggerSpec { id: id.into(), kind, glob: glob.into(), debounce_ms: DEFAULT_DEBOUNCE_MS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_path: Option<String>,
}

/// Field order is the on-disk order; `schema_version` comes first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelEvent {
    pub schema_version: u32,
    pub seq: u64,
    pub trigger_id: String,
    pub kind: EventKind,
    pub path: String,
    pub timestamp_ms: u64,
    pub payload: EventPayload,
}

/// A change as observed by the scanner, before normalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawChange {
    pub kind: EventKind,
    pub path: PathBuf,
    pub old_path: Option<PathBuf>,
    pub size: Option<u64>,
    pub timestamp_ms: u64,
}

fn rel_string(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .filter_map(|c| match c {
            std::path::Component::Normal(p) => Some(p.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// Canonical record for a raw change: root-relative forward-slash paths, the
/// schema tag and the caller's seq.
pub fn normalize_event(root: &Path, raw: &RawChange, trigger_id: &str, seq: u64) -> KernelEvent {
    KernelEvent {
        schema_version: EVENT_SCHEMA_VERSION,
        seq,
        trigger_id: trigger_id.to_string(),
        kind: raw.kind,
        path: rel_string(root, &raw.path),
        timestamp_ms: raw.timestamp_ms,
        payload: EventPayload { size_bytes: raw.size, old_path: raw.old_path.as_deref().map(|p| rel_string(root, p)) },
    }
}

pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// A clock advanced by hand, for tests and trace replay.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FileState {
    size: u64,
    mtime_ns: i128,
    ino: u64,
    sha: String,
}

#[derive(Debug, Clone)]
struct PendingModify {
    last_seen_ms: u64,
    size: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Persisted {
    files: BTreeMap<String, FileState>,
    #[serde(default)]
    triggers: Vec<TriggerSpec>,
}

#[derive(Debug)]
struct Inner {
    triggers: Vec<(TriggerSpec, GlobMatcher)>,
    files: BTreeMap<String, FileState>,
    pending: BTreeMap<String, PendingModify>,
    log: Vec<KernelEvent>,
    next_seq: u64,
}

/// Watches one workspace. All methods take `&self`; a background poller and
/// readers may share it.
#[derive(Debug)]
pub struct Watchdog {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

fn skip_internal(rel: &str) -> bool {
    let name = rel.rsplit('/').next().unwrap_or(rel);
    rel == STATE_DIR || name == ".git" || name.ends_with(".git")
}

fn compile_glob(glob: &str) -> Result<GlobMatcher, WatchError> {
    if glob.split('/').any(|part| part == "..") {
        return Err(WatchError::GlobOutsideSandbox(glob.to_string()));
    }
    let pattern = glob.strip_prefix('/').unwrap_or(glob);
    Glob::new(pattern)
        .map(|g| g.compile_matcher())
        .map_err(|e| WatchError::BadGlob { glob: glob.to_string(), reason: e.to_string() })
}

impl Watchdog {
    /// Opens the watchdog for `root`, restoring triggers, baseline and seq
    /// from `.peros/`. A fresh workspace takes its current tree as baseline.
    pub fn open(root: &Path, clock: Arc<dyn Clock>) -> Result<Self, WatchError> {
        let root = fs::canonicalize(root)?;
        let state_dir = root.join(STATE_DIR);
        fs::create_dir_all(&state_dir)?;
        let mut log = Vec::new();
        let log_path = state_dir.join("events.ndjson");
        if log_path.exists() {
            for line in io::BufReader::new(fs::File::open(&log_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: KernelEvent = serde_json::from_str(&line).map_err(|e| WatchError::Corrupt(e.to_string()))?;
                log.push(ev);
            }
        }
        let next_seq = log.last().map(|e| e.seq + 1).unwrap_or(1);
        let state_path = state_dir.join("watch_state.json");
        let (files, specs, fresh) = if state_path.exists() {
            let p: Persisted =
                serde_json::from_slice(&fs::read(&state_path)?).map_err(|e| WatchError::Corrupt(e.to_string()))?;
            (p.files, p.triggers, false)
        } else {
            (BTreeMap::new(), vec![], true)
        };
        let mut triggers = Vec::new();
        for spec in specs {
            let m = compile_glob(&spec.glob)?;
            triggers.push((spec, m));
        }
        let dog = Watchdog {
            root,
            clock,
            inner: Mutex::new(Inner { triggers, files, pending: BTreeMap::new(), log, next_seq }),
        };
        if fresh {
            let files = dog.read_tree(&BTreeMap::new())?;
            dog.inner.lock().files = files;
            dog.persist(&dog.inner.lock())?;
        }
        Ok(dog)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn triggers(&self) -> Vec<TriggerSpec> {
        self.inner.lock().triggers.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn register_trigger(&self, spec: TriggerSpec) -> Result<String, WatchError> {
        let matcher = compile_glob(&spec.glob)?;
        let mut inner = self.inner.lock();
        if inner.triggers.iter().any(|(s, _)| s.id == spec.id) {
            return Err(WatchError::DuplicateId(spec.id));
        }
        let id = spec.id.clone();
        inner.triggers.push((spec, matcher));
        self.persist(&inner)?;
        Ok(id)
    }

    /// Events with `seq > since`, in seq order.
    pub fn poll_events(&self, since: u64) -> Vec<KernelEvent> {
        let inner = self.inner.lock();
        let start = inner.log.partition_point(|e| e.seq <= since);
        inner.log[start..].to_vec()
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().next_seq - 1
    }

    fn read_tree(&self, known: &BTreeMap<String, FileState>) -> io::Result<BTreeMap<String, FileState>> {
        let mut out = BTreeMap::new();
        // timestamps this recent may hide a same-size rewrite, so rehash those
        let racy_after =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as i128).unwrap_or(0) - 2_000_000_000;
        for (rel, meta) in walk(&self.root, &skip_internal)? {
            if !meta.is_file() {
                continue;
            }
            let mtime_ns = meta.mtime() as i128 * 1_000_000_000 + meta.mtime_nsec() as i128;
            let reuse = known.get(&rel).filter(|f| {
                f.size == meta.size() && f.mtime_ns == mtime_ns && f.ino == meta.ino() && mtime_ns < racy_after
            });
            let sha = match reuse {
                Some(f) => f.sha.clone(),
                None => match hash_file(&self.root.join(&rel)) {
                    Ok(sha) => sha,
                    // vanished between listing and hashing; the next scan sees it
                    Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                    Err(e) => return Err(e),
                },
            };
            out.insert(rel, FileState { size: meta.size(), mtime_ns, ino: meta.ino(), sha });
        }
        Ok(out)
    }

    /// One polling pass: diffs the tree against the baseline, emits create,
    /// delete and rename events at once, and modify events once the path has
    /// been quiet for the trigger's debounce window. Returns new events.
    pub fn scan(&self) -> Result<Vec<KernelEvent>, WatchError> {
        self.scan_inner(false)
    }

    /// Like [`Watchdog::scan`] but emits pending modifications immediately.
    pub fn flush(&self) -> Result<Vec<KernelEvent>, WatchError> {
        self.scan_inner(true)
    }

    fn scan_inner(&self, flush: bool) -> Result<Vec<KernelEvent>, WatchError> {
        let mut inner = self.inner.lock();
        let now = self.clock.now_ms();
        let current = self.read_tree(&inner.files)?;
        let mut raws = Vec::new();

        let mut created: Vec<String> = current.keys().filter(|k| !inner.files.contains_key(*k)).cloned().collect();
        let mut deleted: Vec<String> = inner.files.keys().filter(|k| !current.contains_key(*k)).cloned().collect();
        // a delete and create of identical content in one pass is a rename
        let mut renames = Vec::new();
        deleted.retain(|old| {
            let sha = &inner.files[old].sha;
            if let Some(pos) = created.iter().position(|new| &current[new].sha == sha) {
                renames.push((old.clone(), created.remove(pos)));
                false
            } else {
                true
            }
        });
        for (old, new) in renames {
            inner.pending.remove(&old);
            raws.push(RawChange {
                kind: EventKind::Rename,
                path: self.root.join(&new),
                old_path: Some(self.root.join(&old)),
                size: Some(current[&new].size),
                timestamp_ms: now,
            });
        }
        for path in created {
            raws.push(RawChange {
                kind: EventKind::Create,
                path: self.root.join(&path),
                old_path: None,
                size: Some(current[&path].size),
                timestamp_ms: now,
            });
        }
        for path in deleted {
            inner.pending.remove(&path);
            raws.push(RawChange {
                kind: EventKind::Delete,
                path: self.root.join(&path),
                old_path: None,
                size: None,
                timestamp_ms: now,
            });
        }
        let modified: Vec<String> = current
            .iter()
            .filter(|(k, f)| inner.files.get(*k).is_some_and(|old| old.sha != f.sha))
            .map(|(k, _)| k.clone())
            .collect();
        for path in modified {
            let size = current[&path].size;
            inner.pending.insert(path, PendingModify { last_seen_ms: now, size });
        }
        let window = |inner: &Inner, rel: &str| {
            inner
                .triggers
                .iter()
                .filter(|(s, m)| s.kind == EventKind::Modify && m.is_match(rel))
                .map(|(s, _)| s.debounce_ms)
                .max()
                .unwrap_or(DEFAULT_DEBOUNCE_MS)
        };
        let due: Vec<String> = inner
            .pending
            .iter()
            .filter(|(rel, p)| flush || now.saturating_sub(p.last_seen_ms) >= window(&inner, rel))
            .map(|(rel, _)| rel.clone())
            .collect();
        for rel in due {
            let p = inner.pending.remove(&rel).expect("pending");
            raws.push(RawChange {
                kind: EventKind::Modify,
                path: self.root.join(&rel),
                old_path: None,
                size: Some(p.size),
                timestamp_ms: p.last_seen_ms,
            });
        }
        inner.files = current;

        let mut emitted = Vec::new();
        for raw in raws {
            let rel = rel_string(&self.root, &raw.path);
            let old_rel = raw.old_path.as_deref().map(|p| rel_string(&self.root, p));
            let matching: Vec<String> = inner
                .triggers
                .iter()
                .filter(|(s, m)| {
                    s.kind == raw.kind && (m.is_match(&rel) || old_rel.as_deref().is_some_and(|o| m.is_match(o)))
                })
                .map(|(s, _)| s.id.clone())
                .collect();
            for id in matching {
                let seq = inner.next_seq;
                inner.next_seq += 1;
                emitted.push(normalize_event(&self.root, &raw, &id, seq));
            }
        }
        if !emitted.is_empty() {
            let mut file =
                OpenOptions::new().create(true).append(true).open(self.root.join(STATE_DIR).join("events.ndjson"))?;
            for ev in &emitted {
                writeln!(file, "{}", serde_json::to_string(ev).expect("event serializes"))?;
            }
            file.sync_data()?;
            inner.log.extend(emitted.iter().cloned());
        }
        self.persist(&inner)?;
        Ok(emitted)
    }

    fn persist(&self, inner: &Inner) -> Result<(), WatchError> {
        let p =
            Persisted { files: inner.files.clone(), triggers: inner.triggers.iter().map(|(s, _)| s.clone()).collect() };
        let dir = self.root.join(STATE_DIR);
        let tmp = dir.join("watch_state.json.tmp");
        fs::write(&tmp, serde_json::to_vec(&p).expect("state serializes"))?;
        fs::rename(tmp, dir.join("watch_state.json"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (tempfile::TempDir, Arc<ManualClock>, Watchdog) {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(1_000));
        let dog = Watchdog::open(dir.path(), clock.clone()).unwrap();
        (dir, clock, dog)
    }

    #[test]
    fn register_rules() {
        let (_d, _c, dog) = setup();
        let id = dog.register_trigger(TriggerSpec::new("crucial", EventKind::Create, "/Documents/crucial/**")).unwrap();
        assert_eq!(id, "crucial");
        assert!(matches!(
            dog.register_trigger(TriggerSpec::new("crucial", EventKind::Create, "x/**")),
            Err(WatchError::DuplicateId(_))
        ));
        assert!(matches!(
            dog.register_trigger(TriggerSpec::new("esc", EventKind::Create, "../**")),
            Err(WatchError::GlobOutsideSandbox(_))
        ));
    }

    #[test]
    fn quiet_tree_yields_nothing() {
        let (_d, _c, dog) = setup();
        dog.register_trigger(TriggerSpec::new("all", EventKind::Create, "**")).unwrap();
        assert!(dog.scan().unwrap().is_empty());
        assert!(dog.poll_events(0).is_empty());
    }

    #[test]
    fn twelve_creates_twelve_events() {
        let (dir, _c, dog) = setup();
        dog.register_trigger(TriggerSpec::new("crucial", EventKind::Create, "/Documents/crucial/**")).unwrap();
        fs::create_dir_all(dir.path().join("Documents/crucial")).unwrap();
        fs::write(dir.path().join("elsewhere.txt"), b"x").unwrap();
        for i in 0..12 {
            fs::write(dir.path().join(format!("Documents/crucial/f{i:02}.txt")), b"data").unwrap();
        }
        dog.scan().unwrap();
        let events = dog.poll_events(0);
        // oracle: the files that appeared under the trigger directory
        let expected: Vec<String> = (0..12).map(|i| format!("Documents/crucial/f{i:02}.txt")).collect();
        let paths: Vec<String> = events.iter().map(|e| e.path.clone()).collect();
        assert_eq!(paths, expected);
        assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1));
        assert!(events.iter().all(|e| e.kind == EventKind::Create && e.payload.size_bytes == Some(4)));
    }

    #[test]
    fn modify_burst_is_debounced() {
        let (dir, clock, dog) = setup();
        let f = dir.path().join("notes.txt");
        fs::write(&f, b"0").unwrap();
        dog.register_trigger(TriggerSpec::new("mod", EventKind::Modify, "*.txt")).unwrap();
        dog.scan().unwrap();
        for i in 1..=5 {
            fs::write(&f, format!("write {i}")).unwrap();
            assert!(dog.scan().unwrap().is_empty());
            clock.advance(40);
        }
        clock.advance(200);
        let out = dog.scan().unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, EventKind::Modify);
        assert_eq!(out[0].payload.size_bytes, Some(7));
        assert!(dog.scan().unwrap().is_empty());
    }

    #[test]
    fn rename_maps_old_path() {
        let (dir, _c, dog) = setup();
        fs::write(dir.path().join("a"), b"same").unwrap();
        dog.register_trigger(TriggerSpec::new("r", EventKind::Rename, "**")).unwrap();
        dog.scan().unwrap();
        fs::rename(dir.path().join("a"), dir.path().join("b")).unwrap();
        let out = dog.scan().unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].path, "b");
        assert_eq!(out[0].payload.old_path.as_deref(), Some("a"));
    }

    #[test]
    fn normalize_is_deterministic_except_seq() {
        let root = Path::new("/ws");
        let raw = RawChange {
            kind: EventKind::Create,
            path: PathBuf::from("/ws/data/dogs_large.csv"),
            old_path: None,
            size: Some(12_000_000),
            timestamp_ms: 5,
        };
        let a = normalize_event(root, &raw, "t", 1);
        let mut b = normalize_event(root, &raw, "t", 2);
        assert_eq!(a.path, "data/dogs_large.csv");
        assert_eq!(a.payload.size_bytes, Some(12_000_000));
        b.seq = 1;
        assert_eq!(a, b);
        let line = serde_json::to_string(&a).unwrap();
        assert!(line.starts_with("{\"schema_version\":1,"));
        let back: KernelEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), line);
    }

    #[test]
    fn seq_continues_after_reopen() {
        let (dir, clock, dog) = setup();
        dog.register_trigger(TriggerSpec::new("c", EventKind::Create, "**")).unwrap();
        fs::write(dir.path().join("one"), b"1").unwrap();
        dog.scan().unwrap();
        drop(dog);
        let dog = Watchdog::open(dir.path(), clock).unwrap();
        assert_eq!(dog.triggers().len(), 1);
        fs::write(dir.path().join("two"), b"2").unwrap();
        dog.scan().unwrap();
        let seqs: Vec<u64> = dog.poll_events(0).iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
        assert_eq!(dog.poll_events(1).len(), 1);
    }
}
