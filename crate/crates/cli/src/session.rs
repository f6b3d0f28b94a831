//! Persisted session state and the per-session feed.
//!
//! A session directory holds `session.json` (rewritten atomically after each
//! request) and `feed.ndjson` (append-only). Everything a restarted gateway
//! needs is in there or in the workspace's own journals and event log.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use peros_core::interpreter::Speaker;
use peros_core::model::CandidateGroup;
use peros_core::watchdog::KernelEvent;
use peros_core::{BackendConfig, DialogueContext, OperationPlan};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Awaiting {
    Checkpoint { index: usize },
    Clarification { slot: String },
}

/// The one plan a session may have in flight. Whether it has started is
/// read off the workspace: a started plan has a journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingPlan {
    pub plan: OperationPlan,
    pub approvals: BTreeSet<usize>,
    pub awaiting: Awaiting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    pub workspace: PathBuf,
    pub backend: BackendConfig,
    pub context: DialogueContext,
    #[serde(default)]
    pub pending: Option<PendingPlan>,
    /// Watchdog seq at creation; older events belong to someone else.
    pub event_origin: u64,
    /// Last watchdog seq copied into the feed.
    pub event_cursor: u64,
    #[serde(default)]
    pub suggested: BTreeSet<String>,
    /// Request standing behind the last unanswered recommendation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offered: Option<String>,
    pub created_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingAction {
    pub plan: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarificationView {
    pub slot: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateGroup>,
}

/// One chat bubble. System replies may carry a diff, an approval request or
/// an open question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptItem {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<PendingAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarification: Option<ClarificationView>,
}

impl TranscriptItem {
    pub fn user(text: &str) -> Self {
        TranscriptItem { speaker: Speaker::User, text: text.into(), diff: None, pending: None, clarification: None }
    }

    pub fn system(text: impl Into<String>) -> Self {
        TranscriptItem { speaker: Speaker::System, text: text.into(), diff: None, pending: None, clarification: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FeedBody {
    Message(TranscriptItem),
    Event { event: KernelEvent },
    Recommendation { directory: String, message: String, request: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedItem {
    pub seq: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub body: FeedBody,
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SessionStore { dir: dir.into() }
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    fn feed_path(&self, id: &str) -> PathBuf {
        self.session_dir(id).join("feed.ndjson")
    }

    /// Ids are generated server-side; anything else cannot name a session.
    fn valid_id(id: &str) -> bool {
        !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
    }

    pub fn exists(&self, id: &str) -> bool {
        Self::valid_id(id) && self.session_dir(id).join("session.json").exists()
    }

    pub fn ids(&self) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        match fs::read_dir(&self.dir) {
            Ok(read) => {
                for entry in read {
                    let name = entry?.file_name().to_string_lossy().into_owned();
                    if self.exists(&name) {
                        out.push(name);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        out.sort();
        Ok(out)
    }

    /// `None` when no such session was ever saved.
    pub fn load(&self, id: &str) -> io::Result<Option<Session>> {
        if !self.exists(id) {
            return Ok(None);
        }
        let bytes = fs::read(self.session_dir(id).join("session.json"))?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, session: &Session) -> io::Result<()> {
        let dir = self.session_dir(&session.id);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("session.json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(session).expect("session serializes"))?;
            f.sync_all()?;
        }
        fs::rename(tmp, dir.join("session.json"))
    }

    pub fn feed(&self, id: &str, since: u64) -> io::Result<Vec<FeedItem>> {
        Ok(read_feed(&self.feed_path(id))?.into_iter().filter(|i| i.seq > since).collect())
    }

    pub fn last_seq(&self, id: &str) -> io::Result<u64> {
        Ok(read_feed(&self.feed_path(id))?.last().map_or(0, |i| i.seq))
    }

    /// Appends bodies with consecutive seqs and returns the stored items.
    pub fn append(&self, id: &str, at_ms: u64, bodies: Vec<FeedBody>) -> io::Result<Vec<FeedItem>> {
        if bodies.is_empty() {
            return Ok(vec![]);
        }
        let mut seq = self.last_seq(id)?;
        let items: Vec<FeedItem> = bodies
            .into_iter()
            .map(|body| {
                seq += 1;
                FeedItem { seq, at_ms, body }
            })
            .collect();
        let path = self.feed_path(id);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        repair_tail(&path)?;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut buf = String::new();
        for item in &items {
            buf.push_str(&serde_json::to_string(item).expect("feed item serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        f.sync_data()?;
        Ok(items)
    }
}

/// Cuts a partial last line so the next append starts on a fresh line.
fn repair_tail(path: &Path) -> io::Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if bytes.last().is_none_or(|b| *b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)
}

/// Reads a feed, ignoring a torn last line left by a crash mid-append.
fn read_feed(path: &Path) -> io::Result<Vec<FeedItem>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for line in io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(item) => out.push(item),
            Err(_) => break,
        }
    }
    Ok(out)
}
