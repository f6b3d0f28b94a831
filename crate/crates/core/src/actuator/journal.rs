//! Per-plan execution journals, persisted as NDJSON.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::workspace::{Entry, STATE_DIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Failed,
    Skipped,
}

/// One path's state before and after a step. `None` means absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Change {
    pub path: String,
    pub before: Option<Entry>,
    pub after: Option<Entry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub step: usize,
    pub api: String,
    pub outcome: Outcome,
    pub started_ms: u64,
    pub finished_ms: u64,
    #[serde(default)]
    pub changes: Vec<Change>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Header { plan_id: String, root: PathBuf, before_digest: String, created_ms: u64 },
    Step(JournalEntry),
    Reverted { at_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionJournal {
    pub plan_id: String,
    pub root: PathBuf,
    /// Workspace digest taken before the first step ran.
    pub before_digest: String,
    pub created_ms: u64,
    pub entries: Vec<JournalEntry>,
    pub reverted: bool,
}

pub fn journal_path(root: &Path, plan_id: &str) -> PathBuf {
    root.join(STATE_DIR).join("journal").join(format!("{plan_id}.ndjson"))
}

impl ExecutionJournal {
    pub fn new(plan_id: &str, root: &Path, before_digest: String, created_ms: u64) -> Self {
        ExecutionJournal {
            plan_id: plan_id.to_string(),
            root: root.to_path_buf(),
            before_digest,
            created_ms,
            entries: vec![],
            reverted: false,
        }
    }

    pub fn path(&self) -> PathBuf {
        journal_path(&self.root, &self.plan_id)
    }

    /// Next step to run, or `None` once a step has failed.
    pub fn next_step(&self) -> Option<usize> {
        match self.entries.last() {
            Some(e) if e.outcome != Outcome::Ok => None,
            Some(e) => Some(e.step + 1),
            None => Some(1),
        }
    }

    pub fn failed(&self) -> Option<&JournalEntry> {
        self.entries.iter().find(|e| e.outcome == Outcome::Failed)
    }

    fn append(&self, line: &Line) -> io::Result<()> {
        let path = self.path();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(line).expect("journal line serializes"))?;
        f.sync_data()
    }

    pub(crate) fn write_header(&self) -> io::Result<()> {
        self.append(&Line::Header {
            plan_id: self.plan_id.clone(),
            root: self.root.clone(),
            before_digest: self.before_digest.clone(),
            created_ms: self.created_ms,
        })
    }

    pub(crate) fn record(&mut self, entry: JournalEntry) -> io::Result<()> {
        self.append(&Line::Step(entry.clone()))?;
        self.entries.push(entry);
        Ok(())
    }

    pub(crate) fn mark_reverted(&mut self, at_ms: u64) -> io::Result<()> {
        self.append(&Line::Reverted { at_ms })?;
        self.reverted = true;
        Ok(())
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let bad = |e: serde_json::Error| io::Error::new(io::ErrorKind::InvalidData, e);
        let mut journal: Option<ExecutionJournal> = None;
        for line in io::BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line).map_err(bad)? {
                Line::Header { plan_id, root, before_digest, created_ms } => {
                    journal = Some(ExecutionJournal::new(&plan_id, &root, before_digest, created_ms));
                }
                Line::Step(entry) => journal
                    .as_mut()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "step before header"))?
                    .entries
                    .push(entry),
                Line::Reverted { .. } => {
                    if let Some(j) = journal.as_mut() {
                        j.reverted = true;
                    }
                }
            }
        }
        journal.ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty journal"))
    }

    /// First recorded before-state and last recorded after-state per path.
    pub fn net_changes(&self) -> std::collections::BTreeMap<String, (Option<Entry>, Option<Entry>)> {
        let mut net: std::collections::BTreeMap<String, (Option<Entry>, Option<Entry>)> = Default::default();
        for change in self.entries.iter().flat_map(|e| &e.changes) {
            net.entry(change.path.clone())
                .and_modify(|slot| slot.1 = change.after.clone())
                .or_insert((change.before.clone(), change.after.clone()));
        }
        net
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = ExecutionJournal::new("p1", dir.path(), "d".into(), 1);
        j.write_header().unwrap();
        j.record(JournalEntry {
            step: 1,
            api: "fs.mkdir".into(),
            outcome: Outcome::Ok,
            started_ms: 1,
            finished_ms: 2,
            changes: vec![Change { path: "x".into(), before: None, after: Some(Entry::Dir { mode: 0o755 }) }],
            output: None,
            error: None,
        })
        .unwrap();
        j.mark_reverted(3).unwrap();
        assert_eq!(ExecutionJournal::load(&j.path()).unwrap(), j);
        assert_eq!(j.next_step(), Some(2));
    }
}
