//! Executes approved plans inside a workspace root, journaling every step so
//! the whole run can be previewed beforehand and reverted afterwards.

mod diff;
mod journal;
mod ops;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diff::{diff_manifests, is_repo_internal, DiffSummary, FileDiff, FileStatus, PreviewDiff, Side};
pub use journal::{journal_path, Change, ExecutionJournal, JournalEntry, Outcome};
pub use ops::SETTINGS_DIR;

use crate::git;
use crate::interpreter::{RemoteInfo, WorkspaceFacts};
use crate::model::{validate_plan, ApiRegistry, ArgValue, OperationPlan, ValidationReport};
use crate::workspace::{self, copy_tree, digest, scan, Entry, Manifest, ObjectStore};

pub const STEP_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ActuatorError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("plan is not executable: {0:?}")]
    Invalid(ValidationReport),
    #[error("step {step} failed: {cause}")]
    StepFailure { step: usize, cause: String },
    #[error("step {step} left the sandbox: {detail}")]
    SandboxViolation { step: usize, detail: String },
    #[error("workspace changed outside the journal at {0:?}")]
    RevertConflict(Vec<String>),
    #[error("journal belongs to another workspace")]
    ForeignJournal,
    #[error("a journal for plan `{0}` already exists")]
    JournalExists(String),
    #[error("step {0} is waiting for a clarification")]
    ClarificationPending(usize),
    #[error("journal for plan `{0}` was already reverted")]
    AlreadyReverted(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    CheckpointPending { step: usize },
    ClarificationPending { step: usize },
    StepFailure { step: usize, cause: String },
    SandboxViolation { step: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub journal: ExecutionJournal,
    pub status: RunStatus,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

static LOCKS: LazyLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = LazyLock::new(Default::default);

/// A sandbox root. Plans against one root run one at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(root: &Path) -> io::Result<Self> {
        let root = fs::canonicalize(root)?;
        if !root.is_dir() {
            return Err(io::Error::new(io::ErrorKind::NotADirectory, root.display().to_string()));
        }
        Ok(Workspace { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> io::Result<Manifest> {
        scan(&self.root)
    }

    pub fn snapshot(&self) -> io::Result<String> {
        Ok(digest(&self.manifest()?))
    }

    fn lock_handle(&self) -> Arc<Mutex<()>> {
        LOCKS.lock().entry(self.root.clone()).or_default().clone()
    }

    pub fn repos(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        if git::is_repo(&self.root) {
            out.push(self.root.clone());
        }
        if let Ok(read) = fs::read_dir(&self.root) {
            let mut children: Vec<PathBuf> =
                read.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| git::is_repo(p)).collect();
            children.sort();
            out.extend(children);
        }
        out
    }

    pub fn git_enabled(&self) -> bool {
        !self.repos().is_empty()
    }

    /// Remotes reachable without leaving the root, with their branches:
    /// the remote's default branch first, the rest in name order.
    pub fn facts(&self) -> WorkspaceFacts {
        let mut remotes: Vec<RemoteInfo> = Vec::new();
        for repo in self.repos() {
            let run = |args: &[&str]| git::run(&repo, &self.root, args, STEP_TIMEOUT).ok();
            let Some(names) = run(&["remote"]) else { continue };
            for name in names.lines().map(str::trim).filter(|n| !n.is_empty()) {
                let Some(url) = run(&["remote", "get-url", name]) else { continue };
                if url.contains("://") || url.contains(':') || url.contains('@') {
                    continue;
                }
                let Some(listing) = run(&["ls-remote", "--symref", name]) else { continue };
                let mut default = None;
                let mut branches = Vec::new();
                for line in listing.lines() {
                    if let Some(rest) = line.strip_prefix("ref: refs/heads/") {
                        default = rest.split('\t').next().map(str::to_string);
                    } else if let Some(b) = line.split('\t').nth(1).and_then(|r| r.strip_prefix("refs/heads/")) {
                        branches.push(b.to_string());
                    }
                }
                branches.sort();
                if let Some(d) = default.filter(|d| branches.contains(d)) {
                    branches.retain(|b| b != &d);
                    branches.insert(0, d);
                }
                if !remotes.iter().any(|r| r.name == name) {
                    remotes.push(RemoteInfo { name: name.to_string(), branches });
                }
            }
        }
        WorkspaceFacts { remotes }
    }
}

fn store_files(root: &Path, manifest: &Manifest, only: Option<&BTreeSet<String>>) -> io::Result<()> {
    let store = ObjectStore::for_root(root);
    for (path, entry) in manifest {
        if only.is_some_and(|set| !set.contains(path)) {
            continue;
        }
        if let Entry::File { sha, .. } = entry {
            store.put_file(&root.join(path), sha)?;
        }
    }
    Ok(())
}

fn changes_between(before: &Manifest, after: &Manifest) -> Vec<Change> {
    let paths: BTreeSet<&String> = before.keys().chain(after.keys()).collect();
    paths
        .into_iter()
        .filter(|p| before.get(*p) != after.get(*p))
        .map(|p| Change { path: p.clone(), before: before.get(p).cloned(), after: after.get(p).cloned() })
        .collect()
}

/// Checks everything the runnable prefix needs; violations on steps that are
/// still waiting for a clarification are expected.
fn check_plan(plan: &OperationPlan, registry: &ApiRegistry) -> Result<(), ActuatorError> {
    let mut report = validate_plan(plan, registry);
    report.violations.retain(|v| plan.clarification_for_step(v.step).is_none());
    report.ok = report.violations.is_empty();
    if report.ok {
        Ok(())
    } else {
        Err(ActuatorError::Invalid(report))
    }
}

/// Starts a plan: journals the pre-state and runs steps until a checkpoint
/// lacks approval, a slot is unresolved, a step fails, or the plan ends.
pub fn execute(
    plan: &OperationPlan,
    ws: &Workspace,
    approvals: &BTreeSet<usize>,
    registry: &ApiRegistry,
) -> Result<Execution, ActuatorError> {
    check_plan(plan, registry)?;
    let lock = ws.lock_handle();
    let _guard = lock.lock();
    if journal_path(&ws.root, &plan.id).exists() {
        return Err(ActuatorError::JournalExists(plan.id.clone()));
    }
    let pre = scan(&ws.root)?;
    store_files(&ws.root, &pre, None)?;
    let journal = ExecutionJournal::new(&plan.id, &ws.root, digest(&pre), now_ms());
    journal.write_header()?;
    run_steps(journal, plan, ws, approvals, pre)
}

/// Continues a journaled plan from its next step.
pub fn resume(
    journal: ExecutionJournal,
    plan: &OperationPlan,
    ws: &Workspace,
    approvals: &BTreeSet<usize>,
    registry: &ApiRegistry,
) -> Result<Execution, ActuatorError> {
    check_plan(plan, registry)?;
    if journal.root != ws.root || journal.plan_id != plan.id {
        return Err(ActuatorError::ForeignJournal);
    }
    if journal.reverted {
        return Err(ActuatorError::AlreadyReverted(journal.plan_id));
    }
    let lock = ws.lock_handle();
    let _guard = lock.lock();
    let pre = scan(&ws.root)?;
    store_files(&ws.root, &pre, None)?;
    run_steps(journal, plan, ws, approvals, pre)
}

fn failure_status(entry: &JournalEntry) -> RunStatus {
    let cause = entry.error.clone().unwrap_or_default();
    match cause.strip_prefix("sandbox: ") {
        Some(detail) => RunStatus::SandboxViolation { step: entry.step, detail: detail.to_string() },
        None => RunStatus::StepFailure { step: entry.step, cause },
    }
}

fn run_steps(
    mut journal: ExecutionJournal,
    plan: &OperationPlan,
    ws: &Workspace,
    approvals: &BTreeSet<usize>,
    mut current: Manifest,
) -> Result<Execution, ActuatorError> {
    let Some(start) = journal.next_step() else {
        let status = journal.failed().map(failure_status).unwrap_or(RunStatus::Completed);
        return Ok(Execution { journal, status });
    };
    for step in plan.steps.iter().skip(start - 1) {
        if plan.clarification_for_step(step.index).is_some() {
            return Ok(Execution { journal, status: RunStatus::ClarificationPending { step: step.index } });
        }
        if step.checkpoint && !approvals.contains(&step.index) {
            return Ok(Execution { journal, status: RunStatus::CheckpointPending { step: step.index } });
        }
        let started_ms = now_ms();
        let result = ops::run(&step.api, &step.args, &ws.root, STEP_TIMEOUT);
        let after = scan(&ws.root)?;
        let changes = changes_between(&current, &after);
        let touched: BTreeSet<String> = changes.iter().filter(|c| c.after.is_some()).map(|c| c.path.clone()).collect();
        store_files(&ws.root, &after, Some(&touched))?;
        let (outcome, output, error) = match result {
            Ok(out) => (Outcome::Ok, Some(out), None),
            Err(ops::OpError::Failed(e)) => (Outcome::Failed, None, Some(e)),
            Err(ops::OpError::Sandbox(p)) => (Outcome::Failed, None, Some(format!("sandbox: {p}"))),
        };
        let entry = JournalEntry {
            step: step.index,
            api: step.api.clone(),
            outcome,
            started_ms,
            finished_ms: now_ms(),
            changes,
            output,
            error,
        };
        tracing::debug!(plan = %plan.id, step = step.index, api = %step.api, ?outcome, "step finished");
        journal.record(entry.clone())?;
        current = after;
        if outcome == Outcome::Failed {
            let t = now_ms();
            for rest in plan.steps.iter().skip(step.index) {
                journal.record(JournalEntry {
                    step: rest.index,
                    api: rest.api.clone(),
                    outcome: Outcome::Skipped,
                    started_ms: t,
                    finished_ms: t,
                    changes: vec![],
                    output: None,
                    error: None,
                })?;
            }
            return Ok(Execution { status: failure_status(&entry), journal });
        }
    }
    Ok(Execution { journal, status: RunStatus::Completed })
}

fn depth(path: &str) -> usize {
    path.matches('/').count()
}

fn same_kind(a: &Entry, b: &Entry) -> bool {
    matches!((a, b), (Entry::File { .. }, Entry::File { .. }) | (Entry::Dir { .. }, Entry::Dir { .. }))
}

fn remove_any(path: &Path) -> io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Restores every journaled path to its state before the first step. Fails
/// without touching anything if a journaled path changed since it was last
/// recorded.
pub fn revert(journal: &mut ExecutionJournal, ws: &Workspace) -> Result<(), ActuatorError> {
    if journal.root != ws.root {
        return Err(ActuatorError::ForeignJournal);
    }
    if journal.reverted || journal.entries.iter().all(|e| e.changes.is_empty()) {
        return Ok(());
    }
    let lock = ws.lock_handle();
    let _guard = lock.lock();
    let net = journal.net_changes();
    let current = scan(&ws.root)?;
    let conflicts: Vec<String> =
        net.iter().filter(|(path, (_, last))| current.get(*path) != last.as_ref()).map(|(p, _)| p.clone()).collect();
    if !conflicts.is_empty() {
        return Err(ActuatorError::RevertConflict(conflicts));
    }
    let store = ObjectStore::for_root(&ws.root);
    let root = &ws.root;

    let mut removals: Vec<&String> = net
        .iter()
        .filter(|(p, (before, _))| match (current.get(*p), before) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(Entry::Link { .. }), Some(_)) => true,
            (Some(now), Some(then)) => !same_kind(now, then),
        })
        .map(|(p, _)| p)
        .collect();
    removals.sort_by_key(|p| std::cmp::Reverse(depth(p)));
    for p in removals {
        remove_any(&root.join(p))?;
    }

    let mut dirs: Vec<(&String, u32)> = net
        .iter()
        .filter_map(|(p, (before, _))| match before {
            Some(Entry::Dir { mode }) => Some((p, *mode)),
            _ => None,
        })
        .collect();
    dirs.sort_by_key(|(p, _)| depth(p));
    for (p, _) in &dirs {
        fs::create_dir_all(root.join(p))?;
    }
    for (p, (before, _)) in &net {
        let target = root.join(p);
        match before {
            Some(Entry::File { sha, mode, .. }) => {
                let unchanged = matches!(current.get(p), Some(Entry::File { sha: now, .. }) if now == sha);
                if !unchanged {
                    let tmp = target.with_file_name(format!(
                        ".{}.peros-restore",
                        target.file_name().unwrap_or_default().to_string_lossy()
                    ));
                    fs::copy(store.path(sha), &tmp)?;
                    fs::rename(&tmp, &target)?;
                }
                fs::set_permissions(&target, fs::Permissions::from_mode(*mode))?;
            }
            Some(Entry::Link { target: to }) => {
                remove_any(&target)?;
                std::os::unix::fs::symlink(to, &target)?;
            }
            _ => {}
        }
    }
    dirs.sort_by_key(|(p, _)| std::cmp::Reverse(depth(p)));
    for (p, mode) in dirs {
        fs::set_permissions(root.join(p), fs::Permissions::from_mode(mode))?;
    }
    journal.mark_reverted(now_ms())?;
    Ok(())
}

/// The working directory shared by every step, used to shorten diff paths.
pub fn plan_prefix(plan: &OperationPlan) -> String {
    let cwds: BTreeSet<String> = plan
        .steps
        .iter()
        .map(|s| match s.args.get("cwd") {
            Some(ArgValue::Path(c)) | Some(ArgValue::String(c)) => workspace::join_inside("", c).unwrap_or_default(),
            _ => String::new(),
        })
        .collect();
    if cwds.len() == 1 {
        cwds.into_iter().next().unwrap_or_default()
    } else {
        String::new()
    }
}

/// Runs steps `1..=upto` on a throwaway copy of the workspace and diffs the
/// result against the live tree, which is left untouched.
pub fn dry_run(
    plan: &OperationPlan,
    ws: &Workspace,
    upto: usize,
    registry: &ApiRegistry,
) -> Result<PreviewDiff, ActuatorError> {
    let upto = upto.min(plan.steps.len());
    let mut prefix = plan.clone();
    prefix.steps.truncate(upto);
    prefix.clarifications.retain(|c| c.step <= upto);
    if let Some(c) = prefix.clarifications.first() {
        return Err(ActuatorError::ClarificationPending(c.step));
    }
    check_plan(&prefix, registry)?;
    let scratch = tempfile::tempdir()?;
    let copy = scratch.path().join("ws");
    let before = {
        let lock = ws.lock_handle();
        let _guard = lock.lock();
        copy_tree(&ws.root, &copy)?;
        scan(&copy)?
    };
    let copy = fs::canonicalize(&copy)?;
    for step in &prefix.steps {
        match ops::run(&step.api, &step.args, &copy, STEP_TIMEOUT) {
            Ok(_) => {}
            Err(ops::OpError::Failed(cause)) => return Err(ActuatorError::StepFailure { step: step.index, cause }),
            Err(ops::OpError::Sandbox(detail)) => {
                return Err(ActuatorError::SandboxViolation { step: step.index, detail })
            }
        }
    }
    let after = scan(&copy)?;
    // Before-images come from the live tree, which the prefix never touched.
    let load = |side: Side, path: &str, _: &Entry| -> Option<Vec<u8>> {
        match side {
            Side::Before => fs::read(ws.root.join(path)).ok(),
            Side::After => fs::read(copy.join(path)).ok(),
        }
    };
    Ok(diff_manifests(&before, &after, &plan_prefix(plan), &load))
}

/// The net diff of an executed journal, rendered like a dry run.
pub fn journal_diff(journal: &ExecutionJournal, plan: &OperationPlan) -> PreviewDiff {
    let net = journal.net_changes();
    let before: Manifest = net.iter().filter_map(|(p, (b, _))| b.clone().map(|e| (p.clone(), e))).collect();
    let after: Manifest = net.iter().filter_map(|(p, (_, a))| a.clone().map(|e| (p.clone(), e))).collect();
    let store = ObjectStore::for_root(&journal.root);
    let load = |_: Side, _: &str, e: &Entry| e.sha().and_then(|sha| store.read(sha).ok());
    diff_manifests(&before, &after, &plan_prefix(plan), &load)
}
