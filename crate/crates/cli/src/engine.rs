//! The session engine behind every gateway endpoint.
//!
//! Handlers load the session from disk, act, and write it back; nothing
//! survives in memory between requests except caches that can be rebuilt
//! (watchdogs, per-session locks).

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use peros_core::actuator::{self, journal_diff, journal_path, revert, ExecutionJournal, RunStatus, Workspace};
use peros_core::interpreter::{question_text, OpenClarification, Speaker, CLARIFY_HELP_VERB, CLARIFY_VERB};
use peros_core::lexicon::LexiconStore;
use peros_core::lm::{
    evaluate, write_report, Corpus, EvalReport, GoldExample, GoldStep, JobLedger, LmError, LmManager, Pipeline,
    RetrainDecision, RetrainOutcome, RetrainState,
};
use peros_core::watchdog::{Clock, EventKind, KernelEvent, SystemClock, TriggerSpec, Watchdog};
use peros_core::{
    ApiRegistry, ArgValue, BackendConfig, Clarification, DialogueContext, Effect, Lexicon, Live, OperationPlan,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::planner::{open_lexicon_store, LocalPlanner, Planner, PlannerError, Reloaded};
use crate::session::{
    Awaiting, ClarificationView, FeedBody, FeedItem, PendingAction, PendingPlan, Session, SessionStore, TranscriptItem,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("session `{0}` not found")]
    SessionNotFound(String),
    #[error("workspace unavailable: {0}")]
    WorkspaceUnavailable(String),
    #[error("no pending checkpoint {index} for plan `{plan}`")]
    NoPendingCheckpoint { plan: String, index: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl From<io::Error> for GatewayError {
    fn from(e: io::Error) -> Self {
        GatewayError::Internal(e.to_string())
    }
}

impl From<PlannerError> for GatewayError {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::BackendUnavailable(s) => GatewayError::BackendUnavailable(s),
            other => GatewayError::Internal(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Approve,
    Reject,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewSession {
    pub workspace: String,
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub decision: RetrainDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrain: Option<RetrainOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reloaded: Option<Reloaded>,
}

/// Evaluation history and policy state, persisted between evaluations.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmFile {
    state: RetrainState,
    history: Vec<EvalReport>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

const YES: &[&str] = &["y", "yes", "yeah", "yep", "ok", "okay", "sure", "correct", "approve", "go ahead", "looks good"];
const NO: &[&str] = &["n", "no", "nope", "reject", "revert", "cancel", "undo", "stop"];

/// `Some(true)` for a plain yes, `Some(false)` for a plain no.
pub fn yes_no(text: &str) -> Option<bool> {
    let t = text.trim().trim_end_matches(['.', '!', ',']).to_lowercase();
    if YES.contains(&t.as_str()) {
        Some(true)
    } else if NO.contains(&t.as_str()) {
        Some(false)
    } else {
        None
    }
}

/// The question without the trailing sentence that lists candidates.
fn bare_question(c: &Clarification) -> String {
    let listing = question_text("", &c.candidates);
    c.question.strip_suffix(listing.as_str()).unwrap_or(&c.question).trim().to_string()
}

fn clarification_view(c: &Clarification) -> ClarificationView {
    ClarificationView { slot: c.slot.clone(), question: c.question.clone(), candidates: c.candidates.clone() }
}

fn parent_dir(path: &str) -> &str {
    path.rfind('/').map_or("", |i| &path[..i])
}

fn load_journal(ws: &Workspace, plan_id: &str) -> io::Result<Option<ExecutionJournal>> {
    let path = journal_path(ws.root(), plan_id);
    if path.exists() {
        ExecutionJournal::load(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn arg_text(plan: &OperationPlan, step: usize, name: &str) -> Option<String> {
    match plan.step(step)?.args.get(name)? {
        ArgValue::String(s) | ArgValue::Path(s) | ArgValue::Enum(s) => Some(s.clone()),
        other => Some(format!("{other:?}")),
    }
}

/// Runs a plan through the planner for evaluation, one fresh context per example.
struct PlannerPipeline<'a> {
    planner: &'a dyn Planner,
    backend: BackendConfig,
    registry_version: u64,
}

impl Pipeline for PlannerPipeline<'_> {
    fn plan(&self, example: &GoldExample) -> Vec<GoldStep> {
        let mut ctx = DialogueContext::new(format!("eval-{}", example.id));
        for turn in &example.context {
            ctx.push(Speaker::User, turn.clone(), None);
        }
        let Ok(frame) = self.planner.interpret(&example.request, &ctx, &self.backend) else { return vec![] };
        match self.planner.compile(&frame, &example.id) {
            Ok(plan) => plan.steps.into_iter().map(|s| GoldStep { api: s.api, args: s.args }).collect(),
            Err(_) => vec![],
        }
    }

    fn registry_version(&self) -> u64 {
        self.registry_version
    }
}

pub struct Gateway {
    cfg: Config,
    sessions: SessionStore,
    planner: Arc<dyn Planner>,
    lexicon_store: LexiconStore,
    lexicon: Live<Lexicon>,
    clock: Arc<dyn Clock>,
    watchdogs: Mutex<HashMap<PathBuf, Arc<Watchdog>>>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    eval_lock: Mutex<()>,
}

impl Gateway {
    /// In-process gateway with a local planner.
    pub fn local(cfg: Config) -> anyhow::Result<Self> {
        let planner = Arc::new(LocalPlanner::open(&cfg)?);
        Self::open(cfg, planner)
    }

    pub fn open(cfg: Config, planner: Arc<dyn Planner>) -> anyhow::Result<Self> {
        fs::create_dir_all(cfg.sessions_dir())?;
        let lexicon_store = open_lexicon_store(&cfg.lexicon_dir())?;
        let lexicon = Live::new(lexicon_store.load_latest()?);
        let lm_path = cfg.state_dir.join("lm.json");
        if !lm_path.exists() {
            let registry = crate::planner::load_registry(&cfg.registry_path())?;
            let file = LmFile { state: RetrainState::new(&registry), history: vec![] };
            fs::write(&lm_path, serde_json::to_vec_pretty(&file)?)?;
        }
        Ok(Gateway {
            sessions: SessionStore::new(cfg.sessions_dir()),
            cfg,
            planner,
            lexicon_store,
            lexicon,
            clock: Arc::new(SystemClock),
            watchdogs: Mutex::new(HashMap::new()),
            locks: Mutex::new(HashMap::new()),
            eval_lock: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn planner(&self) -> &dyn Planner {
        self.planner.as_ref()
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(id.to_string()).or_default().clone()
    }

    fn load(&self, id: &str) -> Result<Session, GatewayError> {
        self.sessions.load(id)?.ok_or_else(|| GatewayError::SessionNotFound(id.to_string()))
    }

    fn watchdog(&self, root: &Path) -> Result<Arc<Watchdog>, GatewayError> {
        let mut dogs = self.watchdogs.lock();
        if let Some(d) = dogs.get(root) {
            return Ok(d.clone());
        }
        let werr = |e: peros_core::watchdog::WatchError| GatewayError::Internal(e.to_string());
        let dog = Watchdog::open(root, self.clock.clone()).map_err(werr)?;
        let have: Vec<String> = dog.triggers().into_iter().map(|t| t.id).collect();
        for (id, kind) in [
            ("create", EventKind::Create),
            ("modify", EventKind::Modify),
            ("delete", EventKind::Delete),
            ("rename", EventKind::Rename),
        ] {
            if !have.iter().any(|h| h == id) {
                dog.register_trigger(TriggerSpec::new(id, kind, "**")).map_err(werr)?;
            }
        }
        let dog = Arc::new(dog);
        dogs.insert(root.to_path_buf(), dog.clone());
        Ok(dog)
    }

    /// Resolves a requested workspace inside the sandbox parent, creating it
    /// if needed. Nothing is created outside the parent.
    fn resolve_workspace(&self, raw: &str) -> Result<PathBuf, GatewayError> {
        let unavailable = |why: String| GatewayError::WorkspaceUnavailable(why);
        let parent = fs::canonicalize(&self.cfg.sandbox_parent)
            .map_err(|e| unavailable(format!("sandbox parent {}: {e}", self.cfg.sandbox_parent.display())))?;
        let p = Path::new(raw.trim());
        if raw.trim().is_empty() || p.components().any(|c| matches!(c, Component::ParentDir)) {
            return Err(unavailable(format!("`{raw}` is not a plain path")));
        }
        let joined = if p.is_absolute() { p.to_path_buf() } else { parent.join(p) };
        let mut existing = joined.as_path();
        while !existing.exists() {
            existing = existing.parent().ok_or_else(|| unavailable(format!("`{raw}` has no existing ancestor")))?;
        }
        let rest = joined.strip_prefix(existing).expect("ancestor").to_path_buf();
        let candidate = fs::canonicalize(existing)?.join(rest);
        let inside = |c: &Path| c.starts_with(&parent) && c != parent;
        if !inside(&candidate) {
            return Err(unavailable(format!("{} is outside {}", joined.display(), parent.display())));
        }
        fs::create_dir_all(&candidate).map_err(|e| unavailable(format!("{}: {e}", candidate.display())))?;
        let root = fs::canonicalize(&candidate)?;
        if !inside(&root) || !root.is_dir() {
            return Err(unavailable(format!("{} is outside {}", root.display(), parent.display())));
        }
        Ok(root)
    }

    pub fn create_session(&self, req: &NewSession) -> Result<Session, GatewayError> {
        let root = self.resolve_workspace(&req.workspace)?;
        let dog = self.watchdog(&root)?;
        dog.scan().map_err(|e| GatewayError::Internal(e.to_string()))?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let seq = dog.last_seq();
        let session = Session {
            context: DialogueContext::new(id.clone()),
            id,
            user: req.user.clone(),
            workspace: root,
            backend: req.backend.clone().unwrap_or_else(|| self.cfg.backend.clone()),
            pending: None,
            event_origin: seq,
            event_cursor: seq,
            suggested: Default::default(),
            offered: None,
            created_ms: now_ms(),
        };
        self.sessions.save(&session)?;
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Session, GatewayError> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        self.load(id)
    }

    pub fn session_ids(&self) -> Result<Vec<String>, GatewayError> {
        Ok(self.sessions.ids()?)
    }

    /// Copies new watchdog events into the session and runs the
    /// recommender over the session's event history.
    fn pump(&self, s: &mut Session) -> Result<Vec<FeedBody>, GatewayError> {
        let dog = self.watchdog(&s.workspace)?;
        dog.scan().map_err(|e| GatewayError::Internal(e.to_string()))?;
        let fresh = dog.poll_events(s.event_cursor);
        let Some(last) = fresh.last() else { return Ok(vec![]) };
        s.event_cursor = last.seq;
        let mut bodies: Vec<FeedBody> = fresh.into_iter().map(|event| FeedBody::Event { event }).collect();
        let window: Vec<KernelEvent> = dog
            .poll_events(s.event_origin)
            .into_iter()
            .filter(|e| !s.suggested.contains(parent_dir(&e.path)))
            .collect();
        match self.planner.recommend(&window, &self.cfg.recommend) {
            Ok(Some(sug)) if s.suggested.insert(sug.directory.clone()) => {
                s.context.push(Speaker::System, sug.message.clone(), None);
                s.offered = Some(sug.request.clone());
                bodies.push(FeedBody::Recommendation {
                    directory: sug.directory,
                    message: sug.message,
                    request: sug.request,
                });
            }
            Ok(_) => {}
            Err(e) => tracing::warn!(session = %s.id, "recommender failed: {e}"),
        }
        Ok(bodies)
    }

    fn commit(&self, s: &Session, bodies: Vec<FeedBody>) -> Result<(), GatewayError> {
        self.sessions.save(s)?;
        self.sessions.append(&s.id, now_ms(), bodies)?;
        Ok(())
    }

    /// Feed items after `since`, pulling in fresh watchdog activity first.
    pub fn events(&self, id: &str, since: u64) -> Result<Vec<FeedItem>, GatewayError> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        let mut s = self.load(id)?;
        let bodies = self.pump(&mut s)?;
        if !bodies.is_empty() {
            self.commit(&s, bodies)?;
        }
        Ok(self.sessions.feed(id, since)?)
    }

    /// One background pass over every session that is not busy.
    pub fn pump_all(&self) {
        let Ok(ids) = self.sessions.ids() else { return };
        for id in ids {
            let lock = self.lock(&id);
            let Some(_guard) = lock.try_lock() else { continue };
            let outcome = self.load(&id).and_then(|mut s| {
                let bodies = self.pump(&mut s)?;
                if bodies.is_empty() {
                    Ok(())
                } else {
                    self.commit(&s, bodies)
                }
            });
            if let Err(e) = outcome {
                tracing::warn!(session = %id, "event pump failed: {e}");
            }
        }
    }

    pub fn post_message(&self, id: &str, text: &str) -> Result<TranscriptItem, GatewayError> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        let mut s = self.load(id)?;
        let mut bodies = self.pump(&mut s)?;
        let reply = self.handle(&mut s, text)?;
        s.context.push(Speaker::User, text, None);
        s.context.push(Speaker::System, reply.text.clone(), reply.pending.as_ref().map(|p| p.plan.clone()));
        bodies.push(FeedBody::Message(TranscriptItem::user(text)));
        bodies.push(FeedBody::Message(reply.clone()));
        self.commit(&s, bodies)?;
        Ok(reply)
    }

    pub fn decide_checkpoint(
        &self,
        id: &str,
        plan: &str,
        index: usize,
        decision: Decision,
    ) -> Result<TranscriptItem, GatewayError> {
        let lock = self.lock(id);
        let _guard = lock.lock();
        let mut s = self.load(id)?;
        let ws = Workspace::open(&s.workspace)?;
        let reply = self.decide(&mut s, &ws, plan, index, decision)?;
        let said = match decision {
            Decision::Approve => "approve",
            Decision::Reject => "reject",
        };
        s.context.push(Speaker::User, said, Some(plan.to_string()));
        s.context.push(Speaker::System, reply.text.clone(), None);
        self.commit(&s, vec![FeedBody::Message(TranscriptItem::user(said)), FeedBody::Message(reply.clone())])?;
        Ok(reply)
    }

    fn handle(&self, s: &mut Session, text: &str) -> Result<TranscriptItem, GatewayError> {
        let ws = Workspace::open(&s.workspace)?;
        s.context.facts = ws.facts();
        match s.pending.as_ref().map(|p| (p.plan.id.clone(), p.awaiting.clone())) {
            Some((plan, Awaiting::Checkpoint { index })) => match yes_no(text) {
                Some(true) => self.decide(s, &ws, &plan, index, Decision::Approve),
                Some(false) => self.decide(s, &ws, &plan, index, Decision::Reject),
                None => {
                    let mut item = TranscriptItem::system(format!(
                        "Step {index} is waiting for your approval. Reply y to continue, or n and I'll revert the changes."
                    ));
                    item.pending = Some(PendingAction { plan, index });
                    Ok(item)
                }
            },
            Some((_, Awaiting::Clarification { slot })) => self.answer(s, &ws, &slot, text),
            None => {
                let offered = s.offered.take();
                let request = match (yes_no(text), offered) {
                    (Some(true), Some(request)) => request,
                    (Some(false), Some(_)) => return Ok(TranscriptItem::system("OK, I'll leave it as it is.")),
                    (_, offered) => {
                        s.offered = offered;
                        text.to_string()
                    }
                };
                self.start(s, &ws, &request)
            }
        }
    }

    fn start(&self, s: &mut Session, ws: &Workspace, request: &str) -> Result<TranscriptItem, GatewayError> {
        let frame = match self.planner.interpret(request, &s.context, &s.backend) {
            Ok(f) if !f.tasks.is_empty() => f,
            Ok(_) | Err(PlannerError::NoIntent(_)) => {
                return Ok(TranscriptItem::system("Sorry, I couldn't find a task in that. Could you rephrase it?"))
            }
            Err(PlannerError::BackendUnavailable(e)) => return Err(GatewayError::BackendUnavailable(e)),
            Err(e) => return Ok(TranscriptItem::system(format!("Sorry, I couldn't interpret that ({e})."))),
        };
        if frame.tasks.iter().any(|t| t.verb == CLARIFY_VERB || t.verb == CLARIFY_HELP_VERB) {
            return Ok(TranscriptItem::system("There is no open question right now."));
        }
        let plan_id = format!("{}-{}", &s.id[..s.id.len().min(8)], &uuid::Uuid::new_v4().simple().to_string()[..8]);
        let plan = match self.planner.compile(&frame, &plan_id) {
            Ok(p) if !p.steps.is_empty() => p,
            Ok(_) => return Ok(TranscriptItem::system("There is nothing to do for that request.")),
            Err(PlannerError::BackendUnavailable(e)) => return Err(GatewayError::BackendUnavailable(e)),
            Err(e) => return Ok(TranscriptItem::system(format!("I can't do that yet: {e}."))),
        };
        s.pending =
            Some(PendingPlan { plan, approvals: Default::default(), awaiting: Awaiting::Checkpoint { index: 0 } });
        self.advance(s, ws)
    }

    fn answer(&self, s: &mut Session, ws: &Workspace, slot: &str, text: &str) -> Result<TranscriptItem, GatewayError> {
        let pending = s.pending.as_ref().expect("clarification implies a pending plan");
        let clar = pending
            .plan
            .clarifications
            .iter()
            .find(|c| c.slot == slot)
            .cloned()
            .ok_or_else(|| GatewayError::Internal(format!("open slot `{slot}` missing from plan")))?;
        if yes_no(text) == Some(false) {
            let plan = pending.plan.id.clone();
            return self.drop_plan(s, ws, &plan);
        }
        let ask_again = |lead: String| {
            let mut item = TranscriptItem::system(format!("{lead} {}", bare_question(&clar)).trim().to_string());
            item.clarification = Some(clarification_view(&clar));
            item
        };
        let frame = match self.planner.interpret(text, &s.context, &s.backend) {
            Ok(f) => f,
            Err(PlannerError::BackendUnavailable(e)) => return Err(GatewayError::BackendUnavailable(e)),
            Err(_) => return Ok(ask_again("Sorry, I didn't get that.".into())),
        };
        let Some(task) = frame.tasks.first() else { return Ok(ask_again("Sorry, I didn't get that.".into())) };
        if task.verb == CLARIFY_HELP_VERB {
            let listing = question_text("", &clar.candidates).trim().to_string();
            let mut item = if listing.is_empty() {
                ask_again("I don't know the options for that either.".into())
            } else {
                TranscriptItem::system(listing)
            };
            item.clarification = Some(clarification_view(&clar));
            return Ok(item);
        }
        if task.verb != CLARIFY_VERB {
            return Ok(ask_again("Let's finish the current task first.".into()));
        }
        let plan = match self.planner.resolve(&pending.plan, slot, &task.params) {
            Ok(p) => p,
            Err(PlannerError::BackendUnavailable(e)) => return Err(GatewayError::BackendUnavailable(e)),
            Err(e) => return Ok(ask_again(format!("That doesn't fit ({e})."))),
        };
        let registry = self.planner.registry()?;
        let network = plan.effect_of(&registry, clar.step) == Some(Effect::Network);
        let pending = s.pending.as_mut().expect("pending");
        pending.plan = plan;
        // naming the target of a network step is the approval for it
        if network {
            pending.approvals.insert(clar.step);
        }
        s.context.close(slot);
        self.advance(s, ws)
    }

    fn decide(
        &self,
        s: &mut Session,
        ws: &Workspace,
        plan: &str,
        index: usize,
        decision: Decision,
    ) -> Result<TranscriptItem, GatewayError> {
        let waiting =
            s.pending.as_ref().is_some_and(|p| p.plan.id == plan && p.awaiting == Awaiting::Checkpoint { index });
        if !waiting {
            return Err(GatewayError::NoPendingCheckpoint { plan: plan.to_string(), index });
        }
        match decision {
            Decision::Approve => {
                s.pending.as_mut().expect("pending").approvals.insert(index);
                self.advance(s, ws)
            }
            Decision::Reject => self.drop_plan(s, ws, plan),
        }
    }

    /// Closes the pending plan, reverting whatever part of it ran.
    fn drop_plan(&self, s: &mut Session, ws: &Workspace, plan: &str) -> Result<TranscriptItem, GatewayError> {
        s.pending = None;
        s.context.close_all();
        let text = match load_journal(ws, plan)? {
            None => "OK, I dropped the plan. Nothing was changed.".to_string(),
            Some(mut j) => match revert(&mut j, ws) {
                Ok(()) => "OK, I reverted the changes.".to_string(),
                Err(e) => format!("I couldn't revert the changes: {e}."),
            },
        };
        Ok(TranscriptItem::system(text))
    }

    /// Dry-runs steps `from..=to` against the live tree. Network steps are
    /// left out; their effect is not a file diff.
    fn preview(
        &self,
        plan: &OperationPlan,
        ws: &Workspace,
        from: usize,
        to: usize,
        registry: &ApiRegistry,
    ) -> Result<String, actuator::ActuatorError> {
        let mut sub = OperationPlan::new(format!("{}-preview", plan.id), plan.origin.clone(), plan.registry_version);
        for step in plan.steps.iter().filter(|st| (from..=to).contains(&st.index)) {
            if plan.effect_of(registry, step.index) == Some(Effect::Network) {
                continue;
            }
            let mut st = step.clone();
            st.index = sub.steps.len() + 1;
            st.depends_on.clear();
            st.checkpoint = false;
            sub.steps.push(st);
        }
        if sub.steps.is_empty() {
            return Ok(String::new());
        }
        let n = sub.steps.len();
        actuator::dry_run(&sub, ws, n, registry).map(|d| d.text())
    }

    fn run(&self, p: &PendingPlan, ws: &Workspace, registry: &ApiRegistry, next: usize) -> RunStatus {
        let outcome = match load_journal(ws, &p.plan.id) {
            Ok(Some(j)) => actuator::resume(j, &p.plan, ws, &p.approvals, registry),
            Ok(None) => actuator::execute(&p.plan, ws, &p.approvals, registry),
            Err(e) => Err(e.into()),
        };
        match outcome {
            Ok(ex) => ex.status,
            Err(e) => RunStatus::StepFailure { step: next, cause: e.to_string() },
        }
    }

    /// Moves the pending plan forward to its next stop: an open question,
    /// an unapproved checkpoint, a failure or the end.
    fn advance(&self, s: &mut Session, ws: &Workspace) -> Result<TranscriptItem, GatewayError> {
        let registry = self.planner.registry()?;
        let p = s.pending.clone().expect("advance needs a pending plan");
        let next = match load_journal(ws, &p.plan.id)? {
            Some(j) => j.next_step().unwrap_or(p.plan.steps.len() + 1),
            None => 1,
        };
        let checkpoint = p.plan.checkpoints().into_iter().find(|k| *k >= next && !p.approvals.contains(k));
        let question = p.plan.clarifications.first().filter(|c| checkpoint.is_none_or(|k| c.step <= k)).cloned();

        if let Some(c) = question {
            if c.step > next {
                let status = self.run(&p, ws, &registry, next);
                if status != (RunStatus::ClarificationPending { step: c.step }) {
                    return self.finish(s, ws, status);
                }
            }
            s.context.open(OpenClarification {
                slot: c.slot.clone(),
                question: c.question.clone(),
                params: c.params.clone(),
            });
            s.pending.as_mut().expect("pending").awaiting = Awaiting::Clarification { slot: c.slot.clone() };
            let mut item = TranscriptItem::system(bare_question(&c));
            item.clarification = Some(clarification_view(&c));
            return Ok(item);
        }

        if let Some(k) = checkpoint {
            let diff = match self.preview(&p.plan, ws, next, k, &registry) {
                Ok(d) => d,
                Err(e) => return self.finish(s, ws, RunStatus::StepFailure { step: next, cause: e.to_string() }),
            };
            if k > next {
                let status = self.run(&p, ws, &registry, next);
                if status != (RunStatus::CheckpointPending { step: k }) {
                    return self.finish(s, ws, status);
                }
            }
            s.pending.as_mut().expect("pending").awaiting = Awaiting::Checkpoint { index: k };
            let lead = if diff.is_empty() {
                format!("Step {k} makes no file changes.")
            } else {
                "The following is the diff after the changes:".to_string()
            };
            let mut item =
                TranscriptItem::system(format!("{lead} Is the result correct? Otherwise, I can revert the changes."));
            item.diff = (!diff.is_empty()).then_some(diff);
            item.pending = Some(PendingAction { plan: p.plan.id.clone(), index: k });
            return Ok(item);
        }

        let status = self.run(&p, ws, &registry, next);
        self.finish(s, ws, status)
    }

    fn finish(&self, s: &mut Session, ws: &Workspace, status: RunStatus) -> Result<TranscriptItem, GatewayError> {
        let p = s.pending.take().expect("finish needs a pending plan");
        s.context.close_all();
        let failed = |step: usize, why: String| -> Result<TranscriptItem, GatewayError> {
            let api = p.plan.step(step).map_or("?", |st| st.api.as_str());
            let tail = match load_journal(ws, &p.plan.id)? {
                Some(mut j) if !j.reverted => match revert(&mut j, ws) {
                    Ok(()) => "I reverted the changes.".to_string(),
                    Err(e) => format!("Reverting failed too: {e}."),
                },
                _ => "Nothing was changed.".to_string(),
            };
            Ok(TranscriptItem::system(format!("Step {step} ({api}) failed: {why}. {tail}")))
        };
        match status {
            RunStatus::Completed => {
                let diff = load_journal(ws, &p.plan.id)?.map(|j| journal_diff(&j, &p.plan).text()).unwrap_or_default();
                let mut item = TranscriptItem::system(self.completion_text(&p.plan, ws));
                item.diff = (!diff.is_empty()).then_some(diff);
                Ok(item)
            }
            RunStatus::StepFailure { step, cause } => failed(step, cause),
            RunStatus::SandboxViolation { step, detail } => failed(step, format!("it left the workspace ({detail})")),
            RunStatus::CheckpointPending { step } | RunStatus::ClarificationPending { step } => {
                failed(step, "the plan stopped somewhere unexpected".into())
            }
        }
    }

    fn completion_text(&self, plan: &OperationPlan, ws: &Workspace) -> String {
        let last = plan.steps.last().expect("non-empty plan");
        if last.api == "git.push" {
            let remote = arg_text(plan, last.index, "remote").unwrap_or_default();
            let branch = arg_text(plan, last.index, "branch").unwrap_or_default();
            let cwd = arg_text(plan, last.index, "cwd").unwrap_or_default();
            let url = peros_core::git::run(
                &ws.root().join(&cwd),
                ws.root(),
                &["remote", "get-url", &remote],
                actuator::STEP_TIMEOUT,
            )
            .map(|u| u.trim().to_string())
            .unwrap_or_default();
            if url.is_empty() {
                return format!("I've pushed the changes to {remote}/{branch}.");
            }
            return format!("I've pushed the changes to {remote}/{branch} ({url}).");
        }
        match plan.steps.len() {
            1 => "Done.".to_string(),
            n => format!("Done. All {n} steps ran."),
        }
    }

    fn resolve_corpus(&self, name: &str) -> Result<Corpus, GatewayError> {
        Ok(match name {
            "base" => Corpus::builtin_base(),
            "ext" => Corpus::builtin_ext(),
            "all" => Corpus::merged("all", &[&Corpus::builtin_base(), &Corpus::builtin_ext()]),
            path => {
                Corpus::load(Path::new(path)).map_err(|e| GatewayError::BadRequest(format!("corpus {path}: {e}")))?
            }
        })
    }

    /// Evaluates the live pipeline, records the report and applies the
    /// retraining policy.
    pub fn run_eval(&self, corpus: &str) -> Result<EvalOutcome, GatewayError> {
        let _guard = self.eval_lock.lock();
        let corpus = self.resolve_corpus(corpus)?;
        self.planner.reload(false)?;
        let registry = self.planner.registry()?;
        let pipeline = PlannerPipeline {
            planner: self.planner.as_ref(),
            backend: self.cfg.backend.clone(),
            registry_version: registry.version(),
        };
        let report = evaluate(&corpus, &pipeline).map_err(|e| match e {
            LmError::CorpusAhead { .. } | LmError::EmptyCorpus(_) => GatewayError::BadRequest(e.to_string()),
            other => GatewayError::Internal(other.to_string()),
        })?;
        let reports = self.cfg.reports_dir();
        let report_path = write_report(&reports, &report).map_err(|e| GatewayError::Internal(e.to_string()))?;
        fs::write(reports.join("latest.json"), serde_json::to_vec_pretty(&report).expect("report serializes"))?;

        let lm_path = self.cfg.state_dir.join("lm.json");
        let saved: LmFile = serde_json::from_slice(&fs::read(&lm_path)?)
            .map_err(|e| GatewayError::Internal(format!("{}: {e}", lm_path.display())))?;
        let mut mgr = LmManager::new(self.cfg.retrain, &registry);
        mgr.state = saved.state;
        for r in saved.history {
            mgr.record(r);
        }
        mgr.record(report.clone());
        let decision = mgr.decide(&registry);
        let (mut retrain, mut reloaded) = (None, None);
        if decision.retrain {
            let outcome = match &self.cfg.backend {
                BackendConfig::Rule { .. } => mgr.apply_rule(&decision, &self.lexicon_store, &self.lexicon, &registry),
                BackendConfig::LlmEndpoint(_) => {
                    let ledger = JobLedger::new(self.cfg.state_dir.join("finetune_jobs.ndjson"));
                    mgr.apply_llm(&decision, &ledger, &format!("eval-{}", now_ms()), &corpus.id, &registry)
                }
            };
            retrain = Some(outcome.map_err(|e| GatewayError::Internal(e.to_string()))?);
            reloaded = Some(self.planner.reload(true)?);
        }
        let file = LmFile { state: mgr.state, history: mgr.history().to_vec() };
        fs::write(&lm_path, serde_json::to_vec_pretty(&file).expect("lm state serializes"))?;
        Ok(EvalOutcome { report, report_path, decision, retrain, reloaded })
    }

    pub fn latest_report(&self) -> Result<Option<EvalReport>, GatewayError> {
        let path = self.cfg.reports_dir().join("latest.json");
        if !path.exists() {
            return Ok(None);
        }
        serde_json::from_slice(&fs::read(path)?).map(Some).map_err(|e| GatewayError::Internal(e.to_string()))
    }
}

/// Adds API specs (one object or an array) to the registry file.
pub fn add_to_registry(registry_path: &Path, specs_json: &str) -> anyhow::Result<ApiRegistry> {
    let specs: Vec<peros_core::ApiSpec> = match serde_json::from_str::<serde_json::Value>(specs_json)? {
        v @ serde_json::Value::Array(_) => serde_json::from_value(v)?,
        v => vec![serde_json::from_value(v)?],
    };
    let mut registry = crate::planner::load_registry(registry_path)?;
    for spec in specs {
        registry.register(spec)?;
    }
    registry.save(registry_path)?;
    Ok(registry)
}
