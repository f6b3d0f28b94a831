//! When to refresh the interpreter, and how.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalReport, LmError};
use crate::lexicon::{Lexicon, LexiconStore};
use crate::live::Live;
use crate::model::ApiRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainPolicy {
    /// Evaluations averaged for the accuracy test.
    pub window: usize,
    pub min_accuracy: f64,
    /// APIs registered since the last retrain that force one.
    pub new_api_trigger: usize,
    /// Evaluations that must pass after a retrain before the next.
    pub cooldown: usize,
}

impl Default for RetrainPolicy {
    fn default() -> Self {
        RetrainPolicy { window: 5, min_accuracy: 0.9, new_api_trigger: 3, cooldown: 2 }
    }
}

/// What the policy remembers between decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrainState {
    /// Registry size when the interpreter was last refreshed.
    pub api_baseline: usize,
    /// History length at the last retrain.
    pub last_retrain_at: Option<usize>,
}

impl RetrainState {
    pub fn new(registry: &ApiRegistry) -> Self {
        RetrainState { api_baseline: registry.len(), last_retrain_at: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RetrainReason {
    Accuracy { rolling_mean: f64 },
    NewApis { added: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainDecision {
    pub retrain: bool,
    pub reason: Option<RetrainReason>,
    /// A trigger fired but the cooldown has not elapsed.
    pub held_by_cooldown: bool,
}

/// Retrains when the rolling mean accuracy since the last retrain drops below
/// the threshold or enough APIs were added, provided the cooldown elapsed.
pub fn should_retrain(
    history: &[EvalReport],
    policy: &RetrainPolicy,
    registry: &ApiRegistry,
    state: &RetrainState,
) -> RetrainDecision {
    let since = state.last_retrain_at.unwrap_or(0).min(history.len());
    let recent = &history[since..];
    let window = &recent[recent.len().saturating_sub(policy.window.max(1))..];
    let accuracy = (!window.is_empty())
        .then(|| window.iter().map(|r| r.accuracy).sum::<f64>() / window.len() as f64)
        .filter(|mean| *mean < policy.min_accuracy)
        .map(|rolling_mean| RetrainReason::Accuracy { rolling_mean });
    let added = registry.len().saturating_sub(state.api_baseline);
    let reason = accuracy.or_else(|| (added >= policy.new_api_trigger).then_some(RetrainReason::NewApis { added }));
    let cooled = state.last_retrain_at.is_none_or(|at| history.len().saturating_sub(at) >= policy.cooldown);
    RetrainDecision { retrain: reason.is_some() && cooled, held_by_cooldown: reason.is_some() && !cooled, reason }
}

/// Swaps in the newest lexicon from `store`; on any load error the live one
/// stays in place.
pub fn reload_grammar(store: &LexiconStore, live: &Live<Lexicon>) -> Result<u32, LmError> {
    let next = store.load_latest()?;
    let version = next.version;
    live.replace(next);
    Ok(version)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub job_id: String,
    pub request_id: String,
    /// Digest of the corpus the job would train on.
    pub corpus_ref: String,
    pub created_ms: u64,
}

/// Append-only NDJSON record of requested fine-tune jobs.
#[derive(Debug, Clone)]
pub struct JobLedger {
    path: PathBuf,
}

impl JobLedger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        JobLedger { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, job: &FineTuneJob) -> io::Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(job).expect("job serializes"))
    }

    pub fn jobs(&self) -> io::Result<Vec<FineTuneJob>> {
        if !self.path.exists() {
            return Ok(vec![]);
        }
        io::BufReader::new(fs::File::open(&self.path)?)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| serde_json::from_str(&l?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RetrainOutcome {
    GrammarReloaded { version: u32 },
    JobQueued(FineTuneJob),
}

/// Evaluation history plus policy state for one pipeline.
#[derive(Debug, Clone)]
pub struct LmManager {
    pub policy: RetrainPolicy,
    pub state: RetrainState,
    history: Vec<EvalReport>,
}

impl LmManager {
    pub fn new(policy: RetrainPolicy, registry: &ApiRegistry) -> Self {
        LmManager { policy, state: RetrainState::new(registry), history: vec![] }
    }

    pub fn history(&self) -> &[EvalReport] {
        &self.history
    }

    pub fn record(&mut self, report: EvalReport) {
        self.history.push(report);
    }

    pub fn decide(&self, registry: &ApiRegistry) -> RetrainDecision {
        should_retrain(&self.history, &self.policy, registry, &self.state)
    }

    fn mark(&mut self, registry: &ApiRegistry) {
        self.state = RetrainState { api_baseline: registry.len(), last_retrain_at: Some(self.history.len()) };
    }

    pub fn apply_rule(
        &mut self,
        decision: &RetrainDecision,
        store: &LexiconStore,
        live: &Live<Lexicon>,
        registry: &ApiRegistry,
    ) -> Result<RetrainOutcome, LmError> {
        if !decision.retrain {
            return Err(LmError::NoRetrainDecision);
        }
        let version = reload_grammar(store, live)?;
        self.mark(registry);
        Ok(RetrainOutcome::GrammarReloaded { version })
    }

    pub fn apply_llm(
        &mut self,
        decision: &RetrainDecision,
        ledger: &JobLedger,
        request_id: &str,
        corpus_ref: &str,
        registry: &ApiRegistry,
    ) -> Result<RetrainOutcome, LmError> {
        if !decision.retrain {
            return Err(LmError::NoRetrainDecision);
        }
        let created_ms = crate::actuator::now_ms();
        let job = FineTuneJob {
            job_id: format!("ft-{}-{created_ms}", ledger.jobs()?.len() + 1),
            request_id: request_id.to_string(),
            corpus_ref: corpus_ref.to_string(),
            created_ms,
        };
        ledger.append(&job)?;
        self.mark(registry);
        Ok(RetrainOutcome::JobQueued(job))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    fn report(accuracy: f64) -> EvalReport {
        EvalReport {
            corpus: "c".into(),
            registry_version: 20,
            examples: 1,
            gold_steps: 1,
            generated_steps: 1,
            matched_steps: 1,
            accuracy,
            recall: accuracy,
            exact_match: accuracy,
            per_api: BTreeMap::new(),
            linguistic: 1.0,
        }
    }

    fn history(accs: &[f64]) -> Vec<EvalReport> {
        accs.iter().copied().map(report).collect()
    }

    #[test]
    fn healthy_window_does_not_retrain() {
        let reg = ApiRegistry::builtin();
        let d = should_retrain(&history(&[1.0, 1.0, 1.0]), &RetrainPolicy::default(), &reg, &RetrainState::new(&reg));
        assert!(!d.retrain && d.reason.is_none());
    }

    #[test]
    fn low_mean_accuracy_retrains() {
        let reg = ApiRegistry::builtin();
        let d = should_retrain(&history(&[0.95, 0.7, 0.6]), &RetrainPolicy::default(), &reg, &RetrainState::new(&reg));
        assert!(d.retrain);
        match d.reason {
            Some(RetrainReason::Accuracy { rolling_mean }) => assert!((rolling_mean - 0.75).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn three_new_apis_retrain() {
        let base = ApiRegistry::builtin();
        let state = RetrainState::new(&base);
        let mut reg = base.clone();
        for spec in ApiRegistry::extension_specs() {
            reg.register(spec).unwrap();
        }
        let d = should_retrain(&history(&[1.0]), &RetrainPolicy::default(), &reg, &state);
        assert_eq!(d.reason, Some(RetrainReason::NewApis { added: 3 }));
        assert!(d.retrain);
    }

    #[test]
    fn cooldown_holds_a_fired_trigger() {
        let reg = ApiRegistry::builtin();
        let state = RetrainState { api_baseline: reg.len(), last_retrain_at: Some(2) };
        let h = history(&[1.0, 1.0, 0.5]);
        let d = should_retrain(&h, &RetrainPolicy::default(), &reg, &state);
        assert!(!d.retrain && d.held_by_cooldown);
        let h = history(&[1.0, 1.0, 0.5, 0.5]);
        assert!(should_retrain(&h, &RetrainPolicy::default(), &reg, &state).retrain);
    }

    #[test]
    fn corrupt_grammar_keeps_previous() {
        let dir = tempfile::tempdir().unwrap();
        let store = LexiconStore::new(dir.path());
        store.install_builtin(1).unwrap();
        fs::write(dir.path().join("grammar.v2.json"), "[{\"pattern\": \"(\"}]").unwrap();
        fs::write(dir.path().join("mapping.v2.json"), "{}").unwrap();
        let live = Live::new(Lexicon::builtin(1));
        assert!(matches!(reload_grammar(&store, &live), Err(LmError::GrammarLoad(_))));
        assert_eq!(live.get().version, 1);
        store.install_builtin(2).unwrap();
        assert_eq!(reload_grammar(&store, &live).unwrap(), 2);
        assert_eq!(live.get().version, 2);
    }

    #[test]
    fn llm_retrain_appends_one_job() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = JobLedger::new(dir.path().join("jobs.ndjson"));
        let reg = ApiRegistry::builtin();
        let mut m = LmManager::new(RetrainPolicy::default(), &reg);
        m.record(report(0.5));
        let d = m.decide(&reg);
        let out = m.apply_llm(&d, &ledger, "req-1", "abc", &reg).unwrap();
        assert!(matches!(out, RetrainOutcome::JobQueued(ref j) if j.request_id == "req-1"));
        assert_eq!(ledger.jobs().unwrap().len(), 1);
        assert!(matches!(m.apply_llm(&m.decide(&reg), &ledger, "r", "c", &reg), Err(LmError::NoRetrainDecision)));
    }

    proptest! {
        #[test]
        fn lower_accuracy_never_cancels_retrain(
            accs in proptest::collection::vec(0.0f64..=1.0, 1..8),
            idx in any::<prop::sample::Index>(),
            drop in 0.0f64..=1.0,
        ) {
            let reg = ApiRegistry::builtin();
            let p = RetrainPolicy::default();
            let s = RetrainState::new(&reg);
            let before = should_retrain(&history(&accs), &p, &reg, &s).retrain;
            let mut worse = accs.clone();
            let i = idx.index(worse.len());
            worse[i] = (worse[i] - drop).max(0.0);
            let after = should_retrain(&history(&worse), &p, &reg, &s).retrain;
            prop_assert!(!before || after);
        }
    }
}
