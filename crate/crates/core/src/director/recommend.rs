use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::interpreter::rule_parse;
use crate::lexicon::Lexicon;
use crate::model::{validate_plan, ApiRegistry, IntentFrame, OperationPlan};
use crate::watchdog::{EventKind, KernelEvent};

use super::compile;

/// Burst rule: at least `min_count` creations under one directory within
/// `window_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecommendRules {
    pub min_count: usize,
    pub window_ms: u64,
}

impl Default for RecommendRules {
    fn default() -> Self {
        RecommendRules { min_count: 10, window_ms: 10 * 60 * 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub directory: String,
    pub message: String,
    /// The request a "yes" stands for.
    pub request: String,
    pub frame: IntentFrame,
    pub plan: OperationPlan,
}

fn parent(path: &str) -> &str {
    path.rfind('/').map(|i| &path[..i]).unwrap_or("")
}

/// Earliest directory (by the time its burst completes) whose create events
/// satisfy the rule.
fn burst_directory(events: &[KernelEvent], rules: &RecommendRules) -> Option<String> {
    let mut by_dir: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for ev in events.iter().filter(|e| e.kind == EventKind::Create) {
        by_dir.entry(parent(&ev.path)).or_default().push(ev.timestamp_ms);
    }
    let mut best: Option<(u64, &str)> = None;
    for (dir, mut times) in by_dir {
        if dir.is_empty() || rules.min_count == 0 {
            continue;
        }
        times.sort_unstable();
        for end in rules.min_count - 1..times.len() {
            let start = end + 1 - rules.min_count;
            if times[end] - times[start] <= rules.window_ms {
                if best.is_none_or(|(t, _)| times[end] < t) {
                    best = Some((times[end], dir));
                }
                break;
            }
        }
    }
    best.map(|(_, d)| d.to_string())
}

/// Proposes backup enrollment for a directory that just received a burst of
/// new files. Returns `None` when no rule fires or when the proposal would not
/// compile to a valid plan.
pub fn recommend(
    events: &[KernelEvent],
    rules: &RecommendRules,
    lexicon: &Lexicon,
    registry: &ApiRegistry,
) -> Option<Suggestion> {
    let dir = burst_directory(events, rules)?;
    let request =
        format!("add {dir} to the backup list labeled important, back up {dir} weekly, keep {dir} on local ssd");
    let frame = rule_parse(&request, &lexicon.grammar).ok()?;
    if !frame.residue.is_empty() {
        return None;
    }
    let plan = compile(&frame, lexicon, registry, &format!("suggest-{}", dir.replace('/', "-"))).ok()?;
    if !plan.clarifications.is_empty() || !validate_plan(&plan, registry).ok {
        return None;
    }
    Some(Suggestion {
        message: format!(
            "You have recently created many files in the /{dir}/ folder. Should I add them to the backup workflow?"
        ),
        directory: dir,
        request,
        frame,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArgValue;
    use crate::watchdog::{EventPayload, EVENT_SCHEMA_VERSION};

    fn create(seq: u64, path: &str, t: u64) -> KernelEvent {
        KernelEvent {
            schema_version: EVENT_SCHEMA_VERSION,
            seq,
            trigger_id: "t".into(),
            kind: EventKind::Create,
            path: path.into(),
            timestamp_ms: t,
            payload: EventPayload::default(),
        }
    }

    fn burst(n: usize, spacing_ms: u64) -> Vec<KernelEvent> {
        (0..n).map(|i| create(i as u64 + 1, &format!("Documents/crucial/f{i}.txt"), i as u64 * spacing_ms)).collect()
    }

    fn run(events: &[KernelEvent], rules: RecommendRules) -> Option<Suggestion> {
        recommend(events, &rules, &Lexicon::builtin(1), &ApiRegistry::builtin())
    }

    #[test]
    fn twelve_creates_propose_backup() {
        let s = run(&burst(12, 30_000), RecommendRules::default()).unwrap();
        assert_eq!(s.directory, "Documents/crucial");
        assert_eq!(
            s.message,
            "You have recently created many files in the /Documents/crucial/ folder. Should I add them to the backup workflow?"
        );
        let apis: Vec<_> = s.plan.steps.iter().map(|st| st.api.as_str()).collect();
        assert_eq!(apis, ["backup.add", "backup.schedule", "storage.pin_local"]);
        assert_eq!(s.plan.steps[1].args["frequency"], ArgValue::Enum("weekly".into()));
        assert_eq!(s.plan.steps[2].args["device"], ArgValue::Enum("ssd".into()));
        assert!(validate_plan(&s.plan, &ApiRegistry::builtin()).ok);
    }

    #[test]
    fn scattered_events_do_not_fire() {
        let events = vec![create(1, "a/x", 0), create(2, "b/y", 10), create(3, "c/z", 20)];
        assert!(run(&events, RecommendRules::default()).is_none());
    }

    #[test]
    fn threshold_is_inclusive() {
        // oracle: counting scan, fires at exactly N
        let rules = RecommendRules::default();
        assert!(run(&burst(10, 1_000), rules).is_some());
        assert!(run(&burst(9, 1_000), rules).is_none());
        // ten events spanning exactly the window still count
        let spacing = rules.window_ms / 9;
        assert!(run(&burst(10, spacing), rules).is_some());
        assert!(run(&burst(10, spacing + 1), rules).is_none());
    }

    #[test]
    fn proposal_that_cannot_compile_is_dropped() {
        let lex = Lexicon::builtin(1);
        let g = lex.grammar.without_verb("pin-local");
        let crippled = Lexicon { grammar: g, ..lex };
        assert!(recommend(&burst(12, 1), &RecommendRules::default(), &crippled, &ApiRegistry::builtin()).is_none());
    }
}
