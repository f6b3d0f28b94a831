//! Compiles intent frames into validated, checkpointed operation plans.

mod recommend;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use recommend::{recommend, RecommendRules, Suggestion};

use crate::lexicon::Lexicon;
use crate::model::{
    normalize_partial, validate_plan, ApiRegistry, ArgError, ArgValue, Clarification, Effect, IntentFrame,
    OperationPlan, PlanStep, ValidationReport,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectorError {
    #[error("no registered api for verb `{0}`")]
    UnmappableTask(String),
    #[error("no pending clarification for slot `{0}`")]
    UnknownSlot(String),
    #[error("slot `{slot}` param `{param}` expects {expected}")]
    TypeMismatch { slot: String, param: String, expected: String },
    #[error("plan failed validation: {0:?}")]
    Invalid(ValidationReport),
}

/// Which effects close a run with a checkpoint. Network steps always gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    pub checkpoint_after_effects: BTreeSet<Effect>,
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        CheckpointPolicy { checkpoint_after_effects: [Effect::Mutating].into() }
    }
}

impl PartialOrd for Effect {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Effect {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

/// Maps each task to one registered call. Unbound or unparseable required
/// params become clarifications instead of errors; everything that is bound
/// is fully typed.
pub fn compile(
    frame: &IntentFrame,
    lexicon: &Lexicon,
    registry: &ApiRegistry,
    plan_id: &str,
) -> Result<OperationPlan, DirectorError> {
    let mut plan = OperationPlan::new(plan_id, frame.source.clone(), registry.version());
    for (i, task) in frame.tasks.iter().enumerate() {
        let binding = lexicon
            .select(&task.verb, &task.params, registry)
            .map_err(|_| DirectorError::UnmappableTask(task.verb.clone()))?;
        let spec = registry.get(&binding.api).map_err(|_| DirectorError::UnmappableTask(task.verb.clone()))?;
        let raw: BTreeMap<String, String> = task
            .params
            .iter()
            .filter_map(|(k, v)| {
                let api_param = binding.params.get(k)?;
                spec.param(api_param).map(|_| (api_param.clone(), v.clone()))
            })
            .collect();
        let partial = normalize_partial(spec, &raw);
        let index = i + 1;
        let mut unresolved: Vec<String> = partial.missing.clone();
        for err in &partial.invalid {
            if let ArgError::TypeMismatch { param, .. } = err {
                unresolved.push(param.clone());
            }
        }
        // declaration order keeps clarifications in source order within a step
        unresolved.sort_by_key(|p| spec.params.iter().position(|s| &s.name == p));
        let mut seen = BTreeSet::new();
        for param in unresolved {
            let slot = binding.slot_for(&param);
            if !seen.insert(slot.name.clone()) {
                continue;
            }
            let from_frame = frame.ambiguities.iter().find(|a| a.task == i && a.slot == slot.name);
            let params: Vec<String> = slot.params.iter().filter(|p| spec.param(p).is_some()).cloned().collect();
            plan.clarifications.push(Clarification {
                slot: slot.name.clone(),
                step: index,
                params,
                question: from_frame.map(|a| a.question.clone()).unwrap_or(slot.question.clone()),
                candidates: from_frame.map(|a| a.candidates.clone()).unwrap_or_default(),
            });
        }
        plan.steps.push(PlanStep {
            index,
            api: spec.name.clone(),
            args: partial.args,
            depends_on: if index > 1 { vec![index - 1] } else { vec![] },
            checkpoint: false,
        });
    }
    Ok(insert_checkpoints(plan, registry, &CheckpointPolicy::default()))
}

/// Flags the last step of each maximal run of checkpointed-effect steps, and
/// every network step.
pub fn insert_checkpoints(mut plan: OperationPlan, registry: &ApiRegistry, policy: &CheckpointPolicy) -> OperationPlan {
    let effects: Vec<Option<Effect>> =
        plan.steps.iter().map(|s| registry.get(&s.api).ok().map(|spec| spec.effect)).collect();
    for (i, step) in plan.steps.iter_mut().enumerate() {
        let here = effects[i];
        let in_run = here.is_some_and(|e| e != Effect::Network && policy.checkpoint_after_effects.contains(&e));
        let run_continues =
            effects.get(i + 1).copied().flatten().is_some_and(|e| e == here.expect("in run") && e != Effect::Network);
        step.checkpoint = here == Some(Effect::Network) || (in_run && !run_continues);
    }
    plan
}

/// Binds a pending slot. Keys of `answer` are the slot name (for its primary
/// param) or param names owned by the slot.
pub fn resolve_clarification(
    plan: &OperationPlan,
    registry: &ApiRegistry,
    slot: &str,
    answer: &BTreeMap<String, ArgValue>,
) -> Result<OperationPlan, DirectorError> {
    let pos = plan
        .clarifications
        .iter()
        .position(|c| c.slot == slot)
        .ok_or_else(|| DirectorError::UnknownSlot(slot.to_string()))?;
    let clar = plan.clarifications[pos].clone();
    let step = plan.step(clar.step).ok_or_else(|| DirectorError::UnknownSlot(slot.to_string()))?;
    let spec = registry.get(&step.api).map_err(|_| DirectorError::UnknownSlot(slot.to_string()))?;
    let mut bound = BTreeMap::new();
    for (key, value) in answer {
        let param = if key == slot { clar.params.first().cloned().unwrap_or_else(|| key.clone()) } else { key.clone() };
        if !clar.params.contains(&param) {
            return Err(DirectorError::UnknownSlot(format!("{slot}.{param}")));
        }
        let pspec = spec.param(&param).ok_or_else(|| DirectorError::UnknownSlot(format!("{slot}.{param}")))?;
        if !value.fits(pspec) {
            return Err(DirectorError::TypeMismatch {
                slot: slot.to_string(),
                param,
                expected: pspec.kind.label().to_string(),
            });
        }
        bound.insert(param, value.clone());
    }
    let mut next = plan.clone();
    next.clarifications.remove(pos);
    let target = &mut next.steps[clar.step - 1];
    target.args.extend(bound);
    let remaining: Vec<String> = clar
        .params
        .iter()
        .filter(|p| !target.args.contains_key(*p) && spec.param(p).is_some_and(|s| s.required))
        .cloned()
        .collect();
    for param in remaining {
        next.clarifications.insert(
            pos,
            Clarification {
                slot: param.clone(),
                step: clar.step,
                params: vec![param.clone()],
                question: format!("Which {} should I use?", param.replace('_', " ")),
                candidates: clar.candidates.clone(),
            },
        );
    }
    if next.clarifications.is_empty() {
        let report = validate_plan(&next, registry);
        if !report.ok {
            return Err(DirectorError::Invalid(report));
        }
    }
    Ok(next)
}

/// Converts raw answer strings into typed values for the slot's params.
pub fn type_answer(
    plan: &OperationPlan,
    registry: &ApiRegistry,
    slot: &str,
    raw: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, ArgValue>, DirectorError> {
    let clar = plan
        .clarifications
        .iter()
        .find(|c| c.slot == slot)
        .ok_or_else(|| DirectorError::UnknownSlot(slot.to_string()))?;
    let step = plan.step(clar.step).ok_or_else(|| DirectorError::UnknownSlot(slot.to_string()))?;
    let spec = registry.get(&step.api).map_err(|_| DirectorError::UnknownSlot(slot.to_string()))?;
    let mut out = BTreeMap::new();
    for (key, value) in raw {
        let param = if key == slot { clar.params.first().cloned().unwrap_or_else(|| key.clone()) } else { key.clone() };
        let Some(pspec) = spec.param(&param) else { continue };
        let typed = crate::model::parse_value(pspec, value).map_err(|_| DirectorError::TypeMismatch {
            slot: slot.to_string(),
            param: param.clone(),
            expected: pspec.kind.label().to_string(),
        })?;
        out.insert(key.clone(), typed);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::HAPPYDOG_REQUEST;
    use crate::interpreter::rule_parse;
    use crate::model::{ApiSpec, ParamKind, ParamSpec, Span, Task};
    use proptest::prelude::*;

    fn listing_plan() -> OperationPlan {
        let lex = Lexicon::builtin(1);
        let reg = ApiRegistry::builtin();
        let frame = rule_parse(HAPPYDOG_REQUEST, &lex.grammar).unwrap();
        compile(&frame, &lex, &reg, "p1").unwrap()
    }

    #[test]
    fn listing_compiles_to_seven_steps_with_push_clarification() {
        let plan = listing_plan();
        let apis: Vec<_> = plan.steps.iter().map(|s| s.api.as_str()).collect();
        assert_eq!(
            apis,
            [
                "git.undo_last_commit",
                "git.rm_cached",
                "fs.move",
                "git.ignore",
                "fs.rename_suffix",
                "git.commit_amend",
                "git.push"
            ]
        );
        assert_eq!(plan.clarifications.len(), 1);
        assert_eq!(plan.clarifications[0].slot, "target_branch");
        assert_eq!(plan.clarifications[0].step, 7);
        assert_eq!(plan.steps[1].args["min_size"], ArgValue::SizeBytes(10_000_000));
        assert_eq!(plan.checkpoints(), vec![6, 7]);
    }

    #[test]
    fn empty_frame_empty_plan() {
        let plan = compile(&IntentFrame::empty(""), &Lexicon::builtin(1), &ApiRegistry::builtin(), "p").unwrap();
        assert!(plan.steps.is_empty());
        assert!(validate_plan(&plan, &ApiRegistry::builtin()).ok);
    }

    #[test]
    fn unmapped_verb() {
        let mut frame = IntentFrame::empty("frobnicate");
        frame.tasks.push(Task {
            verb: "frobnicate".into(),
            object: String::new(),
            params: Default::default(),
            span: Span::new(0, 10),
        });
        let err = compile(&frame, &Lexicon::builtin(1), &ApiRegistry::builtin(), "p").unwrap_err();
        assert_eq!(err, DirectorError::UnmappableTask("frobnicate".into()));
    }

    #[test]
    fn read_only_plan_has_no_checkpoints() {
        let lex = Lexicon::builtin(1);
        let frame = rule_parse("list files", &lex.grammar).unwrap();
        let plan = compile(&frame, &lex, &ApiRegistry::builtin(), "p").unwrap();
        assert!(plan.checkpoints().is_empty());
    }

    fn effect_registry() -> ApiRegistry {
        let mut reg = ApiRegistry::new();
        for (name, effect) in [("t.read", Effect::ReadOnly), ("t.mutate", Effect::Mutating), ("t.net", Effect::Network)]
        {
            reg.register(ApiSpec::new(name, effect, vec![ParamSpec::new("x", ParamKind::String, false)])).unwrap();
        }
        reg
    }

    fn plan_of(apis: &[&str]) -> OperationPlan {
        let mut plan = OperationPlan::new("p", "r", 3);
        for (i, api) in apis.iter().enumerate() {
            plan.steps.push(PlanStep {
                index: i + 1,
                api: api.to_string(),
                args: Default::default(),
                depends_on: vec![],
                checkpoint: false,
            });
        }
        plan
    }

    #[test]
    fn mutate_mutate_network() {
        let plan = insert_checkpoints(
            plan_of(&["t.mutate", "t.mutate", "t.net"]),
            &effect_registry(),
            &CheckpointPolicy::default(),
        );
        assert_eq!(plan.checkpoints(), vec![2, 3]);
    }

    proptest! {
        // oracle: direct scan of the stated rule
        #[test]
        fn checkpoint_rule_matches_scan(kinds in proptest::collection::vec(0usize..3, 0..12)) {
            let names = ["t.read", "t.mutate", "t.net"];
            let apis: Vec<&str> = kinds.iter().map(|&k| names[k]).collect();
            let plan = insert_checkpoints(plan_of(&apis), &effect_registry(), &CheckpointPolicy::default());
            let mut expected = vec![];
            for i in 0..kinds.len() {
                let net = kinds[i] == 2;
                let run_end = kinds[i] == 1 && kinds.get(i + 1) != Some(&1);
                if net || run_end {
                    expected.push(i + 1);
                }
            }
            prop_assert_eq!(plan.checkpoints(), expected);
        }
    }

    #[test]
    fn resolve_binds_push_target() {
        let plan = listing_plan();
        let reg = ApiRegistry::builtin();
        let answer = [
            ("target_branch".to_string(), ArgValue::String("dev".into())),
            ("remote".to_string(), ArgValue::String("github".into())),
        ]
        .into();
        let done = resolve_clarification(&plan, &reg, "target_branch", &answer).unwrap();
        assert!(done.clarifications.is_empty());
        assert_eq!(done.steps[6].args["branch"], ArgValue::String("dev".into()));
        assert_eq!(done.steps[6].args["remote"], ArgValue::String("github".into()));
        assert!(done.is_executable(&reg));
    }

    #[test]
    fn resolve_errors() {
        let plan = listing_plan();
        let reg = ApiRegistry::builtin();
        let bad_slot = [("nope".to_string(), ArgValue::String("x".into()))].into();
        assert!(matches!(resolve_clarification(&plan, &reg, "nope", &bad_slot), Err(DirectorError::UnknownSlot(_))));
        let wrong_kind = [("target_branch".to_string(), ArgValue::Integer(42))].into();
        assert!(matches!(
            resolve_clarification(&plan, &reg, "target_branch", &wrong_kind),
            Err(DirectorError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn partial_answer_leaves_remote_pending() {
        let plan = listing_plan();
        let reg = ApiRegistry::builtin();
        let answer = [("target_branch".to_string(), ArgValue::String("dev".into()))].into();
        let next = resolve_clarification(&plan, &reg, "target_branch", &answer).unwrap();
        assert_eq!(next.clarifications.len(), 1);
        assert_eq!(next.clarifications[0].slot, "remote");
    }

    #[test]
    fn bad_value_becomes_clarification_not_invalid_plan() {
        let lex = Lexicon::builtin(1);
        let reg = ApiRegistry::builtin();
        let mut frame = IntentFrame::empty("x");
        let params = [("path".to_string(), "Docs".to_string()), ("frequency".to_string(), "hourly".to_string())].into();
        frame.tasks.push(Task { verb: "backup-schedule".into(), object: String::new(), params, span: Span::new(0, 1) });
        let plan = compile(&frame, &lex, &reg, "p").unwrap();
        assert_eq!(plan.clarifications.len(), 1);
        assert_eq!(plan.clarifications[0].slot, "frequency");
    }
}
