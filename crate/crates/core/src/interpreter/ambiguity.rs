use std::collections::BTreeSet;

use crate::lexicon::{ApiBinding, CandidateSource, Lexicon, SlotDef};
use crate::model::{parse_value, Ambiguity, ApiRegistry, CandidateGroup, IntentFrame};

use super::context::{DialogueContext, WorkspaceFacts};

/// One entry per unresolved required slot, in task then param order.
/// Tasks whose verb has no mapping are left to the director.
pub fn detect_ambiguity(
    frame: &IntentFrame,
    ctx: &DialogueContext,
    lexicon: &Lexicon,
    registry: &ApiRegistry,
) -> Vec<Ambiguity> {
    let mut out = Vec::new();
    for (i, task) in frame.tasks.iter().enumerate() {
        let Ok(binding) = lexicon.select(&task.verb, &task.params, registry) else { continue };
        let mut seen = BTreeSet::new();
        for slot in unresolved_slots(binding, &task.params, registry) {
            if seen.insert(slot.name.clone()) {
                let candidates = candidates_for(&slot, &ctx.facts);
                out.push(Ambiguity {
                    question: question_text(&slot.question, &candidates),
                    slot: slot.name,
                    task: i,
                    candidates,
                });
            }
        }
    }
    out
}

/// Required api params of `binding` that the task leaves unbound (or binds to
/// a value that does not type-check), grouped into their slots.
pub fn unresolved_slots(
    binding: &ApiBinding,
    task_params: &std::collections::BTreeMap<String, String>,
    registry: &ApiRegistry,
) -> Vec<SlotDef> {
    let Ok(spec) = registry.get(&binding.api) else { return vec![] };
    spec.params
        .iter()
        .filter(|param| {
            let raw = binding
                .params
                .iter()
                .find(|(_, api_param)| *api_param == &param.name)
                .and_then(|(task_param, _)| task_params.get(task_param));
            match raw {
                Some(raw) => parse_value(param, raw).is_err(),
                None => param.required,
            }
        })
        .map(|param| binding.slot_for(&param.name))
        .collect()
}

pub fn candidates_for(slot: &SlotDef, facts: &WorkspaceFacts) -> Vec<CandidateGroup> {
    match slot.candidates {
        Some(CandidateSource::RemoteBranches) => {
            facts.remotes.iter().map(|r| CandidateGroup { group: r.name.clone(), values: r.branches.clone() }).collect()
        }
        None => vec![],
    }
}

fn display_remote(name: &str) -> String {
    match name {
        "github" => "GitHub".into(),
        "bitbucket" => "Bitbucket".into(),
        "gitlab" => "GitLab".into(),
        other => other.into(),
    }
}

fn english_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// The question, followed by a sentence naming the known candidates.
pub fn question_text(question: &str, groups: &[CandidateGroup]) -> String {
    let mut groups: Vec<&CandidateGroup> = groups.iter().filter(|g| !g.values.is_empty()).collect();
    if groups.is_empty() {
        return question.to_string();
    }
    groups.sort_by(|a, b| b.values.len().cmp(&a.values.len()).then(a.group.cmp(&b.group)));
    let parts: Vec<String> = groups
        .iter()
        .map(|g| {
            let name = display_remote(&g.group);
            if g.values.len() == 1 {
                format!("only {} on {name}", g.values[0])
            } else {
                format!("{} in your {name} repo", english_list(&g.values))
            }
        })
        .collect();
    format!("{question} You have {}.", parts.join(" and "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::context::RemoteInfo;
    use crate::model::{Span, Task};

    fn facts() -> WorkspaceFacts {
        WorkspaceFacts {
            remotes: vec![
                RemoteInfo { name: "bitbucket".into(), branches: vec!["master".into()] },
                RemoteInfo {
                    name: "github".into(),
                    branches: vec!["main".into(), "dev".into(), "feat/chihuahua".into()],
                },
            ],
        }
    }

    fn task(verb: &str, params: &[(&str, &str)]) -> Task {
        Task {
            verb: verb.into(),
            object: String::new(),
            params: params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            span: Span::new(0, 0),
        }
    }

    #[test]
    fn push_without_branch_lists_known_branches() {
        let mut frame = IntentFrame::empty("force push to my remote repo");
        frame.tasks.push(task("push", &[("force", "true")]));
        let mut ctx = DialogueContext::new("s");
        ctx.facts = facts();
        let found = detect_ambiguity(&frame, &ctx, &Lexicon::builtin(1), &ApiRegistry::builtin());
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].slot, "target_branch");
        assert_eq!(
            found[0].question,
            "To which branch do you want to push the changes? \
             You have main, dev, and feat/chihuahua in your GitHub repo and only master on Bitbucket."
        );
    }

    #[test]
    fn fully_bound_frame_is_unambiguous() {
        let mut frame = IntentFrame::empty("x");
        frame.tasks.push(task("push", &[("remote", "github"), ("branch", "dev")]));
        frame.tasks.push(task("list", &[("path", ".")]));
        let ctx = DialogueContext::new("s");
        assert!(detect_ambiguity(&frame, &ctx, &Lexicon::builtin(1), &ApiRegistry::builtin()).is_empty());
    }

    #[test]
    fn unresolved_slots_in_source_order() {
        // oracle: direct scan of unbound required params, in task order
        let mut frame = IntentFrame::empty("x");
        frame.tasks.push(task("copy", &[("src", "a.txt")]));
        frame.tasks.push(task("backup-schedule", &[("frequency", "weekly")]));
        let ctx = DialogueContext::new("s");
        let found = detect_ambiguity(&frame, &ctx, &Lexicon::builtin(1), &ApiRegistry::builtin());
        let got: Vec<_> = found.iter().map(|a| (a.task, a.slot.as_str())).collect();
        assert_eq!(got, vec![(0, "dst"), (1, "path")]);
    }

    #[test]
    fn invalid_value_counts_as_unresolved() {
        let mut frame = IntentFrame::empty("x");
        frame.tasks.push(task("backup-schedule", &[("path", "Docs"), ("frequency", "hourly")]));
        let found = detect_ambiguity(&frame, &DialogueContext::new("s"), &Lexicon::builtin(1), &ApiRegistry::builtin());
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].slot, "frequency");
    }
}
