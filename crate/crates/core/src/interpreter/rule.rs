//! Deterministic rule backend: clause splitting plus ordered pattern rules.

use std::collections::BTreeMap;

use crate::lexicon::{Grammar, Rule, Template};
use crate::model::{IntentFrame, Span, Task};

use super::InterpretError;

const LEADING_CONNECTIVES: &[&str] = &["and ", "then ", "also ", "please ", "and then "];
const SPLIT_WORDS: &[&str] = &[" and ", " then "];

/// Splits a request into clauses on commas, semicolons and coordinating
/// connectives, ignoring separators inside double quotes. Spans are char
/// offsets of the trimmed clause.
pub fn split_clauses(text: &str) -> Vec<(Span, String)> {
    let chars: Vec<char> = text.chars().collect();
    let lower: Vec<char> = text.to_lowercase().chars().collect();
    // lowercase can change char counts for some scripts; only use it when aligned
    let lower = if lower.len() == chars.len() { lower } else { chars.clone() };
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_quote = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '"' {
            in_quote = !in_quote;
        }
        if !in_quote {
            if c == ',' || c == ';' {
                push_clause(&chars, start, i, &mut out);
                start = i + 1;
                i += 1;
                continue;
            }
            if let Some(w) = SPLIT_WORDS.iter().find(|w| starts_with_at(&lower, i, w)) {
                push_clause(&chars, start, i, &mut out);
                // keep the trailing space out of the next clause
                start = i + w.chars().count() - 1;
                i = start;
                continue;
            }
        }
        i += 1;
    }
    push_clause(&chars, start, chars.len(), &mut out);
    out
}

fn starts_with_at(chars: &[char], at: usize, needle: &str) -> bool {
    let n: Vec<char> = needle.chars().collect();
    chars.len() >= at + n.len() && chars[at..at + n.len()] == n[..]
}

fn push_clause(chars: &[char], mut s: usize, mut e: usize, out: &mut Vec<(Span, String)>) {
    loop {
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        let rest: String = chars[s..e].iter().collect::<String>().to_lowercase();
        match LEADING_CONNECTIVES.iter().filter(|c| rest.starts_with(*c)).max_by_key(|c| c.len()) {
            Some(c) => s += c.chars().count(),
            None => break,
        }
    }
    while e > s && (chars[e - 1].is_whitespace() || matches!(chars[e - 1], '.' | '!' | '?')) {
        e -= 1;
    }
    if e > s {
        out.push((Span::new(s, e), chars[s..e].iter().collect()));
    }
}

type Vars = BTreeMap<String, String>;

fn render(tpl: &str, caps: &regex::Captures<'_>, vars: &Vars) -> Option<String> {
    let tpl = Template::parse(tpl).ok()?;
    tpl.render(|name| {
        if name.starts_with('$') {
            vars.get(name).map(String::as_str)
        } else {
            caps.name(name).map(|m| m.as_str())
        }
    })
}

fn apply_sets(rule: &Rule, caps: &regex::Captures<'_>, vars: &mut Vars) {
    let updates: Vec<(String, Option<String>)> =
        rule.def.sets.iter().map(|(k, tpl)| (k.clone(), render(tpl, caps, vars))).collect();
    for (k, v) in updates {
        match v {
            Some(v) => vars.insert(k, v),
            None => vars.remove(&k),
        };
    }
}

/// Parses a request with the grammar alone. Pure in `(request, grammar)`.
pub fn rule_parse(request: &str, grammar: &Grammar) -> Result<IntentFrame, InterpretError> {
    if request.trim().is_empty() {
        return Err(InterpretError::NoIntent(request.to_string()));
    }
    let mut frame = IntentFrame::empty(request);
    let mut vars = Vars::new();
    for (span, clause) in split_clauses(request) {
        let mut consumed = false;
        for rule in grammar.context_rules() {
            if let Some(caps) = rule.regex.captures(&clause) {
                let whole = caps.get(0).expect("group 0");
                consumed |= whole.start() == 0 && whole.end() == clause.len();
                apply_sets(rule, &caps, &mut vars);
            }
        }
        let matched = grammar.verb_rules().find_map(|rule| rule.regex.captures(&clause).map(|c| (rule, c)));
        match matched {
            Some((rule, caps)) => {
                let params = rule
                    .def
                    .params
                    .iter()
                    .filter_map(|(k, tpl)| render(tpl, &caps, &vars).map(|v| (k.clone(), v)))
                    .collect();
                let object = rule.def.object.as_deref().and_then(|t| render(t, &caps, &vars)).unwrap_or_default();
                frame.tasks.push(Task { verb: rule.def.verb.clone().expect("verb rule"), object, params, span });
                apply_sets(rule, &caps, &mut vars);
            }
            None if consumed => {}
            None => frame.residue.push(span),
        }
    }
    if frame.tasks.is_empty() {
        return Err(InterpretError::NoIntent(request.to_string()));
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicon;

    use crate::fixture::HAPPYDOG_REQUEST as LISTING;
    fn p(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn splits_listing_into_eight_clauses() {
        let clauses = split_clauses(LISTING);
        let texts: Vec<_> = clauses.iter().map(|(_, t)| t.as_str()).collect();
        assert_eq!(texts.len(), 8);
        assert_eq!(texts[0], "now");
        assert_eq!(texts[7], "force push to my remote repo");
        for (span, text) in &clauses {
            assert_eq!(span.slice(LISTING), text);
        }
    }

    #[test]
    fn quotes_protect_separators() {
        let clauses = split_clauses("write \"a, b and c\" to notes.txt, then list files");
        assert_eq!(clauses.len(), 2);
        assert_eq!(clauses[0].1, "write \"a, b and c\" to notes.txt");
        assert_eq!(clauses[1].1, "list files");
    }

    #[test]
    fn listing_request_yields_seven_ordered_tasks() {
        let frame = rule_parse(LISTING, &Lexicon::builtin(1).grammar).unwrap();
        let verbs: Vec<_> = frame.tasks.iter().map(|t| t.verb.as_str()).collect();
        assert_eq!(
            verbs,
            ["undo-last-commit", "rm-cached", "move", "git-ignore", "rename-suffix", "commit-amend", "push"]
        );
        let cwd = ("cwd", "HappyDog");
        assert_eq!(frame.tasks[0].params, p(&[cwd]));
        assert_eq!(frame.tasks[1].params, p(&[("pattern", "*.csv"), ("min_size", "10 MB"), cwd]));
        assert_eq!(frame.tasks[2].params, p(&[("src", "*.csv"), ("min_size", "10 MB"), ("dst", "data/"), cwd]));
        assert_eq!(frame.tasks[3].params, p(&[("path", "data/"), cwd]));
        assert_eq!(
            frame.tasks[4].params,
            p(&[("pattern", "data/*.csv"), ("min_size", "10 MB"), ("suffix", "_large"), cwd])
        );
        assert_eq!(frame.tasks[5].params, p(&[("no_edit", "true"), cwd]));
        assert_eq!(frame.tasks[6].params, p(&[("force", "true"), cwd]));
        assert!(frame.residue.is_empty());
        frame.check().unwrap();
    }

    #[test]
    fn single_rm_cached_clause() {
        let frame =
            rule_parse("remove all the CSV files larger than 10 MB from the git cache", &Lexicon::builtin(1).grammar)
                .unwrap();
        assert_eq!(frame.tasks.len(), 1);
        assert_eq!(frame.tasks[0].verb, "rm-cached");
        assert_eq!(frame.tasks[0].params, p(&[("pattern", "*.csv"), ("min_size", "10 MB")]));
    }

    #[test]
    fn list_files_defaults_to_cwd() {
        let frame = rule_parse("list files", &Lexicon::builtin(1).grammar).unwrap();
        assert_eq!(frame.tasks.len(), 1);
        assert_eq!(frame.tasks[0].verb, "list");
        assert_eq!(frame.tasks[0].params, p(&[("path", ".")]));
    }

    #[test]
    fn uncovered_verb_and_empty_input() {
        let g = Lexicon::builtin(1).grammar;
        assert!(matches!(rule_parse("frobnicate the widget", &g), Err(InterpretError::NoIntent(_))));
        assert!(matches!(rule_parse("", &g), Err(InterpretError::NoIntent(_))));
        assert!(matches!(rule_parse("   ", &g), Err(InterpretError::NoIntent(_))));
        assert!(matches!(rule_parse("now", &g), Err(InterpretError::NoIntent(_))));
    }

    #[test]
    fn unmatched_clause_is_residue_not_failure() {
        let frame = rule_parse("list files and frobnicate the widget", &Lexicon::builtin(1).grammar).unwrap();
        assert_eq!(frame.tasks.len(), 1);
        assert_eq!(frame.residue.len(), 1);
        assert_eq!(frame.residue[0].slice(&frame.source), "frobnicate the widget");
    }

    #[test]
    fn removing_a_rule_keeps_the_selection_for_later_clauses() {
        let g = Lexicon::builtin(1).grammar.without_verb("rm-cached");
        let frame = rule_parse(LISTING, &g).unwrap();
        assert_eq!(frame.tasks.len(), 6);
        assert_eq!(frame.tasks[1].verb, "move");
        assert_eq!(frame.tasks[1].params["src"], "*.csv");
    }

    #[test]
    fn deterministic() {
        let g = Lexicon::builtin(1).grammar;
        assert_eq!(rule_parse(LISTING, &g).unwrap(), rule_parse(LISTING, &g).unwrap());
    }
}
