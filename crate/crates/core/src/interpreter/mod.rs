//! Turns a request plus dialogue context into an [`IntentFrame`].
//!
//! Two backends share one output schema: the deterministic rule backend and
//! an external chat-completion endpoint whose output is schema-checked with
//! one retry.

mod ambiguity;
mod context;
mod llm;
mod rule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ambiguity::{candidates_for, detect_ambiguity, question_text, unresolved_slots};
pub use context::{DialogueContext, OpenClarification, RemoteInfo, Speaker, Turn, WorkspaceFacts, CONTEXT_WINDOW};
pub use llm::{build_prompt, llm_complete, parse_completion, ChatMessage, LlmConfig};
pub use rule::{rule_parse, split_clauses};

use crate::lexicon::Lexicon;
use crate::live::Live;
use crate::model::{ApiRegistry, IntentFrame, Span, Task};

/// Verb of the single task produced when a request answers an open slot.
pub const CLARIFY_VERB: &str = "clarify";
/// Verb produced when the user asks for the options of an open slot.
pub const CLARIFY_HELP_VERB: &str = "clarify-help";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpretError {
    #[error("no intent recognized in `{0}`")]
    NoIntent(String),
    #[error("interpreter backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed completion: {0}")]
    MalformedCompletion(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Rule {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grammar_version: Option<u32>,
    },
    LlmEndpoint(LlmConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Rule { grammar_version: None }
    }
}

/// The interpreter component. Cheap to clone; shares the live lexicon and
/// registry with the rest of the process.
#[derive(Debug, Clone)]
pub struct Interpreter {
    lexicon: Live<Lexicon>,
    registry: Live<ApiRegistry>,
}

impl Interpreter {
    pub fn new(lexicon: Live<Lexicon>, registry: Live<ApiRegistry>) -> Self {
        Interpreter { lexicon, registry }
    }

    pub fn lexicon(&self) -> &Live<Lexicon> {
        &self.lexicon
    }

    pub fn registry(&self) -> &Live<ApiRegistry> {
        &self.registry
    }

    pub fn interpret(
        &self,
        request: &str,
        ctx: &DialogueContext,
        cfg: &BackendConfig,
    ) -> Result<IntentFrame, InterpretError> {
        if request.trim().is_empty() {
            return Err(InterpretError::NoIntent(request.to_string()));
        }
        let lexicon = self.lexicon.get();
        let registry = self.registry.get();
        let parsed = match cfg {
            BackendConfig::Rule { .. } => rule_parse(request, &lexicon.grammar),
            BackendConfig::LlmEndpoint(llm) => {
                let prompt = build_prompt(request, ctx, &lexicon, &registry);
                complete_with_retry(&prompt, llm, request)
            }
        };
        if let Some(open) = ctx.open_clarifications().first() {
            let new_request = matches!(&parsed, Ok(f) if !f.tasks.is_empty());
            let unavailable = matches!(parsed, Err(InterpretError::BackendUnavailable(_)));
            if !new_request && !unavailable {
                return Ok(answer_frame(request, open, ctx));
            }
        }
        let mut frame = parsed?;
        frame.ambiguities = detect_ambiguity(&frame, ctx, &lexicon, &registry);
        Ok(frame)
    }
}

fn complete_with_retry(prompt: &[ChatMessage], cfg: &LlmConfig, request: &str) -> Result<IntentFrame, InterpretError> {
    let mut last = None;
    for _ in 0..2 {
        let outcome = llm_complete(prompt, cfg).and_then(|text| parse_completion(&text, request));
        match outcome {
            Err(InterpretError::MalformedCompletion(e)) => last = Some(e),
            other => return other,
        }
    }
    Err(InterpretError::MalformedCompletion(last.unwrap_or_default()))
}

const ANSWER_NOISE: &[&str] = &["the", "branch", "on", "to", "remote", "repo", "please", "at", "in", "my", "push"];

/// Binds an answer to the slot's params. Tokens naming a known remote bind
/// `remote`, known branches bind `branch`; anything else fills the remaining
/// params in order. Single-param slots take the whole answer.
pub fn answer_frame(request: &str, open: &OpenClarification, ctx: &DialogueContext) -> IntentFrame {
    let mut params = BTreeMap::new();
    let key_for = |param: &str| -> String {
        if open.params.first().map(String::as_str) == Some(param) {
            open.slot.clone()
        } else {
            param.to_string()
        }
    };
    if open.params.len() <= 1 {
        let param = open.params.first().cloned().unwrap_or_else(|| open.slot.clone());
        params.insert(key_for(&param), request.trim().to_string());
    } else {
        let tokens: Vec<&str> = request
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty() && !ANSWER_NOISE.contains(&t.to_lowercase().as_str()))
            .collect();
        let remotes = &ctx.facts.remotes;
        let mut leftovers = Vec::new();
        for tok in tokens {
            let is_remote = remotes.iter().any(|r| r.name.eq_ignore_ascii_case(tok));
            let is_branch = remotes.iter().any(|r| r.branches.iter().any(|b| b == tok));
            if is_remote && open.params.iter().any(|p| p == "remote") && !params.contains_key(&key_for("remote")) {
                params.insert(key_for("remote"), tok.to_lowercase());
            } else if is_branch && open.params.iter().any(|p| p == "branch") && !params.contains_key(&key_for("branch"))
            {
                params.insert(key_for("branch"), tok.to_string());
            } else {
                leftovers.push(tok);
            }
        }
        let mut rest = leftovers.into_iter();
        for param in &open.params {
            let key = key_for(param);
            if let std::collections::btree_map::Entry::Vacant(slot) = params.entry(key) {
                if let Some(tok) = rest.next() {
                    slot.insert(tok.to_string());
                }
            }
        }
    }
    let n = request.chars().count();
    IntentFrame {
        source: request.to_string(),
        tasks: vec![Task { verb: CLARIFY_VERB.into(), object: open.slot.clone(), params, span: Span::new(0, n) }],
        ambiguities: vec![],
        residue: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interpreter() -> Interpreter {
        Interpreter::new(Live::new(Lexicon::builtin(1)), Live::new(ApiRegistry::builtin()))
    }

    fn open_branch_ctx() -> DialogueContext {
        let mut ctx = DialogueContext::new("s");
        ctx.open(OpenClarification {
            slot: "target_branch".into(),
            question: "To which branch do you want to push the changes?".into(),
            params: vec!["branch".into(), "remote".into()],
        });
        ctx
    }

    #[test]
    fn empty_request_has_no_intent() {
        let err = interpreter().interpret("", &DialogueContext::new("s"), &BackendConfig::default()).unwrap_err();
        assert!(matches!(err, InterpretError::NoIntent(_)));
    }

    #[test]
    fn answer_binds_branch_and_remote() {
        let ctx = open_branch_ctx();
        let frame = interpreter().interpret("dev github", &ctx, &BackendConfig::default()).unwrap();
        assert_eq!(frame.tasks.len(), 1);
        let t = &frame.tasks[0];
        assert_eq!(t.verb, CLARIFY_VERB);
        assert_eq!(t.object, "target_branch");
        assert_eq!(t.params.get("target_branch").map(String::as_str), Some("dev"));
        assert_eq!(t.params.get("remote").map(String::as_str), Some("github"));
        assert_eq!(frame.source, "dev github");
    }

    #[test]
    fn answer_uses_known_remotes_regardless_of_order() {
        let mut ctx = open_branch_ctx();
        ctx.facts.remotes = vec![RemoteInfo { name: "github".into(), branches: vec!["dev".into()] }];
        let frame = interpreter().interpret("github dev", &ctx, &BackendConfig::default()).unwrap();
        assert_eq!(frame.tasks[0].params["target_branch"], "dev");
        assert_eq!(frame.tasks[0].params["remote"], "github");
    }

    #[test]
    fn forgot_is_a_help_request_not_an_answer() {
        let ctx = open_branch_ctx();
        let frame = interpreter().interpret("i forgot the remote branches", &ctx, &BackendConfig::default()).unwrap();
        assert_eq!(frame.tasks[0].verb, CLARIFY_HELP_VERB);
    }

    #[test]
    fn listing_frame_has_branch_ambiguity() {
        let frame = interpreter()
            .interpret(crate::fixture::HAPPYDOG_REQUEST, &DialogueContext::new("s"), &BackendConfig::default())
            .unwrap();
        assert_eq!(frame.tasks.len(), 7);
        assert_eq!(frame.ambiguities.len(), 1);
        assert_eq!(frame.ambiguities[0].slot, "target_branch");
        assert_eq!(frame.ambiguities[0].task, 6);
    }

    #[test]
    fn backend_config_json_shape() {
        let rule: BackendConfig = serde_json::from_str(r#"{"kind":"rule"}"#).unwrap();
        assert_eq!(rule, BackendConfig::default());
        let llm: BackendConfig =
            serde_json::from_str(r#"{"kind":"llm-endpoint","url":"http://x/v1/chat/completions","model":"m"}"#)
                .unwrap();
        assert!(matches!(llm, BackendConfig::LlmEndpoint(c) if c.token_budget == 1024));
    }
}
