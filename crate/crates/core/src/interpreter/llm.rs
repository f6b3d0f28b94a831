//! Client for an OpenAI-compatible chat-completion endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::lexicon::Lexicon;
use crate::model::{ApiRegistry, IntentFrame};

use super::context::{DialogueContext, Speaker};
use super::InterpretError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_budget")]
    pub token_budget: u32,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_budget() -> u32 {
    1024
}

fn default_timeout() -> u64 {
    30_000
}

impl LlmConfig {
    /// Reads `PEROS_LLM_URL`, `PEROS_LLM_MODEL` and `PEROS_LLM_KEY`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("PEROS_LLM_URL").ok()?;
        let model = std::env::var("PEROS_LLM_MODEL").unwrap_or_else(|_| "default".into());
        Some(LlmConfig {
            url,
            model,
            api_key: std::env::var("PEROS_LLM_KEY").ok(),
            token_budget: default_budget(),
            timeout_ms: default_timeout(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Builds the message list: schema instructions, the dialogue window, then
/// the request.
pub fn build_prompt(
    request: &str,
    ctx: &DialogueContext,
    lexicon: &Lexicon,
    registry: &ApiRegistry,
) -> Vec<ChatMessage> {
    let mut verbs = String::new();
    for (verb, bindings) in &lexicon.mapping {
        for b in bindings {
            if let Ok(spec) = registry.get(&b.api) {
                let params: Vec<&str> = b.params.keys().map(String::as_str).collect();
                verbs.push_str(&format!("- {verb} ({}): params {}\n", spec.description, params.join(", ")));
            }
        }
    }
    let system = format!(
        "Extract the tasks from the user request in the order they are expressed. \
         Reply with one JSON object and nothing else, with fields \
         \"source\" (the request verbatim), \"tasks\" (list of {{\"verb\", \"object\", \"params\" (string to string), \
         \"span\" ([start, end) character offsets into source)}}), \"ambiguities\" (list, may be empty). \
         Leave a param out when the request does not state it. Known verbs:\n{verbs}"
    );
    let mut messages = vec![ChatMessage { role: "system".into(), content: system }];
    for turn in ctx.window() {
        let role = match turn.speaker {
            Speaker::User => "user",
            Speaker::System => "assistant",
        };
        messages.push(ChatMessage { role: role.into(), content: turn.text.clone() });
    }
    messages.push(ChatMessage { role: "user".into(), content: request.to_string() });
    messages
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// Sends the prompt and returns the completion text.
pub fn llm_complete(messages: &[ChatMessage], cfg: &LlmConfig) -> Result<String, InterpretError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let body = json!({
        "model": cfg.model,
        "messages": messages,
        "max_tokens": cfg.token_budget,
        "temperature": 0,
    });
    let mut req = agent.post(&cfg.url).header("Content-Type", "application/json");
    if let Some(key) = &cfg.api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(&body).map_err(|e| InterpretError::BackendUnavailable(e.to_string()))?;
    let status = resp.status().as_u16();
    if status >= 500 || status == 404 || status == 401 || status == 403 {
        return Err(InterpretError::BackendUnavailable(format!("endpoint returned HTTP {status}")));
    }
    let text = resp.body_mut().read_to_string().map_err(|e| InterpretError::BackendUnavailable(e.to_string()))?;
    let completion: Completion =
        serde_json::from_str(&text).map_err(|e| InterpretError::MalformedCompletion(format!("response body: {e}")))?;
    completion
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| InterpretError::MalformedCompletion("no choices".into()))
}

/// Parses completion text into a frame using the strict schema. Tolerates a
/// surrounding markdown code fence.
pub fn parse_completion(text: &str, request: &str) -> Result<IntentFrame, InterpretError> {
    let trimmed = text.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    let mut frame: IntentFrame =
        serde_json::from_str(body).map_err(|e| InterpretError::MalformedCompletion(e.to_string()))?;
    frame.source = request.to_string();
    frame.check().map_err(|e| InterpretError::MalformedCompletion(e.to_string()))?;
    Ok(frame)
}
