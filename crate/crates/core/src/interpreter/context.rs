use serde::{Deserialize, Serialize};

/// Turns kept verbatim when building a prompt.
pub const CONTEXT_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenClarification {
    pub slot: String,
    pub question: String,
    /// Params the answer binds; the first is the slot's primary param.
    pub params: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteInfo {
    pub name: String,
    pub branches: Vec<String>,
}

/// What the workspace can tell us about candidate answers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceFacts {
    #[serde(default)]
    pub remotes: Vec<RemoteInfo>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub session_id: String,
    #[serde(default)]
    turns: Vec<Turn>,
    #[serde(default)]
    open_clarifications: Vec<OpenClarification>,
    #[serde(default)]
    pub facts: WorkspaceFacts,
}

impl DialogueContext {
    pub fn new(session_id: impl Into<String>) -> Self {
        DialogueContext { session_id: session_id.into(), ..Default::default() }
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>, plan_id: Option<String>) {
        self.turns.push(Turn { speaker, text: text.into(), plan_id });
    }

    /// The most recent turns, oldest first.
    pub fn window(&self) -> &[Turn] {
        &self.turns[self.turns.len().saturating_sub(CONTEXT_WINDOW)..]
    }

    pub fn open_clarifications(&self) -> &[OpenClarification] {
        &self.open_clarifications
    }

    /// Opens (or replaces) the clarification for a slot.
    pub fn open(&mut self, clarification: OpenClarification) {
        self.open_clarifications.retain(|c| c.slot != clarification.slot);
        self.open_clarifications.push(clarification);
    }

    pub fn close(&mut self, slot: &str) {
        self.open_clarifications.retain(|c| c.slot != slot);
    }

    pub fn close_all(&mut self) {
        self.open_clarifications.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_keeps_last_twenty() {
        let mut ctx = DialogueContext::new("s");
        for i in 0..25 {
            ctx.push(Speaker::User, format!("t{i}"), None);
        }
        assert_eq!(ctx.window().len(), CONTEXT_WINDOW);
        assert_eq!(ctx.window()[0].text, "t5");
        assert_eq!(ctx.turns().len(), 25);
    }

    #[test]
    fn one_clarification_per_slot() {
        let mut ctx = DialogueContext::new("s");
        let c = |q: &str| OpenClarification { slot: "target_branch".into(), question: q.into(), params: vec![] };
        ctx.open(c("a"));
        ctx.open(c("b"));
        assert_eq!(ctx.open_clarifications().len(), 1);
        assert_eq!(ctx.open_clarifications()[0].question, "b");
    }
}
