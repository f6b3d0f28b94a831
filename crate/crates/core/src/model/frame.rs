//! Intent frames: the strict intermediate form both interpreter backends emit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Character range `[start, end)` into the request text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let mut idx = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
        let start = idx.nth(self.start).unwrap_or(text.len());
        let end =
            text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len())).nth(self.end).unwrap_or(text.len());
        &text[start..end.max(start)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub verb: String,
    #[serde(default)]
    pub object: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub span: Span,
}

/// Known values offered to the user when a slot is ambiguous, grouped by
/// owner (for branches, the remote they live on).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateGroup {
    pub group: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ambiguity {
    pub slot: String,
    pub question: String,
    /// Index into `IntentFrame::tasks` of the task that owns the slot.
    pub task: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentFrame {
    pub source: String,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub ambiguities: Vec<Ambiguity>,
    /// Clauses no rule understood.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residue: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("span {0:?} outside source of {1} chars")]
    SpanOutOfBounds(Span, usize),
    #[error("tasks are not in source order at task {0}")]
    OutOfOrder(usize),
    #[error("ambiguity `{0}` references missing task {1}")]
    DanglingAmbiguity(String, usize),
}

impl IntentFrame {
    pub fn empty(source: &str) -> Self {
        IntentFrame { source: source.to_string(), tasks: vec![], ambiguities: vec![], residue: vec![] }
    }

    /// Structural invariants: spans in bounds, tasks in source order,
    /// ambiguities attached to existing tasks.
    pub fn check(&self) -> Result<(), FrameError> {
        let n = self.source.chars().count();
        for span in self.tasks.iter().map(|t| t.span).chain(self.residue.iter().copied()) {
            if span.start > span.end || span.end > n {
                return Err(FrameError::SpanOutOfBounds(span, n));
            }
        }
        for (i, pair) in self.tasks.windows(2).enumerate() {
            if pair[1].span.start < pair[0].span.start {
                return Err(FrameError::OutOfOrder(i + 1));
            }
        }
        for a in &self.ambiguities {
            if a.task >= self.tasks.len() {
                return Err(FrameError::DanglingAmbiguity(a.slot.clone(), a.task));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_slices_by_char() {
        let text = "héllo world";
        assert_eq!(Span::new(0, 5).slice(text), "héllo");
        assert_eq!(Span::new(6, 11).slice(text), "world");
    }

    #[test]
    fn check_rejects_bad_spans_and_order() {
        let task = |s, e| Task {
            verb: "list".into(),
            object: String::new(),
            params: Default::default(),
            span: Span::new(s, e),
        };
        let mut frame = IntentFrame::empty("list files");
        frame.tasks.push(task(0, 10));
        assert!(frame.check().is_ok());
        frame.tasks.push(task(0, 11));
        assert!(matches!(frame.check(), Err(FrameError::SpanOutOfBounds(..))));
        frame.tasks[1] = task(5, 6);
        frame.tasks[0] = task(6, 7);
        assert!(matches!(frame.check(), Err(FrameError::OutOfOrder(1))));
    }

    #[test]
    fn strict_schema_rejects_unknown_fields() {
        let json = r#"{"source":"x","tasks":[],"ambiguities":[],"extra":1}"#;
        assert!(serde_json::from_str::<IntentFrame>(json).is_err());
    }
}
