//! Operation plans and their validation against a registry.

use serde::{Deserialize, Serialize};

use super::args::{ArgValue, Args};
use super::frame::CandidateGroup;
use super::registry::{ApiRegistry, Effect};

/// One call in a plan. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub index: usize,
    pub api: String,
    #[serde(default)]
    pub args: Args,
    #[serde(default)]
    pub depends_on: Vec<usize>,
    #[serde(default)]
    pub checkpoint: bool,
}

/// A slot the user still has to answer before `step` can run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clarification {
    pub slot: String,
    pub step: usize,
    /// Parameters of `step` bound by answering this slot; the first is primary.
    pub params: Vec<String>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationPlan {
    pub id: String,
    pub origin: String,
    pub registry_version: u64,
    pub steps: Vec<PlanStep>,
    #[serde(default)]
    pub clarifications: Vec<Clarification>,
}

impl OperationPlan {
    pub fn new(id: impl Into<String>, origin: impl Into<String>, registry_version: u64) -> Self {
        OperationPlan { id: id.into(), origin: origin.into(), registry_version, steps: vec![], clarifications: vec![] }
    }

    pub fn step(&self, index: usize) -> Option<&PlanStep> {
        index.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.checkpoint).map(|s| s.index).collect()
    }

    pub fn clarification_for_step(&self, index: usize) -> Option<&Clarification> {
        self.clarifications.iter().find(|c| c.step == index)
    }

    pub fn is_executable(&self, registry: &ApiRegistry) -> bool {
        self.clarifications.is_empty() && validate_plan(self, registry).ok
    }

    pub fn effect_of(&self, registry: &ApiRegistry, index: usize) -> Option<Effect> {
        let step = self.step(index)?;
        registry.get(&step.api).ok().map(|s| s.effect)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    UnknownApi,
    MissingArg,
    TypeMismatch,
    BadDependency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub code: ViolationCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Lists every violation of `plan` against `registry`. Never mutates.
pub fn validate_plan(plan: &OperationPlan, registry: &ApiRegistry) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |step: usize, code, detail: String| violations.push(Violation { step, code, detail });

    for (pos, step) in plan.steps.iter().enumerate() {
        let idx = step.index;
        if idx != pos + 1 {
            push(idx, ViolationCode::BadDependency, format!("step at position {} has index {idx}", pos + 1));
        }
        for &dep in &step.depends_on {
            if dep == 0 || dep >= idx {
                push(idx, ViolationCode::BadDependency, format!("depends on step {dep}, not an earlier step"));
            }
        }
        let spec = match registry.get(&step.api) {
            Ok(spec) => spec,
            Err(_) => {
                push(idx, ViolationCode::UnknownApi, format!("`{}` is not registered", step.api));
                continue;
            }
        };
        for (name, value) in &step.args {
            match spec.param(name) {
                None => push(idx, ViolationCode::TypeMismatch, format!("`{}` has no param `{name}`", spec.name)),
                Some(param) if !value.fits(param) => push(
                    idx,
                    ViolationCode::TypeMismatch,
                    format!(
                        "`{name}` expects {}{}, got {}",
                        param.kind.label(),
                        if param.variadic { " list" } else { "" },
                        kind_of(value)
                    ),
                ),
                Some(_) => {}
            }
        }
        for param in spec.required_params() {
            if !step.args.contains_key(&param.name) {
                push(idx, ViolationCode::MissingArg, format!("`{}` requires `{}`", spec.name, param.name));
            }
        }
    }
    ValidationReport { ok: violations.is_empty(), violations }
}

fn kind_of(value: &ArgValue) -> &'static str {
    match value {
        ArgValue::String(_) => "string",
        ArgValue::Path(_) => "path",
        ArgValue::Paths(_) => "path list",
        ArgValue::Integer(_) => "integer",
        ArgValue::SizeBytes(_) => "size-bytes",
        ArgValue::Flag(_) => "flag",
        ArgValue::Enum(_) => "enum",
    }
}
