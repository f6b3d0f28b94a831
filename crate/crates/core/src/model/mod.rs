//! Domain types shared by every component.

mod args;
mod frame;
mod plan;
mod registry;

pub use args::{normalize_args, normalize_partial, parse_size, parse_value, ArgError, ArgValue, Args, PartialArgs};
pub use frame::{Ambiguity, CandidateGroup, FrameError, IntentFrame, Span, Task};
pub use plan::{validate_plan, Clarification, OperationPlan, PlanStep, ValidationReport, Violation, ViolationCode};
pub use registry::{ApiRegistry, ApiSpec, Effect, ParamKind, ParamSpec, RegistryError};
