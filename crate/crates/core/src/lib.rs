//! Declarative OS interface and adaptive-storage laboratory.

pub mod actuator;
pub mod director;
pub mod fixture;
pub mod git;
pub mod interpreter;
pub mod lexicon;
pub mod live;
pub mod lm;
pub mod model;
pub mod storage;
pub mod watchdog;
pub mod workspace;

pub use director::{compile, insert_checkpoints, recommend, resolve_clarification, CheckpointPolicy, DirectorError};
pub use interpreter::{BackendConfig, DialogueContext, InterpretError, Interpreter};
pub use lexicon::Lexicon;
pub use live::Live;
pub use model::*;
