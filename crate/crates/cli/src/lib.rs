//! PerOS gateway: sessions over HTTP with a server-sent event feed, the
//! planner component protocol, and the admin commands behind `peros`.

pub mod config;
pub mod engine;
pub mod http;
pub mod planner;
pub mod session;

pub use config::Config;
pub use engine::{Decision, Gateway, GatewayError, NewSession};
pub use planner::{HttpPlanner, LocalPlanner, Planner, PlannerError};
