//! Rollout event-triggered control of LTI plants whose transmissions are
//! shaped by a token bucket.

pub mod controllers;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ocp;
pub mod presets;
pub mod qp;
pub mod sim;
pub mod terminal;

pub use controllers::ControllerKind;
pub use error::{Error, Result};
pub use model::{BoxBounds, OverallInput, OverallState, PlantModel, TokenBucketSpec};
pub use ocp::{OcpParams, OcpSolution};
pub use sim::{SimConfig, SimTrace};
pub use terminal::{TerminalIngredients, Variant};
