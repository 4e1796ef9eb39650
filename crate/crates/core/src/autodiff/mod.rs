//! Reverse-mode automatic differentiation, parameters, optimiser and
//! checkpoint archives.

pub mod adam;
pub mod checkpoint;
mod graph;
pub mod params;

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use graph::{Graph, Var};
pub use params::{GradBuffer, Param, ParamGroup, ParamId, ParamStore};
