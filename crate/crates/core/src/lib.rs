//! Capture-aware universal adversarial patch crafting against palmprint-style
//! recognizers, at desk scale.

pub mod capture;
pub mod crafting;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model_io;
pub mod nn;
pub mod numerics;
pub mod objectives;
pub mod recognizers;
pub mod renderer;
pub mod topology;

pub use error::{Error, Result};
pub use numerics::{fd_gradient, DiffScalar, Grid, ParamGradient};
