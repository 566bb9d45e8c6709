//! Minimal neural-network machinery: autodiff tape, parameters, optimiser and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{AdamW, OptimConfig};
pub use params::{ParamId, ParamSnapshot, ParamStore};
pub use tape::{softmax_row, Matrix, Tape, Var};
