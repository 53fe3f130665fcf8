//! Dense linear algebra, a reverse-mode tape over a fixed layer set, Adam,
//! and finite-difference gradient checking.
//!
//! Everything is generic over [`Real`] so models train in `f32` while the
//! gradient checks can replay the exact same graphs in `f64`.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod matrix;
pub mod nn;
mod params;
mod real;
mod rng;
mod tape;

pub use adam::{Adam, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR, GRAD_CHECK_STEP};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore, ParamTensor};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Activation, Tape, Var};
