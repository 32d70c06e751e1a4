//! Data-free single-step distillation of denoising diffusion teachers.
//!
//! A pretrained (or analytic) diffusion teacher defines a deterministic
//! noise-to-sample map through its probability-flow sampler. This crate
//! distills that map into a student that evaluates the teacher's entire
//! sampling trajectory in one forward pass, without ever touching training
//! data: the student regresses its own prediction at time s onto a
//! bootstrapped target built from its prediction at the adjacent time t and
//! a single teacher query, while a boundary term anchors the top of the
//! trajectory to the teacher's first denoising step.
//!
//! Everything runs in f64 at desk scale, with deterministic seeded RNG and
//! oracle-tested numerics throughout.

mod error;

pub mod baselines;
pub mod boot;
pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod guidance;
pub mod schedule;
pub mod solvers;
pub mod teacher;
pub mod tensorcore;
pub mod verify;

pub use error::{BootError, Result};
