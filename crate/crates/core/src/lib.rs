//! Dataset distillation toolkit.
//!
//! Synthesizes a small learnable dataset from a large real one under a single
//! outer-loop framework. Three objective families are provided (performance,
//! parameter, and distribution matching), several synthetic-data
//! parameterizations and label modes, a train-on-synthetic evaluation harness,
//! and a numerical verifier for the equivalence propositions connecting the
//! objective families.
//!
//! The differentiable core is [`tensor`]: a reverse-mode engine over
//! `ndarray` storage whose backward pass is itself built from differentiable
//! ops, so gradients-of-gradients (unrolled inner loops, gradient-matching
//! losses, Hessian-vector products) come from the same machinery.

pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod labels;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Elem, Var};
