//! Conservative Q-learning (CQL) on finite MDPs.
//!
//! This crate is `no_std` (it needs `alloc`) and holds only pure numerical code:
//!
//! - [`mdp`]: exact Bellman operators, closed-form policy evaluation, discounted
//!   state marginals and softmax policies.
//! - [`dataset`]: sampled transition datasets, the empirical behavior policy, the
//!   empirical MDP and concentration bounds on the empirical backup.
//! - [`eval`]: conservative off-policy evaluation (pointwise and expected-value
//!   penalties), their fixed points and the admissible penalty weights.
//! - [`learn`]: the CQL(R) learning loop with entropy, KL-prior and variance
//!   regularizers, fixed or dual-ascent penalty weight.
//! - [`linear`]: CQL with linear Q-functions, LSTD-Q and the single gradient step.
//! - [`analysis`]: checkers for gap expansion, the penalized-objective identity,
//!   safe policy improvement and the choice of the maximization distribution.
//!
//! File formats, the CLI and the seed-parallel verification harness live in the
//! companion `cql` crate.
#![no_std]
#![deny(unsafe_code)]
// Index loops mirror the matrix formulas; negated comparisons also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod dataset;
mod error;
pub mod eval;
pub mod generators;
pub mod learn;
pub mod linalg;
pub mod linear;
pub mod math;
pub mod mdp;

pub use error::{Error, Result};
pub use mdp::{Policy, QTable, TabularMdp, ValueTable};
