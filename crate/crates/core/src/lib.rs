//! Numerics for degenerate hypoelliptic Kolmogorov operators
//! `½Tr(QD²u) + ⟨Ax + F(x), Du⟩` satisfying the Kalman rank condition.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod holder;
pub mod linalg;
pub mod operator;
pub mod rng;
pub mod semigroup;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
