//! Operators, the Kalman decomposition, Gramians and the anisotropic metric.

pub mod catalog;
mod gramian;
mod kalman;
mod spec;

pub use gramian::{gramian, whitened_direction_norm, Gramian, EIGEN_FLOOR_ABS, MIN_TIME_SCALE};
pub use kalman::{decompose, kalman_index, Block, KalmanDecomposition, DEFAULT_RANK_TOL};
pub use spec::{DriftField, OperatorSpec, TanhTerm};

pub use crate::linalg::matrix_exp;
