//! Reference operators used across tests, checks and examples.

use nalgebra::DMatrix;

use super::spec::{DriftField, OperatorSpec, TanhTerm};

/// `½∂²ₓₓ + F₁∂ₓ + (x + y)∂_y` on ℝ², i.e. `Q₀ = [1]`, `A = [[0,0],[1,1]]`.
pub fn kolmogorov_2d(drift: DriftField) -> OperatorSpec {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
    OperatorSpec::new(DMatrix::identity(1, 1), a, drift).expect("valid reference operator")
}

/// Noise in the first coordinate pushed down a chain: `A e_i = e_{i+1}`.
pub fn shift_chain(n: usize) -> OperatorSpec {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i + 1, i)] = 1.0;
    }
    OperatorSpec::new(DMatrix::identity(1, 1), a, DriftField::zero())
        .expect("valid reference operator")
}

/// `Q = I` on ℝⁿ with the given drift matrix.
pub fn nondegenerate(n: usize, a: DMatrix<f64>) -> OperatorSpec {
    OperatorSpec::new(DMatrix::identity(n, n), a, DriftField::zero())
        .expect("valid reference operator")
}

/// Single tanh ridge `c·tanh(x + y/2)` on the first coordinate of a 2-D operator.
pub fn reference_drift(amplitude: f64) -> DriftField {
    DriftField::new(vec![TanhTerm::new(0, amplitude, vec![1.0, 0.5], 0.0)])
}

/// A second 2-D drift with an offset, mixing two ridges.
pub fn alternate_drift(amplitude: f64) -> DriftField {
    DriftField::new(vec![
        TanhTerm::new(0, amplitude, vec![-0.8, 0.3], 0.4),
        TanhTerm::new(0, 0.5 * amplitude, vec![0.2, -1.0], -0.2),
    ])
}
