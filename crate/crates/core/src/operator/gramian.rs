//! Controllability Gramian `Q_t = ∫₀ᵗ e^{sA} Q e^{sAᵀ} ds`.
//!
//! The blocks of `Q_t` scale like `t^{h+h'+1}`, so for small `t` the plain
//! matrix loses its smallest eigenvalues to rounding long before it becomes
//! singular in exact arithmetic. The Gramian is therefore assembled in the
//! reference basis after the anisotropic rescaling `D_t = diag(t^{h_i})`:
//!
//! ```text
//! Q_t = B D_t (t·G_t) D_t Bᵀ,   G_t = ∫₀¹ e^{σN_t} Q e^{σN_tᵀ} dσ,
//! N_t = t · D_t⁻¹ (BᵀAB) D_t
//! ```
//!
//! `N_t` only carries non-negative powers of `t` because `A` maps `V_m` into
//! `V_{m+1}`, so `G_t` stays well conditioned as `t → 0`. Square roots,
//! inverse square roots and whitened norms are taken through `G_t`.

use nalgebra::{DMatrix, DVector};

use super::kalman::{decompose, KalmanDecomposition, DEFAULT_RANK_TOL};
use super::spec::OperatorSpec;
use crate::error::{Error, Result};
use crate::linalg::{matrix_exp, op_norm, sorted_sym_eigen, sym_apply, van_loan_gramian};

/// Smallest time at which Gramian-based quantities are reported.
pub const MIN_TIME_SCALE: f64 = 1e-8;

/// Absolute eigenvalue floor used together with `ε·trace`.
pub const EIGEN_FLOOR_ABS: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct Gramian {
    t: f64,
    matrix: DMatrix<f64>,
    balanced: DMatrix<f64>,
    eig_values: DVector<f64>,
    eig_vectors: DMatrix<f64>,
    raw_min_eig: f64,
    floor: f64,
    scaled_exp: DMatrix<f64>,
    basis: DMatrix<f64>,
    block_of: Vec<usize>,
}

/// `Q_t` for the operator, decomposing it with the default rank tolerance.
pub fn gramian(spec: &OperatorSpec, t: f64) -> Result<Gramian> {
    let dec = decompose(spec, DEFAULT_RANK_TOL)?;
    Gramian::new(spec, &dec, t)
}

/// `|Q_t^{-1/2} e^{tA} e_i|` for the reference basis vector `e_i`.
pub fn whitened_direction_norm(
    spec: &OperatorSpec,
    dec: &KalmanDecomposition,
    t: f64,
    i: usize,
) -> Result<f64> {
    Gramian::new(spec, dec, t)?.whitened_direction_norm(i)
}

impl Gramian {
    pub fn new(spec: &OperatorSpec, dec: &KalmanDecomposition, t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gramian time must be positive, got {t}"
            )));
        }
        let n = spec.n();
        let basis = dec.basis().clone();
        let block_of = dec.block_indices().to_vec();
        let a_ref = basis.transpose() * spec.a() * &basis;
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            let (hi, hj) = (block_of[i] as i32, block_of[j] as i32);
            let power = 1 + hj - hi;
            if power < 0 {
                // structurally zero: A maps V_m into V_{m+1}
                0.0
            } else {
                a_ref[(i, j)] * t.powi(power)
            }
        });
        let q_ref = basis.transpose() * spec.q() * &basis;
        let balanced = van_loan_gramian(&scaled, &q_ref, 1.0);
        let scaled_exp = matrix_exp(&scaled, 1.0);

        if balanced
            .iter()
            .chain(scaled_exp.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::SingularGramian {
                t,
                min_eig: f64::NAN,
                floor: EIGEN_FLOOR_ABS,
            });
        }
        let (raw_values, eig_vectors) = sorted_sym_eigen(&balanced);
        let trace = balanced.trace();
        let floor = (f64::EPSILON * trace).max(EIGEN_FLOOR_ABS);
        let raw_min_eig = raw_values[0];
        let eig_values = raw_values.map(|l| l.max(floor));

        let dilation = DVector::from_iterator(n, block_of.iter().map(|&h| t.powi(h as i32)));
        let outer = &basis * DMatrix::from_diagonal(&dilation);
        let matrix = &outer * (&balanced * t) * outer.transpose();
        let matrix = (&matrix + matrix.transpose()) * 0.5;

        Ok(Self {
            t,
            matrix,
            balanced,
            eig_values,
            eig_vectors,
            raw_min_eig,
            floor,
            scaled_exp,
            basis,
            block_of,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// `Q_t` in the canonical coordinates.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The rescaled Gramian `G_t` (reference basis, `O(1)` as `t → 0`).
    pub fn balanced(&self) -> &DMatrix<f64> {
        &self.balanced
    }

    /// Smallest eigenvalue of `G_t` before clamping.
    pub fn raw_min_eigenvalue(&self) -> f64 {
        self.raw_min_eig
    }

    pub fn eigen_floor(&self) -> f64 {
        self.floor
    }

    pub fn is_nonsingular(&self) -> bool {
        self.ensure_nonsingular().is_ok()
    }

    pub fn ensure_nonsingular(&self) -> Result<()> {
        if self.t < MIN_TIME_SCALE || self.raw_min_eig < self.floor {
            return Err(Error::SingularGramian {
                t: self.t,
                min_eig: self.raw_min_eig,
                floor: self.floor,
            });
        }
        Ok(())
    }

    fn dilation(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.block_of.len(),
            self.block_of.iter().map(|&h| self.t.powi(h as i32)),
        )
    }

    /// A factor `S` with `S Sᵀ = Q_t`, suitable for sampling `N(0, Q_t)`.
    pub fn factor(&self) -> DMatrix<f64> {
        let root = sym_apply(&self.eig_values, &self.eig_vectors, f64::sqrt);
        let outer = &self.basis * DMatrix::from_diagonal(&(self.dilation() * self.t.sqrt()));
        outer * root
    }

    /// `‖E_h Q_t^{1/2}‖` (operator norm).
    pub fn block_root_norm(&self, h: usize) -> f64 {
        let root = sym_apply(&self.eig_values, &self.eig_vectors, f64::sqrt);
        let rows: Vec<usize> = (0..self.block_of.len())
            .filter(|&i| self.block_of[i] == h)
            .collect();
        if rows.is_empty() {
            return 0.0;
        }
        let sub = root.select_rows(&rows);
        self.t.powf(h as f64 + 0.5) * op_norm(&sub)
    }

    /// `|Q_t^{-1/2} e^{tA} e_i|` for reference basis vector `i`.
    pub fn whitened_direction_norm(&self, i: usize) -> Result<f64> {
        self.ensure_nonsingular()?;
        let h = self.block_of[i];
        let col = self.scaled_exp.column(i).into_owned();
        let inv_root = sym_apply(&self.eig_values, &self.eig_vectors, |l| 1.0 / l.sqrt());
        Ok((inv_root * col).norm() * self.t.powf(-(h as f64 + 0.5)))
    }

    /// `|Q_t^{-1/2} v|` for an arbitrary vector.
    pub fn whitened_norm(&self, v: &DVector<f64>) -> Result<f64> {
        self.ensure_nonsingular()?;
        let coords = self.basis.transpose() * v;
        let dil = self.dilation();
        let rescaled = coords.component_div(&dil) / self.t.sqrt();
        let inv_root = sym_apply(&self.eig_values, &self.eig_vectors, |l| 1.0 / l.sqrt());
        Ok((inv_root * rescaled).norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::catalog;
    use approx::assert_relative_eq;
    use std::f64::consts::E;

    fn dec(spec: &OperatorSpec) -> KalmanDecomposition {
        decompose(spec, DEFAULT_RANK_TOL).unwrap()
    }

    #[test]
    fn identity_diffusion_gives_t_identity() {
        let spec = catalog::nondegenerate(3, DMatrix::zeros(3, 3));
        let g = gramian(&spec, 0.7).unwrap();
        assert!((g.matrix() - DMatrix::identity(3, 3) * 0.7).abs().max() < 1e-15);
        for i in 0..3 {
            assert_relative_eq!(
                g.whitened_direction_norm(i).unwrap(),
                0.7f64.powf(-0.5),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn two_d_closed_form_at_one() {
        let g = gramian(&catalog::kolmogorov_2d(Default::default()), 1.0).unwrap();
        let q = g.matrix();
        let expected = [1.0, E - 2.0, E - 2.0, (E * E - 1.0) / 2.0 - 2.0 * E + 3.0];
        for (got, want) in q.iter().zip(expected.iter()) {
            assert_relative_eq!(*got, *want, max_relative = 1e-12);
        }
        assert_relative_eq!(q[(1, 1)], 0.757964, epsilon = 1e-6);
    }

    #[test]
    fn two_d_small_time_taylor() {
        let g = gramian(&catalog::kolmogorov_2d(Default::default()), 1e-3).unwrap();
        let t: f64 = 1e-3;
        let q = g.matrix();
        assert_relative_eq!(q[(0, 0)], t, max_relative = 1e-12);
        assert!((q[(0, 1)] - t * t / 2.0).abs() < 2.0 * t.powi(3));
        assert!((q[(1, 1)] - t.powi(3) / 3.0).abs() < 2.0 * t.powi(4));
    }

    #[test]
    fn derivative_matches_integrand() {
        let spec = catalog::kolmogorov_2d(Default::default());
        let d = dec(&spec);
        for &t in &[0.05, 0.4, 1.5] {
            let h = 1e-5 * t;
            let qp = Gramian::new(&spec, &d, t + h).unwrap();
            let qm = Gramian::new(&spec, &d, t - h).unwrap();
            let q = Gramian::new(&spec, &d, t).unwrap();
            let fd = (qp.matrix() - qm.matrix()) / (2.0 * h);
            let e = matrix_exp(spec.a(), t);
            let integrand = &e * spec.q() * e.transpose();
            assert!(
                (fd - integrand).abs().max() <= 1e-8 * q.matrix().abs().max(),
                "t = {t}"
            );
        }
    }

    #[test]
    fn balanced_route_agrees_with_plain_van_loan() {
        let spec = catalog::shift_chain(3);
        let d = dec(&spec);
        for &t in &[0.05, 0.3, 2.0] {
            let g = Gramian::new(&spec, &d, t).unwrap();
            let plain = van_loan_gramian(spec.a(), &spec.q(), t);
            let scale = plain.abs().max();
            assert!((g.matrix() - &plain).abs().max() < 1e-12 * scale);
            // whitened norms via the plain inverse
            let inv = plain.clone().try_inverse().unwrap();
            let e = matrix_exp(spec.a(), t);
            for i in 0..3 {
                let v = e.column(i).into_owned();
                let plain_norm = (v.transpose() * &inv * &v)[(0, 0)].sqrt();
                assert_relative_eq!(
                    g.whitened_direction_norm(i).unwrap(),
                    plain_norm,
                    max_relative = 1e-7
                );
                assert_relative_eq!(
                    g.whitened_norm(&v).unwrap(),
                    plain_norm,
                    max_relative = 1e-7
                );
            }
        }
    }

    #[test]
    fn factor_reproduces_matrix() {
        let spec = catalog::shift_chain(3);
        let g = Gramian::new(&spec, &dec(&spec), 0.01).unwrap();
        let s = g.factor();
        let q = g.matrix();
        for i in 0..3 {
            for j in 0..3 {
                let got = (&s * s.transpose())[(i, j)];
                assert!((got - q[(i, j)]).abs() <= 1e-12 * q[(i, j)].abs().max(1e-300) + 1e-30);
            }
        }
    }

    #[test]
    fn small_times_stay_nonsingular() {
        let spec = catalog::shift_chain(3);
        let d = dec(&spec);
        let g = Gramian::new(&spec, &d, 1e-4).unwrap();
        assert!(g.is_nonsingular());
        assert!(g.raw_min_eigenvalue() > 1e-3);
        let below = Gramian::new(&spec, &d, 1e-9).unwrap();
        assert!(matches!(
            below.whitened_direction_norm(0),
            Err(Error::SingularGramian { .. })
        ));
    }

    #[test]
    fn monotone_in_time() {
        let spec = catalog::kolmogorov_2d(crate::operator::catalog::reference_drift(0.5));
        let d = dec(&spec);
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let s = 1e-3 + 2.0 * next();
            let t = s + 1e-3 + 2.0 * next();
            let diff = Gramian::new(&spec, &d, t).unwrap().matrix()
                - Gramian::new(&spec, &d, s).unwrap().matrix();
            let (values, _) = sorted_sym_eigen(&diff);
            assert!(values[0] >= -1e-10);
        }
    }
}
