use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sorted_sym_eigen, sym_apply};

const SYMMETRY_TOL: f64 = 1e-12;

/// One term `c · tanh(⟨a, x⟩ + b)` contributing to the drift coordinate `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TanhTerm {
    /// Zero-based coordinate, must be below `p_tilde`.
    pub target: usize,
    pub amplitude: f64,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
}

impl TanhTerm {
    pub fn new(target: usize, amplitude: f64, weights: Vec<f64>, offset: f64) -> Self {
        Self {
            target,
            amplitude,
            weights,
            offset,
        }
    }

    #[inline]
    fn phase(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + self.offset
    }

    #[inline]
    fn dot(&self, u: &[f64]) -> f64 {
        self.weights.iter().zip(u).map(|(a, v)| a * v).sum()
    }

    fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Nonlinear drift `F` built from a finite sum of tanh ridges.
///
/// Every partial derivative up to order three is bounded, and the empty term
/// list is `F ≡ 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DriftField {
    pub terms: Vec<TanhTerm>,
}

impl DriftField {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(terms: Vec<TanhTerm>) -> Self {
        Self { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Writes `F(x)` into `out` (length `n`).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for term in &self.terms {
            out[term.target] += term.amplitude * term.phase(x).tanh();
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        self.eval_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// `out += DF(x)[u]`.
    pub fn add_jacobian_apply(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        for term in &self.terms {
            let s = term.phase(x).tanh();
            out[term.target] += term.amplitude * (1.0 - s * s) * term.dot(u);
        }
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        for term in &self.terms {
            let s = term.phase(x.as_slice()).tanh();
            let scale = term.amplitude * (1.0 - s * s);
            for (col, a) in term.weights.iter().enumerate() {
                jac[(term.target, col)] += scale * a;
            }
        }
        jac
    }

    /// `out += D²F(x)[u][v]`.
    pub fn add_second_apply(&self, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        for term in &self.terms {
            let s = term.phase(x).tanh();
            let d2 = -2.0 * s * (1.0 - s * s);
            out[term.target] += term.amplitude * d2 * term.dot(u) * term.dot(v);
        }
    }

    /// `out += D³F(x)[u][v][w]`.
    pub fn add_third_apply(&self, x: &[f64], u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        for term in &self.terms {
            let s = term.phase(x).tanh();
            let d3 = -2.0 * (1.0 - s * s) * (1.0 - 3.0 * s * s);
            out[term.target] += term.amplitude * d3 * term.dot(u) * term.dot(v) * term.dot(w);
        }
    }

    /// Upper bound for `‖DF‖₀` in operator norm: `Σ |c|·|a|`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.amplitude.abs() * t.weight_norm())
            .sum()
    }

    /// Upper bounds for `‖DF‖₀`, `‖D²F‖₀` and `‖D³F‖₀`.
    pub fn derivative_bounds(&self) -> [f64; 3] {
        // sup |tanh''| = 4/(3√3), sup |tanh'''| = 2
        let d2 = 4.0 / (3.0 * 3f64.sqrt());
        let mut out = [0.0; 3];
        for t in &self.terms {
            let c = t.amplitude.abs();
            let a = t.weight_norm();
            out[0] += c * a;
            out[1] += c * d2 * a * a;
            out[2] += c * 2.0 * a * a * a;
        }
        out
    }

    /// `sup |F|`.
    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.abs()).sum()
    }
}

/// The triple `(Q₀, A, F)` defining `½Tr(QD²u) + ⟨Ax + F(x), Du⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpec {
    n: usize,
    p_tilde: usize,
    q0: DMatrix<f64>,
    a: DMatrix<f64>,
    drift: DriftField,
    q0_sqrt: DMatrix<f64>,
    q0_inv_sqrt: DMatrix<f64>,
    nu: (f64, f64),
}

impl OperatorSpec {
    /// Validates the diffusion block, drift matrix and drift field.
    pub fn new(q0: DMatrix<f64>, a: DMatrix<f64>, drift: DriftField) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::InvalidSpec(
                "A must be a non-empty square matrix".into(),
            ));
        }
        let n = a.nrows();
        if !q0.is_square() || q0.nrows() == 0 || q0.nrows() > n {
            return Err(Error::InvalidSpec(format!(
                "Q0 must be square with 1 <= p_tilde <= n = {n}, got {}x{}",
                q0.nrows(),
                q0.ncols()
            )));
        }
        if a.iter().chain(q0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("matrix entries must be finite".into()));
        }
        let p_tilde = q0.nrows();
        let scale = q0.abs().max().max(1.0);
        for i in 0..p_tilde {
            for j in 0..i {
                if (q0[(i, j)] - q0[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidSpec(format!(
                        "Q0 is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let (values, vectors) = sorted_sym_eigen(&q0);
        let nu1 = values[0];
        let nu2 = values[p_tilde - 1];
        if nu1 <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "Q0 must be positive definite, smallest eigenvalue is {nu1:e}"
            )));
        }
        for term in &drift.terms {
            if term.target >= p_tilde {
                return Err(Error::InvalidSpec(format!(
                    "drift term targets coordinate {} outside the diffusion block (p_tilde = {p_tilde})",
                    term.target + 1
                )));
            }
            if term.weights.len() != n {
                return Err(Error::InvalidSpec(format!(
                    "drift term weights have length {}, expected {n}",
                    term.weights.len()
                )));
            }
            if !term.amplitude.is_finite()
                || !term.offset.is_finite()
                || term.weights.iter().any(|w| !w.is_finite())
            {
                return Err(Error::InvalidSpec(
                    "drift coefficients must be finite".into(),
                ));
            }
        }
        let q0_sqrt = sym_apply(&values, &vectors, f64::sqrt);
        let q0_inv_sqrt = sym_apply(&values, &vectors, |l| 1.0 / l.sqrt());
        Ok(Self {
            n,
            p_tilde,
            q0,
            a,
            drift,
            q0_sqrt,
            q0_inv_sqrt,
            nu: (nu1, nu2),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p_tilde(&self) -> usize {
        self.p_tilde
    }

    pub fn q0(&self) -> &DMatrix<f64> {
        &self.q0
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn drift(&self) -> &DriftField {
        &self.drift
    }

    /// Smallest eigenvalue of `Q₀`.
    pub fn nu1(&self) -> f64 {
        self.nu.0
    }

    /// Largest eigenvalue of `Q₀`.
    pub fn nu2(&self) -> f64 {
        self.nu.1
    }

    pub fn q0_sqrt(&self) -> &DMatrix<f64> {
        &self.q0_sqrt
    }

    pub fn q0_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.q0_inv_sqrt
    }

    /// The full `n×n` diffusion matrix `Q`.
    pub fn q(&self) -> DMatrix<f64> {
        self.embed(&self.q0)
    }

    /// The full `n×n` symmetric root `Q^{1/2}`.
    pub fn q_sqrt(&self) -> DMatrix<f64> {
        self.embed(&self.q0_sqrt)
    }

    /// Same operator with the nonlinear drift removed.
    pub fn without_drift(&self) -> Self {
        Self {
            drift: DriftField::zero(),
            ..self.clone()
        }
    }

    /// Same linear part with a different drift.
    pub fn with_drift(&self, drift: DriftField) -> Result<Self> {
        Self::new(self.q0.clone(), self.a.clone(), drift)
    }

    fn embed(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.n, self.n);
        full.view_mut((0, 0), (self.p_tilde, self.p_tilde))
            .copy_from(block);
        full
    }
}
