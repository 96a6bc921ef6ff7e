//! Dense linear-algebra helpers: matrix exponential, symmetric square roots,
//! norms and the Van Loan Gramian.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

// Padé degrees and the 1-norm bounds below which each degree is accurate to
// double precision (Higham 2005, table 2.3).
const PADE_THETA: [(usize, f64); 4] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
];
const THETA_13: f64 = 5.371_920_351_148_152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1512.0,
    56.0,
    1.0,
];
const B9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// `e^{tM}` by scaling and squaring with a Padé core.
pub fn matrix_exp(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    assert!(m.is_square(), "matrix_exp requires a square matrix");
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let a = m * t;
    let norm = one_norm(&a);
    if norm == 0.0 {
        return DMatrix::identity(n, n);
    }
    for &(degree, theta) in &PADE_THETA {
        if norm <= theta {
            let coeffs: &[f64] = match degree {
                3 => &B3,
                5 => &B5,
                7 => &B7,
                _ => &B9,
            };
            return pade_low(&a, coeffs);
        }
    }
    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = &a * 2f64.powi(-squarings);
    let mut r = pade13(&scaled);
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut power = ident.clone();
    let mut u_inner = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for k in (0..b.len()).step_by(2) {
        v += &power * b[k];
        u_inner += &power * b[k + 1];
        power = &power * &a2;
    }
    let u = a * u_inner;
    solve_pade(&u, &v)
}

fn pade13(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &B13;
    let u_high = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_inner = &a6 * u_high + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = a * u_inner;
    let v_high = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * v_high + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    solve_pade(&u, &v)
}

fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let p = v + u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular for scaled inputs")
}

/// Maximum absolute column sum.
pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Spectral norm (largest singular value).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Numerical rank: singular values above `rel_tol` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Symmetric eigen-decomposition with eigenvalues sorted ascending.
pub fn sorted_sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// `V diag(g(λ)) Vᵀ` for a symmetric matrix.
pub fn sym_apply(
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    g: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| {
        vectors[(i, j)] * g(values[j])
    });
    &scaled * vectors.transpose()
}

/// Symmetric positive square root of a symmetric positive semi-definite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sorted_sym_eigen(m);
    sym_apply(&values, &vectors, |l| l.max(0.0).sqrt())
}

/// `∫₀ᵗ e^{sM} Q e^{sMᵀ} ds` through the block-exponential identity of Van Loan.
pub fn van_loan_gramian(m: &DMatrix<f64>, q: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-m));
    block.view_mut((0, n), (n, n)).copy_from(q);
    block.view_mut((n, n), (n, n)).copy_from(&m.transpose());
    let e = matrix_exp(&block, t);
    let top_right = e.view((0, n), (n, n)).into_owned();
    let bottom_right = e.view((n, n), (n, n)).into_owned();
    let g = bottom_right.transpose() * top_right;
    (&g + g.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_d() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0])
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(matrix_exp(&z, 2.5), DMatrix::identity(3, 3));
    }

    #[test]
    fn exp_of_idempotent_collapses() {
        let a = two_d();
        for &t in &[1e-6_f64, 0.3, 1.0, 4.0, 25.0] {
            let expected = DMatrix::identity(2, 2) + &a * t.exp_m1();
            let got = matrix_exp(&a, t);
            for (g, e) in got.iter().zip(expected.iter()) {
                assert_relative_eq!(*g, *e, max_relative = 1e-12, epsilon = 1e-300);
            }
        }
    }

    #[test]
    fn exp_of_nilpotent_shift_is_finite_series() {
        let mut a = DMatrix::zeros(3, 3);
        a[(1, 0)] = 1.0;
        a[(2, 1)] = 1.0;
        let expected = DMatrix::identity(3, 3) + &a + &a * &a * 0.5;
        let got = matrix_exp(&a, 1.0);
        assert!((got - expected).abs().max() < 1e-14);
    }

    #[test]
    fn exp_matches_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        for &t in &[0.01, 1.0, 7.0, 40.0] {
            let e = matrix_exp(&a, t);
            assert_relative_eq!(e[(0, 0)], t.cos(), epsilon = 1e-12);
            assert_relative_eq!(e[(1, 0)], t.sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn van_loan_scalar_case() {
        let a = DMatrix::from_element(1, 1, -0.7);
        let q = DMatrix::from_element(1, 1, 2.0);
        let t = 1.3;
        let expected = 2.0 * (1.0 - f64::exp(-1.4 * t)) / 1.4;
        assert_relative_eq!(
            van_loan_gramian(&a, &q, t)[(0, 0)],
            expected,
            max_relative = 1e-13
        );
    }

    #[test]
    fn rank_detects_deficiency() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert_eq!(numerical_rank(&m, 1e-10), 1);
        assert_eq!(numerical_rank(&DMatrix::<f64>::zeros(2, 2), 1e-10), 0);
    }
}
