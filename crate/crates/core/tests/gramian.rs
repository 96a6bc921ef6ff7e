use std::f64::consts::E;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use kolmogorov::operator::{catalog, decompose, gramian, OperatorSpec, DEFAULT_RANK_TOL};
use kolmogorov::verify::{check_exponential_blocks, check_gramian_scaling, CheckKind};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// `∫₀ᵗ e^{sA} Q e^{sAᵀ} ds` by composite Gauss–Legendre with nalgebra's own exponential.
fn quadrature_gramian(spec: &OperatorSpec, t: f64) -> DMatrix<f64> {
    let rule = GaussLegendre::new(NonZeroUsize::new(20).unwrap());
    let panels = 16;
    let q = spec.q();
    let n = spec.n();
    let mut acc = DMatrix::zeros(n, n);
    let h = t / panels as f64;
    for p in 0..panels {
        let (a, b) = (p as f64 * h, (p + 1) as f64 * h);
        for &(z, w) in rule.as_node_weight_pairs() {
            let s = 0.5 * ((b - a) * z + (b + a));
            let e = (spec.a() * s).exp();
            acc += (&e * &q * e.transpose()) * (0.5 * (b - a) * w);
        }
    }
    acc
}

fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max() / b.abs().max()
}

fn operators() -> Vec<OperatorSpec> {
    let mut a3 = DMatrix::zeros(3, 3);
    a3[(1, 0)] = 1.0;
    a3[(2, 1)] = 2.0;
    a3[(0, 0)] = -0.5;
    a3[(2, 2)] = 0.3;
    vec![
        catalog::kolmogorov_2d(Default::default()),
        catalog::shift_chain(3),
        catalog::shift_chain(4),
        OperatorSpec::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            a3,
            Default::default(),
        )
        .unwrap(),
        catalog::nondegenerate(2, DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0])),
    ]
}

#[test]
fn two_dimensional_closed_form_at_unit_time() {
    let spec = catalog::kolmogorov_2d(Default::default());
    let g = gramian(&spec, 1.0).unwrap();
    let expected = DMatrix::from_row_slice(
        2,
        2,
        &[1.0, E - 2.0, E - 2.0, (E * E - 1.0) / 2.0 - 2.0 * E + 3.0],
    );
    assert!(max_rel(g.matrix(), &expected) < 1e-10);
}

#[test]
fn gramian_matches_independent_quadrature() {
    for spec in operators() {
        for t in [1e-3, 0.1, 0.7, 1.0, 2.5] {
            let g = gramian(&spec, t).unwrap();
            let oracle = quadrature_gramian(&spec, t);
            let err = max_rel(g.matrix(), &oracle);
            assert!(
                err < 1e-10,
                "n = {}, t = {t}: relative error {err:e}",
                spec.n()
            );
        }
    }
}

#[test]
fn whitened_direction_and_block_root_exponents() {
    let grid: Vec<f64> = (0..7).map(|j| 1e-4 * 10f64.powf(j as f64 / 2.0)).collect();
    let cases = [
        (catalog::kolmogorov_2d(Default::default()), vec![-0.5, -1.5]),
        (catalog::shift_chain(3), vec![-0.5, -1.5, -2.5]),
    ];
    for (spec, slopes) in cases {
        let dec = decompose(&spec, DEFAULT_RANK_TOL).unwrap();
        let reports = check_gramian_scaling(&spec, &dec, &grid, 0.05).unwrap();
        for (r, s) in reports.iter().zip(&slopes) {
            assert_eq!(r.expected, *s);
            assert!(
                r.pass && r.fit.as_ref().unwrap().r2 >= 0.999,
                "{}",
                r.summary()
            );
        }
        for r in &reports[slopes.len()..] {
            assert!(r.pass, "{}", r.summary());
        }
    }
}

#[test]
fn exponential_block_exponents() {
    let grid: Vec<f64> = (0..5).map(|j| 1e-4 * 10f64.powf(j as f64 * 0.75)).collect();
    let spec = catalog::kolmogorov_2d(Default::default());
    let dec = decompose(&spec, DEFAULT_RANK_TOL).unwrap();
    let reports = check_exponential_blocks(&spec, &dec, &grid, 0.05).unwrap();
    let r10 = reports
        .iter()
        .find(|r| r.name == "exp_block[E1,E0]")
        .unwrap();
    assert!(
        r10.pass && (r10.measured - 1.0).abs() < 0.05,
        "{}",
        r10.summary()
    );

    let spec = catalog::shift_chain(3);
    let dec = decompose(&spec, DEFAULT_RANK_TOL).unwrap();
    let reports = check_exponential_blocks(&spec, &dec, &grid, 0.05).unwrap();
    let r20 = reports
        .iter()
        .find(|r| r.name == "exp_block[E2,E0]")
        .unwrap();
    assert!(
        r20.pass && (r20.measured - 2.0).abs() < 0.05,
        "{}",
        r20.summary()
    );
    // a pure shift never maps a block backwards
    for r in reports
        .iter()
        .filter(|r| r.name == "exp_block[E0,E1]" || r.name == "exp_block[E0,E2]")
    {
        assert_eq!(r.kind, CheckKind::Vacuous);
    }
    assert!(reports.iter().all(|r| r.pass));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gramian_is_monotone_in_time(s in 1e-4f64..2.0, extra in 1e-4f64..2.0, which in 0usize..5) {
        let spec = &operators()[which];
        let t = s + extra;
        let diff = gramian(spec, t).unwrap().matrix() - gramian(spec, s).unwrap().matrix();
        let sym = (&diff + diff.transpose()) * 0.5;
        let min = sym.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10, "min eigenvalue {min:e}");
    }
}
