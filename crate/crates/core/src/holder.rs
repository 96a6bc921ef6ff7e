//! Third differences and sampled Hölder seminorms with respect to the
//! anisotropic metric of a Kalman decomposition.
//!
//! The supremum defining `[f]_{γ,d,3}` is replaced by a maximum over a seeded
//! probe set. Probe `i` depends only on `(seed, i)`, so a larger budget always
//! contains the smaller one as a prefix and the estimate can only grow.

use rand::RngCore;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{DomainBox, ScalarField};
use crate::operator::KalmanDecomposition;
use crate::rng::{sample_rng, standard_normal, uniform};

/// Smallest per-block scale `ρ` probed; `E_h v` has length `ρ^{2h+1}`.
pub const MIN_PROBE_SCALE: f64 = 1e-3;

const MAX_HALVINGS: usize = 64;
const INTEGER_MARGIN: f64 = 1e-9;

/// `Δ³_v f(x) = f(x) − 3f(x+v) + 3f(x+2v) − f(x+3v)`.
pub fn third_difference(f: &ScalarField, x: &[f64], v: &[f64]) -> Result<f64> {
    let pts = stencil(x, v);
    if pts.iter().any(|p| !f.domain().contains(p)) {
        return Err(Error::OutOfDomain);
    }
    let vals: Vec<f64> = pts.iter().map(|p| f.eval(p)).collect();
    Ok(combine(&vals))
}

fn stencil(x: &[f64], v: &[f64]) -> [Vec<f64>; 4] {
    std::array::from_fn(|j| x.iter().zip(v).map(|(a, b)| a + j as f64 * b).collect())
}

#[inline]
fn combine(vals: &[f64]) -> f64 {
    vals[0] - 3.0 * vals[1] + 3.0 * vals[2] - vals[3]
}

/// Rejects exponents outside `(0, 3)` or within `1e-9` of an integer.
pub fn validate_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 3.0) || (gamma - gamma.round()).abs() < INTEGER_MARGIN {
        return Err(Error::InvalidArgument(format!(
            "Hölder exponent must lie in (0, 3) and be non-integer, got {gamma}"
        )));
    }
    Ok(())
}

/// One sampled pair `(x, v)` with `|||v||| ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// `|||v|||`.
    pub scale: f64,
    /// `|v|`.
    pub euclidean_scale: f64,
}

impl Probe {
    /// The four points `x, x+v, x+2v, x+3v`.
    pub fn points(&self) -> [Vec<f64>; 4] {
        stencil(&self.x, &self.v)
    }
}

/// A reproducible set of probes inside a box.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    probes: Vec<Probe>,
    seed: u64,
}

impl ProbeSet {
    /// Draws `budget` probes; probe `i` uses the stream `(seed, i)` only.
    pub fn sample(
        dec: &KalmanDecomposition,
        domain: &DomainBox,
        budget: usize,
        seed: u64,
    ) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidArgument(
                "sampling budget must be at least 1".into(),
            ));
        }
        if domain.dim() != dec.n() {
            return Err(Error::InvalidArgument(
                "box dimension does not match the operator".into(),
            ));
        }
        let min_step = 3.0 * MIN_PROBE_SCALE.powi(2 * dec.k() as i32 + 1);
        if domain.widths().iter().any(|&w| w <= min_step) {
            return Err(Error::DegenerateBox);
        }
        let probes = (0..budget)
            .into_par_iter()
            .map(|i| draw_probe(dec, domain, seed, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { probes, seed })
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All evaluation points in probe order, four per probe.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.probes.iter().flat_map(|p| p.points()).collect()
    }

    /// Seminorm estimate from values at [`ProbeSet::points`].
    pub fn seminorm_from_values(&self, values: &[f64], gamma: f64) -> Result<SeminormEstimate> {
        self.estimate(values, gamma, |p| p.scale)
    }

    /// Euclidean Zygmund estimate `max |Δ³_v g(x)| / |v|^γ` on the same probes.
    pub fn euclidean_from_values(&self, values: &[f64], gamma: f64) -> Result<SeminormEstimate> {
        self.estimate(values, gamma, |p| p.euclidean_scale)
    }

    /// `max |value|` over the evaluation points.
    pub fn sup_from_values(values: &[f64]) -> f64 {
        values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Evaluates `f` at every probe point, in parallel.
    pub fn evaluate(&self, f: &ScalarField) -> Vec<f64> {
        self.points().par_iter().map(|p| f.eval(p)).collect()
    }

    fn estimate(
        &self,
        values: &[f64],
        gamma: f64,
        scale: impl Fn(&Probe) -> f64,
    ) -> Result<SeminormEstimate> {
        validate_gamma(gamma)?;
        if values.len() != 4 * self.probes.len() {
            return Err(Error::InvalidArgument(
                "expected four values per probe".into(),
            ));
        }
        let mut best = 0.0;
        let mut witness = None;
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for (i, p) in self.probes.iter().enumerate() {
            let s = scale(p);
            lo = lo.min(s);
            hi = hi.max(s);
            let ratio = combine(&values[4 * i..4 * i + 4]).abs() / s.powf(gamma);
            if ratio > best {
                best = ratio;
                witness = Some((p.x.clone(), p.v.clone()));
            }
        }
        Ok(SeminormEstimate {
            value: best,
            witness,
            samples: self.probes.len(),
            gamma,
            scale_range: [lo, hi],
        })
    }
}

fn draw_probe(
    dec: &KalmanDecomposition,
    domain: &DomainBox,
    seed: u64,
    index: u64,
) -> Result<Probe> {
    let mut rng = sample_rng(seed, index);
    let n = dec.n();
    let k = dec.k();
    let active: Vec<usize> = if uniform(&mut rng) < 0.5 {
        (0..=k).collect()
    } else {
        vec![((uniform(&mut rng) * (k + 1) as f64) as usize).min(k)]
    };
    let mut coords = vec![0.0; n];
    for &h in &active {
        let idx = &dec.block(h).indices;
        let mut dir: Vec<f64> = idx.iter().map(|_| standard_normal(&mut rng)).collect();
        let len = dir
            .iter()
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let rho = MIN_PROBE_SCALE.powf(1.0 - uniform(&mut rng));
        let r = rho.powi(2 * h as i32 + 1);
        for (d, &i) in dir.iter_mut().zip(idx) {
            coords[i] = r * *d / len;
        }
    }
    let mut v = vec![0.0; n];
    for (i, c) in coords.iter().enumerate() {
        for (r, vr) in v.iter_mut().enumerate() {
            *vr += dec.basis()[(r, i)] * c;
        }
    }
    let mut scale = dec.quasi_norm(&v);
    if scale > 1.0 {
        v = dec.dilate(&v, 1.0 / scale);
    }
    // halve anisotropically until the stencil fits in the box
    let widths = domain.widths();
    let mut halvings = 0;
    while v.iter().zip(&widths).any(|(vi, w)| 3.0 * vi.abs() > *w) {
        if halvings == MAX_HALVINGS {
            return Err(Error::DegenerateBox);
        }
        v = dec.dilate(&v, 0.5);
        halvings += 1;
    }
    scale = dec.quasi_norm(&v);
    let x = place(domain, &v, &mut rng);
    let euclidean_scale = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(Probe {
        x,
        v,
        scale,
        euclidean_scale,
    })
}

/// Uniform `x` over the sub-box where `x + 3v` also stays inside.
fn place(domain: &DomainBox, v: &[f64], rng: &mut impl RngCore) -> Vec<f64> {
    domain
        .lo
        .iter()
        .zip(&domain.hi)
        .zip(v)
        .map(|((a, b), vi)| {
            let lo = a + (-3.0 * vi).max(0.0);
            let hi = b - (3.0 * vi).max(0.0);
            lo + (hi - lo) * uniform(rng)
        })
        .collect()
}

/// Sampled lower bound for `[f]_{γ,d,3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeminormEstimate {
    pub value: f64,
    /// Maximizing `(x, v)`, absent when every difference vanished.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub samples: usize,
    pub gamma: f64,
    /// Smallest and largest `|||v|||` probed.
    pub scale_range: [f64; 2],
}

/// `‖f‖₀` surrogate plus seminorm, measured on one probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct HolderNormEstimate {
    pub sup: f64,
    pub seminorm: SeminormEstimate,
}

impl HolderNormEstimate {
    pub fn value(&self) -> f64 {
        self.sup + self.seminorm.value
    }
}

/// Sampled `[f]_{γ,d,3}` over the field's box.
pub fn holder_seminorm(
    f: &ScalarField,
    gamma: f64,
    dec: &KalmanDecomposition,
    budget: usize,
    seed: u64,
) -> Result<SeminormEstimate> {
    validate_gamma(gamma)?;
    let set = ProbeSet::sample(dec, f.domain(), budget, seed)?;
    set.seminorm_from_values(&set.evaluate(f), gamma)
}

/// Sampled `‖f‖₀ + [f]_{γ,d,3}`.
pub fn holder_norm(
    f: &ScalarField,
    gamma: f64,
    dec: &KalmanDecomposition,
    budget: usize,
    seed: u64,
) -> Result<HolderNormEstimate> {
    validate_gamma(gamma)?;
    let set = ProbeSet::sample(dec, f.domain(), budget, seed)?;
    let values = set.evaluate(f);
    Ok(HolderNormEstimate {
        sup: ProbeSet::sup_from_values(&values),
        seminorm: set.seminorm_from_values(&values, gamma)?,
    })
}

/// Euclidean Zygmund seminorm on the probe set of [`holder_seminorm`].
pub fn euclidean_seminorm(
    f: &ScalarField,
    gamma: f64,
    dec: &KalmanDecomposition,
    budget: usize,
    seed: u64,
) -> Result<SeminormEstimate> {
    validate_gamma(gamma)?;
    let set = ProbeSet::sample(dec, f.domain(), budget, seed)?;
    set.euclidean_from_values(&set.evaluate(f), gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{catalog, decompose, DEFAULT_RANK_TOL};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn two_d() -> KalmanDecomposition {
        decompose(
            &catalog::kolmogorov_2d(Default::default()),
            DEFAULT_RANK_TOL,
        )
        .unwrap()
    }

    fn quadratic(n: usize) -> ScalarField {
        ScalarField::new("quad", DomainBox::default_for(n), |x| {
            1.0 + 0.3 * x[0] - 2.0 * x[1] + x[0] * x[0] - 0.7 * x[0] * x[1] + 4.0 * x[1] * x[1]
        })
    }

    #[test]
    fn cube_difference() {
        let f = ScalarField::new("x^3", DomainBox::cube(1, 5.0), |x| x[0].powi(3));
        assert_eq!(third_difference(&f, &[0.0], &[1.0]).unwrap(), -6.0);
        assert_eq!(
            third_difference(&f, &[0.0], &[2.0]),
            Err(Error::OutOfDomain)
        );
        let c = ScalarField::constant(2, 3.5);
        assert_eq!(
            third_difference(&c, &[0.1, 0.2], &[0.5, -1.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn quadratics_are_annihilated() {
        let f = quadratic(2);
        for &x in &[[0.0, 0.0], [1.0, -2.0], [-3.0, 0.5]] {
            let d = third_difference(&f, &x, &[0.25, -0.5]).unwrap();
            assert!(d.abs() < 1e-12, "{d}");
        }
        let est = holder_seminorm(&f, 1.5, &two_d(), 500, 1).unwrap();
        assert!(
            est.value <= 1e-11 / est.scale_range[0].powf(1.5),
            "{}",
            est.value
        );
    }

    #[test]
    fn integer_exponents_are_rejected() {
        let f = ScalarField::constant(2, 1.0);
        for g in [0.0, 1.0, 2.0 + 1e-10, 3.0, -0.5] {
            assert!(holder_seminorm(&f, g, &two_d(), 10, 0).is_err(), "{g}");
        }
    }

    #[test]
    fn tiny_box_is_degenerate() {
        let f = ScalarField::constant(2, 1.0).with_domain(DomainBox::cube(2, 1e-13));
        assert_eq!(
            holder_seminorm(&f, 0.5, &two_d(), 10, 0).unwrap_err(),
            Error::DegenerateBox
        );
    }

    #[test]
    fn probes_respect_the_unit_ball_and_the_box() {
        let dec = two_d();
        let domain = DomainBox::cube(2, 2.0);
        let set = ProbeSet::sample(&dec, &domain, 2000, 9).unwrap();
        for p in set.probes() {
            assert!(p.scale <= 1.0 + 1e-12);
            assert!(p.scale >= MIN_PROBE_SCALE.powi(3) * 0.999);
            for q in p.points() {
                assert!(domain.contains(&q));
            }
        }
    }

    /// `cos y` on the 2-D metric: the sup of the ratio is `8 sin³(1/2)` at `v = (0, ±1)`.
    #[test]
    fn cosine_matches_grid_oracle() {
        let dec = two_d();
        let f = ScalarField::new("cos y", DomainBox::default_for(2), |x| x[1].cos());
        let est = holder_seminorm(&f, 0.5, &dec, 40_000, 3).unwrap();

        // brute force: 200×200 start grid, 40 log scales, block-aligned and mixed directions
        let mut oracle: f64 = 0.0;
        let grid: Vec<f64> = (0..200).map(|i| -5.0 + 10.0 * i as f64 / 199.0).collect();
        for s in 0..40 {
            let rho = MIN_PROBE_SCALE.powf(1.0 - s as f64 / 39.0);
            for v in [
                [0.0, rho.powi(3)],
                [0.0, -rho.powi(3)],
                [rho, rho.powi(3)],
                [-rho, rho.powi(3)],
            ] {
                let v = dec.dilate(&v, 1.0 / dec.quasi_norm(&v).max(1.0));
                let q = dec.quasi_norm(&v);
                for &x0 in grid.iter().step_by(20) {
                    for &y0 in &grid {
                        if let Ok(d) = third_difference(&f, &[x0, y0], &v) {
                            oracle = oracle.max(d.abs() / q.sqrt());
                        }
                    }
                }
            }
        }
        let analytic = 8.0 * 0.5_f64.sin().powi(3);
        assert!((oracle - analytic).abs() < 0.05 * analytic, "{oracle}");
        assert!(est.value > 0.0);
        assert!(
            (est.value - oracle).abs() <= 0.1 * oracle,
            "{} vs {oracle}",
            est.value
        );
        assert!(est.value <= analytic * (1.0 + 1e-9));
    }

    /// `g = |||x|||^{1/2}` is 1/2-Hölder with constant 1, so `|Δ³_v g| ≤ (√3 + 3)|||v|||^{1/2}`.
    #[test]
    fn quasi_norm_power_stays_bounded() {
        let dec = two_d();
        let d2 = dec.clone();
        let g = ScalarField::new("|||x|||^0.5", DomainBox::cube(2, 1.0), move |x| {
            d2.quasi_norm(x).sqrt()
        });
        let bound = 3.0_f64.sqrt() + 3.0;
        for budget in [1000, 4000, 16_000] {
            let est = holder_seminorm(&g, 0.5, &dec, budget, 5).unwrap();
            assert!(est.value > 0.5 && est.value <= bound, "{}", est.value);
        }
    }

    #[test]
    fn norm_of_constant() {
        let c = ScalarField::constant(2, -2.5);
        let est = holder_norm(&c, 0.7, &two_d(), 200, 4).unwrap();
        assert_eq!(est.value(), 2.5);
        assert_eq!(est.seminorm.witness, None);
    }

    #[test]
    fn nondegenerate_matches_euclidean_estimator() {
        let spec = catalog::nondegenerate(3, DMatrix::from_element(3, 3, 0.2));
        let dec = decompose(&spec, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(dec.k(), 0);
        let f = ScalarField::new("mix", DomainBox::default_for(3), |x| {
            (x[0] * x[1]).sin() + x[2].abs().sqrt()
        });
        let a = holder_seminorm(&f, 0.5, &dec, 3000, 8).unwrap();
        let b = euclidean_seminorm(&f, 0.5, &dec, 3000, 8).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12 * a.value);
        assert_eq!(a.witness, b.witness);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn enlarging_the_budget_never_decreases(seed in any::<u64>(), small in 1usize..200, extra in 0usize..200) {
            let dec = two_d();
            let f = ScalarField::cusp(2, 0, 0.5);
            let a = holder_seminorm(&f, 0.5, &dec, small, seed).unwrap();
            let b = holder_seminorm(&f, 0.5, &dec, small + extra, seed).unwrap();
            prop_assert!(b.value >= a.value);
        }

        #[test]
        fn seminorm_is_homogeneous(seed in any::<u64>(), c in -8.0f64..8.0) {
            let dec = two_d();
            let f = ScalarField::cosine(vec![0.7, -1.3]);
            let a = holder_seminorm(&f, 1.5, &dec, 150, seed).unwrap();
            let b = holder_seminorm(&f.scaled(c), 1.5, &dec, 150, seed).unwrap();
            prop_assert!((b.value - c.abs() * a.value).abs() <= 1e-12 * (1.0 + b.value));
        }

        #[test]
        fn polynomials_of_degree_two_vanish(seed in any::<u64>(), gamma in 0.05f64..2.95) {
            prop_assume!((gamma - gamma.round()).abs() > 1e-6);
            let est = holder_seminorm(&quadratic(2), gamma, &two_d(), 100, seed).unwrap();
            // the four-point stencil cancels up to rounding of values of size ~100
            prop_assert!(est.value <= 1e-11 / est.scale_range[0].powf(gamma), "{}", est.value);
        }
    }
}
