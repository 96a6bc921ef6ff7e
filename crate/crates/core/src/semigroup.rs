//! Monte Carlo evaluation of `P_t f`, its derivatives, and the resolvent and
//! Cauchy-problem representations built on it.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{dot, ScalarField, TimeField, TrigField, TrigTerm};
use crate::linalg::matrix_exp;
use crate::operator::{
    decompose, Gramian, KalmanDecomposition, OperatorSpec, DEFAULT_RANK_TOL, MIN_TIME_SCALE,
};
use crate::rng::derive_seed;
use crate::simulate::{Scheme, Stepper, Track};

/// Default lower bound for semigroup times inside quadratures.
pub const TIME_FLOOR: f64 = 1e-4;

/// Largest ratio between consecutive log-spaced panel boundaries.
const LOG_PANEL_RATIO: f64 = 10.0;

/// Longest uniform panel beyond `t = 1`.
const UNIFORM_PANEL: f64 = 2.0;

/// Which representation of `P_t f` is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// `E f(X_t)`.
    Direct,
    /// `E f(Z_t) Φ(t)`.
    Girsanov,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Direct => "direct",
            Method::Girsanov => "girsanov",
        })
    }
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub method: Method,
}

impl MCEstimate {
    /// Sample mean and `sd/√N` of per-path values.
    pub fn from_values(values: &[f64], seed: u64, method: Method) -> Self {
        let n = values.len();
        let mean = pairwise_sum(values) / n as f64;
        let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = if n > 1 {
            pairwise_sum(&dev) / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n_paths: n,
            seed,
            method,
        }
    }

    /// `√(σ₁² + σ₂²)`.
    pub fn combined_stderr(&self, other: &MCEstimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }

    /// Whether `|mean − target| ≤ k·stderr` (exact equality passes at zero stderr).
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Pairwise (cascade) summation, independent of scheduling.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Exact transitions when `F ≡ 0`, exponential Euler otherwise.
pub fn default_scheme(spec: &OperatorSpec) -> Scheme {
    if spec.drift().is_zero() {
        Scheme::ExactGaussian
    } else {
        Scheme::ExponentialEuler
    }
}

fn check_budget(budget: usize) -> Result<()> {
    if budget < 2 {
        return Err(Error::InvalidArgument(
            "Monte Carlo budget must be at least 2".into(),
        ));
    }
    Ok(())
}

fn check_time(spec: &OperatorSpec, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "time must be positive, got {t}"
        )));
    }
    if t < MIN_TIME_SCALE {
        let dec = decompose(spec, DEFAULT_RANK_TOL)?;
        Gramian::new(spec, &dec, t)?.ensure_nonsingular()?;
        return Err(Error::SingularGramian {
            t,
            min_eig: 0.0,
            floor: 0.0,
        });
    }
    Ok(())
}

fn check_point(spec: &OperatorSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.n() {
        return Err(Error::InvalidArgument(format!(
            "point has dimension {}, operator has {}",
            x.len(),
            spec.n()
        )));
    }
    Ok(())
}

/// Per-path values of `g(path)`, in path order.
fn per_path(budget: usize, g: impl Fn(u64) -> f64 + Sync + Send) -> Vec<f64> {
    (0..budget as u64).into_par_iter().map(g).collect()
}

/// `P_t f(x)` with the default scheme.
pub fn evaluate(
    spec: &OperatorSpec,
    f: &ScalarField,
    t: f64,
    x: &[f64],
    budget: usize,
    seed: u64,
    method: Method,
) -> Result<MCEstimate> {
    evaluate_with(spec, f, t, x, budget, seed, method, default_scheme(spec))
}

/// `P_t f(x)` with an explicit time-stepping scheme.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with(
    spec: &OperatorSpec,
    f: &ScalarField,
    t: f64,
    x: &[f64],
    budget: usize,
    seed: u64,
    method: Method,
    scheme: Scheme,
) -> Result<MCEstimate> {
    check_budget(budget)?;
    check_time(spec, t)?;
    check_point(spec, x)?;
    let stepper = Stepper::for_time(spec, t, scheme)?;
    let starts = [x.to_vec()];
    let values = match method {
        Method::Direct => per_path(budget, |p| {
            let mut v = 0.0;
            stepper.run(&starts, seed, p, Track::direct(), |_, _, st| {
                v = f.eval(st.x)
            });
            v
        }),
        Method::Girsanov => per_path(budget, |p| {
            let mut v = 0.0;
            stepper.run(&starts, seed, p, Track::girsanov(), |_, _, st| {
                v = f.eval(st.z) * st.log_phi.exp()
            });
            v
        }),
    };
    Ok(MCEstimate::from_values(&values, seed, method))
}

/// Largest block `h` in which `e_i` has a component.
fn coordinate_block(dec: &KalmanDecomposition, i: usize) -> usize {
    let mut e = vec![0.0; dec.n()];
    e[i] = 1.0;
    dec.block_norms(&e)
        .iter()
        .rposition(|&r| r > 1e-12)
        .unwrap_or(0)
}

/// Default difference step `max(1e-3, t^{h+1/2}/10)` for coordinate `i ∈ I_h`.
pub fn derivative_step(dec: &KalmanDecomposition, i: usize, t: f64) -> f64 {
    let h = coordinate_block(dec, i) as f64;
    (t.powf(h + 0.5) / 10.0).max(1e-3)
}

/// Central-difference weights for the `m`-th derivative on offsets in units of the step.
fn central_weights(m: usize) -> &'static [(i32, f64)] {
    match m {
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        _ => unreachable!("orders above three are rejected earlier"),
    }
}

/// Tensor-product stencil `(offset, weight)` for `∂^α` with steps `eps[i]`.
pub fn difference_stencil(n: usize, index: &[usize], eps: &[f64]) -> Result<Vec<(Vec<f64>, f64)>> {
    if index.is_empty() || index.len() > 3 || index.iter().any(|&i| i >= n) {
        return Err(Error::InvalidArgument(
            "derivative multi-index must list between one and three valid coordinates".into(),
        ));
    }
    let mut counts = vec![0usize; n];
    for &i in index {
        counts[i] += 1;
    }
    let mut stencil = vec![(vec![0.0; n], 1.0)];
    for (i, &m) in counts.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let scale = eps[i].powi(m as i32);
        let mut next = Vec::new();
        for (off, w) in &stencil {
            for &(k, c) in central_weights(m) {
                let mut o = off.clone();
                o[i] += k as f64 * eps[i];
                next.push((o, w * c / scale));
            }
        }
        stencil = next;
    }
    Ok(stencil)
}

/// `∂^α P_t f(x)` by central differences with common noise across the stencil.
///
/// `index` lists the differentiated coordinates with repetition, e.g. `[0, 0]`
/// for `∂²₁₁`. Steps default to [`derivative_step`].
#[allow(clippy::too_many_arguments)]
pub fn derivative_estimate(
    spec: &OperatorSpec,
    dec: &KalmanDecomposition,
    f: &ScalarField,
    t: f64,
    x: &[f64],
    index: &[usize],
    budget: usize,
    seed: u64,
) -> Result<MCEstimate> {
    let eps: Vec<f64> = (0..spec.n()).map(|i| derivative_step(dec, i, t)).collect();
    derivative_estimate_with_steps(spec, f, t, x, index, &eps, budget, seed)
}

/// As [`derivative_estimate`] with explicit per-coordinate steps.
#[allow(clippy::too_many_arguments)]
pub fn derivative_estimate_with_steps(
    spec: &OperatorSpec,
    f: &ScalarField,
    t: f64,
    x: &[f64],
    index: &[usize],
    eps: &[f64],
    budget: usize,
    seed: u64,
) -> Result<MCEstimate> {
    check_budget(budget)?;
    check_time(spec, t)?;
    check_point(spec, x)?;
    let stencil = difference_stencil(spec.n(), index, eps)?;
    let starts: Vec<Vec<f64>> = stencil
        .iter()
        .map(|(o, _)| x.iter().zip(o).map(|(a, b)| a + b).collect())
        .collect();
    let stepper = Stepper::for_time(spec, t, default_scheme(spec))?;
    let values = per_path(budget, |p| {
        let mut acc = 0.0;
        stepper.run(&starts, seed, p, Track::direct(), |_, s, st| {
            acc += stencil[s].1 * f.eval(st.x)
        });
        acc
    });
    Ok(MCEstimate::from_values(&values, seed, Method::Direct))
}

/// `D_i P_t f(x) = E⟨Df(X_t), η_i(t)⟩` along the simulated variation flow.
pub fn pathwise_derivative(
    spec: &OperatorSpec,
    f: &ScalarField,
    t: f64,
    x: &[f64],
    i: usize,
    budget: usize,
    seed: u64,
) -> Result<MCEstimate> {
    check_budget(budget)?;
    check_time(spec, t)?;
    check_point(spec, x)?;
    if !f.has_gradient() {
        return Err(Error::InvalidArgument(format!(
            "field {} has no gradient",
            f.label()
        )));
    }
    if i >= spec.n() {
        return Err(Error::InvalidArgument(format!(
            "coordinate {i} out of range"
        )));
    }
    let n = spec.n();
    let stepper = Stepper::for_time(spec, t, default_scheme(spec))?;
    let starts = [x.to_vec()];
    let track = Track {
        x: true,
        eta: true,
        ..Track::default()
    };
    let values = per_path(budget, |p| {
        let mut v = 0.0;
        stepper.run(&starts, seed, p, track, |_, _, st| {
            let mut g = vec![0.0; n];
            f.gradient(st.x, &mut g);
            v = (0..n).map(|r| g[r] * st.eta[r * n + i]).sum();
        });
        v
    });
    Ok(MCEstimate::from_values(&values, seed, Method::Direct))
}

/// One node of a time quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadNode {
    /// Node position.
    pub t: f64,
    /// Time at which the semigroup is evaluated, `max(t, floor)`.
    pub eval_t: f64,
    pub weight: f64,
}

/// Composite Gauss–Legendre rule in time.
///
/// Panels: `[0, floor]`, then log-spaced boundaries with ratio at most 10 up
/// to `min(1, t_max)`, then uniform panels of length at most 2 up to `t_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureScheme {
    pub t_max: f64,
    pub floor: f64,
    pub panels: Vec<f64>,
    pub nodes_per_panel: usize,
    pub paths_per_node: usize,
}

impl QuadratureScheme {
    /// Panels on `[0, t_max]`.
    pub fn on_interval(
        t_max: f64,
        floor: f64,
        nodes_per_panel: usize,
        paths_per_node: usize,
    ) -> Result<Self> {
        if !(t_max > 0.0 && t_max.is_finite()) || !(floor > 0.0) || nodes_per_panel == 0 {
            return Err(Error::InvalidArgument(
                "invalid quadrature parameters".into(),
            ));
        }
        let mut panels = vec![0.0];
        let floor = floor.min(t_max);
        panels.push(floor);
        let log_end = t_max.min(1.0);
        if log_end > floor {
            let count = ((log_end / floor).ln() / LOG_PANEL_RATIO.ln())
                .ceil()
                .max(1.0) as usize;
            let ratio = (log_end / floor).powf(1.0 / count as f64);
            for j in 1..count {
                panels.push(floor * ratio.powi(j as i32));
            }
            panels.push(log_end);
        }
        if t_max > log_end {
            let count = ((t_max - log_end) / UNIFORM_PANEL).ceil().max(1.0) as usize;
            let width = (t_max - log_end) / count as f64;
            for j in 1..count {
                panels.push(log_end + width * j as f64);
            }
            panels.push(t_max);
        }
        Ok(Self {
            t_max,
            floor,
            panels,
            nodes_per_panel,
            paths_per_node,
        })
    }

    /// Horizon `t_max = max(1, ln(‖f‖₀/(λ·tol))/λ)` for the resolvent.
    pub fn elliptic(
        lambda: f64,
        sup_f: f64,
        tol: f64,
        nodes_per_panel: usize,
        paths_per_node: usize,
    ) -> Result<Self> {
        if !(lambda > 0.0) || !(tol > 0.0) {
            return Err(Error::InvalidArgument("λ and tol must be positive".into()));
        }
        let t_max = ((sup_f / (lambda * tol)).ln() / lambda).max(1.0);
        Self::on_interval(t_max, TIME_FLOOR, nodes_per_panel, paths_per_node)
    }

    /// `|Σ_j w_j e^{−λt_j} − ∫₀^{t_max} e^{−λt} dt|`, the rule's error on the bare kernel.
    ///
    /// Times `‖f‖₀` this bounds the quadrature bias when `P_t f` is constant in `t`,
    /// and indicates it otherwise.
    pub fn kernel_error(&self, lambda: f64) -> f64 {
        let rule: Vec<f64> = self
            .nodes()
            .iter()
            .map(|n| n.weight * (-lambda * n.t).exp())
            .collect();
        let exact = if lambda == 0.0 {
            self.t_max
        } else {
            -(-lambda * self.t_max).exp_m1() / lambda
        };
        (pairwise_sum(&rule) - exact).abs()
    }

    /// `e^{−λ t_max}/λ · ‖f‖₀`.
    pub fn tail_bound(&self, lambda: f64, sup_f: f64) -> f64 {
        (-lambda * self.t_max).exp() / lambda * sup_f
    }

    pub fn nodes(&self) -> Vec<QuadNode> {
        let rule = GaussLegendre::new(NonZeroUsize::new(self.nodes_per_panel).expect("validated"));
        let mut out = Vec::new();
        for w in self.panels.windows(2) {
            let (a, b) = (w[0], w[1]);
            for &(z, wt) in rule.as_node_weight_pairs() {
                let t = 0.5 * ((b - a) * z + (b + a));
                out.push(QuadNode {
                    t,
                    eval_t: t.max(self.floor),
                    weight: 0.5 * (b - a) * wt,
                });
            }
        }
        out
    }
}

/// Weighted sum of independent node estimates; errors add in quadrature.
fn aggregate(parts: &[(f64, MCEstimate)], seed: u64) -> MCEstimate {
    let terms: Vec<f64> = parts.iter().map(|(w, e)| w * e.mean).collect();
    let var: Vec<f64> = parts.iter().map(|(w, e)| (w * e.stderr).powi(2)).collect();
    MCEstimate {
        mean: pairwise_sum(&terms),
        stderr: pairwise_sum(&var).sqrt(),
        n_paths: parts.first().map_or(0, |(_, e)| e.n_paths),
        seed,
        method: Method::Direct,
    }
}

/// `u(x) = ∫₀^∞ e^{−λt} P_t f(x) dt` with an independent estimate per node.
pub fn solve_elliptic(
    spec: &OperatorSpec,
    f: &ScalarField,
    lambda: f64,
    x: &[f64],
    scheme: &QuadratureScheme,
    seed: u64,
) -> Result<MCEstimate> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("λ must be positive".into()));
    }
    let parts = scheme
        .nodes()
        .iter()
        .enumerate()
        .map(|(j, node)| {
            let e = evaluate(
                spec,
                f,
                node.eval_t,
                x,
                scheme.paths_per_node,
                derive_seed(seed, j as u64),
                Method::Direct,
            )?;
            Ok((node.weight * (-lambda * node.t).exp(), e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&parts, seed))
}

/// Per-path resolvent sums `Σ_j w_j e^{−λt_j} f(X_{t_j})` from several starts with common noise.
///
/// Returns one row per path, one column per start.
pub fn resolvent_path_sums(
    spec: &OperatorSpec,
    f: &ScalarField,
    lambda: f64,
    starts: &[Vec<f64>],
    scheme: &QuadratureScheme,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_budget(scheme.paths_per_node)?;
    for x in starts {
        check_point(spec, x)?;
    }
    let nodes = scheme.nodes();
    // distinct evaluation times, each visited once along the path
    let mut times: Vec<f64> = nodes.iter().map(|n| n.eval_t).collect();
    times.dedup();
    let mut slot = Vec::with_capacity(nodes.len());
    let mut weights = vec![0.0; times.len()];
    for node in &nodes {
        let j = times
            .iter()
            .position(|&t| t == node.eval_t)
            .expect("present");
        slot.push(j);
        weights[j] += node.weight * (-lambda * node.t).exp();
    }
    let stepper = Stepper::for_times(spec, &times, default_scheme(spec))?;
    let m = starts.len();
    Ok((0..scheme.paths_per_node as u64)
        .into_par_iter()
        .map(|p| {
            let mut acc = vec![0.0; m];
            stepper.run(starts, seed, p, Track::direct(), |j, s, st| {
                acc[s] += weights[j] * f.eval(st.x)
            });
            acc
        })
        .collect())
}

/// `u(x)` from shared paths: one long path per sample feeds every node.
pub fn solve_elliptic_shared(
    spec: &OperatorSpec,
    f: &ScalarField,
    lambda: f64,
    x: &[f64],
    scheme: &QuadratureScheme,
    seed: u64,
) -> Result<MCEstimate> {
    let sums = resolvent_path_sums(spec, f, lambda, &[x.to_vec()], scheme, seed)?;
    let values: Vec<f64> = sums.iter().map(|r| r[0]).collect();
    Ok(MCEstimate::from_values(&values, seed, Method::Direct))
}

/// `v(t,x) = P_t g(x) + ∫₀ᵗ P_{t−s}H(s,·)(x) ds`, integrating in `τ = t − s`.
pub fn solve_parabolic(
    spec: &OperatorSpec,
    g: &ScalarField,
    h: &TimeField,
    t: f64,
    x: &[f64],
    scheme: &QuadratureScheme,
    seed: u64,
) -> Result<MCEstimate> {
    if (scheme.t_max - t).abs() > 1e-12 * t.max(1.0) {
        return Err(Error::InvalidArgument(
            "parabolic scheme must cover exactly [0, t]".into(),
        ));
    }
    let mut parts = vec![(
        1.0,
        evaluate(
            spec,
            g,
            t,
            x,
            scheme.paths_per_node,
            derive_seed(seed, 0),
            Method::Direct,
        )?,
    )];
    for (j, node) in scheme.nodes().iter().enumerate() {
        let slice = h.at(t - node.t);
        let e = evaluate(
            spec,
            &slice,
            node.eval_t,
            x,
            scheme.paths_per_node,
            derive_seed(seed, j as u64 + 1),
            Method::Direct,
        )?;
        parts.push((node.weight, e));
    }
    Ok(aggregate(&parts, seed))
}

/// `λu − 𝒜u − f` at a point, with its error budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub value: f64,
    pub stderr: f64,
    /// `|r(2ε) − r(ε)|/3`, the Richardson estimate of the difference error.
    pub fd_error: f64,
    /// `e^{−λ t_max}‖f‖₀`, the residual of the truncated integral.
    pub tail: f64,
    pub eps: f64,
}

impl Residual {
    pub fn error_budget(&self) -> f64 {
        self.stderr + self.fd_error + self.tail
    }
}

/// Residual of the resolvent solution, with `𝒜` applied by finite differences
/// to the common-noise path sums.
pub fn elliptic_residual(
    spec: &OperatorSpec,
    f: &ScalarField,
    lambda: f64,
    x: &[f64],
    eps: f64,
    scheme: &QuadratureScheme,
    seed: u64,
) -> Result<Residual> {
    check_point(spec, x)?;
    let n = spec.n();
    let p = spec.p_tilde();
    let shift = |pairs: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in pairs {
            y[i] += d;
        }
        y
    };
    // layout per scale: centre, ±e_i, then (±,±) for i < j < p̃
    let mut starts = Vec::new();
    for h in [eps, 2.0 * eps] {
        starts.push(x.to_vec());
        for i in 0..n {
            starts.push(shift(&[(i, h)]));
            starts.push(shift(&[(i, -h)]));
        }
        for i in 0..p {
            for j in i + 1..p {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    starts.push(shift(&[(i, si * h), (j, sj * h)]));
                }
            }
        }
    }
    let per_scale = starts.len() / 2;
    let sums = resolvent_path_sums(spec, f, lambda, &starts, scheme, seed)?;

    let mut drift = vec![0.0; n];
    spec.drift().eval_into(x, &mut drift);
    for (r, d) in drift.iter_mut().enumerate() {
        *d += (0..n).map(|c| spec.a()[(r, c)] * x[c]).sum::<f64>();
    }
    let q0 = spec.q0();
    let fx = f.eval(x);
    let residual_at = |row: &[f64], h: f64| {
        let u0 = row[0];
        let plus = |i: usize| row[1 + 2 * i];
        let minus = |i: usize| row[2 + 2 * i];
        let mut au = 0.0;
        for i in 0..n {
            au += drift[i] * (plus(i) - minus(i)) / (2.0 * h);
        }
        let mut k = 1 + 2 * n;
        for i in 0..p {
            au += 0.5 * q0[(i, i)] * (plus(i) - 2.0 * u0 + minus(i)) / (h * h);
            for j in i + 1..p {
                let mixed = (row[k] - row[k + 1] - row[k + 2] + row[k + 3]) / (4.0 * h * h);
                au += q0[(i, j)] * mixed;
                k += 4;
            }
        }
        lambda * u0 - au - fx
    };
    let r1: Vec<f64> = sums
        .iter()
        .map(|row| residual_at(&row[..per_scale], eps))
        .collect();
    let r2: Vec<f64> = sums
        .iter()
        .map(|row| residual_at(&row[per_scale..], 2.0 * eps))
        .collect();
    let e1 = MCEstimate::from_values(&r1, seed, Method::Direct);
    let e2 = MCEstimate::from_values(&r2, seed, Method::Direct);
    let sup_f = f
        .sup_bound()
        .unwrap_or_else(|| sums.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs())) * lambda);
    Ok(Residual {
        value: e1.mean,
        stderr: e1.stderr,
        fd_error: (e2.mean - e1.mean).abs() / 3.0,
        tail: (-lambda * scheme.t_max).exp() * sup_f,
        eps,
    })
}

/// Closed-form semigroup for `F ≡ 0` acting on trigonometric fields:
/// `P_t cos(⟨w,·⟩+φ)(x) = e^{−½⟨Q_t w,w⟩} cos(⟨e^{tAᵀ}w, x⟩ + φ)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    spec: OperatorSpec,
    dec: KalmanDecomposition,
}

impl GaussianOracle {
    pub fn new(spec: &OperatorSpec) -> Result<Self> {
        if !spec.drift().is_zero() {
            return Err(Error::InvalidArgument(
                "the Gaussian oracle needs F ≡ 0".into(),
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            dec: decompose(spec, DEFAULT_RANK_TOL)?,
        })
    }

    /// `P_t f` as a trigonometric field (`P_0 = I`).
    pub fn semigroup(&self, f: &TrigField, t: f64) -> Result<TrigField> {
        if t == 0.0 {
            return Ok(f.clone());
        }
        let q = Gramian::new(&self.spec, &self.dec, t)?;
        let et = matrix_exp(self.spec.a(), t).transpose();
        let terms = f
            .terms
            .iter()
            .map(|term| {
                let w = DVector::from_column_slice(&term.frequency);
                let damp = (-0.5 * w.dot(&(q.matrix() * &w))).exp();
                TrigTerm {
                    amplitude: term.amplitude * damp,
                    frequency: (&et * &w).iter().copied().collect(),
                    phase: term.phase,
                }
            })
            .collect();
        Ok(TrigField {
            constant: f.constant,
            terms,
            dim: f.dim,
        })
    }

    pub fn evaluate(&self, f: &TrigField, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.semigroup(f, t)?.eval(x))
    }

    /// `∂^α P_t f(x)` for a multi-index listed with repetition.
    pub fn derivative(&self, f: &TrigField, t: f64, x: &[f64], index: &[usize]) -> Result<f64> {
        let pf = self.semigroup(f, t)?;
        Ok(trig_derivative(&pf, x, index))
    }

    /// `∫₀^{t_max} e^{−λt} P_t f dt` as a trigonometric field, by composite
    /// Gauss–Legendre with `nodes_per_panel` nodes on the resolvent panels.
    pub fn resolvent(
        &self,
        f: &TrigField,
        lambda: f64,
        tol: f64,
        nodes_per_panel: usize,
    ) -> Result<TrigField> {
        let sup = f.sup_bound().max(f64::MIN_POSITIVE);
        let scheme = QuadratureScheme::elliptic(lambda, sup, tol, nodes_per_panel, 2)?;
        self.integrate(f, &scheme, |t| (-lambda * t).exp())
    }

    /// `P_t g + ∫₀ᵗ P_τ H dτ` for time-constant `H`.
    pub fn parabolic(
        &self,
        g: &TrigField,
        h: &TrigField,
        t: f64,
        nodes_per_panel: usize,
    ) -> Result<TrigField> {
        let scheme = QuadratureScheme::on_interval(t, TIME_FLOOR.min(t), nodes_per_panel, 2)?;
        let mut out = self.integrate(h, &scheme, |_| 1.0)?;
        let pg = self.semigroup(g, t)?;
        out.constant += pg.constant;
        out.terms.extend(pg.terms);
        Ok(out)
    }

    fn integrate(
        &self,
        f: &TrigField,
        scheme: &QuadratureScheme,
        weight: impl Fn(f64) -> f64,
    ) -> Result<TrigField> {
        let mut out = TrigField::constant(f.dim, 0.0);
        for node in scheme.nodes() {
            // the oracle is exact at every t > 0, so nodes are not floored
            let w = node.weight * weight(node.t);
            let pf = self.semigroup(f, node.t)?;
            out.constant += w * pf.constant;
            out.terms.extend(pf.terms.into_iter().map(|term| TrigTerm {
                amplitude: w * term.amplitude,
                ..term
            }));
        }
        Ok(out)
    }
}

/// `∂^α` of a trigonometric field.
pub fn trig_derivative(f: &TrigField, x: &[f64], index: &[usize]) -> f64 {
    if index.is_empty() {
        return f.eval(x);
    }
    let shift = index.len() as f64 * std::f64::consts::FRAC_PI_2;
    f.terms
        .iter()
        .map(|t| {
            let factor: f64 = index.iter().map(|&i| t.frequency[i]).product();
            t.amplitude * factor * (dot(&t.frequency, x) + t.phase + shift).cos()
        })
        .sum()
}
