//! Path generation for the Ornstein–Uhlenbeck process `Z`, the diffusion `X`,
//! the first variation `η` along `X` and the Girsanov log-weight.
//!
//! Noise comes first: the Brownian increments of path `p` are a function of
//! `(seed, p, step)` only, and `Z`, `X` and the log-weight are all driven by the
//! same increments. With `F ≡ 0` the two states coincide bit for bit.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::linalg::matrix_exp;
use crate::operator::{decompose, DriftField, Gramian, OperatorSpec, DEFAULT_RANK_TOL};
use crate::rng::{standard_normal, PathNoise};

/// Largest step used when a time horizon is turned into a grid.
pub const MAX_STEP: f64 = 1e-3;

/// Fewest steps used for a single-horizon grid.
pub const MIN_STEPS: usize = 32;

/// Uniform grid `0 = t_0 < … < t_K = t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGrid {
    t_end: f64,
    steps: usize,
}

impl PathGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs t_end > 0 and at least one step, got ({t_end}, {steps})"
            )));
        }
        Ok(Self { t_end, steps })
    }

    /// `max(32, ⌈t/1e-3⌉)` steps.
    pub fn for_horizon(t_end: f64) -> Result<Self> {
        Self::new(t_end, MIN_STEPS.max((t_end / MAX_STEP).ceil() as usize))
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }
}

/// Time-stepping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// `X ← e^{dtA}(X + F(X)dt + Q^{1/2}dW)`.
    #[default]
    ExponentialEuler,
    /// `X ← X + (AX + F(X))dt + Q^{1/2}dW`, kept as a cross-check.
    EulerMaruyama,
    /// Exact Gaussian transitions `Z ← e^{ΔA}Z + Q_Δ^{1/2}ξ`; requires `F ≡ 0`.
    ExactGaussian,
}

/// Which quantities a run carries along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Track {
    pub z: bool,
    pub x: bool,
    pub log_phi: bool,
    pub eta: bool,
}

impl Track {
    pub const ALL: Track = Track {
        z: true,
        x: true,
        log_phi: true,
        eta: true,
    };

    /// Only `X`.
    pub fn direct() -> Self {
        Self {
            x: true,
            ..Self::default()
        }
    }

    /// `Z` and the log-weight.
    pub fn girsanov() -> Self {
        Self {
            z: true,
            log_phi: true,
            ..Self::default()
        }
    }
}

/// Per-start state after a step.
#[derive(Debug)]
pub struct StateView<'a> {
    pub z: &'a [f64],
    pub x: &'a [f64],
    pub log_phi: f64,
    /// `∂X/∂x`, row-major `n × n`.
    pub eta: &'a [f64],
}

#[derive(Debug, Clone)]
struct Segment {
    dt: f64,
    steps: usize,
    /// `e^{dtA}` (or `I + dtA` for Euler–Maruyama), row-major.
    prop: Vec<f64>,
    /// Noise loading, row-major `n × cols`.
    load: Vec<f64>,
    cols: usize,
}

/// A compiled time-stepper over a sequence of observation times.
///
/// Observation `j` is reached at the end of segment `j`; the segment between
/// consecutive observations is split into equal steps.
#[derive(Debug, Clone)]
pub struct Stepper {
    n: usize,
    p: usize,
    scheme: Scheme,
    segments: Vec<Segment>,
    times: Vec<f64>,
    drift: DriftField,
    q0_inv_sqrt: Vec<f64>,
}

impl Stepper {
    /// Single horizon with `max(32, ⌈t/1e-3⌉)` steps.
    pub fn for_time(spec: &OperatorSpec, t: f64, scheme: Scheme) -> Result<Self> {
        let grid = PathGrid::for_horizon(t)?;
        Self::with_steps(spec, &[t], &[grid.steps()], scheme)
    }

    /// Uniform grid, one observation per step.
    pub fn for_grid(spec: &OperatorSpec, grid: PathGrid, scheme: Scheme) -> Result<Self> {
        let dt = grid.dt();
        let times: Vec<f64> = (1..=grid.steps()).map(|k| k as f64 * dt).collect();
        let mut s = Self::with_steps(spec, &times[..1], &[1], scheme)?;
        let seg = s.segments[0].clone();
        s.segments = vec![seg; grid.steps()];
        s.times = times;
        Ok(s)
    }

    /// Increasing observation times; each gap is split into steps of at most 1e-3.
    pub fn for_times(spec: &OperatorSpec, times: &[f64], scheme: Scheme) -> Result<Self> {
        Self::for_times_with_max_step(spec, times, MAX_STEP, scheme)
    }

    /// As [`Stepper::for_times`] with an explicit largest step.
    pub fn for_times_with_max_step(
        spec: &OperatorSpec,
        times: &[f64],
        max_step: f64,
        scheme: Scheme,
    ) -> Result<Self> {
        if !(max_step > 0.0) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        let mut steps = Vec::with_capacity(times.len());
        let mut prev = 0.0;
        for &t in times {
            steps.push(((t - prev) / max_step).ceil().max(1.0) as usize);
            prev = t;
        }
        Self::with_steps(spec, times, &steps, scheme)
    }

    fn with_steps(
        spec: &OperatorSpec,
        times: &[f64],
        steps: &[usize],
        scheme: Scheme,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("no observation times".into()));
        }
        if scheme == Scheme::ExactGaussian && !spec.drift().is_zero() {
            return Err(Error::InvalidArgument(
                "exact Gaussian transitions require a zero nonlinear drift".into(),
            ));
        }
        let n = spec.n();
        let dec = if scheme == Scheme::ExactGaussian {
            Some(decompose(spec, DEFAULT_RANK_TOL)?)
        } else {
            None
        };
        let q_sqrt = spec.q_sqrt();
        let mut segments = Vec::with_capacity(times.len());
        let mut prev = 0.0;
        for (&t, &k) in times.iter().zip(steps) {
            let gap = t - prev;
            if !(gap > 0.0) || !t.is_finite() || k == 0 {
                return Err(Error::InvalidArgument(
                    "observation times must be finite and strictly increasing from 0".into(),
                ));
            }
            prev = t;
            let (dt, k) = match scheme {
                Scheme::ExactGaussian => (gap, 1),
                _ => (gap / k as f64, k),
            };
            let (prop, load) = match scheme {
                Scheme::ExponentialEuler => {
                    let e = matrix_exp(spec.a(), dt);
                    let load = &e * &q_sqrt;
                    (e, load)
                }
                Scheme::EulerMaruyama => (DMatrix::identity(n, n) + spec.a() * dt, q_sqrt.clone()),
                Scheme::ExactGaussian => {
                    let g = Gramian::new(spec, dec.as_ref().expect("decomposed"), dt)?;
                    // noise is scaled by √dt below, so store Q_Δ^{1/2}/√Δ
                    (matrix_exp(spec.a(), dt), g.factor() / dt.sqrt())
                }
            };
            // only the first p̃ noise components are loaded unless sampling exactly
            let cols = if scheme == Scheme::ExactGaussian {
                n
            } else {
                spec.p_tilde()
            };
            segments.push(Segment {
                dt,
                steps: k,
                prop: row_major(&prop),
                load: row_major(&load.columns(0, cols).into_owned()),
                cols,
            });
        }
        Ok(Self {
            n,
            p: spec.p_tilde(),
            scheme,
            segments,
            times: times.to_vec(),
            drift: spec.drift().clone(),
            q0_inv_sqrt: row_major(spec.q0_inv_sqrt()),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn total_steps(&self) -> usize {
        self.segments.iter().map(|s| s.steps).sum()
    }

    /// Runs path `path` from every start with common noise.
    ///
    /// `observe(j, s, state)` is called at observation time `j` for start `s`.
    pub fn run<F>(&self, starts: &[Vec<f64>], seed: u64, path: u64, track: Track, mut observe: F)
    where
        F: FnMut(usize, usize, &StateView<'_>),
    {
        self.run_steps(
            starts,
            seed,
            path,
            track,
            |_, _, _| {},
            |j, s, st| observe(j, s, st),
        );
    }

    /// As [`Stepper::run`], additionally reporting each step's increments `dW`.
    pub fn run_steps<G, F>(
        &self,
        starts: &[Vec<f64>],
        seed: u64,
        path: u64,
        track: Track,
        mut on_noise: G,
        mut observe: F,
    ) where
        G: FnMut(usize, f64, &[f64]),
        F: FnMut(usize, usize, &StateView<'_>),
    {
        let n = self.n;
        let m = starts.len();
        let exact = self.scheme == Scheme::ExactGaussian;
        let track_x = track.x || track.eta;
        let track_z = track.z || track.log_phi || (exact && track_x);
        let mut z: Vec<f64> = starts.iter().flatten().copied().collect();
        let mut x = z.clone();
        let mut eta = vec![0.0; if track.eta { m * n * n } else { 0 }];
        if track.eta {
            for s in 0..m {
                for i in 0..n {
                    eta[s * n * n + i * n + i] = 1.0;
                }
            }
        }
        let mut log_phi = vec![0.0; m];
        let mut noise = PathNoise::new(seed, path, n);
        let mut xi = vec![0.0; n];
        let mut dw = vec![0.0; n];
        let mut buf = vec![0.0; n];
        let mut fz = vec![0.0; n];
        let mut g = vec![0.0; self.p];
        let mut tmp = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        let mut step = 0usize;
        let mut t = 0.0;

        for (j, seg) in self.segments.iter().enumerate() {
            let sq = seg.dt.sqrt();
            for _ in 0..seg.steps {
                noise.fill_step(&mut xi);
                for (d, v) in dw.iter_mut().zip(&xi) {
                    *d = sq * v;
                }
                t += seg.dt;
                on_noise(step, t, &dw);
                step += 1;
                for s in 0..m {
                    let zs = &mut z[s * n..(s + 1) * n];
                    if track_z {
                        if track.log_phi && !self.drift.is_zero() {
                            self.drift.eval_into(zs, &mut fz);
                            self.whiten(&fz, &mut g);
                            let (mut ip, mut sq_norm) = (0.0, 0.0);
                            for (gi, wi) in g.iter().zip(&dw) {
                                ip += gi * wi;
                                sq_norm += gi * gi;
                            }
                            log_phi[s] += ip - 0.5 * sq_norm * seg.dt;
                        }
                        self.advance(seg, zs, None, &dw, &mut buf);
                    }
                    if exact {
                        // F ≡ 0: X is Z
                        if track_x {
                            x[s * n..(s + 1) * n].copy_from_slice(&z[s * n..(s + 1) * n]);
                        }
                    } else if track_x {
                        let xs = &mut x[s * n..(s + 1) * n];
                        if track.eta {
                            let es = &mut eta[s * n * n..(s + 1) * n * n];
                            self.advance_eta(seg, xs, es, &mut tmp, &mut buf, &mut col);
                        }
                        self.drift.eval_into(xs, &mut fz);
                        self.advance(seg, xs, Some(&fz), &dw, &mut buf);
                    }
                }
            }
            if exact && track.eta {
                // the variation of an affine flow is the accumulated propagator
                for s in 0..m {
                    let es = &mut eta[s * n * n..(s + 1) * n * n];
                    mat_mul(&seg.prop, es, n, &mut tmp);
                    es.copy_from_slice(&tmp);
                }
            }
            for s in 0..m {
                let view = StateView {
                    z: &z[s * n..(s + 1) * n],
                    x: &x[s * n..(s + 1) * n],
                    log_phi: log_phi[s],
                    eta: if track.eta {
                        &eta[s * n * n..(s + 1) * n * n]
                    } else {
                        &[]
                    },
                };
                observe(j, s, &view);
            }
        }
    }

    /// `G = Q₀^{-1/2}F` restricted to the first `p̃` coordinates.
    fn whiten(&self, f: &[f64], out: &mut [f64]) {
        let p = self.p;
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..p).map(|k| self.q0_inv_sqrt[i * p + k] * f[k]).sum();
        }
    }

    fn advance(
        &self,
        seg: &Segment,
        state: &mut [f64],
        drift: Option<&[f64]>,
        dw: &[f64],
        buf: &mut [f64],
    ) {
        let n = self.n;
        let cols = seg.cols;
        let dw = &dw[..cols];
        let euler = self.scheme == Scheme::EulerMaruyama;
        match drift {
            Some(f) if !euler => {
                for ((b, s), fi) in buf.iter_mut().zip(state.iter()).zip(f) {
                    *b = s + fi * seg.dt;
                }
            }
            _ => buf.copy_from_slice(state),
        }
        let rows = seg.prop.chunks_exact(n).zip(seg.load.chunks_exact(cols));
        for (i, (st, (row, lrow))) in state.iter_mut().zip(rows).enumerate() {
            let mut acc = dot(row, buf) + dot(lrow, dw);
            if euler {
                if let Some(f) = drift {
                    acc += f[i] * seg.dt;
                }
            }
            *st = acc;
        }
    }

    /// `η ← e^{dtA}(η + DF(X)η dt)`, the exact derivative of one step.
    fn advance_eta(
        &self,
        seg: &Segment,
        x: &[f64],
        eta: &mut [f64],
        tmp: &mut [f64],
        u: &mut [f64],
        col: &mut [f64],
    ) {
        let n = self.n;
        for c in 0..n {
            for r in 0..n {
                u[r] = eta[r * n + c];
                col[r] = 0.0;
            }
            self.drift.add_jacobian_apply(x, u, col);
            for r in 0..n {
                tmp[r * n + c] = u[r] + col[r] * seg.dt;
            }
        }
        match self.scheme {
            Scheme::EulerMaruyama => {
                // (I + dtA)η + DF η dt
                for c in 0..n {
                    for r in 0..n {
                        let lin: f64 = (0..n).map(|k| seg.prop[r * n + k] * eta[k * n + c]).sum();
                        col[r] = lin + (tmp[r * n + c] - eta[r * n + c]);
                    }
                    for r in 0..n {
                        eta[r * n + c] = col[r];
                    }
                }
            }
            _ => mat_mul(&seg.prop, tmp, n, eta),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_mul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = (0..n).map(|k| a[r * n + k] * b[k * n + c]).sum();
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// One fully stored path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: PathGrid,
    pub x0: Vec<f64>,
    pub path: u64,
    pub seed: u64,
    /// `K` increments, each an `n`-vector.
    pub dw: Vec<Vec<f64>>,
    /// `K+1` states of `Z`.
    pub z: Vec<Vec<f64>>,
    /// `K+1` states of `X`.
    pub x: Vec<Vec<f64>>,
    /// Running log-weight, `K+1` entries starting at 0.
    pub log_phi: Vec<f64>,
}

impl PathBundle {
    pub fn times(&self) -> Vec<f64> {
        let dt = self.grid.dt();
        (0..=self.grid.steps()).map(|k| k as f64 * dt).collect()
    }

    pub fn final_log_phi(&self) -> f64 {
        *self.log_phi.last().expect("non-empty")
    }
}

/// Stores `Z`, `X`, `dW` and the log-weight of path `path` on `grid`.
pub fn simulate_bundle(
    spec: &OperatorSpec,
    x0: &[f64],
    grid: PathGrid,
    seed: u64,
    path: u64,
    scheme: Scheme,
) -> Result<PathBundle> {
    if x0.len() != spec.n() {
        return Err(Error::InvalidArgument(
            "start point has the wrong dimension".into(),
        ));
    }
    let stepper = Stepper::for_grid(spec, grid, scheme)?;
    let k = grid.steps();
    let mut out = PathBundle {
        grid,
        x0: x0.to_vec(),
        path,
        seed,
        dw: Vec::with_capacity(k),
        z: vec![x0.to_vec()],
        x: vec![x0.to_vec()],
        log_phi: vec![0.0],
    };
    let track = Track {
        z: true,
        x: true,
        log_phi: true,
        eta: false,
    };
    let mut dws = Vec::with_capacity(k);
    let mut states = Vec::with_capacity(k);
    stepper.run_steps(
        &[x0.to_vec()],
        seed,
        path,
        track,
        |_, _, dw| dws.push(dw.to_vec()),
        |_, _, st| states.push((st.z.to_vec(), st.x.to_vec(), st.log_phi)),
    );
    out.dw = dws;
    for (z, x, lp) in states {
        out.z.push(z);
        out.x.push(x);
        out.log_phi.push(lp);
    }
    Ok(out)
}

/// `η₁(t_end)` along the `X` path of a bundle, re-driven by the stored noise.
pub fn variation_flow_along_path(spec: &OperatorSpec, bundle: &PathBundle) -> Result<DMatrix<f64>> {
    let n = spec.n();
    let dt = bundle.grid.dt();
    let e = matrix_exp(spec.a(), dt);
    let mut eta = DMatrix::<f64>::identity(n, n);
    let mut col = vec![0.0; n];
    for k in 0..bundle.grid.steps() {
        let x = &bundle.x[k];
        let mut inc = eta.clone();
        for c in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            spec.drift()
                .add_jacobian_apply(x, eta.column(c).as_slice(), &mut col);
            for r in 0..n {
                inc[(r, c)] += col[r] * dt;
            }
        }
        eta = &e * inc;
    }
    Ok(eta)
}

/// Exact draw of `Z_t^x = e^{tA}x + Q_t^{1/2}ξ`.
pub fn sample_ou_endpoint(
    spec: &OperatorSpec,
    gram: &Gramian,
    x: &[f64],
    rng: &mut impl RngCore,
) -> Vec<f64> {
    let n = spec.n();
    let e = matrix_exp(spec.a(), gram.t());
    let xi = DVector::from_iterator(n, (0..n).map(|_| standard_normal(rng)));
    let mean = e * DVector::from_column_slice(x);
    (mean + gram.factor() * xi).iter().copied().collect()
}

/// Writes bundles as CSV: `path_id,k,t,Z_1..Z_n,X_1..X_n,logPhi`.
pub fn write_paths_csv(bundles: &[PathBundle], out: &mut impl Write) -> io::Result<()> {
    let n = bundles.first().map_or(0, |b| b.x0.len());
    let mut header = vec!["path_id".to_string(), "k".into(), "t".into()];
    header.extend((1..=n).map(|i| format!("Z_{i}")));
    header.extend((1..=n).map(|i| format!("X_{i}")));
    header.push("logPhi".into());
    writeln!(out, "{}", header.join(","))?;
    for b in bundles {
        for (k, t) in b.times().iter().enumerate() {
            let mut row = vec![b.path.to_string(), k.to_string(), format!("{t:?}")];
            row.extend(b.z[k].iter().map(|v| format!("{v:?}")));
            row.extend(b.x[k].iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", b.log_phi[k]));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Truncation order of the deterministic variation flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FlowOrder {
    First = 1,
    Second = 2,
    Third = 3,
}

/// `Y_t` and its derivatives with respect to the start point.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub y: Vec<f64>,
    /// Columns `η_i = ∂Y/∂x_i`.
    pub eta1: DMatrix<f64>,
    /// `η_ij`, flattened as `[(i·n + j)·n + c]`.
    pub eta2: Option<Vec<f64>>,
    /// `η_ijr`, flattened as `[((i·n + j)·n + r)·n + c]`.
    pub eta3: Option<Vec<f64>>,
}

impl FlowState {
    pub fn eta2(&self, i: usize, j: usize) -> Option<&[f64]> {
        let n = self.y.len();
        self.eta2
            .as_ref()
            .map(|v| &v[(i * n + j) * n..(i * n + j + 1) * n])
    }

    pub fn eta3(&self, i: usize, j: usize, r: usize) -> Option<&[f64]> {
        let n = self.y.len();
        let o = ((i * n + j) * n + r) * n;
        self.eta3.as_ref().map(|v| &v[o..o + n])
    }
}

/// Gronwall bound `e^{(‖A‖ + ‖DF‖₀)t}` on `‖η(t)‖`.
pub fn variation_bound(spec: &OperatorSpec, t: f64) -> f64 {
    ((crate::linalg::op_norm(spec.a()) + spec.drift().lipschitz_bound()) * t).exp()
}

/// Classical RK4 for `Ẏ = AY + F(Y)` and the variation equations up to `order`.
pub fn deterministic_flow(
    spec: &OperatorSpec,
    x: &[f64],
    t: f64,
    steps: usize,
    order: FlowOrder,
) -> Result<FlowState> {
    if steps == 0 || !(t >= 0.0) {
        return Err(Error::InvalidArgument(
            "flow needs t ≥ 0 and at least one step".into(),
        ));
    }
    let n = spec.n();
    let sizes = [n, n * n, n * n * n, n * n * n * n];
    let len: usize = sizes[..=order as usize].iter().sum();
    let mut state = vec![0.0; len];
    state[..n].copy_from_slice(x);
    for i in 0..n {
        state[n + i * n + i] = 1.0;
    }
    let rhs = FlowRhs { spec, n, order };
    let h = t / steps as f64;
    let mut k1 = vec![0.0; len];
    let mut k2 = vec![0.0; len];
    let mut k3 = vec![0.0; len];
    let mut k4 = vec![0.0; len];
    let mut tmp = vec![0.0; len];
    for _ in 0..steps {
        rhs.eval(&state, &mut k1);
        axpy(&state, 0.5 * h, &k1, &mut tmp);
        rhs.eval(&tmp, &mut k2);
        axpy(&state, 0.5 * h, &k2, &mut tmp);
        rhs.eval(&tmp, &mut k3);
        axpy(&state, h, &k3, &mut tmp);
        rhs.eval(&tmp, &mut k4);
        for i in 0..len {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let y = state[..n].to_vec();
    // η_i is stored contiguously, i.e. column i of the matrix
    let eta1 = DMatrix::from_column_slice(n, n, &state[n..n + n * n]);
    let off2 = n + n * n;
    let eta2 = (order >= FlowOrder::Second).then(|| state[off2..off2 + sizes[2]].to_vec());
    let off3 = off2 + sizes[2];
    let eta3 = (order >= FlowOrder::Third).then(|| state[off3..off3 + sizes[3]].to_vec());
    Ok(FlowState {
        t,
        y,
        eta1,
        eta2,
        eta3,
    })
}

fn axpy(x: &[f64], a: f64, y: &[f64], out: &mut [f64]) {
    for i in 0..x.len() {
        out[i] = x[i] + a * y[i];
    }
}

struct FlowRhs<'a> {
    spec: &'a OperatorSpec,
    n: usize,
    order: FlowOrder,
}

impl FlowRhs<'_> {
    /// `v̇ = Av + DF(Y)v + (lower-order source terms)` for every tracked variation.
    fn linear(&self, y: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.n;
        let a = self.spec.a();
        for r in 0..n {
            out[r] += (0..n).map(|c| a[(r, c)] * v[c]).sum::<f64>();
        }
        self.spec.drift().add_jacobian_apply(y, v, out);
    }

    fn eval(&self, s: &[f64], out: &mut [f64]) {
        let n = self.n;
        let drift = self.spec.drift();
        out.iter_mut().for_each(|v| *v = 0.0);
        let y = &s[..n];
        let a = self.spec.a();
        drift.eval_into(y, &mut out[..n]);
        for r in 0..n {
            out[r] += (0..n).map(|c| a[(r, c)] * y[c]).sum::<f64>();
        }
        let e1 = |i: usize| &s[n + i * n..n + (i + 1) * n];
        for i in 0..n {
            let o = n + i * n;
            self.linear(y, e1(i), &mut out[o..o + n]);
        }
        if self.order < FlowOrder::Second {
            return;
        }
        let off2 = n + n * n;
        let e2 = |i: usize, j: usize| &s[off2 + (i * n + j) * n..off2 + (i * n + j + 1) * n];
        for i in 0..n {
            for j in 0..n {
                let o = off2 + (i * n + j) * n;
                let dst = &mut out[o..o + n];
                self.linear(y, e2(i, j), dst);
                drift.add_second_apply(y, e1(i), e1(j), dst);
            }
        }
        if self.order < FlowOrder::Third {
            return;
        }
        let off3 = off2 + n * n * n;
        for i in 0..n {
            for j in 0..n {
                for r in 0..n {
                    let o = off3 + ((i * n + j) * n + r) * n;
                    let cur = &s[o..o + n];
                    let dst = &mut out[o..o + n];
                    self.linear(y, cur, dst);
                    drift.add_second_apply(y, e2(i, j), e1(r), dst);
                    drift.add_second_apply(y, e2(i, r), e1(j), dst);
                    drift.add_second_apply(y, e1(i), e2(j, r), dst);
                    drift.add_third_apply(y, e1(i), e1(j), e1(r), dst);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::catalog;
    use crate::rng::sample_rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_drift_paths_coincide() {
        let spec = catalog::kolmogorov_2d(Default::default());
        let grid = PathGrid::new(0.7, 50).unwrap();
        let b = simulate_bundle(&spec, &[0.3, -1.0], grid, 4, 2, Scheme::ExponentialEuler).unwrap();
        assert_eq!(b.x, b.z);
        assert!(b.log_phi.iter().all(|&l| l == 0.0));
        assert_eq!(b.dw.len(), 50);
        assert_eq!(b.z.len(), 51);
    }

    #[test]
    fn bundles_are_reproducible() {
        let spec = catalog::kolmogorov_2d(catalog::reference_drift(0.5));
        let grid = PathGrid::new(0.3, 17).unwrap();
        let a = simulate_bundle(&spec, &[0.1, 0.2], grid, 99, 5, Scheme::ExponentialEuler).unwrap();
        let b = simulate_bundle(&spec, &[0.1, 0.2], grid, 99, 5, Scheme::ExponentialEuler).unwrap();
        assert_eq!(a, b);
        let c = simulate_bundle(&spec, &[0.1, 0.2], grid, 99, 6, Scheme::ExponentialEuler).unwrap();
        assert_ne!(a.dw, c.dw);
    }

    #[test]
    fn exact_scheme_rejects_drift() {
        let spec = catalog::kolmogorov_2d(catalog::reference_drift(0.5));
        assert!(Stepper::for_time(&spec, 1.0, Scheme::ExactGaussian).is_err());
    }

    #[test]
    fn zero_drift_flow_is_the_exponential() {
        let spec = catalog::shift_chain(3);
        let x = [0.5, -1.0, 2.0];
        let f = deterministic_flow(&spec, &x, 1.3, 64, FlowOrder::Third).unwrap();
        let e = matrix_exp(spec.a(), 1.3);
        let ex = &e * DVector::from_column_slice(&x);
        assert!(max_abs_diff(&f.y, ex.as_slice()) < 1e-12);
        assert!((&f.eta1 - &e).abs().max() < 1e-12);
        assert!(f.eta2.unwrap().iter().all(|v| *v == 0.0));
        assert!(f.eta3.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rk4_has_fourth_order_self_convergence() {
        let spec = catalog::kolmogorov_2d(catalog::reference_drift(1.0));
        let x = [0.4, -0.3];
        let reference = deterministic_flow(&spec, &x, 1.0, 4096, FlowOrder::First).unwrap();
        let err = |steps| {
            let f = deterministic_flow(&spec, &x, 1.0, steps, FlowOrder::First).unwrap();
            max_abs_diff(&f.y, &reference.y)
        };
        let ratio = err(8) / err(16);
        assert!((ratio - 16.0).abs() < 2.0, "{ratio}");
    }

    /// Variations agree with central differences of the lower-order quantity.
    #[test]
    fn variations_match_finite_differences() {
        let spec = catalog::kolmogorov_2d(catalog::alternate_drift(1.5));
        let x = [0.2, 0.6];
        let t = 0.8;
        let steps = 400;
        let base = deterministic_flow(&spec, &x, t, steps, FlowOrder::Third).unwrap();
        let h = 1e-4;
        for r in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[r] += h;
            xm[r] -= h;
            let fp = deterministic_flow(&spec, &xp, t, steps, FlowOrder::Second).unwrap();
            let fm = deterministic_flow(&spec, &xm, t, steps, FlowOrder::Second).unwrap();
            for c in 0..2 {
                let fd = (fp.y[c] - fm.y[c]) / (2.0 * h);
                assert!((fd - base.eta1[(c, r)]).abs() < 1e-7);
            }
            for i in 0..2 {
                let fd: Vec<f64> = (0..2)
                    .map(|c| (fp.eta1[(c, i)] - fm.eta1[(c, i)]) / (2.0 * h))
                    .collect();
                assert!(max_abs_diff(&fd, base.eta2(i, r).unwrap()) < 1e-7);
                for j in 0..2 {
                    let fd: Vec<f64> = (0..2)
                        .map(|c| {
                            (fp.eta2(i, j).unwrap()[c] - fm.eta2(i, j).unwrap()[c]) / (2.0 * h)
                        })
                        .collect();
                    let an = base.eta3(i, j, r).unwrap();
                    assert!(max_abs_diff(&fd, an) < 1e-6, "{fd:?} vs {an:?}");
                }
            }
        }
    }

    #[test]
    fn flow_variation_obeys_gronwall() {
        let spec = catalog::kolmogorov_2d(catalog::reference_drift(1.0));
        for t in [0.1, 1.0, 3.0] {
            let f = deterministic_flow(&spec, &[1.0, -2.0], t, 200, FlowOrder::First).unwrap();
            assert!(crate::linalg::op_norm(&f.eta1) <= variation_bound(&spec, t));
        }
    }

    #[test]
    fn path_variation_matches_common_noise_difference() {
        let spec = catalog::kolmogorov_2d(catalog::reference_drift(0.8));
        let grid = PathGrid::new(0.5, 100).unwrap();
        let x = [0.3, 0.1];
        let eps = 1e-6;
        for path in 0..5 {
            let b = simulate_bundle(&spec, &x, grid, 7, path, Scheme::ExponentialEuler).unwrap();
            let eta = variation_flow_along_path(&spec, &b).unwrap();
            for i in 0..2 {
                let mut xp = x;
                xp[i] += eps;
                let bp =
                    simulate_bundle(&spec, &xp, grid, 7, path, Scheme::ExponentialEuler).unwrap();
                for c in 0..2 {
                    let fd = (bp.x[100][c] - b.x[100][c]) / eps;
                    assert!((fd - eta[(c, i)]).abs() < 1e-5);
                }
            }
            assert!(crate::linalg::op_norm(&eta) <= variation_bound(&spec, 0.5) * (1.0 + 1e-6));
        }
    }

    #[test]
    fn stepper_eta_matches_path_variation() {
        let spec = catalog::kolmogorov_2d(catalog::reference_drift(0.8));
        let grid = PathGrid::new(0.5, 64).unwrap();
        let b = simulate_bundle(&spec, &[0.3, 0.1], grid, 7, 3, Scheme::ExponentialEuler).unwrap();
        let eta = variation_flow_along_path(&spec, &b).unwrap();
        let stepper = Stepper::for_grid(&spec, grid, Scheme::ExponentialEuler).unwrap();
        let mut last = Vec::new();
        stepper.run(&[vec![0.3, 0.1]], 7, 3, Track::ALL, |j, _, st| {
            if j == 63 {
                last = st.eta.to_vec();
            }
        });
        for r in 0..2 {
            for c in 0..2 {
                assert!((last[r * 2 + c] - eta[(r, c)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn increments_have_dt_covariance() {
        let spec = catalog::kolmogorov_2d(Default::default());
        let grid = PathGrid::new(0.1, 4).unwrap();
        let dt = grid.dt();
        let stepper = Stepper::for_grid(&spec, grid, Scheme::ExponentialEuler).unwrap();
        let mut cov = [[0.0; 2]; 2];
        let mut count = 0.0_f64;
        for path in 0..20_000 {
            stepper.run_steps(
                &[vec![0.0, 0.0]],
                1,
                path,
                Track::direct(),
                |_, _, dw| {
                    for a in 0..2 {
                        for b in 0..2 {
                            cov[a][b] += dw[a] * dw[b];
                        }
                    }
                    count += 1.0;
                },
                |_, _, _| {},
            );
        }
        let se = dt * (2.0 / count).sqrt();
        assert!((cov[0][0] / count - dt).abs() < 4.0 * se);
        assert!((cov[1][1] / count - dt).abs() < 4.0 * se);
        assert!((cov[0][1] / count).abs() < 4.0 * se);
    }

    #[test]
    fn exact_sampler_moments() {
        let spec = catalog::kolmogorov_2d(Default::default());
        let t = 0.6;
        let g = gramian_of(&spec, t);
        let x = [0.5, -0.25];
        let mean = matrix_exp(spec.a(), t) * DVector::from_column_slice(&x);
        let n = 100_000;
        let mut m = [0.0; 2];
        let mut c = [[0.0; 2]; 2];
        for i in 0..n {
            let mut rng = sample_rng(3, i);
            let s = sample_ou_endpoint(&spec, &g, &x, &mut rng);
            for a in 0..2 {
                m[a] += s[a];
                for b in 0..2 {
                    c[a][b] += (s[a] - mean[a]) * (s[b] - mean[b]);
                }
            }
        }
        let q = g.matrix();
        let nf = n as f64;
        for a in 0..2 {
            let se = (q[(a, a)] / nf).sqrt();
            assert!((m[a] / nf - mean[a]).abs() < 4.0 * se);
            for b in 0..2 {
                let se = ((q[(a, a)] * q[(b, b)] + q[(a, b)].powi(2)) / nf).sqrt();
                assert!((c[a][b] / nf - q[(a, b)]).abs() < 4.0 * se);
            }
        }
        // tiny horizons concentrate at the start point
        let g = gramian_of(&spec, 1e-6);
        let s = sample_ou_endpoint(&spec, &g, &x, &mut sample_rng(1, 0));
        assert!(max_abs_diff(&s, &x) < 1e-2);
    }

    fn gramian_of(spec: &OperatorSpec, t: f64) -> Gramian {
        crate::operator::gramian(spec, t).unwrap()
    }

    #[test]
    fn csv_has_header_and_rows() {
        let spec = catalog::kolmogorov_2d(catalog::reference_drift(0.5));
        let b = simulate_bundle(
            &spec,
            &[0.0, 0.0],
            PathGrid::new(1.0, 2).unwrap(),
            1,
            0,
            Scheme::ExponentialEuler,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&[b], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,k,t,Z_1,Z_2,X_1,X_2,logPhi");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,0,0.0,0.0,0.0,0.0,0.0,0.0"));
    }
}
