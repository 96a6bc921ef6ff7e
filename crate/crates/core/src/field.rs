//! Scalar test fields `f : ℝⁿ → ℝ` evaluated through handles.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type TimeEvalFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Axis-aligned evaluation box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument(
                "box bounds must satisfy lo <= hi".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    /// `[−r, r]ⁿ`.
    pub fn cube(n: usize, r: f64) -> Self {
        Self {
            lo: vec![-r; n],
            hi: vec![r; n],
        }
    }

    /// The default evaluation domain `[−5, 5]ⁿ`.
    pub fn default_for(n: usize) -> Self {
        Self::cube(n, 5.0)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect()
    }
}

/// A deterministic field with an optional analytic gradient.
#[derive(Clone)]
pub struct ScalarField {
    label: String,
    domain: DomainBox,
    eval: Arc<EvalFn>,
    grad: Option<Arc<GradFn>>,
    sup_bound: Option<f64>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("label", &self.label)
            .field("domain", &self.domain)
            .field("sup_bound", &self.sup_bound)
            .finish()
    }
}

impl ScalarField {
    pub fn new(
        label: impl Into<String>,
        domain: DomainBox,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            domain,
            eval: Arc::new(eval),
            grad: None,
            sup_bound: None,
        }
    }

    pub fn with_gradient(
        mut self,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    /// Records a known bound on `sup |f|` over ℝⁿ.
    pub fn with_sup_bound(mut self, bound: f64) -> Self {
        self.sup_bound = Some(bound);
        self
    }

    pub fn with_domain(mut self, domain: DomainBox) -> Self {
        self.domain = domain;
        self
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::new(format!("const({c})"), DomainBox::default_for(n), move |_| c)
            .with_gradient(|_, g| g.iter_mut().for_each(|v| *v = 0.0))
            .with_sup_bound(c.abs())
    }

    /// `cos(⟨w, x⟩)`.
    pub fn cosine(w: Vec<f64>) -> Self {
        TrigField::cosine(w).to_field()
    }

    /// `min(|x_i|, 1)^θ`, a bounded field that is exactly θ-Hölder at `x_i = 0`.
    pub fn cusp(n: usize, coord: usize, theta: f64) -> Self {
        Self::new(
            format!("cusp(x{}, {theta})", coord + 1),
            DomainBox::default_for(n),
            move |x| x[coord].abs().min(1.0).powf(theta),
        )
        .with_sup_bound(1.0)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    /// Writes `Df(x)` into `out`; `None` when no gradient was supplied.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> Option<()> {
        self.grad.as_ref().map(|g| g(x, out))
    }

    /// `c · f`.
    pub fn scaled(&self, c: f64) -> Self {
        let inner = self.clone();
        let mut out = Self::new(
            format!("{c}*{}", self.label),
            self.domain.clone(),
            move |x| c * inner.eval(x),
        );
        if self.grad.is_some() {
            let inner = self.clone();
            out = out.with_gradient(move |x, g| {
                inner.gradient(x, g);
                g.iter_mut().for_each(|v| *v *= c);
            });
        }
        out.sup_bound = self.sup_bound.map(|b| b * c.abs());
        out
    }
}

/// One term `amplitude · cos(⟨w, x⟩ + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub frequency: Vec<f64>,
    pub phase: f64,
}

/// `c + Σ aⱼ cos(⟨wⱼ, x⟩ + φⱼ)`: closed under Gaussian semigroups, so it serves
/// as an exactly solvable test family when `F ≡ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigField {
    pub constant: f64,
    pub terms: Vec<TrigTerm>,
    pub dim: usize,
}

impl TrigField {
    pub fn cosine(w: Vec<f64>) -> Self {
        Self {
            constant: 0.0,
            dim: w.len(),
            terms: vec![TrigTerm {
                amplitude: 1.0,
                frequency: w,
                phase: 0.0,
            }],
        }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self {
            constant: c,
            terms: Vec::new(),
            dim: n,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            constant: c * self.constant,
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .map(|t| TrigTerm {
                    amplitude: c * t.amplitude,
                    ..t.clone()
                })
                .collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant
            + self
                .terms
                .iter()
                .map(|t| t.amplitude * (dot(&t.frequency, x) + t.phase).cos())
                .sum::<f64>()
    }

    pub fn sup_bound(&self) -> f64 {
        self.constant.abs() + self.terms.iter().map(|t| t.amplitude.abs()).sum::<f64>()
    }

    pub fn label(&self) -> String {
        if self.terms.is_empty() {
            return format!("const({})", self.constant);
        }
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| format!("{}*cos(<{:?},x>+{})", t.amplitude, t.frequency, t.phase))
            .collect();
        if self.constant == 0.0 {
            parts.join("+")
        } else {
            format!("{}+{}", self.constant, parts.join("+"))
        }
    }

    pub fn to_field(&self) -> ScalarField {
        let me = self.clone();
        let grad_me = self.clone();
        ScalarField::new(self.label(), DomainBox::default_for(self.dim), move |x| {
            me.eval(x)
        })
        .with_gradient(move |x, g| {
            g.iter_mut().for_each(|v| *v = 0.0);
            for t in &grad_me.terms {
                let s = -t.amplitude * (dot(&t.frequency, x) + t.phase).sin();
                for (gi, wi) in g.iter_mut().zip(&t.frequency) {
                    *gi += s * wi;
                }
            }
        })
        .with_sup_bound(self.sup_bound())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A time-indexed field `H(s, x)`.
#[derive(Clone)]
pub struct TimeField {
    label: String,
    eval: Arc<TimeEvalFn>,
    sup_bound: Option<f64>,
    dim: usize,
}

impl fmt::Debug for TimeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeField")
            .field("label", &self.label)
            .finish()
    }
}

impl TimeField {
    pub fn new(
        label: impl Into<String>,
        dim: usize,
        eval: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            eval: Arc::new(eval),
            sup_bound: None,
            dim,
        }
    }

    pub fn with_sup_bound(mut self, bound: f64) -> Self {
        self.sup_bound = Some(bound);
        self
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::new(format!("const({c})"), n, move |_, _| c).with_sup_bound(c.abs())
    }

    /// `H(s, x) = f(x)` for every `s`.
    pub fn stationary(f: ScalarField) -> Self {
        let bound = f.sup_bound();
        let dim = f.dim();
        let mut out = Self::new(f.label().to_string(), dim, move |_, x| f.eval(x));
        out.sup_bound = bound;
        out
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    /// The slice `H(s, ·)`.
    pub fn at(&self, s: f64) -> ScalarField {
        let inner = self.eval.clone();
        let mut out = ScalarField::new(
            format!("{}@{s}", self.label),
            DomainBox::default_for(self.dim),
            move |x| inner(s, x),
        );
        out.sup_bound = self.sup_bound;
        out
    }

    pub fn eval(&self, s: f64, x: &[f64]) -> f64 {
        (self.eval)(s, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trig_gradient_is_consistent() {
        let f = TrigField {
            constant: 0.5,
            dim: 2,
            terms: vec![
                TrigTerm {
                    amplitude: 1.5,
                    frequency: vec![0.3, -1.0],
                    phase: 0.2,
                },
                TrigTerm {
                    amplitude: -0.4,
                    frequency: vec![2.0, 0.5],
                    phase: 0.0,
                },
            ],
        }
        .to_field();
        let x = [0.7, -0.3];
        let mut g = [0.0; 2];
        f.gradient(&x, &mut g).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            assert!(((f.eval(&xp) - f.eval(&xm)) / (2.0 * h) - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn scaling_is_exact_for_powers_of_two() {
        let f = ScalarField::cosine(vec![1.0, 0.3]);
        let g = f.scaled(2.0);
        for x in [[0.1, 0.2], [3.0, -1.0]] {
            assert_eq!(g.eval(&x), 2.0 * f.eval(&x));
        }
        assert_eq!(g.sup_bound(), Some(2.0));
    }

    #[test]
    fn box_membership() {
        let b = DomainBox::cube(2, 1.0);
        assert!(b.contains(&[1.0, -1.0]));
        assert!(!b.contains(&[1.0001, 0.0]));
        assert!(DomainBox::new(vec![1.0], vec![0.0]).is_err());
    }
}
