//! JSON run configuration.

use kolmogorov::field::{DomainBox, ScalarField, TrigField, TrigTerm};
use kolmogorov::operator::{
    decompose, KalmanDecomposition, OperatorSpec, TanhTerm, DEFAULT_RANK_TOL,
};
use kolmogorov::semigroup::Method;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Default Monte Carlo paths per estimate.
pub const DEFAULT_BUDGET: usize = 10_000;

/// The whole document. Every section other than `operator` is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub operator: OperatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gramian: Option<GramianConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

/// `Q₀` and `A` as row-major nested arrays, `F` as a list of tanh ridges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub q0: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drift: Vec<TanhTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
}

/// A test field. Coordinates are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Constant {
        value: f64,
    },
    /// `amplitude · cos(⟨frequency, x⟩ + phase)`.
    Cosine {
        frequency: Vec<f64>,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `min(|x_i|, 1)^θ`.
    Cusp {
        coordinate: usize,
        theta: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl FieldConfig {
    pub fn build(&self, n: usize) -> Result<ScalarField, CliError> {
        match self {
            FieldConfig::Constant { value } => Ok(ScalarField::constant(n, *value)),
            FieldConfig::Cosine { .. } => Ok(self.trig(n)?.to_field()),
            FieldConfig::Cusp { coordinate, theta } => {
                if *coordinate >= n {
                    return Err(CliError::Config(format!(
                        "cusp coordinate {coordinate} out of range for n = {n}"
                    )));
                }
                if !(*theta > 0.0 && *theta < 1.0) {
                    return Err(CliError::Config(format!(
                        "cusp exponent must lie in (0, 1), got {theta}"
                    )));
                }
                Ok(ScalarField::cusp(n, *coordinate, *theta))
            }
        }
    }

    /// The field as a trigonometric sum, when it is one.
    pub fn trig(&self, n: usize) -> Result<TrigField, CliError> {
        match self {
            FieldConfig::Constant { value } => Ok(TrigField::constant(n, *value)),
            FieldConfig::Cosine {
                frequency,
                amplitude,
                phase,
            } => {
                if frequency.len() != n {
                    return Err(CliError::Config(format!(
                        "cosine frequency has length {}, expected {n}",
                        frequency.len()
                    )));
                }
                Ok(TrigField {
                    constant: 0.0,
                    dim: n,
                    terms: vec![TrigTerm {
                        amplitude: *amplitude,
                        frequency: frequency.clone(),
                        phase: *phase,
                    }],
                })
            }
            FieldConfig::Cusp { .. } => Err(CliError::Config(
                "a cusp field has no trigonometric form".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramianConfig {
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub field: FieldConfig,
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Multi-indices (zero-based, with repetition) of derivatives to estimate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derivatives: Vec<Vec<usize>>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Direct]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub field: FieldConfig,
    pub lambda: f64,
    pub points: Vec<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_nodes")]
    pub nodes_per_panel: usize,
    /// Difference step for the residual `λu − 𝒜u − f`; no residual when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parabolic: Option<ParabolicConfig>,
}

fn default_tol() -> f64 {
    1e-4
}

fn default_nodes() -> usize {
    4
}

/// `v(t) = P_t g + ∫₀ᵗ P_{t−s} H ds` with time-constant `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParabolicConfig {
    pub g: FieldConfig,
    pub h: FieldConfig,
    pub times: Vec<f64>,
}

/// Names of the checks the `verify` command can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    GramianScaling,
    ExponentialBlocks,
    GaussianMoments,
    FlowMoments,
    Girsanov,
    Smoothing,
    HolderStability,
    Schauder,
    Parabolic,
}

impl CheckName {
    /// Stable sub-seed index, independent of which other checks run.
    pub fn seed_index(self) -> u64 {
        self as u64 + 1
    }
}

fn log_grid(a: f64, b: f64, m: usize) -> Vec<f64> {
    (0..m)
        .map(|j| a * (b / a).powf(j as f64 / (m - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub checks: Vec<CheckName>,
    /// Times for the Gramian exponents.
    pub t_grid: Vec<f64>,
    /// Times for the block-exponential exponents.
    pub s_grid: Vec<f64>,
    /// Tolerance of deterministic exponents.
    pub tolerance: f64,
    /// Required goodness of fit for the Gramian exponents.
    pub min_r2: f64,
    pub gaussian: MomentCheckConfig,
    pub flow: MomentCheckConfig,
    pub girsanov: GirsanovCheckConfig,
    pub smoothing: SmoothingCheckConfig,
    pub holder: HolderCheckConfig,
    pub schauder: SchauderCheckConfig,
    pub parabolic: ParabolicCheckConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            checks: vec![CheckName::GramianScaling, CheckName::ExponentialBlocks],
            t_grid: log_grid(1e-4, 1e-1, 7),
            s_grid: log_grid(1e-4, 1e-1, 7),
            tolerance: 0.05,
            min_r2: 0.999,
            gaussian: MomentCheckConfig {
                tolerance: 0.1,
                ..MomentCheckConfig::default()
            },
            flow: MomentCheckConfig::default(),
            girsanov: GirsanovCheckConfig::default(),
            smoothing: SmoothingCheckConfig::default(),
            holder: HolderCheckConfig::default(),
            schauder: SchauderCheckConfig::default(),
            parabolic: ParabolicCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentCheckConfig {
    pub q: f64,
    pub times: Vec<f64>,
    /// Start point; the origin when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
}

impl Default for MomentCheckConfig {
    fn default() -> Self {
        Self {
            q: 2.0,
            times: log_grid(1e-3, 1e-1, 5),
            start: None,
            tolerance: 0.15,
            paths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GirsanovCheckConfig {
    /// Fields; `cos(x₁ + x₂/2)`-type defaults are chosen per dimension when empty.
    pub fields: Vec<FieldConfig>,
    pub times: Vec<f64>,
    /// Start points; `0.3·e₁` when empty.
    pub points: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
}

impl Default for GirsanovCheckConfig {
    fn default() -> Self {
        Self {
            fields: Vec::new(),
            times: vec![0.1, 0.5, 1.0],
            points: Vec::new(),
            paths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingCheckConfig {
    /// Defaults to the cusp `min(|x₁|,1)^θ`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldConfig>,
    pub theta: f64,
    /// Zero-based multi-index.
    pub index: Vec<usize>,
    pub times: Vec<f64>,
    /// Defaults to `0` and `±0.1·e₁`.
    pub points: Vec<Vec<f64>>,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
}

impl Default for SmoothingCheckConfig {
    fn default() -> Self {
        Self {
            field: None,
            theta: 0.5,
            index: vec![0, 0],
            times: log_grid(1e-2, 1e-1, 5),
            points: Vec::new(),
            tolerance: 0.25,
            paths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HolderCheckConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldConfig>,
    pub theta: f64,
    pub times: Vec<f64>,
    pub probes: usize,
    pub paths: usize,
    /// Half-width of the probing box.
    pub radius: f64,
}

impl Default for HolderCheckConfig {
    fn default() -> Self {
        Self {
            field: None,
            theta: 0.5,
            times: vec![0.05, 0.1, 0.5, 1.0, 2.0],
            probes: 256,
            paths: 200,
            radius: 1.5,
        }
    }
}

/// Which representation of `u` the ratio check samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Oracle,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchauderCheckConfig {
    pub pipeline: Pipeline,
    pub theta: f64,
    pub lambda: f64,
    pub probes: usize,
    pub paths: usize,
    pub nodes_per_panel: usize,
    pub tol: f64,
}

impl Default for SchauderCheckConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Oracle,
            theta: 0.5,
            lambda: 1.0,
            probes: 512,
            paths: 256,
            nodes_per_panel: 6,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParabolicCheckConfig {
    pub theta: f64,
    pub times: Vec<f64>,
    pub probes: usize,
    pub nodes_per_panel: usize,
}

impl Default for ParabolicCheckConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            times: vec![0.1, 0.5, 1.0],
            probes: 512,
            nodes_per_panel: 6,
        }
    }
}

/// A parsed configuration together with its validated operator.
#[derive(Debug, Clone)]
pub struct Validated {
    pub config: RunConfig,
    pub spec: OperatorSpec,
    pub dec: KalmanDecomposition,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!(
            "{name} must be a non-empty rectangular array of rows"
        )));
    }
    Ok(DMatrix::from_row_iterator(
        r,
        c,
        rows.iter().flatten().copied(),
    ))
}

fn check_times(name: &str, times: &[f64]) -> Result<(), CliError> {
    if times.is_empty() || times.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(CliError::Config(format!(
            "{name} must be a non-empty list of positive times"
        )));
    }
    Ok(())
}

fn check_increasing(name: &str, times: &[f64]) -> Result<(), CliError> {
    check_times(name, times)?;
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Config(format!(
            "{name} must be strictly increasing"
        )));
    }
    Ok(())
}

fn check_points(name: &str, points: &[Vec<f64>], n: usize) -> Result<(), CliError> {
    if points.is_empty() {
        return Err(CliError::Config(format!(
            "{name} must list at least one point"
        )));
    }
    if let Some(p) = points
        .iter()
        .find(|p| p.len() != n || p.iter().any(|v| !v.is_finite()))
    {
        return Err(CliError::Config(format!(
            "{name}: point {p:?} must have {n} finite coordinates"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Builds the operator, decomposes it and checks every section.
    pub fn validate(self) -> Result<Validated, CliError> {
        let op = &self.operator;
        let spec = OperatorSpec::new(
            matrix("q0", &op.q0)?,
            matrix("a", &op.a)?,
            kolmogorov::operator::DriftField::new(op.drift.clone()),
        )?;
        let tol = op.rank_tol.unwrap_or(DEFAULT_RANK_TOL);
        if !(tol > 0.0) {
            return Err(CliError::Config("rank_tol must be positive".into()));
        }
        let dec = decompose(&spec, tol)?;
        let n = spec.n();
        if self.budget == Some(0) || self.budget == Some(1) {
            return Err(CliError::Config("budget must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be positive".into()));
        }
        if let Some(g) = &self.gramian {
            check_times("gramian.times", &g.times)?;
        }
        if let Some(e) = &self.evaluate {
            e.field.build(n)?;
            check_times("evaluate.times", &e.times)?;
            check_points("evaluate.points", &e.points, n)?;
            if e.methods.is_empty() {
                return Err(CliError::Config(
                    "evaluate.methods must not be empty".into(),
                ));
            }
            if e.derivatives
                .iter()
                .any(|d| d.is_empty() || d.len() > 3 || d.iter().any(|&i| i >= n))
            {
                return Err(CliError::Config(
                    "evaluate.derivatives entries must list one to three zero-based coordinates"
                        .into(),
                ));
            }
        }
        if let Some(s) = &self.solve {
            s.field.build(n)?;
            check_points("solve.points", &s.points, n)?;
            if !(s.lambda > 0.0) || !(s.tol > 0.0) || s.nodes_per_panel == 0 {
                return Err(CliError::Config(
                    "solve needs lambda > 0, tol > 0 and nodes_per_panel >= 1".into(),
                ));
            }
            if matches!(s.residual_step, Some(h) if !(h > 0.0)) {
                return Err(CliError::Config(
                    "solve.residual_step must be positive".into(),
                ));
            }
            if let Some(p) = &s.parabolic {
                p.g.build(n)?;
                p.h.build(n)?;
                check_times("solve.parabolic.times", &p.times)?;
            }
        }
        if let Some(v) = &self.verify {
            v.validate(n, &spec)?;
        }
        Ok(Validated {
            config: self,
            spec,
            dec,
        })
    }
}

impl VerifyConfig {
    fn validate(&self, n: usize, spec: &OperatorSpec) -> Result<(), CliError> {
        check_increasing("verify.t_grid", &self.t_grid)?;
        check_increasing("verify.s_grid", &self.s_grid)?;
        for (name, m) in [
            ("verify.gaussian", &self.gaussian),
            ("verify.flow", &self.flow),
        ] {
            check_increasing(&format!("{name}.times"), &m.times)?;
            if !(m.q > 0.0) {
                return Err(CliError::Config(format!("{name}.q must be positive")));
            }
            if let Some(s) = &m.start {
                check_points(&format!("{name}.start"), std::slice::from_ref(s), n)?;
            }
        }
        check_times("verify.girsanov.times", &self.girsanov.times)?;
        for f in &self.girsanov.fields {
            f.build(n)?;
        }
        if !self.girsanov.points.is_empty() {
            check_points("verify.girsanov.points", &self.girsanov.points, n)?;
        }
        let sm = &self.smoothing;
        if let Some(f) = &sm.field {
            f.build(n)?;
        }
        check_increasing("verify.smoothing.times", &sm.times)?;
        if sm.index.is_empty() || sm.index.len() > 3 || sm.index.iter().any(|&i| i >= n) {
            return Err(CliError::Config(
                "verify.smoothing.index must list one to three coordinates".into(),
            ));
        }
        if !sm.points.is_empty() {
            check_points("verify.smoothing.points", &sm.points, n)?;
        }
        if let Some(f) = &self.holder.field {
            f.build(n)?;
        }
        check_increasing("verify.holder.times", &self.holder.times)?;
        if !(self.holder.radius > 0.0) || self.holder.probes == 0 || self.holder.paths < 2 {
            return Err(CliError::Config(
                "verify.holder needs radius > 0, probes >= 1, paths >= 2".into(),
            ));
        }
        let s = &self.schauder;
        if s.probes == 0
            || s.paths < 2
            || s.nodes_per_panel == 0
            || !(s.lambda > 0.0)
            || !(s.tol > 0.0)
        {
            return Err(CliError::Config(
                "verify.schauder budgets must be positive".into(),
            ));
        }
        if self.checks.contains(&CheckName::Schauder)
            && s.pipeline == Pipeline::Oracle
            && !spec.drift().is_zero()
        {
            return Err(CliError::Config(
                "the oracle Schauder pipeline requires an operator without drift".into(),
            ));
        }
        if self.checks.contains(&CheckName::Parabolic) && !spec.drift().is_zero() {
            return Err(CliError::Config(
                "the parabolic ratio check requires an operator without drift".into(),
            ));
        }
        check_times("verify.parabolic.times", &self.parabolic.times)?;
        Ok(())
    }
}

/// Default smoothing and Hölder field: `min(|x₁|, 1)^θ`.
pub fn default_cusp(n: usize, theta: f64) -> ScalarField {
    ScalarField::cusp(n, 0, theta)
}

/// `[−r, r]ⁿ`.
pub fn probe_box(n: usize, r: f64) -> DomainBox {
    DomainBox::cube(n, r)
}
