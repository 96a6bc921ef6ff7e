//! The `kolmo` subcommands, each producing tables.

use kolmogorov::field::{ScalarField, TimeField};
use kolmogorov::operator::Gramian;
use kolmogorov::rng::derive_seed;
use kolmogorov::semigroup::{
    derivative_estimate, elliptic_residual, evaluate, solve_elliptic, solve_parabolic,
    QuadratureScheme,
};
use kolmogorov::verify::{self, CheckReport, SchauderBudget};
use rayon::prelude::*;

use crate::config::{
    default_cusp, probe_box, CheckName, EvaluateConfig, Pipeline, SolveConfig, Validated,
    VerifyConfig,
};
use crate::error::CliError;
use crate::output::{Cell, Table};

/// Settings shared by every subcommand after flags override the file.
#[derive(Debug, Clone, Copy)]
pub struct RunSettings {
    pub seed: u64,
    pub budget: usize,
}

fn coordinate_columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn header<'a>(fixed: &[&'a str], coords: &'a [String], tail: &[&'a str]) -> Vec<&'a str> {
    fixed
        .iter()
        .copied()
        .chain(coords.iter().map(String::as_str))
        .chain(tail.iter().copied())
        .collect()
}

fn one_based(indices: &[usize]) -> String {
    indices
        .iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Kalman structure: one row per block.
pub fn analyze(v: &Validated, s: &RunSettings) -> Vec<Table> {
    let dec = &v.dec;
    let mut t = Table::new(
        "analyze",
        &[
            "seed",
            "n",
            "p_tilde",
            "k",
            "block",
            "dim",
            "coordinates",
            "metric_exponent",
            "metric",
        ],
    );
    let exps = dec.metric_exponents();
    for (h, b) in dec.blocks().iter().enumerate() {
        let coords: Vec<usize> = (0..dec.n()).filter(|&i| dec.block_of(i) == h).collect();
        t.push(vec![
            s.seed.into(),
            dec.n().into(),
            v.spec.p_tilde().into(),
            dec.k().into(),
            h.into(),
            b.dim().into(),
            one_based(&coords).into(),
            exps[h].into(),
            dec.metric_description().into(),
        ]);
    }
    vec![t]
}

/// `G(t)` entries in long format plus whitened coordinate norms.
pub fn gramian(v: &Validated, s: &RunSettings) -> Result<Vec<Table>, CliError> {
    let times = v
        .config
        .gramian
        .as_ref()
        .map_or_else(|| vec![1.0], |g| g.times.clone());
    let n = v.spec.n();
    let mut entries = Table::new("gramian", &["seed", "t", "i", "j", "value"]);
    let mut whitened = Table::new("whitened", &["seed", "t", "i", "block", "whitened_norm"]);
    for &t in &times {
        let g = Gramian::new(&v.spec, &v.dec, t)?;
        for i in 0..n {
            for j in 0..n {
                entries.push(vec![
                    s.seed.into(),
                    t.into(),
                    (i + 1).into(),
                    (j + 1).into(),
                    g.matrix()[(i, j)].into(),
                ]);
            }
        }
        for i in 0..n {
            whitened.push(vec![
                s.seed.into(),
                t.into(),
                (i + 1).into(),
                v.dec.block_of(i).into(),
                g.whitened_direction_norm(i)?.into(),
            ]);
        }
    }
    Ok(vec![entries, whitened])
}

/// Monte Carlo `P_t f(x)` and derivative estimates.
pub fn evaluate_cmd(v: &Validated, s: &RunSettings) -> Result<Vec<Table>, CliError> {
    let cfg: &EvaluateConfig = v
        .config
        .evaluate
        .as_ref()
        .ok_or_else(|| CliError::Config("the configuration has no evaluate section".into()))?;
    let n = v.spec.n();
    let f = cfg.field.build(n)?;
    let coords = coordinate_columns("x", n);
    let mut t = Table::new(
        "evaluate",
        &header(
            &["seed", "quantity", "method", "t", "point"],
            &coords,
            &["mean", "stderr", "n_paths"],
        ),
    );
    let mut k = 0u64;
    for &time in &cfg.times {
        for (p, x) in cfg.points.iter().enumerate() {
            let row_head = |quantity: String, method: String| {
                let mut row: Vec<Cell> = vec![
                    s.seed.into(),
                    quantity.into(),
                    method.into(),
                    time.into(),
                    (p + 1).into(),
                ];
                row.extend(x.iter().map(|&c| Cell::from(c)));
                row
            };
            for &m in &cfg.methods {
                let e = evaluate(&v.spec, &f, time, x, s.budget, derive_seed(s.seed, k), m)?;
                k += 1;
                let mut row = row_head("value".into(), m.to_string());
                row.extend([e.mean.into(), e.stderr.into(), e.n_paths.into()]);
                t.push(row);
            }
            for index in &cfg.derivatives {
                let e = derivative_estimate(
                    &v.spec,
                    &v.dec,
                    &f,
                    time,
                    x,
                    index,
                    s.budget,
                    derive_seed(s.seed, k),
                )?;
                k += 1;
                let label: Vec<String> = index.iter().map(|i| (i + 1).to_string()).collect();
                let mut row = row_head(format!("D{}", label.join("")), "direct".into());
                row.extend([e.mean.into(), e.stderr.into(), e.n_paths.into()]);
                t.push(row);
            }
        }
    }
    Ok(vec![t])
}

fn sup_of(f: &ScalarField) -> f64 {
    f.sup_bound().unwrap_or(1.0)
}

/// Resolvent and parabolic solutions at the configured points.
pub fn solve(v: &Validated, s: &RunSettings) -> Result<Vec<Table>, CliError> {
    let cfg: &SolveConfig = v
        .config
        .solve
        .as_ref()
        .ok_or_else(|| CliError::Config("the configuration has no solve section".into()))?;
    let n = v.spec.n();
    let f = cfg.field.build(n)?;
    let coords = coordinate_columns("x", n);
    let mut t = Table::new(
        "solve",
        &header(
            &["seed", "problem", "lambda", "t", "point"],
            &coords,
            &["mean", "stderr", "n_paths", "bias_bound"],
        ),
    );
    let scheme = QuadratureScheme::elliptic(
        cfg.lambda,
        sup_of(&f),
        cfg.tol,
        cfg.nodes_per_panel,
        s.budget,
    )?;
    // truncation plus quadrature error of the time integral
    let bias =
        scheme.tail_bound(cfg.lambda, sup_of(&f)) + scheme.kernel_error(cfg.lambda) * sup_of(&f);
    let mut k = 0u64;
    let mut next_seed = || {
        k += 1;
        derive_seed(s.seed, k - 1)
    };
    for (p, x) in cfg.points.iter().enumerate() {
        let head = |problem: &str, t: Option<f64>| {
            let mut row: Vec<Cell> = vec![
                s.seed.into(),
                problem.into(),
                cfg.lambda.into(),
                t.into(),
                (p + 1).into(),
            ];
            row.extend(x.iter().map(|&c| Cell::from(c)));
            row
        };
        let u = solve_elliptic(&v.spec, &f, cfg.lambda, x, &scheme, next_seed())?;
        let mut row = head("elliptic", None);
        row.extend([
            u.mean.into(),
            u.stderr.into(),
            u.n_paths.into(),
            bias.into(),
        ]);
        t.push(row);
        if let Some(eps) = cfg.residual_step {
            let r = elliptic_residual(&v.spec, &f, cfg.lambda, x, eps, &scheme, next_seed())?;
            let mut row = head("residual", None);
            row.extend([
                r.value.into(),
                r.stderr.into(),
                s.budget.into(),
                (r.fd_error + r.tail).into(),
            ]);
            t.push(row);
        }
    }
    if let Some(par) = &cfg.parabolic {
        let g = par.g.build(n)?;
        let h_field = par.h.build(n)?;
        let h_sup = sup_of(&h_field);
        let h = TimeField::stationary(h_field);
        for &time in &par.times {
            let scheme = QuadratureScheme::on_interval(
                time,
                kolmogorov::semigroup::TIME_FLOOR,
                cfg.nodes_per_panel,
                s.budget,
            )?;
            for (p, x) in cfg.points.iter().enumerate() {
                let e = solve_parabolic(&v.spec, &g, &h, time, x, &scheme, next_seed())?;
                let mut row: Vec<Cell> = vec![
                    s.seed.into(),
                    "parabolic".into(),
                    Cell::Empty,
                    time.into(),
                    (p + 1).into(),
                ];
                row.extend(x.iter().map(|&c| Cell::from(c)));
                let bias = scheme.kernel_error(0.0) * h_sup;
                row.extend([
                    e.mean.into(),
                    e.stderr.into(),
                    e.n_paths.into(),
                    bias.into(),
                ]);
                t.push(row);
            }
        }
    }
    Ok(vec![t])
}

fn unit(n: usize, i: usize, scale: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = scale;
    e
}

fn run_check(
    v: &Validated,
    cfg: &VerifyConfig,
    check: CheckName,
    s: &RunSettings,
) -> Result<Vec<CheckReport>, CliError> {
    let spec = &v.spec;
    let dec = &v.dec;
    let n = spec.n();
    let seed = derive_seed(s.seed, check.seed_index());
    let paths = |p: Option<usize>| p.unwrap_or(s.budget);
    let reports = match check {
        CheckName::GramianScaling => {
            verify::check_gramian_scaling(spec, dec, &cfg.t_grid, cfg.tolerance)?
                .into_iter()
                .map(|r| r.with_min_r2(cfg.min_r2))
                .collect()
        }
        CheckName::ExponentialBlocks => {
            verify::check_exponential_blocks(spec, dec, &cfg.s_grid, cfg.tolerance)?
        }
        CheckName::GaussianMoments => {
            let m = &cfg.gaussian;
            verify::check_gaussian_block_moments(
                spec,
                dec,
                m.q,
                &m.times,
                paths(m.paths),
                seed,
                m.tolerance,
            )?
        }
        CheckName::FlowMoments => {
            let m = &cfg.flow;
            let x = m.start.clone().unwrap_or_else(|| vec![0.0; n]);
            verify::check_flow_moments(
                spec,
                dec,
                &x,
                m.q,
                &m.times,
                paths(m.paths),
                seed,
                m.tolerance,
            )?
        }
        CheckName::Girsanov => {
            let g = &cfg.girsanov;
            let fields: Vec<ScalarField> = if g.fields.is_empty() {
                let mut w = unit(n, 0, 1.0);
                if n > 1 {
                    w[1] = 0.5;
                }
                vec![
                    ScalarField::cosine(w),
                    ScalarField::cosine(unit(n, n - 1, 0.5)),
                ]
            } else {
                g.fields
                    .iter()
                    .map(|f| f.build(n))
                    .collect::<Result<_, _>>()?
            };
            let points = if g.points.is_empty() {
                vec![unit(n, 0, 0.3)]
            } else {
                g.points.clone()
            };
            let mut out = Vec::new();
            let mut k = 0u64;
            for f in &fields {
                for &t in &g.times {
                    for (p, x) in points.iter().enumerate() {
                        let mut r = verify::check_girsanov_consistency(
                            spec,
                            f,
                            t,
                            x,
                            paths(g.paths),
                            derive_seed(seed, k),
                        )?;
                        k += 1;
                        if points.len() > 1 {
                            r.name = format!("{}[x={}]", r.name, p + 1);
                        }
                        out.push(r);
                    }
                }
            }
            out
        }
        CheckName::Smoothing => {
            let m = &cfg.smoothing;
            let f = match &m.field {
                Some(f) => f.build(n)?,
                None => default_cusp(n, m.theta),
            };
            let points = if m.points.is_empty() {
                vec![unit(n, 0, -0.1), vec![0.0; n], unit(n, 0, 0.1)]
            } else {
                m.points.clone()
            };
            vec![verify::check_smoothing_rate(
                spec,
                dec,
                &f,
                &m.index,
                m.theta,
                &m.times,
                &points,
                paths(m.paths),
                seed,
                m.tolerance,
            )?]
        }
        CheckName::HolderStability => {
            let m = &cfg.holder;
            let f = match &m.field {
                Some(f) => f.build(n)?,
                None => default_cusp(n, m.theta),
            }
            .with_domain(probe_box(n, m.radius));
            vec![verify::check_holder_stability(
                spec, dec, &f, m.theta, &m.times, m.probes, m.paths, seed,
            )?]
        }
        CheckName::Schauder => {
            let m = &cfg.schauder;
            let budget = SchauderBudget {
                probes: m.probes,
                paths: m.paths,
                nodes_per_panel: m.nodes_per_panel,
                tol: m.tol,
            };
            let family = verify::trig_family(n);
            match m.pipeline {
                Pipeline::Oracle => verify::check_schauder_ratio_oracle(
                    spec, dec, &family, m.theta, m.lambda, &budget, seed,
                )?,
                Pipeline::MonteCarlo => {
                    let fields: Vec<ScalarField> = family.iter().map(|f| f.to_field()).collect();
                    verify::check_schauder_ratio(
                        spec, dec, &fields, m.theta, m.lambda, &budget, seed,
                    )?
                }
            }
        }
        CheckName::Parabolic => {
            let m = &cfg.parabolic;
            let budget = SchauderBudget {
                probes: m.probes,
                paths: 0,
                nodes_per_panel: m.nodes_per_panel,
                tol: 0.0,
            };
            verify::check_parabolic_ratio_oracle(
                spec,
                dec,
                &verify::trig_family(n),
                m.theta,
                &m.times,
                &budget,
                seed,
            )?
        }
    };
    Ok(reports)
}

/// Runs the selected checks in parallel; reports are ordered by check.
pub fn verify_cmd(
    v: &Validated,
    s: &RunSettings,
) -> Result<(Vec<Table>, Vec<CheckReport>), CliError> {
    let cfg = v.config.verify.clone().unwrap_or_default();
    let mut checks = cfg.checks.clone();
    checks.sort();
    checks.dedup();
    let per_check = checks
        .par_iter()
        .map(|&c| run_check(v, &cfg, c, s))
        .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<CheckReport> = per_check.into_iter().flatten().collect();

    let mut summary = Table::new(
        "verify_reports",
        &[
            "seed",
            "name",
            "kind",
            "expected",
            "measured",
            "tolerance",
            "r2",
            "pass",
            "budgets",
            "note",
        ],
    );
    let mut tables = Table::new("verify_tables", &["seed", "name", "t", "value"]);
    let mut details = Table::new("verify_details", &["seed", "name", "key", "value"]);
    for r in &reports {
        let seed = r.provenance.seed.unwrap_or(s.seed);
        let budgets: Vec<String> = r
            .provenance
            .budgets
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        summary.push(vec![
            seed.into(),
            r.name.clone().into(),
            r.kind.to_string().into(),
            r.expected.into(),
            r.measured.into(),
            r.tolerance.into(),
            r.fit.as_ref().map(|f| f.r2).into(),
            r.pass.into(),
            budgets.join(";").into(),
            r.provenance.note.clone().into(),
        ]);
        if let Some(fit) = &r.fit {
            for &(t, value) in &fit.points {
                tables.push(vec![
                    seed.into(),
                    r.name.clone().into(),
                    t.into(),
                    value.into(),
                ]);
            }
        }
        for (key, value) in &r.details {
            details.push(vec![
                seed.into(),
                r.name.clone().into(),
                key.clone().into(),
                (*value).into(),
            ]);
        }
    }
    Ok((vec![summary, tables, details], reports))
}
