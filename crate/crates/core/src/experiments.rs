//! Named experiments behind the CLI subcommands. Each returns a [`Report`]
//! carrying an exit code and the exact config it ran with.
//!
//! Exit codes: 0 ok, 2 config, 3 hypothesis violated, 4 assertion failed,
//! 5 numerical failure. `check` uses 0 (all satisfied), 1 (some violated), 2.

use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::conditions::{self, CheckReport, Condition, SearchDomain};
use crate::config::{remark_pair, ExperimentConfig};
use crate::error::{Error, Result};
use crate::g::{CovarianceSet, SymMatrix};
use crate::generator::{eval_generator_at, eval_generator_inner_product, generator_limit_check, TestFunction};
use crate::gpde::{self, PDESolution};
use crate::gsde::{integrate, integrate_coupled, pathwise_min_gap, CoefficientSet};
use crate::scenario::{build_gbm_path, estimate_sublinear_expectation, NoisePath, VolatilityControl};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_HYPOTHESIS: i32 = 3;
pub const EXIT_ASSERTION: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

/// Exit code for an error that aborted a run.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Stability { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    /// Subcommand that produced the report.
    pub experiment: String,
    /// `experiment` key of the config.
    pub name: String,
    pub status: String,
    pub exit_code: i32,
    pub message: String,
    pub seed: u64,
    pub results: Value,
    pub config: ExperimentConfig,
    /// Seconds since the Unix epoch; excluded from [`Report::canonical_json`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl Report {
    fn new(experiment: &str, cfg: &ExperimentConfig, exit_code: i32, message: impl Into<String>, results: Value) -> Report {
        let status = match exit_code {
            EXIT_OK => "ok",
            EXIT_VIOLATED => "violated",
            EXIT_CONFIG => "config-error",
            EXIT_HYPOTHESIS => "hypothesis-violated",
            EXIT_ASSERTION => "assertion-failed",
            _ => "numerical-failure",
        };
        Report {
            experiment: experiment.into(),
            name: cfg.experiment.clone(),
            status: status.into(),
            exit_code,
            message: message.into(),
            seed: cfg.seed(),
            results,
            config: cfg.clone(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs()),
        }
    }

    fn from_error(experiment: &str, cfg: &ExperimentConfig, e: &Error) -> Report {
        Report::new(experiment, cfg, exit_code_for(e), e.to_string(), Value::Null)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON without the timestamp; identical for identical config and seed.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.timestamp = None;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

/// Experiments by subcommand name.
pub const EXPERIMENTS: [&str; 9] = [
    "simulate",
    "check",
    "generator",
    "solve-pde",
    "verify-comparison",
    "counterexample-remark",
    "verify-monotone",
    "verify-order",
    "feynman-crosscheck",
];

/// Runs the experiment named `name` (one of [`EXPERIMENTS`]).
pub fn run(name: &str, cfg: &ExperimentConfig) -> Report {
    let out = match name {
        "simulate" => run_simulate(cfg),
        "check" => run_checks(cfg),
        "generator" => run_generator_limit(cfg),
        "solve-pde" => run_solve(cfg),
        "verify-comparison" => run_verify_comparison(cfg),
        "counterexample-remark" => run_counterexample_remark(cfg),
        "verify-monotone" => run_verify_monotone(cfg),
        "verify-order" => run_verify_order(cfg),
        "feynman-crosscheck" => run_feynman_crosscheck(cfg),
        other => Err(Error::config("experiment", format!("unknown experiment '{other}'"))),
    };
    out.unwrap_or_else(|e| Report::from_error(name, cfg, &e))
}

fn check_entry(r: &CheckReport, reevaluated: Option<f64>) -> Value {
    json!({
        "condition": r.condition,
        "verdict": r.verdict,
        "max_violation": r.max_violation,
        "tolerance": r.tolerance,
        "witness": r.witness,
        "witness_reevaluated": reevaluated,
        "samples_evaluated": r.samples_evaluated,
        "box_lo": r.box_lo,
        "box_hi": r.box_hi,
        "t_grid": r.t_grid,
    })
}

fn run_check(cond: Condition, cx: &CoefficientSet, cy: &CoefficientSet, theta: &CovarianceSet, dom: &SearchDomain) -> Result<(CheckReport, Value)> {
    let r = conditions::check(cond, cx, cy, theta, dom)?;
    let re = match r.witness {
        Some(_) => Some(conditions::reevaluate(&r, cx, cy, theta)?),
        None => None,
    };
    let v = check_entry(&r, re);
    Ok((r, v))
}

fn violated_names(reports: &[&CheckReport]) -> Vec<String> {
    reports
        .iter()
        .filter(|r| !r.is_satisfied())
        .map(|r| r.condition.to_string())
        .collect()
}

/// Runs every configured condition on `system` (and `system_bar` for
/// two-system conditions; `system` is reused when absent).
pub fn run_checks(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let cx = cfg.build_system(&theta)?;
    let cy = match &cfg.system_bar {
        Some(_) => cfg.build_system_bar(&theta)?,
        None => cx.clone(),
    };
    let dom = cfg.search_domain(cx.state_dim())?;
    let mut entries = Vec::new();
    let mut violated = Vec::new();
    for (i, name) in cfg.check.conditions.iter().enumerate() {
        let cond = Condition::from_str(name).map_err(|e| Error::config(format!("check.conditions[{i}]"), e.to_string()))?;
        if cond == Condition::Dependency {
            return Err(Error::config(format!("check.conditions[{i}]"), "generic dependency checks are library-only"));
        }
        let (r, v) = run_check(cond, &cx, &cy, &theta, &dom)?;
        if !r.is_satisfied() {
            violated.push(cond.to_string());
        }
        entries.push(v);
    }
    let (code, msg) = if violated.is_empty() {
        (EXIT_OK, "all conditions satisfied on the search domain".to_string())
    } else {
        (EXIT_VIOLATED, format!("violated: {}", violated.join(", ")))
    };
    Ok(Report::new("check", cfg, code, msg, json!({ "checks": entries })))
}

struct EnsembleGap {
    gap: f64,
    component: usize,
    step: usize,
    time: f64,
    control: usize,
    path: u64,
}

/// Minimum of `Y - X` over every (control, noise path) pair, sharing the
/// noise across controls. Ties go to the lowest path, then control.
fn ensemble_min_gap(
    cx: &CoefficientSet,
    cy: &CoefficientSet,
    x0: &[f64],
    y0: &[f64],
    theta: &CovarianceSet,
    controls: &[VolatilityControl],
    cfg: &ExperimentConfig,
) -> Result<EnsembleGap> {
    let (n_paths, n_steps) = (cfg.scenario.n_paths, cfg.scenario.n_steps);
    let per_path: Vec<EnsembleGap> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let noise = NoisePath::sample(cfg.seed(), p, cfg.horizon, n_steps, theta.dim())?;
            let mut best: Option<EnsembleGap> = None;
            for (ci, control) in controls.iter().enumerate() {
                let path = build_gbm_path(&noise, control, theta)?;
                let (x, y) = integrate_coupled(cx, cy, x0, y0, &path)?;
                let w = pathwise_min_gap(&x, &y)?;
                if best.as_ref().is_none_or(|b| w.gap < b.gap) {
                    best = Some(EnsembleGap {
                        gap: w.gap,
                        component: w.component,
                        step: w.step,
                        time: w.time,
                        control: ci,
                        path: p,
                    });
                }
            }
            best.ok_or_else(|| Error::Invalid("control family is empty".into()))
        })
        .collect::<Result<_>>()?;
    per_path
        .into_iter()
        .reduce(|a, b| if b.gap < a.gap { b } else { a })
        .ok_or_else(|| Error::Invalid("scenario.n_paths must be positive".into()))
}

/// Checks the comparison hypotheses on the search box, then integrates both
/// systems on shared scenarios and asserts `X_k(t) <= Y_k(t)` pathwise.
pub fn run_verify_comparison(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let cx = cfg.build_system(&theta)?;
    let cy = cfg.build_system_bar(&theta)?;
    let (x0, y0) = (cfg.x0()?, cfg.y0()?);
    let dom = cfg.search_domain(cx.state_dim())?;
    let (b1, b1v) = run_check(Condition::B1, &cx, &cy, &theta, &dom)?;
    let (b2, b2v) = run_check(Condition::B2, &cx, &cy, &theta, &dom)?;
    let checks = json!([b1v, b2v]);
    let counterexample_mode = x0.iter().zip(&y0).any(|(a, b)| a > b);
    if counterexample_mode {
        log::warn!("x0 = {x0:?} is not below y0 = {y0:?}; running in counterexample mode");
    }
    let violated = violated_names(&[&b1, &b2]);
    if !violated.is_empty() && !counterexample_mode {
        return Ok(Report::new(
            "verify-comparison",
            cfg,
            EXIT_HYPOTHESIS,
            format!("hypothesis violated: {}", violated.join(", ")),
            json!({ "checks": checks }),
        ));
    }
    let controls = cfg.controls(&theta)?;
    let g = ensemble_min_gap(&cx, &cy, &x0, &y0, &theta, &controls, cfg)?;
    let results = json!({
        "checks": checks,
        "mode": if counterexample_mode { "counterexample" } else { "comparison" },
        "n_controls": controls.len(),
        "n_paths": cfg.scenario.n_paths,
        "n_steps": cfg.scenario.n_steps,
        "ensemble_size": controls.len() * cfg.scenario.n_paths,
        "tol_path": cfg.scenario.tol_path,
        "min_gap": g.gap,
        "witness": {
            "component": g.component,
            "step": g.step,
            "time": g.time,
            "control": controls[g.control].label(),
            "path_index": g.path,
        },
    });
    let (code, msg) = if counterexample_mode {
        (EXIT_OK, format!("counterexample mode: x0 > y0 in some component; min gap {:e}", g.gap))
    } else if g.gap < -cfg.scenario.tol_path {
        (
            EXIT_ASSERTION,
            format!(
                "PATHWISE VIOLATION under satisfied hypotheses: min gap {:e} < -{:e}; either a bug or the search box is too small",
                g.gap, cfg.scenario.tol_path
            ),
        )
    } else {
        (EXIT_OK, format!("comparison holds on the ensemble; min gap {:e}", g.gap))
    };
    Ok(Report::new("verify-comparison", cfg, code, msg, results))
}

/// The pair `dX = (s_hi + s_lo)/2 dt`, `dY = d<B>` under the constant
/// lower-variance control: the gap `X(T) - Y(T) = (s_hi - s_lo)/2 T` is
/// positive although the weakened drift condition holds.
pub fn run_counterexample_remark(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    if theta.dim() != 1 {
        return Err(Error::config("theta", "counterexample-remark needs a one-dimensional variance interval"));
    }
    let (lo, hi) = (theta.sigma_lower_sq(), theta.sigma_upper_sq());
    if !(lo < hi) {
        return Err(Error::config(
            "theta.interval",
            format!("degenerate interval [{lo}, {hi}]: no counterexample exists when the variances coincide"),
        ));
    }
    let (cx, cy) = remark_pair(&theta)?;
    let n_steps = cfg.scenario.n_steps;
    let horizon = cfg.horizon;
    let low = (0..theta.len())
        .min_by(|&a, &b| theta.covariance(a).get(0, 0).total_cmp(&theta.covariance(b).get(0, 0)))
        .expect("nonempty set");
    let control = VolatilityControl::constant(low, n_steps).with_label("constant-lower");
    let noise = NoisePath::sample(cfg.seed(), 0, horizon, n_steps, 1)?;
    let path = build_gbm_path(&noise, &control, &theta)?;
    let x0 = cfg.x0()?;
    let (x, y) = integrate_coupled(&cx, &cy, &x0, &x0, &path)?;
    let gap = x.last()[0] - y.last()[0];
    let expected = (0.5 * (hi + lo) - lo) * horizon;
    let dt = horizon / n_steps as f64;
    let dyadic = dt.log2().fract() == 0.0;
    let dom = cfg.search_domain(1)?;
    let (b1, b1v) = run_check(Condition::B1, &cx, &cy, &theta, &dom)?;
    let matches = (gap - expected).abs() <= 1e-12 * expected.abs().max(1.0);
    let results = json!({
        "sigma_lower_sq": lo,
        "sigma_upper_sq": hi,
        "drift": 0.5 * (hi + lo),
        "horizon": horizon,
        "n_steps": n_steps,
        "dt": dt,
        "dyadic_dt": dyadic,
        "gap": gap,
        "expected_gap": expected,
        "exact": gap == expected,
        "b1": b1v,
    });
    let (code, msg) = if matches && gap > 0.0 && !b1.is_satisfied() {
        (EXIT_OK, format!("X(T) - Y(T) = {gap} > 0 and B1 is violated: comparison fails as expected"))
    } else {
        (
            EXIT_ASSERTION,
            format!(
                "counterexample not reproduced: gap {gap}, expected {expected}, B1 {}",
                if b1.is_satisfied() { "satisfied" } else { "violated" }
            ),
        )
    };
    Ok(Report::new("counterexample-remark", cfg, code, msg, results))
}

fn solution_summary(sol: &PDESolution, x0: &[f64]) -> Value {
    json!({
        "function": sol.function_id(),
        "coefficients": sol.coefficient_id(),
        "scheme": sol.scheme(),
        "value_at_x0": sol.semigroup_value(sol.grid().horizon(), x0).ok(),
        "stored_levels": sol.times().len(),
    })
}

/// Solves with `f` and checks the final state is nondecreasing.
fn monotone_solves(
    c: &CoefficientSet,
    theta: &CovarianceSet,
    cfg: &ExperimentConfig,
    functions: &[TestFunction],
) -> Result<Vec<(PDESolution, crate::gpde::MonotonicityReport)>> {
    let grid = cfg.grid(c.state_dim(), cfg.horizon)?;
    functions
        .iter()
        .map(|f| {
            let sol = gpde::solve(c, theta, f, &grid)?;
            let m = sol.monotonicity_check()?;
            Ok((sol, m))
        })
        .collect()
}

/// Monotonicity conditions on one system, then the monotone-scheme solution
/// for each monotone datum (and each negative control, expected to fail).
pub fn run_verify_monotone(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let c = cfg.build_system(&theta)?;
    let n = c.state_dim();
    let dom = cfg.search_domain(n)?;
    let (c1, c1v) = run_check(Condition::C1, &c, &c, &theta, &dom)?;
    let (c2, c2v) = run_check(Condition::C2, &c, &c, &theta, &dom)?;
    let violated = violated_names(&[&c1, &c2]);
    if !violated.is_empty() {
        return Ok(Report::new(
            "verify-monotone",
            cfg,
            EXIT_HYPOTHESIS,
            format!("hypothesis violated: {}", violated.join(", ")),
            json!({ "checks": [c1v, c2v] }),
        ));
    }
    let x0 = cfg.x0()?;
    let mut failures = Vec::new();
    let mut monotone = Vec::new();
    for (sol, m) in monotone_solves(&c, &theta, cfg, &cfg.monotone_functions(n)?)? {
        if !m.nondecreasing {
            failures.push(format!("{} not nondecreasing (min forward difference {:e})", sol.function_id(), m.min_forward_difference));
        }
        monotone.push(json!({ "solution": solution_summary(&sol, &x0), "monotonicity": m }));
    }
    let mut negative = Vec::new();
    for (sol, m) in monotone_solves(&c, &theta, cfg, &cfg.negative_controls(n)?)? {
        if m.nondecreasing {
            failures.push(format!("negative control {} unexpectedly nondecreasing", sol.function_id()));
        }
        negative.push(json!({ "solution": solution_summary(&sol, &x0), "monotonicity": m }));
    }
    let results = json!({ "checks": [c1v, c2v], "monotone": monotone, "negative_controls": negative });
    let (code, msg) = if failures.is_empty() {
        (EXIT_OK, "every monotone datum stays monotone; negative controls fail as expected".to_string())
    } else {
        (EXIT_ASSERTION, failures.join("; "))
    };
    Ok(Report::new("verify-monotone", cfg, code, msg, results))
}

/// Smallest eigenvalue of `sigma sigma^T` over domain samples.
fn ellipticity_audit(c: &CoefficientSet, dom: &SearchDomain) -> Result<(f64, Vec<f64>)> {
    use rand::{Rng, SeedableRng};
    let n = c.state_dim();
    let d = c.noise_dim();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(dom.seed);
    let t = dom.t_grid.first().copied().unwrap_or(0.0);
    let mut worst = (f64::INFINITY, vec![0.0; n]);
    for _ in 0..dom.n_samples {
        let x: Vec<f64> = (0..n).map(|i| rng.random_range(dom.lo[i]..=dom.hi[i])).collect();
        let s = c.sigma_matrix(t, &x);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..d).map(|l| s[i * d + l] * s[j * d + l]).sum();
            }
        }
        let lam = SymMatrix::new(n, a)?.min_eigenvalue();
        if lam < worst.0 {
            worst = (lam, x);
        }
    }
    Ok(worst)
}

/// Order conditions between two systems plus monotonicity of one of them,
/// then `u(t, x) >= u_bar(t, x_bar)` for `x >= x_bar` on the grid.
pub fn run_verify_order(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let cx = cfg.build_system(&theta)?;
    let cy = cfg.build_system_bar(&theta)?;
    let n = cx.state_dim();
    let dom = cfg.search_domain(n)?;
    let (d1, d1v) = run_check(Condition::D1, &cx, &cy, &theta, &dom)?;
    let (d5, d5v) = run_check(Condition::D5, &cx, &cy, &theta, &dom)?;
    let (c1, c1v) = run_check(Condition::C1, &cx, &cx, &theta, &dom)?;
    let (c2, c2v) = run_check(Condition::C2, &cx, &cx, &theta, &dom)?;
    let (c1b, c1bv) = run_check(Condition::C1, &cy, &cy, &theta, &dom)?;
    let (c2b, c2bv) = run_check(Condition::C2, &cy, &cy, &theta, &dom)?;
    let (lam, lam_x) = ellipticity_audit(&cx, &dom)?;
    let (lam_bar, lam_bar_x) = ellipticity_audit(&cy, &dom)?;
    let monotone_side = if c1b.is_satisfied() && c2b.is_satisfied() {
        Some("system_bar")
    } else if c1.is_satisfied() && c2.is_satisfied() {
        Some("system")
    } else {
        None
    };
    let elliptic = lam.max(lam_bar) > 1e-10;
    let checks = json!({
        "D1": d1v,
        "D5": d5v,
        "system": { "C1": c1v, "C2": c2v },
        "system_bar": { "C1": c1bv, "C2": c2bv },
        "monotone_side": monotone_side,
        "ellipticity": {
            "system": { "min_eigenvalue": lam, "at": lam_x },
            "system_bar": { "min_eigenvalue": lam_bar, "at": lam_bar_x },
            "samples": dom.n_samples,
        },
    });
    let mut violated = violated_names(&[&d1, &d5]);
    if monotone_side.is_none() {
        violated.push("monotonicity of either side (C1 and C2)".into());
    }
    if !elliptic {
        violated.push("uniform positive definiteness of sigma sigma^T".into());
    }
    if !violated.is_empty() {
        return Ok(Report::new(
            "verify-order",
            cfg,
            EXIT_HYPOTHESIS,
            format!("hypothesis violated: {}", violated.join(", ")),
            json!({ "checks": checks }),
        ));
    }
    let grid = cfg.grid(n, cfg.horizon)?;
    let x0 = cfg.x0()?;
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for f in cfg.monotone_functions(n)? {
        let (u, ub) = gpde::solve_pair(&cx, &cy, &theta, &f, &grid)?;
        let dom_rep = u.dominance_check(&ub)?;
        if !dom_rep.dominates {
            failures.push(format!("{}: min gap {:e}", f.id(), dom_rep.min_gap));
        }
        entries.push(json!({
            "function": f.id(),
            "u": solution_summary(&u, &x0),
            "u_bar": solution_summary(&ub, &x0),
            "dominance": dom_rep,
        }));
    }
    let (code, msg) = if failures.is_empty() {
        (EXIT_OK, "u dominates u_bar at ordered points for every monotone datum".to_string())
    } else {
        (EXIT_ASSERTION, format!("dominance failed: {}", failures.join("; ")))
    };
    Ok(Report::new("verify-order", cfg, code, msg, json!({ "checks": checks, "dominance": entries })))
}

/// Both forms of the generator at `x0`, and the limit table when
/// `generator.t_list` is set.
pub fn run_generator_limit(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let c = cfg.build_system(&theta)?;
    let n = c.state_dim();
    let f = cfg.datum(n)?;
    let x0 = cfg.x0()?;
    let fd = cfg.generator.fd_step;
    let coord = eval_generator_at(&c, &theta, &f, 0.0, &x0, fd)?;
    let inner = eval_generator_inner_product(&c, &theta, &f, 0.0, &x0, fd)?;
    let mut failures = Vec::new();
    if (coord - inner).abs() > 1e-8 * (1.0 + coord.abs()) {
        failures.push(format!("forms disagree: {coord} vs {inner}"));
    }
    let mut table = Vec::new();
    if !cfg.generator.t_list.is_empty() {
        let grid = cfg.grid(n, cfg.generator.t_list[0])?;
        table = generator_limit_check(&c, &theta, &f, &x0, &cfg.generator.t_list, &grid)?;
        if table.windows(2).any(|w| w[1].residual > w[0].residual) {
            failures.push("residual does not shrink monotonically".into());
        }
        let last = table.last().expect("nonempty table").residual;
        if last > cfg.generator.tolerance {
            failures.push(format!("final residual {last:e} above {:e}", cfg.generator.tolerance));
        }
    }
    let results = json!({
        "function": f.id(),
        "x": x0,
        "generator": coord,
        "generator_inner_product": inner,
        "limit_table": table,
    });
    let (code, msg) = if failures.is_empty() {
        (EXIT_OK, format!("generator value {coord}"))
    } else {
        (EXIT_ASSERTION, failures.join("; "))
    };
    Ok(Report::new("generator", cfg, code, msg, results))
}

/// PDE value at `x0` against the Monte Carlo supremum over the control family.
pub fn run_feynman_crosscheck(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let c = cfg.build_system(&theta)?;
    let n = c.state_dim();
    let f = cfg.datum(n)?;
    let x0 = cfg.x0()?;
    let grid = cfg.grid(n, cfg.horizon)?;
    let sol = gpde::solve(&c, &theta, &f, &grid)?;
    let pde = sol.semigroup_value(cfg.horizon, &x0)?;
    let controls = cfg.controls(&theta)?;
    let mc = estimate_sublinear_expectation(
        |path| integrate(&c, &x0, path).map_or(f64::NAN, |p| f.eval(p.last())),
        &theta,
        &controls,
        cfg.scenario.n_paths,
        cfg.seed(),
        cfg.horizon,
        cfg.scenario.n_steps,
    )?;
    let tol = (2e-2f64).max(3.0 * mc.std_error);
    let diff = pde - mc.estimate;
    let results = json!({
        "function": f.id(),
        "x": x0,
        "horizon": cfg.horizon,
        "pde": pde,
        "scheme": sol.scheme(),
        "monte_carlo": mc,
        "difference": diff,
        "tolerance": tol,
        "pde_above_mc_lower_bound": pde >= mc.estimate - 3.0 * mc.std_error,
    });
    let (code, msg) = if diff.abs() <= tol {
        (EXIT_OK, format!("|PDE - MC| = {:e} <= {tol:e}", diff.abs()))
    } else {
        (EXIT_ASSERTION, format!("|PDE - MC| = {:e} > {tol:e}", diff.abs()))
    };
    Ok(Report::new("feynman-crosscheck", cfg, code, msg, results))
}

/// Solves the PDE for the datum; writes CSV and the binary dump when
/// configured.
pub fn run_solve(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let c = cfg.build_system(&theta)?;
    let n = c.state_dim();
    let f = cfg.datum(n)?;
    let grid = cfg.grid(n, cfg.horizon)?;
    let sol = gpde::solve(&c, &theta, &f, &grid)?;
    if let Some(p) = &cfg.output.csv {
        std::fs::write(p, sol.to_csv())?;
    }
    if let Some(p) = &cfg.output.dump {
        let file = std::fs::File::create(p)?;
        sol.write_binary(std::io::BufWriter::new(file))?;
    }
    let m = sol.monotonicity_check().ok();
    let results = json!({
        "solution": solution_summary(&sol, &cfg.x0()?),
        "trust_lo": sol.trust_lo(),
        "trust_hi": sol.trust_hi(),
        "monotonicity": m,
        "csv": cfg.output.csv,
        "dump": cfg.output.dump,
    });
    Ok(Report::new("solve-pde", cfg, EXIT_OK, "solved", results))
}

/// Integrates `system` on every (control, path) pair; CSV rows are
/// `control,path,t,X_1..X_n`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta()?;
    let c = cfg.build_system(&theta)?;
    let x0 = cfg.x0()?;
    let controls = cfg.controls(&theta)?;
    let n = c.state_dim();
    let paths: Vec<Vec<_>> = (0..cfg.scenario.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let noise = NoisePath::sample(cfg.seed(), p, cfg.horizon, cfg.scenario.n_steps, theta.dim())?;
            controls
                .iter()
                .map(|ctl| integrate(&c, &x0, &build_gbm_path(&noise, ctl, &theta)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut finals = vec![Vec::new(); n];
    for sp in paths.iter().flatten() {
        for (i, v) in sp.last().iter().enumerate() {
            finals[i].push(*v);
        }
    }
    if let Some(p) = &cfg.output.csv {
        let mut out = String::from("control,path,t");
        for i in 1..=n {
            out.push_str(&format!(",X_{i}"));
        }
        out.push('\n');
        for sp in paths.iter().flatten() {
            let prov = sp.provenance();
            for (k, t) in sp.times().iter().enumerate() {
                out.push_str(&format!("{},{},{t}", prov.control_label, prov.path_index));
                for v in sp.state(k) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        std::fs::write(p, out)?;
    }
    let stats: Vec<Value> = finals
        .iter()
        .map(|v| {
            let (mean, se) = crate::numeric::mean_and_std_error(v);
            json!({
                "mean": mean,
                "std_error": se,
                "min": v.iter().copied().fold(f64::INFINITY, f64::min),
                "max": v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect();
    let results = json!({
        "coefficients": c.id(),
        "n_controls": controls.len(),
        "n_paths": cfg.scenario.n_paths,
        "n_steps": cfg.scenario.n_steps,
        "final_state": stats,
        "csv": cfg.output.csv,
    });
    Ok(Report::new("simulate", cfg, EXIT_OK, "simulated", results))
}
