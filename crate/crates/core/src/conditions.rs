//! Numerical falsifiers for the comparison, monotonicity and order hypotheses.
//!
//! Every check maximizes a violation over a declared box and a finite time grid.
//! Samples are drawn from independent per-sample streams; a sample is refined by
//! pattern search when it ranks among the `n_refine` best of the samples drawn so
//! far. Both rules are prefix-stable, so raising `n_samples` or `n_refine` never
//! lowers the reported violation.
//!
//! Index conventions: `(sigma_l)_i` is component `i` of noise column `l`;
//! every index in reports is zero-based.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::g::CovarianceSet;
use crate::gsde::CoefficientSet;

pub const RESIDUAL_TOLERANCE: f64 = 1e-8;
pub const DEPENDENCY_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_DIRECTIONS: usize = 128;

/// Polls per refinement, per search coordinate.
const REFINE_EVALS_PER_COORD: usize = 400;
const REFINE_MIN_STEP: f64 = 1e-7;

fn default_directions() -> usize {
    DEFAULT_DIRECTIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub n_samples: usize,
    pub n_refine: usize,
    pub seed: u64,
    /// Directions `K` on the nonnegative unit sphere tried per sample.
    #[serde(default = "default_directions")]
    pub n_directions: usize,
}

impl SearchDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, t_grid: Vec<f64>, n_samples: usize, n_refine: usize, seed: u64) -> Result<Self> {
        let dom = SearchDomain {
            lo,
            hi,
            t_grid,
            n_samples,
            n_refine,
            seed,
            n_directions: DEFAULT_DIRECTIONS,
        };
        dom.validate()?;
        Ok(dom)
    }

    /// `[-half_width, half_width]^n` at `t = 0`, 2048 samples, 8 refinements.
    pub fn cube(n: usize, half_width: f64) -> Self {
        SearchDomain {
            lo: vec![-half_width; n],
            hi: vec![half_width; n],
            t_grid: vec![0.0],
            n_samples: 2048,
            n_refine: 8,
            seed: 0,
            n_directions: DEFAULT_DIRECTIONS,
        }
    }

    pub fn with_budget(mut self, n_samples: usize, n_refine: usize) -> Self {
        self.n_samples = n_samples;
        self.n_refine = n_refine;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_t_grid(mut self, t_grid: Vec<f64>) -> Self {
        self.t_grid = t_grid;
        self
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::Dimension(format!(
                "search box bounds have lengths {} and {}",
                self.lo.len(),
                self.hi.len()
            )));
        }
        if let Some(j) = (0..self.lo.len()).find(|&j| !(self.lo[j] < self.hi[j]) || !self.lo[j].is_finite() || !self.hi[j].is_finite()) {
            return Err(Error::Invalid(format!(
                "search box axis {j}: need finite lo < hi, got [{}, {}]",
                self.lo[j], self.hi[j]
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Invalid("n_samples must be at least 1".into()));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Invalid(format!("t_grid must be a nonempty list of times >= 0, got {:?}", self.t_grid)));
        }
        if self.n_directions == 0 {
            return Err(Error::Invalid("n_directions must be at least 1".into()));
        }
        Ok(())
    }

    fn span(&self, j: usize) -> f64 {
        self.hi[j] - self.lo[j]
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|j| rng.random_range(self.lo[j]..=self.hi[j])).collect()
    }

    fn clamp(&self, j: usize, v: f64) -> f64 {
        v.clamp(self.lo[j], self.hi[j])
    }

    fn stream(&self, s: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(s as u64);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    B1,
    B2,
    C1,
    C2,
    #[serde(rename = "C2'")]
    C2Prime,
    D1,
    D2,
    #[serde(rename = "D2'")]
    D2Prime,
    D3,
    D4,
    #[serde(rename = "D4'")]
    D4Prime,
    D5,
    #[serde(rename = "dependency")]
    Dependency,
}

impl Condition {
    pub const ALL: [Condition; 12] = [
        Condition::B1,
        Condition::B2,
        Condition::C1,
        Condition::C2,
        Condition::C2Prime,
        Condition::D1,
        Condition::D2,
        Condition::D2Prime,
        Condition::D3,
        Condition::D4,
        Condition::D4Prime,
        Condition::D5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::B1 => "B1",
            Condition::B2 => "B2",
            Condition::C1 => "C1",
            Condition::C2 => "C2",
            Condition::C2Prime => "C2'",
            Condition::D1 => "D1",
            Condition::D2 => "D2",
            Condition::D2Prime => "D2'",
            Condition::D3 => "D3",
            Condition::D4 => "D4",
            Condition::D4Prime => "D4'",
            Condition::D5 => "D5",
            Condition::Dependency => "dependency",
        }
    }

    /// Whether the check compares two systems.
    pub fn is_pairwise(self) -> bool {
        matches!(
            self,
            Condition::B1
                | Condition::B2
                | Condition::D1
                | Condition::D2
                | Condition::D2Prime
                | Condition::D4
                | Condition::D4Prime
                | Condition::D5
        )
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// Accepts `C2'`, `C2p` and `C2prime` spellings, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let norm = match upper.strip_suffix("PRIME").or_else(|| upper.strip_suffix('P').filter(|b| b.len() == 2)) {
            Some(base) => format!("{base}'"),
            None => upper.clone(),
        };
        Condition::ALL
            .into_iter()
            .chain([Condition::Dependency])
            .find(|c| c.name().to_ascii_uppercase() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown condition '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    SatisfiedOnDomain,
    Violated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WitnessKind {
    /// Signed drift/G residual at an ordered pair `(x, y)` with `x_i = y_i`.
    Residual,
    /// Residual along a direction `K >= 0` at a single point.
    Direction,
    /// `|f(y) - f(x)|` where `y` differs from `x` only off the allowed coordinates.
    Dependency,
    /// `|f(x) - f_bar(x)|` between the two systems.
    Equality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub kind: WitnessKind,
    pub t: f64,
    pub x: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub y: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<Vec<f64>>,
    /// State component `i` of a residual.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub index: Option<usize>,
    /// `[l, k, i, j]` for the product `(sigma_l)_i (sigma_k)_j`, `[l, i]` for `(sigma_l)_i`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub aux: Vec<usize>,
    /// 0 for the first system, 1 for the second.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub system: Option<usize>,
}

impl Witness {
    /// `y - x` when the witness is a pair.
    pub fn perturbation(&self) -> Option<Vec<f64>> {
        self.y.as_ref().map(|y| y.iter().zip(&self.x).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub condition: Condition,
    pub max_violation: f64,
    pub witness: Option<Witness>,
    pub verdict: Verdict,
    pub tolerance: f64,
    pub samples_evaluated: u64,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub t_grid: Vec<f64>,
}

impl CheckReport {
    pub fn is_satisfied(&self) -> bool {
        self.verdict == Verdict::SatisfiedOnDomain
    }

    /// Merges reports of sub-checks into one for `condition`: the worst
    /// violation relative to its tolerance decides.
    pub fn merge(condition: Condition, parts: Vec<CheckReport>) -> CheckReport {
        let mut iter = parts.into_iter();
        let mut best = iter.next().expect("at least one report to merge");
        let mut evaluated = best.samples_evaluated;
        for r in iter {
            evaluated += r.samples_evaluated;
            if r.max_violation - r.tolerance > best.max_violation - best.tolerance {
                best = r;
            }
        }
        best.condition = condition;
        best.samples_evaluated = evaluated;
        best
    }
}

struct Eval {
    violation: f64,
    scale: f64,
}

/// A maximization problem over a search vector `z`.
trait Problem: Sync {
    fn len(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    fn project(&self, z: &mut [f64]);
    fn width(&self, j: usize) -> f64;
    fn eval(&self, z: &[f64]) -> Result<Eval>;
    fn witness(&self, z: &[f64]) -> Witness;
}

struct Outcome {
    violation: f64,
    z: Vec<f64>,
    scale: f64,
    evals: u64,
}

fn maximize(p: &dyn Problem, dom: &SearchDomain) -> Result<Outcome> {
    let raw = (0..dom.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = dom.stream(s);
            let mut z = p.sample(&mut rng)?;
            p.project(&mut z);
            let e = p.eval(&z)?;
            Ok((z, e))
        })
        .collect::<Result<Vec<_>>>()?;

    // Sample s is refined when it ranks among the n_refine best of samples 0..=s
    // (earlier samples win ties).
    let mut chosen = Vec::new();
    if dom.n_refine > 0 {
        let mut top: Vec<f64> = Vec::with_capacity(dom.n_refine + 1);
        for (s, (_, e)) in raw.iter().enumerate() {
            let v = e.violation;
            if top.len() < dom.n_refine || v > *top.last().unwrap() {
                chosen.push(s);
                let pos = top.iter().position(|&u| v > u).unwrap_or(top.len());
                top.insert(pos, v);
                top.truncate(dom.n_refine);
            }
        }
    }
    let refined = chosen
        .par_iter()
        .map(|&s| pattern_search(p, raw[s].0.clone(), raw[s].1.violation))
        .collect::<Result<Vec<_>>>()?;

    let mut best = Outcome {
        violation: f64::NEG_INFINITY,
        z: Vec::new(),
        scale: 0.0,
        evals: raw.len() as u64,
    };
    let mut scale: f64 = 0.0;
    for (z, e) in &raw {
        scale = scale.max(e.scale);
        if e.violation > best.violation {
            best.violation = e.violation;
            best.z = z.clone();
        }
    }
    for r in refined {
        scale = scale.max(r.scale);
        best.evals += r.evals;
        if r.violation > best.violation {
            best.violation = r.violation;
            best.z = r.z;
        }
    }
    best.scale = scale;
    Ok(best)
}

/// Compass search with first-improvement polling and step halving.
fn pattern_search(p: &dyn Problem, mut z: Vec<f64>, start: f64) -> Result<Outcome> {
    let mut best = start;
    let mut scale: f64 = 0.0;
    let mut evals = 0u64;
    let budget = (REFINE_EVALS_PER_COORD * p.len().max(1)) as u64;
    let mut h = 0.25;
    while h > REFINE_MIN_STEP && evals < budget {
        let mut improved = false;
        'poll: for j in 0..p.len() {
            for sign in [1.0, -1.0] {
                let mut c = z.clone();
                c[j] += sign * h * p.width(j);
                p.project(&mut c);
                if c == z {
                    continue;
                }
                let e = p.eval(&c)?;
                evals += 1;
                scale = scale.max(e.scale);
                if e.violation > best {
                    best = e.violation;
                    z = c;
                    improved = true;
                    break 'poll;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    Ok(Outcome {
        violation: best,
        z,
        scale,
        evals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    /// `x <= y`
    Below,
    /// `x >= y`
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Want {
    NonPositive,
    NonNegative,
}

impl Want {
    fn violation(self, r: f64) -> f64 {
        match self {
            Want::NonPositive => r,
            Want::NonNegative => -r,
        }
    }
}

fn non_finite(what: &str, t: f64, x: &[f64]) -> Error {
    Error::NonFinite(format!("{what} is not finite at t = {t}, x = {x:?}"))
}

fn residual_with_scale(
    first: &CoefficientSet,
    second: &CoefficientSet,
    theta: &CovarianceSet,
    t: f64,
    x: &[f64],
    y: &[f64],
    i: usize,
) -> Result<(f64, f64)> {
    let n = first.state_dim();
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    first.eval_drift(t, x, &mut bx);
    second.eval_drift(t, y, &mut by);
    let hx = first.h_matrix_component(i, t, x);
    let hy = second.h_matrix_component(i, t, y);
    let diff: Vec<f64> = hx.iter().zip(&hy).map(|(a, b)| a - b).collect();
    let g = theta.eval_g_raw(&diff);
    let r = bx[i] - by[i] + g;
    if !r.is_finite() {
        return Err(Error::NonFinite(format!(
            "residual for component {i} at t = {t}, x = {x:?}, y = {y:?}"
        )));
    }
    Ok((r, bx[i].abs().max(by[i].abs()).max(g.abs())))
}

/// `b_i(t,x) - b_bar_i(t,y) + G([(h_lk)_i + (h_kl)_i](t,x) - [(h_bar_lk)_i + (h_bar_kl)_i](t,y))`
/// with `first = (b, h)` and `second = (b_bar, h_bar)`.
pub fn pair_residual(
    first: &CoefficientSet,
    second: &CoefficientSet,
    theta: &CovarianceSet,
    t: f64,
    x: &[f64],
    y: &[f64],
    i: usize,
) -> Result<f64> {
    Ok(residual_with_scale(first, second, theta, t, x, y, i)?.0)
}

fn direction_with_scale(
    first: &CoefficientSet,
    second: &CoefficientSet,
    theta: &CovarianceSet,
    t: f64,
    x: &[f64],
    k: &[f64],
) -> Result<(f64, f64)> {
    let n = first.state_dim();
    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    first.eval_drift(t, x, &mut b1);
    second.eval_drift(t, x, &mut b2);
    let drift: f64 = (0..n).map(|j| k[j] * (b1[j] - b2[j])).sum();
    let h1 = first.h_matrix_weighted(k, t, x);
    let h2 = second.h_matrix_weighted(k, t, x);
    let diff: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a - b).collect();
    let g = theta.eval_g_raw(&diff);
    let r = drift + g;
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("directional residual at t = {t}, x = {x:?}, K = {k:?}")));
    }
    Ok((r, drift.abs().max(g.abs())))
}

/// `K . (b - b_bar)(t,x) + G([K . (h_lk + h_kl)](t,x) - [K . (h_bar_lk + h_bar_kl)](t,x))`
/// with `first = (b, h)` and `second = (b_bar, h_bar)`.
pub fn direction_residual(
    first: &CoefficientSet,
    second: &CoefficientSet,
    theta: &CovarianceSet,
    t: f64,
    x: &[f64],
    k: &[f64],
) -> Result<f64> {
    Ok(direction_with_scale(first, second, theta, t, x, k)?.0)
}

struct PairProblem<'a> {
    first: &'a CoefficientSet,
    second: &'a CoefficientSet,
    theta: &'a CovarianceSet,
    dom: &'a SearchDomain,
    t: f64,
    i: usize,
    order: Order,
    want: Want,
}

impl PairProblem<'_> {
    /// `z = (y, delta)`; `x = y -/+ delta` clipped to the box, with `x_i = y_i`.
    fn points(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.dom.dim();
        let y = z[..n].to_vec();
        let x: Vec<f64> = (0..n)
            .map(|j| {
                if j == self.i {
                    y[j]
                } else {
                    match self.order {
                        Order::Below => self.dom.clamp(j, y[j] - z[n + j]),
                        Order::Above => self.dom.clamp(j, y[j] + z[n + j]),
                    }
                }
            })
            .collect();
        let ordered = (0..n).all(|j| match self.order {
            Order::Below => x[j] <= y[j],
            Order::Above => x[j] >= y[j],
        });
        assert!(ordered && x[self.i] == y[self.i], "sampled pair violates its constraint");
        (x, y)
    }
}

impl Problem for PairProblem<'_> {
    fn len(&self) -> usize {
        2 * self.dom.dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = self.dom.dim();
        let mut z = self.dom.sample_point(rng);
        for j in 0..n {
            let zero = rng.random::<f64>() < 0.25;
            let span = self.dom.span(j);
            let d = rng.random_range(0.0..=span);
            z.push(if j == self.i || zero { 0.0 } else { d });
        }
        Ok(z)
    }

    fn project(&self, z: &mut [f64]) {
        let n = self.dom.dim();
        for j in 0..n {
            z[j] = self.dom.clamp(j, z[j]);
            z[n + j] = if j == self.i { 0.0 } else { z[n + j].clamp(0.0, self.dom.span(j)) };
        }
    }

    fn width(&self, j: usize) -> f64 {
        self.dom.span(j % self.dom.dim())
    }

    fn eval(&self, z: &[f64]) -> Result<Eval> {
        let (x, y) = self.points(z);
        let (r, scale) = residual_with_scale(self.first, self.second, self.theta, self.t, &x, &y, self.i)?;
        Ok(Eval {
            violation: self.want.violation(r),
            scale,
        })
    }

    fn witness(&self, z: &[f64]) -> Witness {
        let (x, y) = self.points(z);
        Witness {
            kind: WitnessKind::Residual,
            t: self.t,
            x,
            y: Some(y),
            k: None,
            index: Some(self.i),
            aux: Vec::new(),
            system: None,
        }
    }
}

struct DirectionProblem<'a> {
    first: &'a CoefficientSet,
    second: &'a CoefficientSet,
    theta: &'a CovarianceSet,
    dom: &'a SearchDomain,
    t: f64,
    want: Want,
    directions: &'a [Vec<f64>],
}

/// Coordinate axes, the diagonal, then seeded random directions, all on the
/// nonnegative unit sphere.
fn sphere_directions(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(count);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        dirs.push(e);
    }
    if n > 1 {
        dirs.push(vec![1.0 / (n as f64).sqrt(); n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    while dirs.len() < count {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
        let norm = crate::numeric::norm(&v);
        if norm > 1e-12 {
            dirs.push(v.iter().map(|a| a / norm).collect());
        }
    }
    dirs.truncate(count.max(1));
    dirs
}

fn project_direction(k: &mut [f64]) {
    k.iter_mut().for_each(|v| *v = v.max(0.0));
    let norm = crate::numeric::norm(k);
    if norm < 1e-12 {
        let u = 1.0 / (k.len() as f64).sqrt();
        k.iter_mut().for_each(|v| *v = u);
    } else {
        k.iter_mut().for_each(|v| *v /= norm);
    }
}

impl Problem for DirectionProblem<'_> {
    fn len(&self) -> usize {
        2 * self.dom.dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let x = self.dom.sample_point(rng);
        let mut best = (f64::NEG_INFINITY, 0);
        for (m, k) in self.directions.iter().enumerate() {
            let (r, _) = direction_with_scale(self.first, self.second, self.theta, self.t, &x, k)?;
            let v = self.want.violation(r);
            if v > best.0 {
                best = (v, m);
            }
        }
        let mut z = x;
        z.extend_from_slice(&self.directions[best.1]);
        Ok(z)
    }

    fn project(&self, z: &mut [f64]) {
        let n = self.dom.dim();
        for j in 0..n {
            z[j] = self.dom.clamp(j, z[j]);
        }
        project_direction(&mut z[n..]);
    }

    fn width(&self, j: usize) -> f64 {
        let n = self.dom.dim();
        if j < n {
            self.dom.span(j)
        } else {
            1.0
        }
    }

    fn eval(&self, z: &[f64]) -> Result<Eval> {
        let n = self.dom.dim();
        let (r, scale) = direction_with_scale(self.first, self.second, self.theta, self.t, &z[..n], &z[n..])?;
        Ok(Eval {
            violation: self.want.violation(r),
            scale,
        })
    }

    fn witness(&self, z: &[f64]) -> Witness {
        let n = self.dom.dim();
        Witness {
            kind: WitnessKind::Direction,
            t: self.t,
            x: z[..n].to_vec(),
            y: None,
            k: Some(z[n..].to_vec()),
            index: None,
            aux: Vec::new(),
            system: None,
        }
    }
}

type ScalarFn<'a> = Box<dyn Fn(f64, &[f64]) -> f64 + Sync + 'a>;

struct DependencyProblem<'a> {
    func: ScalarFn<'a>,
    allowed: Vec<bool>,
    dom: &'a SearchDomain,
    t: f64,
    aux: Vec<usize>,
    system: Option<usize>,
}

impl Problem for DependencyProblem<'_> {
    fn len(&self) -> usize {
        2 * self.dom.dim()
    }

    /// `z = (x, x')` where `x'` agrees with `x` on the allowed coordinates.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = self.dom.dim();
        let mut z = self.dom.sample_point(rng);
        for j in 0..n {
            let keep = rng.random::<f64>() < 0.25;
            let v = rng.random_range(self.dom.lo[j]..=self.dom.hi[j]);
            z.push(if self.allowed[j] || keep { z[j] } else { v });
        }
        Ok(z)
    }

    fn project(&self, z: &mut [f64]) {
        let n = self.dom.dim();
        for j in 0..n {
            z[j] = self.dom.clamp(j, z[j]);
            z[n + j] = if self.allowed[j] { z[j] } else { self.dom.clamp(j, z[n + j]) };
        }
    }

    fn width(&self, j: usize) -> f64 {
        self.dom.span(j % self.dom.dim())
    }

    fn eval(&self, z: &[f64]) -> Result<Eval> {
        let n = self.dom.dim();
        let a = (self.func)(self.t, &z[..n]);
        let b = (self.func)(self.t, &z[n..]);
        if !a.is_finite() {
            return Err(non_finite("function value", self.t, &z[..n]));
        }
        if !b.is_finite() {
            return Err(non_finite("function value", self.t, &z[n..]));
        }
        Ok(Eval {
            violation: (b - a).abs(),
            scale: a.abs().max(b.abs()),
        })
    }

    fn witness(&self, z: &[f64]) -> Witness {
        let n = self.dom.dim();
        Witness {
            kind: WitnessKind::Dependency,
            t: self.t,
            x: z[..n].to_vec(),
            y: Some(z[n..].to_vec()),
            k: None,
            index: None,
            aux: self.aux.clone(),
            system: self.system,
        }
    }
}

struct EqualityProblem<'a> {
    left: ScalarFn<'a>,
    right: ScalarFn<'a>,
    dom: &'a SearchDomain,
    t: f64,
    aux: Vec<usize>,
}

impl Problem for EqualityProblem<'_> {
    fn len(&self) -> usize {
        self.dom.dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.dom.sample_point(rng))
    }

    fn project(&self, z: &mut [f64]) {
        for (j, v) in z.iter_mut().enumerate() {
            *v = self.dom.clamp(j, *v);
        }
    }

    fn width(&self, j: usize) -> f64 {
        self.dom.span(j)
    }

    fn eval(&self, z: &[f64]) -> Result<Eval> {
        let a = (self.left)(self.t, z);
        let b = (self.right)(self.t, z);
        if !a.is_finite() || !b.is_finite() {
            return Err(non_finite("function value", self.t, z));
        }
        Ok(Eval {
            violation: (a - b).abs(),
            scale: a.abs().max(b.abs()),
        })
    }

    fn witness(&self, z: &[f64]) -> Witness {
        Witness {
            kind: WitnessKind::Equality,
            t: self.t,
            x: z.to_vec(),
            y: None,
            k: None,
            index: None,
            aux: self.aux.clone(),
            system: None,
        }
    }
}

#[derive(Clone, Copy)]
enum Tol {
    Residual,
    Dependency,
}

impl Tol {
    fn at(self, scale: f64) -> f64 {
        match self {
            Tol::Residual => RESIDUAL_TOLERANCE * (1.0 + scale),
            Tol::Dependency => DEPENDENCY_TOLERANCE * (1.0 + scale),
        }
    }
}

/// Maximizes every problem and reports the overall worst point.
fn run(condition: Condition, problems: Vec<Box<dyn Problem + '_>>, dom: &SearchDomain, tol: Tol) -> Result<CheckReport> {
    let mut best: Option<(f64, Witness)> = None;
    let mut scale: f64 = 0.0;
    let mut evals = 0u64;
    for p in &problems {
        let out = maximize(p.as_ref(), dom)?;
        scale = scale.max(out.scale);
        evals += out.evals;
        if best.as_ref().is_none_or(|(v, _)| out.violation > *v) {
            best = Some((out.violation, p.witness(&out.z)));
        }
    }
    let tolerance = tol.at(scale);
    let (max_violation, witness) = match best {
        Some((v, w)) => (v, Some(w)),
        None => (0.0, None),
    };
    Ok(CheckReport {
        condition,
        max_violation,
        verdict: if max_violation > tolerance {
            Verdict::Violated
        } else {
            Verdict::SatisfiedOnDomain
        },
        witness,
        tolerance,
        samples_evaluated: evals,
        box_lo: dom.lo.clone(),
        box_hi: dom.hi.clone(),
        t_grid: dom.t_grid.clone(),
    })
}

fn check_shapes(cx: &CoefficientSet, cy: &CoefficientSet, theta: Option<&CovarianceSet>, dom: &SearchDomain) -> Result<()> {
    dom.validate()?;
    if cx.state_dim() != cy.state_dim() || cx.noise_dim() != cy.noise_dim() {
        return Err(Error::Dimension(format!(
            "systems '{}' and '{}' differ in shape",
            cx.id(),
            cy.id()
        )));
    }
    if dom.dim() != cx.state_dim() {
        return Err(Error::Dimension(format!(
            "search box is {}-dimensional, state dimension is {}",
            dom.dim(),
            cx.state_dim()
        )));
    }
    if let Some(theta) = theta {
        if theta.dim() != cx.noise_dim() {
            return Err(Error::Dimension(format!(
                "covariance set is {}-dimensional, noise dimension is {}",
                theta.dim(),
                cx.noise_dim()
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pair_check(
    condition: Condition,
    first: &CoefficientSet,
    second: &CoefficientSet,
    theta: &CovarianceSet,
    dom: &SearchDomain,
    order: Order,
    want: Want,
) -> Result<CheckReport> {
    check_shapes(first, second, Some(theta), dom)?;
    let mut problems: Vec<Box<dyn Problem>> = Vec::new();
    for &t in &dom.t_grid {
        for i in 0..dom.dim() {
            problems.push(Box::new(PairProblem {
                first,
                second,
                theta,
                dom,
                t,
                i,
                order,
                want,
            }));
        }
    }
    run(condition, problems, dom, Tol::Residual)
}

fn direction_check(
    condition: Condition,
    first: &CoefficientSet,
    second: &CoefficientSet,
    theta: &CovarianceSet,
    dom: &SearchDomain,
    want: Want,
) -> Result<CheckReport> {
    check_shapes(first, second, Some(theta), dom)?;
    let directions = sphere_directions(dom.dim(), dom.n_directions, dom.seed);
    let mut problems: Vec<Box<dyn Problem>> = Vec::new();
    for &t in &dom.t_grid {
        problems.push(Box::new(DirectionProblem {
            first,
            second,
            theta,
            dom,
            t,
            want,
            directions: &directions,
        }));
    }
    run(condition, problems, dom, Tol::Residual)
}

fn sigma_entry(c: &CoefficientSet, l: usize, i: usize, t: f64, x: &[f64]) -> f64 {
    let mut buf = vec![0.0; c.state_dim()];
    c.eval_sigma(l, t, x, &mut buf);
    buf[i]
}

fn sigma_product(c: &CoefficientSet, aux: &[usize], t: f64, x: &[f64]) -> f64 {
    let [l, k, i, j] = [aux[0], aux[1], aux[2], aux[3]];
    sigma_entry(c, l, i, t, x) * sigma_entry(c, k, j, t, x)
}

/// Index tuples `[l, k, i, j]` of the distinct products `(sigma_l)_i (sigma_k)_j`.
fn product_indices(c: &CoefficientSet) -> Vec<[usize; 4]> {
    let (n, d) = (c.state_dim(), c.noise_dim());
    let mut out = Vec::new();
    for l in 0..d {
        for k in 0..d {
            for i in 0..n {
                for j in 0..n {
                    if (l, i) <= (k, j) {
                        out.push([l, k, i, j]);
                    }
                }
            }
        }
    }
    out
}

fn allowed_mask(n: usize, coords: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &c in coords {
        mask[c] = true;
    }
    mask
}

fn product_dependency_problems<'a>(c: &'a CoefficientSet, system: usize, dom: &'a SearchDomain) -> Vec<Box<dyn Problem + 'a>> {
    let mut problems: Vec<Box<dyn Problem + 'a>> = Vec::new();
    for &t in &dom.t_grid {
        for idx in product_indices(c) {
            if !c.has_sigma(idx[0]) || !c.has_sigma(idx[1]) {
                continue;
            }
            problems.push(Box::new(DependencyProblem {
                func: Box::new(move |t, x| sigma_product(c, &idx, t, x)),
                allowed: allowed_mask(dom.dim(), &[idx[2], idx[3]]),
                dom,
                t,
                aux: idx.to_vec(),
                system: Some(system),
            }));
        }
    }
    problems
}

fn finish_empty(condition: Condition, dom: &SearchDomain) -> CheckReport {
    CheckReport {
        condition,
        max_violation: 0.0,
        witness: None,
        verdict: Verdict::SatisfiedOnDomain,
        tolerance: DEPENDENCY_TOLERANCE,
        samples_evaluated: 0,
        box_lo: dom.lo.clone(),
        box_hi: dom.hi.clone(),
        t_grid: dom.t_grid.clone(),
    }
}

fn run_or_empty(condition: Condition, problems: Vec<Box<dyn Problem + '_>>, dom: &SearchDomain, tol: Tol) -> Result<CheckReport> {
    if problems.is_empty() {
        Ok(finish_empty(condition, dom))
    } else {
        run(condition, problems, dom, tol)
    }
}

/// Residual `b_i(x) - b_bar_i(y) + G(...) <= 0` over `x <= y`, `x_i = y_i`.
pub fn check_b1(cx: &CoefficientSet, cy: &CoefficientSet, theta: &CovarianceSet, dom: &SearchDomain) -> Result<CheckReport> {
    pair_check(Condition::B1, cx, cy, theta, dom, Order::Below, Want::NonPositive)
}

/// `(sigma_l)_k` depends only on `x_k` in both systems, and the two systems
/// share `sigma`.
pub fn check_b2(cx: &CoefficientSet, cy: &CoefficientSet, dom: &SearchDomain) -> Result<CheckReport> {
    check_shapes(cx, cy, None, dom)?;
    let (n, d) = (cx.state_dim(), cx.noise_dim());
    let mut problems: Vec<Box<dyn Problem>> = Vec::new();
    for &t in &dom.t_grid {
        for (s, c) in [cx, cy].into_iter().enumerate() {
            for l in 0..d {
                if !c.has_sigma(l) {
                    continue;
                }
                for k in 0..n {
                    problems.push(Box::new(DependencyProblem {
                        func: Box::new(move |t, x| sigma_entry(c, l, k, t, x)),
                        allowed: allowed_mask(n, &[k]),
                        dom,
                        t,
                        aux: vec![l, k],
                        system: Some(s),
                    }));
                }
            }
        }
        for l in 0..d {
            if !cx.has_sigma(l) && !cy.has_sigma(l) {
                continue;
            }
            for k in 0..n {
                problems.push(Box::new(EqualityProblem {
                    left: Box::new(move |t, x| sigma_entry(cx, l, k, t, x)),
                    right: Box::new(move |t, x| sigma_entry(cy, l, k, t, x)),
                    dom,
                    t,
                    aux: vec![l, k],
                }));
            }
        }
    }
    run_or_empty(Condition::B2, problems, dom, Tol::Dependency)
}

/// `max |func(t, x') - func(t, x)|` over `x'` agreeing with `x` on `allowed`
/// (zero-based coordinates).
pub fn check_dependency<F>(func: F, allowed: &[usize], dom: &SearchDomain) -> Result<CheckReport>
where
    F: Fn(f64, &[f64]) -> f64 + Sync,
{
    dom.validate()?;
    if let Some(&bad) = allowed.iter().find(|&&c| c >= dom.dim()) {
        return Err(Error::Dimension(format!(
            "allowed coordinate {bad} outside a {}-dimensional box",
            dom.dim()
        )));
    }
    let func = &func;
    let mut problems: Vec<Box<dyn Problem>> = Vec::new();
    for &t in &dom.t_grid {
        problems.push(Box::new(DependencyProblem {
            func: Box::new(func),
            allowed: allowed_mask(dom.dim(), allowed),
            dom,
            t,
            aux: Vec::new(),
            system: None,
        }));
    }
    run(Condition::Dependency, problems, dom, Tol::Dependency)
}

/// `C1`: products `(sigma_l)_i (sigma_k)_j` depend only on `x_i, x_j`.
/// `C2`: the `B1` residual with both systems equal.
/// `C2'`: the same residual `>= 0` over `x >= y`, `x_i = y_i`.
pub fn check_c_family(c: &CoefficientSet, theta: &CovarianceSet, dom: &SearchDomain, variant: Condition) -> Result<CheckReport> {
    match variant {
        Condition::C1 => {
            check_shapes(c, c, None, dom)?;
            run_or_empty(Condition::C1, product_dependency_problems(c, 0, dom), dom, Tol::Dependency)
        }
        Condition::C2 => pair_check(Condition::C2, c, c, theta, dom, Order::Below, Want::NonPositive),
        Condition::C2Prime => pair_check(Condition::C2Prime, c, c, theta, dom, Order::Above, Want::NonNegative),
        other => Err(Error::Invalid(format!("{other} is not a C-family condition"))),
    }
}

/// Order conditions between `cx = (b, h, sigma)` and `cy = (b_bar, h_bar, sigma_bar)`.
pub fn check_d_family(
    cx: &CoefficientSet,
    cy: &CoefficientSet,
    theta: &CovarianceSet,
    dom: &SearchDomain,
    variant: Condition,
) -> Result<CheckReport> {
    match variant {
        Condition::D1 => {
            check_shapes(cx, cy, None, dom)?;
            let mut problems = product_dependency_problems(cx, 0, dom);
            for &t in &dom.t_grid {
                for idx in product_indices(cx) {
                    let any = |c: &CoefficientSet| c.has_sigma(idx[0]) && c.has_sigma(idx[1]);
                    if !any(cx) && !any(cy) {
                        continue;
                    }
                    problems.push(Box::new(EqualityProblem {
                        left: Box::new(move |t, x| sigma_product(cx, &idx, t, x)),
                        right: Box::new(move |t, x| sigma_product(cy, &idx, t, x)),
                        dom,
                        t,
                        aux: idx.to_vec(),
                    }));
                }
            }
            run_or_empty(Condition::D1, problems, dom, Tol::Dependency)
        }
        Condition::D3 => {
            check_shapes(cx, cy, None, dom)?;
            run_or_empty(Condition::D3, product_dependency_problems(cx, 0, dom), dom, Tol::Dependency)
        }
        Condition::D2 | Condition::D4 => pair_check(variant, cx, cy, theta, dom, Order::Above, Want::NonNegative),
        Condition::D4Prime => pair_check(variant, cy, cx, theta, dom, Order::Below, Want::NonPositive),
        Condition::D2Prime => direction_check(variant, cx, cy, theta, dom, Want::NonNegative),
        Condition::D5 => direction_check(variant, cy, cx, theta, dom, Want::NonPositive),
        other => Err(Error::Invalid(format!("{other} is not a D-family condition"))),
    }
}

/// Runs any named condition. Single-system conditions use `cx`.
pub fn check(condition: Condition, cx: &CoefficientSet, cy: &CoefficientSet, theta: &CovarianceSet, dom: &SearchDomain) -> Result<CheckReport> {
    match condition {
        Condition::B1 => check_b1(cx, cy, theta, dom),
        Condition::B2 => check_b2(cx, cy, dom),
        Condition::C1 | Condition::C2 | Condition::C2Prime => check_c_family(cx, theta, dom, condition),
        Condition::Dependency => Err(Error::Invalid("dependency checks need a function; use check_dependency".into())),
        _ => check_d_family(cx, cy, theta, dom, condition),
    }
}

/// Recomputes the violation at a report's witness.
pub fn reevaluate(report: &CheckReport, cx: &CoefficientSet, cy: &CoefficientSet, theta: &CovarianceSet) -> Result<f64> {
    let w = report
        .witness
        .as_ref()
        .ok_or_else(|| Error::Invalid("report has no witness".into()))?;
    let pick = |s: Option<usize>| if s == Some(1) { cy } else { cx };
    match w.kind {
        WitnessKind::Residual => {
            let y = w.y.as_ref().ok_or_else(|| Error::Invalid("residual witness lacks y".into()))?;
            let i = w.index.ok_or_else(|| Error::Invalid("residual witness lacks index".into()))?;
            let (first, second, want) = match report.condition {
                Condition::B1 => (cx, cy, Want::NonPositive),
                Condition::C2 => (cx, cx, Want::NonPositive),
                Condition::C2Prime => (cx, cx, Want::NonNegative),
                Condition::D2 | Condition::D4 => (cx, cy, Want::NonNegative),
                Condition::D4Prime => (cy, cx, Want::NonPositive),
                other => return Err(Error::Invalid(format!("{other} has no pair residual"))),
            };
            Ok(want.violation(pair_residual(first, second, theta, w.t, &w.x, y, i)?))
        }
        WitnessKind::Direction => {
            let k = w.k.as_ref().ok_or_else(|| Error::Invalid("direction witness lacks K".into()))?;
            let (first, second, want) = match report.condition {
                Condition::D5 => (cy, cx, Want::NonPositive),
                Condition::D2Prime => (cx, cy, Want::NonNegative),
                other => return Err(Error::Invalid(format!("{other} has no directional residual"))),
            };
            Ok(want.violation(direction_residual(first, second, theta, w.t, &w.x, k)?))
        }
        WitnessKind::Dependency => {
            let y = w.y.as_ref().ok_or_else(|| Error::Invalid("dependency witness lacks y".into()))?;
            let c = pick(w.system);
            let f = |x: &[f64]| match w.aux.len() {
                4 => Ok(sigma_product(c, &w.aux, w.t, x)),
                2 => Ok(sigma_entry(c, w.aux[0], w.aux[1], w.t, x)),
                _ => Err(Error::Invalid("generic dependency witness; use reevaluate_dependency".into())),
            };
            Ok((f(y)? - f(&w.x)?).abs())
        }
        WitnessKind::Equality => {
            let v = |c: &CoefficientSet| match w.aux.len() {
                4 => Ok(sigma_product(c, &w.aux, w.t, &w.x)),
                2 => Ok(sigma_entry(c, w.aux[0], w.aux[1], w.t, &w.x)),
                _ => Err(Error::Invalid("malformed equality witness".into())),
            };
            Ok((v(cx)? - v(cy)?).abs())
        }
    }
}

/// Recomputes the violation of a [`check_dependency`] report.
pub fn reevaluate_dependency<F: Fn(f64, &[f64]) -> f64>(report: &CheckReport, func: F) -> Result<f64> {
    let w = report
        .witness
        .as_ref()
        .ok_or_else(|| Error::Invalid("report has no witness".into()))?;
    let y = w.y.as_ref().ok_or_else(|| Error::Invalid("dependency witness lacks y".into()))?;
    Ok((func(w.t, y) - func(w.t, &w.x)).abs())
}
