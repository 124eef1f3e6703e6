//! Monotone explicit finite differences for
//!
//! ```text
//! u_t = <b, Du> + G([<D^2u sigma_l, sigma_k> + 2 <Du, h_lk>]_{l,k}),   u(0, x) = f(x)
//! ```
//!
//! in one or two space dimensions. Writing `G` as a maximum over the covariance
//! set turns the right-hand side into `max_m L_m u` with linear operators
//!
//! ```text
//! L_m u = 1/2 sum_ij a^m_ij D_ij u + sum_i beta^m_i D_i u,
//! a^m = sigma Sigma_m sigma^T,  beta^m = b + sum_lk (Sigma_m)_lk h_lk.
//! ```
//!
//! Each `L_m` is discretized with nonnegative neighbour weights (upwind first
//! differences on `beta^m`, central second differences, the 7-point cross
//! stencil oriented by the sign of `a^m_12`), so the explicit step is monotone
//! whenever `dt * sum(weights) <= 1` at every node.
//!
//! Time runs forward from the initial datum. For time-dependent coefficients
//! level `tau` is advanced with coefficients frozen at `T - tau`, so the final
//! level equals `E[f(X_T^{0,x})]` under the usual time reversal.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::g::CovarianceSet;
use crate::generator::TestFunction;
use crate::gsde::CoefficientSet;

/// Fraction of the monotonicity bound used when `dt` is chosen automatically.
pub const AUTO_DT_FRACTION: f64 = 0.9;
/// Upper bound on stored time levels (the final level is always kept).
pub const MAX_STORED_LEVELS: usize = 200;
pub const GRID_TOLERANCE: f64 = 1e-8;
const BINARY_MAGIC: &[u8; 8] = b"GDPDE001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryRule {
    /// `u_0 = 2 u_1 - u_2` on every face.
    LinearExtrapolation,
    /// `u_0 = u_1` on every face; keeps the whole scheme monotone.
    Neumann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    nodes: Vec<usize>,
    dt: Option<f64>,
    horizon: f64,
    boundary: BoundaryRule,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>, horizon: f64) -> Result<Grid> {
        let g = Grid {
            lo,
            hi,
            nodes,
            dt: None,
            horizon,
            boundary: BoundaryRule::LinearExtrapolation,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let n = self.lo.len();
        if !(1..=2).contains(&n) || self.hi.len() != n || self.nodes.len() != n {
            return Err(Error::Dimension(format!(
                "grids are 1- or 2-dimensional with matching bounds and node counts; got lo {:?}, hi {:?}, nodes {:?}",
                self.lo, self.hi, self.nodes
            )));
        }
        for a in 0..n {
            if !(self.lo[a] < self.hi[a]) || !self.lo[a].is_finite() || !self.hi[a].is_finite() {
                return Err(Error::Invalid(format!("grid axis {a}: need finite lo < hi")));
            }
            if self.nodes[a] < 3 {
                return Err(Error::Invalid(format!("grid axis {a}: need at least 3 nodes, got {}", self.nodes[a])));
            }
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Grid> {
        self.dt = Some(dt);
        self.validate()?;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Grid> {
        self.horizon = horizon;
        self.validate()?;
        Ok(self)
    }

    pub fn with_boundary(mut self, rule: BoundaryRule) -> Grid {
        self.boundary = rule;
        self
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> Option<f64> {
        self.dt
    }

    pub fn boundary(&self) -> BoundaryRule {
        self.boundary
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.nodes[axis] - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.nodes[axis] - 1 {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.dx(axis)
        }
    }

    /// Flat index with axis 0 fastest.
    pub fn index(&self, multi: &[usize]) -> usize {
        match multi.len() {
            1 => multi[0],
            _ => multi[0] + self.nodes[0] * multi[1],
        }
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        match self.dim() {
            1 => vec![idx],
            _ => vec![idx % self.nodes[0], idx / self.nodes[0]],
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }

    fn is_interior(&self, multi: &[usize]) -> bool {
        multi.iter().zip(&self.nodes).all(|(&i, &n)| i > 0 && i + 1 < n)
    }

    fn same_nodes(&self, other: &Grid) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.nodes == other.nodes
    }
}

/// Neighbour offsets per dimension; the center is excluded.
fn offsets(n: usize) -> &'static [[i64; 2]] {
    const ONE: [[i64; 2]; 2] = [[-1, 0], [1, 0]];
    const TWO: [[i64; 2]; 8] = [[-1, -1], [0, -1], [1, -1], [-1, 0], [1, 0], [-1, 1], [0, 1], [1, 1]];
    if n == 1 {
        &ONE
    } else {
        &TWO
    }
}

/// Per interior node and covariance index, nonnegative neighbour weights.
struct Stencil {
    interior: Vec<usize>,
    /// `interior.len() x n_theta x n_offsets`.
    weights: Vec<f64>,
    /// Flat neighbour index deltas matching `offsets`.
    deltas: Vec<isize>,
    n_theta: usize,
    max_weight_sum: f64,
    max_a_diag: Vec<f64>,
    max_beta: Vec<f64>,
}

impl Stencil {
    fn build(c: &CoefficientSet, theta: &CovarianceSet, grid: &Grid, t: f64) -> Result<Stencil> {
        let n = grid.dim();
        let d = c.noise_dim();
        let offs = offsets(n);
        let deltas: Vec<isize> = offs
            .iter()
            .map(|o| if n == 1 { o[0] as isize } else { o[0] as isize + grid.nodes[0] as isize * o[1] as isize })
            .collect();
        let interior: Vec<usize> = (0..grid.len()).filter(|&i| grid.is_interior(&grid.multi_index(i))).collect();
        let n_theta = theta.len();
        let dx: Vec<f64> = (0..n).map(|a| grid.dx(a)).collect();

        let per_node = interior
            .par_iter()
            .map(|&idx| -> Result<(Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
                let x = grid.point(idx);
                let sigma = c.sigma_matrix(t, &x);
                let mut b = vec![0.0; n];
                c.eval_drift(t, &x, &mut b);
                let mut hbuf = vec![0.0; n];
                let hs: Vec<Vec<f64>> = (0..d * d)
                    .map(|lk| {
                        c.eval_h(lk / d, lk % d, t, &x, &mut hbuf);
                        hbuf.clone()
                    })
                    .collect();
                let mut w = vec![0.0; n_theta * offs.len()];
                let mut wmax: f64 = 0.0;
                let mut a_diag = vec![0.0; n];
                let mut beta_abs = vec![0.0; n];
                for m in 0..n_theta {
                    let cov = theta.covariance(m).entries();
                    // a = sigma Sigma sigma^T
                    let mut a = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for l in 0..d {
                                for k in 0..d {
                                    acc += sigma[i * d + l] * cov[l * d + k] * sigma[j * d + k];
                                }
                            }
                            a[i * n + j] = acc;
                        }
                    }
                    let mut beta = b.clone();
                    for lk in 0..d * d {
                        for i in 0..n {
                            beta[i] += cov[lk] * hs[lk][i];
                        }
                    }
                    let ws = &mut w[m * offs.len()..(m + 1) * offs.len()];
                    fill_weights(n, &a, &beta, &dx, ws);
                    if let Some(k) = ws.iter().position(|&v| v < 0.0) {
                        return Err(Error::Invalid(format!(
                            "cross-derivative stencil not diagonally dominant at x = {x:?} for covariance {m}: \
                             a = {a:?}, dx = {dx:?}, offset {:?} has weight {}",
                            offs[k], ws[k]
                        )));
                    }
                    if ws.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("stencil weights at x = {x:?}")));
                    }
                    wmax = wmax.max(ws.iter().sum());
                    for i in 0..n {
                        a_diag[i] = f64::max(a_diag[i], a[i * n + i]);
                        beta_abs[i] = f64::max(beta_abs[i], beta[i].abs());
                    }
                }
                Ok((w, wmax, a_diag, beta_abs))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut weights = Vec::with_capacity(interior.len() * n_theta * offs.len());
        let mut max_weight_sum: f64 = 0.0;
        let mut max_a_diag = vec![0.0; n];
        let mut max_beta = vec![0.0; n];
        for (w, s, a, bt) in per_node {
            weights.extend_from_slice(&w);
            max_weight_sum = max_weight_sum.max(s);
            for i in 0..n {
                max_a_diag[i] = f64::max(max_a_diag[i], a[i]);
                max_beta[i] = f64::max(max_beta[i], bt[i]);
            }
        }
        Ok(Stencil {
            interior,
            weights,
            deltas,
            n_theta,
            max_weight_sum,
            max_a_diag,
            max_beta,
        })
    }

    fn stability_bound(&self) -> f64 {
        if self.max_weight_sum > 0.0 {
            1.0 / self.max_weight_sum
        } else {
            f64::INFINITY
        }
    }
}

/// Neighbour weights for one linear operator, in `offsets` order.
fn fill_weights(n: usize, a: &[f64], beta: &[f64], dx: &[f64], w: &mut [f64]) {
    w.fill(0.0);
    if n == 1 {
        let diff = 0.5 * a[0] / (dx[0] * dx[0]);
        w[0] = diff + (-beta[0]).max(0.0) / dx[0];
        w[1] = diff + beta[0].max(0.0) / dx[0];
        return;
    }
    let (hx, hy) = (dx[0], dx[1]);
    let a12 = 0.5 * (a[1] + a[2]);
    let cross = a12.abs() / (2.0 * hx * hy);
    // offsets: 0 (-1,-1) 1 (0,-1) 2 (1,-1) 3 (-1,0) 4 (1,0) 5 (-1,1) 6 (0,1) 7 (1,1)
    let ax = 0.5 * a[0] / (hx * hx) - cross;
    let ay = 0.5 * a[3] / (hy * hy) - cross;
    w[3] = ax + (-beta[0]).max(0.0) / hx;
    w[4] = ax + beta[0].max(0.0) / hx;
    w[1] = ay + (-beta[1]).max(0.0) / hy;
    w[6] = ay + beta[1].max(0.0) / hy;
    if a12 >= 0.0 {
        w[0] = cross;
        w[7] = cross;
    } else {
        w[2] = cross;
        w[5] = cross;
    }
    // roundoff-sized negatives from exact dominance are zero
    let scale = 0.5 * (a[0] / (hx * hx) + a[3] / (hy * hy)) + cross;
    for v in w.iter_mut() {
        if *v < 0.0 && *v > -1e-12 * scale {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeInfo {
    pub stencil: String,
    pub boundary: BoundaryRule,
    pub dt: f64,
    pub n_steps: usize,
    pub stability_bound: f64,
    /// Per-axis distance from each face excluded from checks and queries.
    pub trust_margin: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PDESolution {
    grid: Grid,
    coefficient_id: String,
    function_id: String,
    theta_size: usize,
    scheme: SchemeInfo,
    times: Vec<f64>,
    levels: Vec<Vec<f64>>,
    /// Covariance index attaining the maximum at each node in the final step.
    argmax: Vec<Option<usize>>,
}

fn apply_boundary(grid: &Grid, u: &mut [f64]) {
    let rule = grid.boundary;
    let fill = |inner: f64, next: f64| match rule {
        BoundaryRule::LinearExtrapolation => 2.0 * inner - next,
        BoundaryRule::Neumann => inner,
    };
    if grid.dim() == 1 {
        let n = grid.nodes[0];
        u[0] = fill(u[1], u[2]);
        u[n - 1] = fill(u[n - 2], u[n - 3]);
        return;
    }
    let (nx, ny) = (grid.nodes[0], grid.nodes[1]);
    let at = |i: usize, j: usize| i + nx * j;
    // edges first, then corners from the updated edges
    for j in 1..ny - 1 {
        u[at(0, j)] = fill(u[at(1, j)], u[at(2, j)]);
        u[at(nx - 1, j)] = fill(u[at(nx - 2, j)], u[at(nx - 3, j)]);
    }
    for i in 1..nx - 1 {
        u[at(i, 0)] = fill(u[at(i, 1)], u[at(i, 2)]);
        u[at(i, ny - 1)] = fill(u[at(i, ny - 2)], u[at(i, ny - 3)]);
    }
    for j in [0, ny - 1] {
        u[at(0, j)] = fill(u[at(1, j)], u[at(2, j)]);
        u[at(nx - 1, j)] = fill(u[at(nx - 2, j)], u[at(nx - 3, j)]);
    }
}

/// One explicit step from `u` into `next`; records argmax when `argmax` is given.
fn step(stencil: &Stencil, u: &[f64], next: &mut [f64], dt: f64, mut argmax: Option<&mut [Option<usize>]>) {
    let n_off = stencil.deltas.len();
    let updates: Vec<(f64, usize)> = stencil
        .interior
        .par_iter()
        .enumerate()
        .map(|(p, &idx)| {
            let uc = u[idx];
            let mut best = f64::NEG_INFINITY;
            let mut best_m = 0;
            for m in 0..stencil.n_theta {
                let w = &stencil.weights[(p * stencil.n_theta + m) * n_off..(p * stencil.n_theta + m + 1) * n_off];
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    if wk != 0.0 {
                        acc += wk * (u[(idx as isize + stencil.deltas[k]) as usize] - uc);
                    }
                }
                if acc > best {
                    best = acc;
                    best_m = m;
                }
            }
            (uc + dt * best, best_m)
        })
        .collect();
    for (p, &idx) in stencil.interior.iter().enumerate() {
        next[idx] = updates[p].0;
        if let Some(am) = argmax.as_deref_mut() {
            am[idx] = Some(updates[p].1);
        }
    }
}

/// Solves both systems on one time grid so the solutions can be compared
/// nodewise; an automatic step takes the smaller of the two stable steps.
pub fn solve_pair(
    cx: &CoefficientSet,
    cy: &CoefficientSet,
    theta: &CovarianceSet,
    f: &TestFunction,
    grid: &Grid,
) -> Result<(PDESolution, PDESolution)> {
    let u = solve(cx, theta, f, grid)?;
    let ub = solve(cy, theta, f, grid)?;
    if grid.dt.is_some() || u.scheme().n_steps == ub.scheme().n_steps {
        return Ok((u, ub));
    }
    let shared = grid.clone().with_dt(u.scheme().dt.min(ub.scheme().dt))?;
    if u.scheme().n_steps < ub.scheme().n_steps {
        Ok((solve(cx, theta, f, &shared)?, ub))
    } else {
        Ok((u, solve(cy, theta, f, &shared)?))
    }
}

/// Marches `u(0, .) = f` to the grid horizon.
pub fn solve(c: &CoefficientSet, theta: &CovarianceSet, f: &TestFunction, grid: &Grid) -> Result<PDESolution> {
    grid.validate()?;
    let n = grid.dim();
    if c.state_dim() != n || f.dim() != n {
        return Err(Error::Dimension(format!(
            "grid is {n}-dimensional, coefficients have state dimension {} and the initial datum {}",
            c.state_dim(),
            f.dim()
        )));
    }
    if theta.dim() != c.noise_dim() {
        return Err(Error::Dimension(format!(
            "covariance set is {}-dimensional, noise dimension is {}",
            theta.dim(),
            c.noise_dim()
        )));
    }
    let horizon = grid.horizon;
    let homogeneous = c.is_time_homogeneous();
    let mut stencil = Stencil::build(c, theta, grid, if homogeneous { 0.0 } else { horizon })?;

    let bound = stencil.stability_bound();
    let (dt, n_steps) = match grid.dt {
        Some(dt) => {
            if dt > bound {
                return Err(Error::Stability { dt, bound });
            }
            let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
            (horizon / steps as f64, steps)
        }
        None if bound.is_finite() => {
            let steps = (horizon / (AUTO_DT_FRACTION * bound)).ceil().max(1.0) as usize;
            (horizon / steps as f64, steps)
        }
        None => (horizon, 1),
    };

    let mut u: Vec<f64> = (0..grid.len()).map(|i| f.eval(&grid.point(i))).collect();
    if let Some(i) = u.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("initial datum at node {:?}", grid.point(i))));
    }
    let stride = n_steps.div_ceil(MAX_STORED_LEVELS).max(1);
    let mut times = vec![0.0];
    let mut levels = vec![u.clone()];
    let mut next = u.clone();
    let mut argmax = vec![None; grid.len()];
    let mut bound_seen = bound;
    let mut a_diag = stencil.max_a_diag.clone();
    let mut beta = stencil.max_beta.clone();

    for k in 0..n_steps {
        if !homogeneous && k > 0 {
            stencil = Stencil::build(c, theta, grid, horizon - k as f64 * dt)?;
            if dt > stencil.stability_bound() {
                return Err(Error::Stability {
                    dt,
                    bound: stencil.stability_bound(),
                });
            }
            bound_seen = bound_seen.min(stencil.stability_bound());
            for i in 0..n {
                a_diag[i] = a_diag[i].max(stencil.max_a_diag[i]);
                beta[i] = beta[i].max(stencil.max_beta[i]);
            }
        }
        let last = k + 1 == n_steps;
        step(&stencil, &u, &mut next, dt, if last { Some(&mut argmax) } else { None });
        apply_boundary(grid, &mut next);
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "solution at node {:?} (index {i}) on level {}",
                grid.point(i),
                k + 1
            )));
        }
        std::mem::swap(&mut u, &mut next);
        if (k + 1) % stride == 0 || last {
            times.push(if last { horizon } else { (k + 1) as f64 * dt });
            levels.push(u.clone());
        }
    }

    let trust_margin = (0..n)
        .map(|i| 3.0 * a_diag[i].sqrt() * horizon.sqrt() + beta[i] * horizon)
        .collect();
    Ok(PDESolution {
        grid: grid.clone(),
        coefficient_id: c.id().to_string(),
        function_id: f.id().to_string(),
        theta_size: theta.len(),
        scheme: SchemeInfo {
            stencil: if n == 1 { "3-point upwind".into() } else { "7-point cross, upwind".into() },
            boundary: grid.boundary,
            dt,
            n_steps,
            stability_bound: bound_seen,
            trust_margin,
        },
        times,
        levels,
        argmax,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub min_forward_difference: f64,
    pub witness_time: f64,
    pub witness_axis: usize,
    pub witness_x: Vec<f64>,
    pub nondecreasing: bool,
    pub tolerance: f64,
    pub trust_lo: Vec<f64>,
    pub trust_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub min_gap: f64,
    pub witness_time: f64,
    pub witness_x: Vec<f64>,
    pub witness_x_bar: Vec<f64>,
    /// Minimum gap at each stored time.
    pub per_level_min: Vec<(f64, f64)>,
    /// `nodewise` when the second solution is verified nondecreasing,
    /// otherwise `ordered-pairs`.
    pub reduction: String,
    pub dominates: bool,
    pub tolerance: f64,
}

impl PDESolution {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn scheme(&self) -> &SchemeInfo {
        &self.scheme
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn final_level(&self) -> &[f64] {
        self.levels.last().expect("at least the initial level")
    }

    pub fn argmax(&self) -> &[Option<usize>] {
        &self.argmax
    }

    pub fn coefficient_id(&self) -> &str {
        &self.coefficient_id
    }

    pub fn function_id(&self) -> &str {
        &self.function_id
    }

    pub fn theta_size(&self) -> usize {
        self.theta_size
    }

    pub fn trust_lo(&self) -> Vec<f64> {
        (0..self.grid.dim()).map(|a| self.grid.lo[a] + self.scheme.trust_margin[a]).collect()
    }

    pub fn trust_hi(&self) -> Vec<f64> {
        (0..self.grid.dim()).map(|a| self.grid.hi[a] - self.scheme.trust_margin[a]).collect()
    }

    /// Index range `[first, last]` of trusted nodes per axis.
    fn trust_ranges(&self) -> Result<Vec<(usize, usize)>> {
        let (lo, hi) = (self.trust_lo(), self.trust_hi());
        (0..self.grid.dim())
            .map(|a| {
                let first = (0..self.grid.nodes[a]).find(|&i| self.grid.coord(a, i) >= lo[a] - 1e-12);
                let last = (0..self.grid.nodes[a]).rev().find(|&i| self.grid.coord(a, i) <= hi[a] + 1e-12);
                match (first, last) {
                    (Some(f), Some(l)) if f <= l => Ok((f, l)),
                    _ => Err(Error::Invalid(format!(
                        "trust region on axis {a} is empty: margin {} on [{}, {}]; widen the grid or shorten the horizon",
                        self.scheme.trust_margin[a], self.grid.lo[a], self.grid.hi[a]
                    ))),
                }
            })
            .collect()
    }

    fn trusted_nodes(&self) -> Result<Vec<usize>> {
        let r = self.trust_ranges()?;
        Ok(match self.grid.dim() {
            1 => (r[0].0..=r[0].1).collect(),
            _ => (r[1].0..=r[1].1)
                .flat_map(|j| (r[0].0..=r[0].1).map(move |i| (i, j)))
                .map(|(i, j)| self.grid.index(&[i, j]))
                .collect(),
        })
    }

    /// Value at `(t, x)`: nearest stored level in time, multilinear in space.
    pub fn semigroup_value(&self, t: f64, x: &[f64]) -> Result<f64> {
        let g = &self.grid;
        if x.len() != g.dim() {
            return Err(Error::Dimension(format!("query point has length {}, grid is {}-dimensional", x.len(), g.dim())));
        }
        if !(t >= 0.0 && t <= g.horizon * (1.0 + 1e-12)) {
            return Err(Error::OutOfRange(format!("time {t} outside [0, {}]", g.horizon)));
        }
        for a in 0..g.dim() {
            if !(x[a] >= g.lo[a] && x[a] <= g.hi[a]) {
                return Err(Error::OutOfRange(format!(
                    "x_{} = {} outside [{}, {}]",
                    a + 1,
                    x[a],
                    g.lo[a],
                    g.hi[a]
                )));
            }
        }
        let k = nearest(&self.times, t);
        let u = &self.levels[k];
        let cell: Vec<(usize, f64)> = (0..g.dim())
            .map(|a| {
                let s = (x[a] - g.lo[a]) / g.dx(a);
                let i = (s.floor() as usize).min(g.nodes[a] - 2);
                let w = s - i as f64;
                // exact node hits read the node
                if w == 0.0 || x[a] == g.coord(a, i) {
                    (i, 0.0)
                } else if x[a] == g.coord(a, i + 1) {
                    (i, 1.0)
                } else {
                    (i, w)
                }
            })
            .collect();
        Ok(match g.dim() {
            1 => {
                let (i, w) = cell[0];
                if w == 0.0 {
                    u[i]
                } else if w == 1.0 {
                    u[i + 1]
                } else {
                    (1.0 - w) * u[i] + w * u[i + 1]
                }
            }
            _ => {
                let ((i, wx), (j, wy)) = (cell[0], cell[1]);
                let v = |di: usize, dj: usize| u[g.index(&[i + di, j + dj])];
                let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else if w == 1.0 { b } else { (1.0 - w) * a + w * b };
                lerp(lerp(v(0, 0), v(1, 0), wx), lerp(v(0, 1), v(1, 1), wx), wy)
            }
        })
    }

    fn max_abs_trusted(&self, nodes: &[usize]) -> f64 {
        self.levels
            .iter()
            .flat_map(|u| nodes.iter().map(move |&i| u[i].abs()))
            .fold(0.0, f64::max)
    }

    /// Minimum forward difference along each axis over trusted nodes and
    /// stored levels.
    pub fn monotonicity_check(&self) -> Result<MonotonicityReport> {
        let ranges = self.trust_ranges()?;
        let nodes = self.trusted_nodes()?;
        let g = &self.grid;
        let mut best = (f64::INFINITY, 0.0, 0, vec![0.0; g.dim()]);
        for (k, u) in self.levels.iter().enumerate() {
            for &idx in &nodes {
                let mi = g.multi_index(idx);
                for a in 0..g.dim() {
                    if mi[a] >= ranges[a].1 {
                        continue;
                    }
                    let mut nb = mi.clone();
                    nb[a] += 1;
                    let diff = u[g.index(&nb)] - u[idx];
                    if diff < best.0 {
                        best = (diff, self.times[k], a, g.point(idx));
                    }
                }
            }
        }
        let tolerance = GRID_TOLERANCE * (1.0 + self.max_abs_trusted(&nodes));
        Ok(MonotonicityReport {
            min_forward_difference: best.0,
            witness_time: best.1,
            witness_axis: best.2,
            witness_x: best.3,
            nondecreasing: best.0 >= -tolerance,
            tolerance,
            trust_lo: self.trust_lo(),
            trust_hi: self.trust_hi(),
        })
    }

    /// Minimum of `u(t, x) - u_bar(t, x_bar)` over trusted nodes `x >= x_bar`,
    /// with `self = u` and `other = u_bar`.
    pub fn dominance_check(&self, other: &PDESolution) -> Result<DominanceReport> {
        if !self.grid.same_nodes(&other.grid) || self.times != other.times {
            return Err(Error::Dimension("dominance check needs identical grids and stored times".into()));
        }
        // both trust regions must hold
        let lo: Vec<f64> = self.trust_lo().iter().zip(other.trust_lo()).map(|(a, b)| a.max(b)).collect();
        let hi: Vec<f64> = self.trust_hi().iter().zip(other.trust_hi()).map(|(a, b)| a.min(b)).collect();
        let mut view = self.clone();
        view.scheme.trust_margin = (0..self.grid.dim())
            .map(|a| (lo[a] - self.grid.lo[a]).max(self.grid.hi[a] - hi[a]))
            .collect();
        let ranges = view.trust_ranges()?;
        let nodes = view.trusted_nodes()?;
        let mut other_view = other.clone();
        other_view.scheme.trust_margin = view.scheme.trust_margin.clone();
        let nodewise = other_view.monotonicity_check()?.nondecreasing;

        let g = &self.grid;
        let mut best = (f64::INFINITY, 0.0, vec![], vec![]);
        let mut per_level = Vec::with_capacity(self.levels.len());
        for (k, (u, ub)) in self.levels.iter().zip(&other.levels).enumerate() {
            let mut level_min = f64::INFINITY;
            let mut consider = |gap: f64, x: usize, xb: usize, best: &mut (f64, f64, Vec<f64>, Vec<f64>)| {
                level_min = level_min.min(gap);
                if gap < best.0 {
                    *best = (gap, self.times[k], g.point(x), g.point(xb));
                }
            };
            if nodewise {
                for &idx in &nodes {
                    consider(u[idx] - ub[idx], idx, idx, &mut best);
                }
            } else {
                let pm = prefix_max(g, &ranges, ub);
                for &idx in &nodes {
                    let (val, arg) = pm[&idx];
                    consider(u[idx] - val, idx, arg, &mut best);
                }
            }
            per_level.push((self.times[k], level_min));
        }
        let tolerance = GRID_TOLERANCE * (1.0 + self.max_abs_trusted(&nodes).max(other.max_abs_trusted(&nodes)));
        Ok(DominanceReport {
            min_gap: best.0,
            witness_time: best.1,
            witness_x: best.2,
            witness_x_bar: best.3,
            per_level_min: per_level,
            reduction: if nodewise { "nodewise".into() } else { "ordered-pairs".into() },
            dominates: best.0 >= -tolerance,
            tolerance,
        })
    }

    /// CSV rows `t,x_1[,x_2],u` over stored levels.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut out = String::from("t");
        for a in 1..=g.dim() {
            out.push_str(&format!(",x_{a}"));
        }
        out.push_str(",u\n");
        for (t, u) in self.times.iter().zip(&self.levels) {
            for (idx, v) in u.iter().enumerate() {
                out.push_str(&t.to_string());
                for x in g.point(idx) {
                    out.push_str(&format!(",{x}"));
                }
                out.push_str(&format!(",{v}\n"));
            }
        }
        out
    }

    /// Binary dump: magic `GDPDE001`, `u32` dims, per axis `u64` count and
    /// `f64` lo, hi, then `f64` dt, `u64` level count, the level times and
    /// every level's values (axis 0 fastest). All little-endian.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let g = &self.grid;
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(g.dim() as u32).to_le_bytes())?;
        for a in 0..g.dim() {
            w.write_all(&(g.nodes[a] as u64).to_le_bytes())?;
            w.write_all(&g.lo[a].to_le_bytes())?;
            w.write_all(&g.hi[a].to_le_bytes())?;
        }
        w.write_all(&self.scheme.dt.to_le_bytes())?;
        w.write_all(&(self.levels.len() as u64).to_le_bytes())?;
        for t in &self.times {
            w.write_all(&t.to_le_bytes())?;
        }
        for u in &self.levels {
            for v in u {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn nearest(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (k, &s) in times.iter().enumerate() {
        if (s - t).abs() < (times[best] - t).abs() {
            best = k;
        }
    }
    best
}

/// For each trusted node `x`, the maximum of `u` over trusted `x_bar <= x` and
/// its first attaining node.
fn prefix_max(g: &Grid, ranges: &[(usize, usize)], u: &[f64]) -> std::collections::HashMap<usize, (f64, usize)> {
    let mut out = std::collections::HashMap::new();
    match g.dim() {
        1 => {
            let mut cur = (f64::NEG_INFINITY, 0);
            for i in ranges[0].0..=ranges[0].1 {
                if u[i] > cur.0 {
                    cur = (u[i], i);
                }
                out.insert(i, cur);
            }
        }
        _ => {
            let (r0, r1) = (ranges[0], ranges[1]);
            let w = r0.1 - r0.0 + 1;
            let mut prev_row: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, 0); w];
            for j in r1.0..=r1.1 {
                let mut run = (f64::NEG_INFINITY, 0);
                for (c, i) in (r0.0..=r0.1).enumerate() {
                    let idx = g.index(&[i, j]);
                    if u[idx] > run.0 {
                        run = (u[idx], idx);
                    }
                    let below = prev_row[c];
                    let cur = if below.0 >= run.0 { below } else { run };
                    prev_row[c] = cur;
                    out.insert(idx, cur);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDump {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    pub dt: f64,
    pub times: Vec<f64>,
    pub levels: Vec<Vec<f64>>,
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

pub fn read_binary(mut r: impl Read) -> Result<GridDump> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Invalid("not a grid dump (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let dims = u32::from_le_bytes(b4) as usize;
    if !(1..=2).contains(&dims) {
        return Err(Error::Invalid(format!("grid dump declares {dims} dimensions")));
    }
    let mut nodes = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for _ in 0..dims {
        nodes.push(read_u64(&mut r)? as usize);
        lo.push(read_f64(&mut r)?);
        hi.push(read_f64(&mut r)?);
    }
    let dt = read_f64(&mut r)?;
    let n_levels = read_u64(&mut r)? as usize;
    let times = (0..n_levels).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
    let count: usize = nodes.iter().product();
    let levels = (0..n_levels)
        .map(|_| (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(GridDump {
        lo,
        hi,
        nodes,
        dt,
        times,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn theta1() -> CovarianceSet {
        CovarianceSet::interval(0.25, 1.0).unwrap()
    }

    fn unit_sigma() -> CoefficientSet {
        CoefficientSet::builder(1, 1).sigma(0, |_, _, o| o[0] = 1.0).build().unwrap()
    }

    fn interior_max_err(sol: &PDESolution, exact: impl Fn(f64, &[f64]) -> f64) -> f64 {
        let t = sol.grid().horizon();
        let nodes = sol.trusted_nodes().unwrap();
        nodes
            .iter()
            .map(|&i| (sol.final_level()[i] - exact(t, &sol.grid().point(i))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_datum_is_preserved() {
        let grid = Grid::new(vec![-4.0], vec![4.0], vec![161], 0.5).unwrap();
        let sol = solve(&unit_sigma(), &theta1(), &TestFunction::coordinate(1, 0), &grid).unwrap();
        for (idx, v) in sol.final_level().iter().enumerate() {
            assert!((v - grid.point(idx)[0]).abs() < 1e-10);
        }
        let m = sol.monotonicity_check().unwrap();
        assert!(m.nondecreasing);
        assert!((m.min_forward_difference - grid.dx(0)).abs() < 1e-10);
    }

    #[test]
    fn heat_moment_identity() {
        let theta = CovarianceSet::interval(1.0, 1.0).unwrap();
        let grid = Grid::new(vec![-4.0], vec![4.0], vec![401], 0.5).unwrap();
        let sol = solve(&unit_sigma(), &theta, &TestFunction::square(1, 0, 1.0), &grid).unwrap();
        assert!(interior_max_err(&sol, |t, x| x[0] * x[0] + t) < 1e-3);
    }

    #[test]
    fn convex_datum_uses_upper_variance() {
        let grid = Grid::new(vec![-4.0], vec![4.0], vec![401], 0.5).unwrap();
        let sol = solve(&unit_sigma(), &theta1(), &TestFunction::square(1, 0, 1.0), &grid).unwrap();
        assert!((sol.semigroup_value(0.5, &[0.0]).unwrap() - 0.5).abs() < 2e-3);
        let mid = grid.index(&[200]);
        assert_eq!(sol.argmax()[mid], Some(1));
        let concave = solve(&unit_sigma(), &theta1(), &TestFunction::square(1, 0, -1.0), &grid).unwrap();
        assert!((concave.semigroup_value(0.5, &[0.0]).unwrap() + 0.125).abs() < 2e-3);
        assert_eq!(concave.argmax()[mid], Some(0));
    }

    #[test]
    fn queries_at_nodes_and_midpoints() {
        let grid = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![21, 11], 0.1).unwrap();
        let c = CoefficientSet::zero(2, 1);
        let f = TestFunction::affine(vec![1.0, 2.0], 0.5);
        let sol = solve(&c, &CovarianceSet::interval(1.0, 1.0).unwrap(), &f, &grid).unwrap();
        let node = grid.point(grid.index(&[3, 4]));
        assert_eq!(sol.semigroup_value(0.1, &node).unwrap(), sol.final_level()[grid.index(&[3, 4])]);
        let a = grid.point(grid.index(&[3, 4]));
        let b = grid.point(grid.index(&[4, 4]));
        let mid = [(a[0] + b[0]) / 2.0, a[1]];
        let avg = 0.5 * (sol.final_level()[grid.index(&[3, 4])] + sol.final_level()[grid.index(&[4, 4])]);
        assert!((sol.semigroup_value(0.1, &mid).unwrap() - avg).abs() < 1e-14);
        assert!(matches!(sol.semigroup_value(0.2, &mid), Err(Error::OutOfRange(_))));
        assert!(matches!(sol.semigroup_value(0.1, &[2.0, 0.0]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn explicit_dt_above_bound_is_refused() {
        let grid = Grid::new(vec![-1.0], vec![1.0], vec![41], 0.1).unwrap().with_dt(0.01).unwrap();
        let err = solve(&unit_sigma(), &theta1(), &TestFunction::coordinate(1, 0), &grid).unwrap_err();
        assert!(matches!(err, Error::Stability { .. }), "{err}");
        let ok = Grid::new(vec![-1.0], vec![1.0], vec![41], 0.1).unwrap().with_dt(1e-4).unwrap();
        assert!(solve(&unit_sigma(), &theta1(), &TestFunction::coordinate(1, 0), &ok).is_ok());
    }

    #[test]
    fn non_dominant_cross_term_is_rejected() {
        // a = [[1, 0.9], [0.9, 1]] on a grid with dy = 4 dx
        let c = CoefficientSet::builder(2, 2)
            .sigma(0, |_, _, o| {
                o[0] = 1.0;
                o[1] = 0.0;
            })
            .sigma(1, |_, _, o| {
                o[0] = 0.0;
                o[1] = 1.0;
            })
            .build()
            .unwrap();
        let theta = CovarianceSet::from_generator_rows(&[vec![vec![1.0, 0.0], vec![0.9, (1.0f64 - 0.81).sqrt()]]]).unwrap();
        let grid = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![81, 21], 0.01).unwrap();
        let err = solve(&c, &theta, &TestFunction::tanh_sum(2), &grid).unwrap_err();
        assert!(err.to_string().contains("diagonally dominant"), "{err}");
    }

    #[test]
    fn monotonicity_negative_control() {
        let grid = Grid::new(vec![-1.0], vec![1.0], vec![41], 1e-3).unwrap();
        let sol = solve(&CoefficientSet::zero(1, 1), &theta1(), &TestFunction::square(1, 0, 1.0), &grid).unwrap();
        let m = sol.monotonicity_check().unwrap();
        assert!(!m.nondecreasing);
        assert!(m.witness_x[0] < 0.0);
    }

    fn drift_pair(shift: f64) -> (CoefficientSet, CoefficientSet) {
        let c = CoefficientSet::builder(1, 1)
            .drift(|_, x, o| o[0] = 0.2 * x[0].atan())
            .sigma(0, |_, x, o| o[0] = 0.6 + 0.1 * x[0].tanh())
            .build()
            .unwrap();
        let bar = c.with_drift_shift(vec![shift]).unwrap();
        (c, bar)
    }

    #[test]
    fn dominance_positive_and_negative() {
        let grid = Grid::new(vec![-5.0], vec![5.0], vec![201], 0.5).unwrap();
        let f = TestFunction::tanh_sum(1);
        let (c, bar) = drift_pair(-0.5);
        let u = solve(&c, &theta1(), &f, &grid).unwrap();
        let ub = solve(&bar, &theta1(), &f, &grid).unwrap();
        let rep = u.dominance_check(&ub).unwrap();
        assert!(rep.dominates, "{rep:?}");
        assert_eq!(rep.reduction, "nodewise");
        assert!(rep.per_level_min.last().unwrap().1 > 0.0);
        let rev = ub.dominance_check(&u).unwrap();
        assert!(!rev.dominates);
        assert!(rev.min_gap < -1e-3);
    }

    #[test]
    fn solve_pair_shares_the_time_grid() {
        let grid = Grid::new(vec![-5.0], vec![5.0], vec![201], 0.5).unwrap();
        let f = TestFunction::tanh_sum(1);
        let (c, bar) = drift_pair(0.5);
        let u = solve(&c, &theta1(), &f, &grid).unwrap();
        let ub = solve(&bar, &theta1(), &f, &grid).unwrap();
        assert_ne!(u.scheme().n_steps, ub.scheme().n_steps);
        assert!(u.dominance_check(&ub).is_err());
        let (u, ub) = solve_pair(&c, &bar, &theta1(), &f, &grid).unwrap();
        assert_eq!(u.times(), ub.times());
        assert_eq!(u.scheme().dt, ub.scheme().dt.min(u.scheme().dt));
        assert!(!u.dominance_check(&ub).unwrap().dominates);
    }

    #[test]
    fn ordered_pair_reduction_matches_brute_force() {
        let grid = Grid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![13, 11], 0.05).unwrap();
        let c = CoefficientSet::builder(2, 2)
            .sigma(0, |_, _, o| {
                o[0] = 0.3;
                o[1] = 0.05;
            })
            .sigma(1, |_, _, o| {
                o[0] = 0.0;
                o[1] = 0.3;
            })
            .build()
            .unwrap();
        let theta = CovarianceSet::from_generators(2, vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 0.0, 0.0, 1.0]]).unwrap();
        let f = TestFunction::new("bump", 2, |x| (x[0] - 0.3 * x[1]).sin());
        let u = solve(&c, &theta, &TestFunction::tanh_sum(2), &grid).unwrap();
        let ub = solve(&c, &theta, &f, &grid).unwrap();
        let rep = u.dominance_check(&ub).unwrap();
        assert_eq!(rep.reduction, "ordered-pairs");
        let nodes = u.trusted_nodes().unwrap();
        let mut brute = f64::INFINITY;
        for k in 0..u.levels.len() {
            for &a in &nodes {
                for &b in &nodes {
                    let (pa, pb) = (grid.point(a), grid.point(b));
                    if pa[0] >= pb[0] && pa[1] >= pb[1] {
                        brute = brute.min(u.levels[k][a] - ub.levels[k][b]);
                    }
                }
            }
        }
        assert_eq!(rep.min_gap, brute);
    }

    #[test]
    fn binary_round_trip() {
        let grid = Grid::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![5, 4], 0.01).unwrap();
        let sol = solve(&CoefficientSet::zero(2, 1), &theta1(), &TestFunction::tanh_sum(2), &grid).unwrap();
        let mut buf = Vec::new();
        sol.write_binary(&mut buf).unwrap();
        let dump = read_binary(buf.as_slice()).unwrap();
        assert_eq!(dump.nodes, vec![5, 4]);
        assert_eq!(dump.lo, vec![-1.0, 0.0]);
        assert_eq!(dump.times, sol.times());
        assert_eq!(dump.levels, sol.levels());
        assert!(read_binary(&b"NOTADUMP"[..]).is_err());
        let csv = sol.to_csv();
        assert!(csv.starts_with("t,x_1,x_2,u\n"));
        assert_eq!(csv.lines().count(), 1 + sol.times().len() * 20);
    }

    #[test]
    fn two_d_decoupled_matches_product() {
        // f = cos(x_1), independent unit noises: u = exp(-t/2) cos(x_1)
        let c = CoefficientSet::builder(2, 2)
            .sigma(0, |_, _, o| {
                o[0] = 1.0;
                o[1] = 0.0;
            })
            .sigma(1, |_, _, o| {
                o[0] = 0.0;
                o[1] = 1.0;
            })
            .build()
            .unwrap();
        let theta = CovarianceSet::from_generators(2, vec![vec![1.0, 0.0, 0.0, 1.0]]).unwrap();
        let grid = Grid::new(vec![-4.0, -4.0], vec![4.0, 4.0], vec![81, 81], 0.2).unwrap();
        let sol = solve(&c, &theta, &TestFunction::cos_coordinate(2, 0), &grid).unwrap();
        assert!(interior_max_err(&sol, |t, x| (-t / 2.0).exp() * x[0].cos()) < 2e-3);
    }

    /// Max error over `|x| <= 2` at the horizon.
    fn inner_err(sol: &PDESolution, exact: impl Fn(f64, f64) -> f64) -> f64 {
        let g = sol.grid();
        (0..g.len())
            .filter(|&i| g.point(i)[0].abs() <= 2.0)
            .map(|i| (sol.final_level()[i] - exact(g.horizon(), g.point(i)[0])).abs())
            .fold(0.0, f64::max)
    }

    fn cos_error(nodes: usize) -> f64 {
        let theta = CovarianceSet::interval(1.0, 1.0).unwrap();
        let grid = Grid::new(vec![-6.0], vec![6.0], vec![nodes], 0.5).unwrap();
        let sol = solve(&unit_sigma(), &theta, &TestFunction::cos_coordinate(1, 0), &grid).unwrap();
        inner_err(&sol, |t, x| (-t / 2.0).exp() * x.cos())
    }

    fn exp_error(nodes: usize) -> f64 {
        let grid = Grid::new(vec![-6.0], vec![6.0], vec![nodes], 0.5).unwrap();
        let sol = solve(&unit_sigma(), &theta1(), &TestFunction::exp_coordinate(1, 0), &grid).unwrap();
        inner_err(&sol, |t, x| (x + t / 2.0).exp())
    }

    #[test]
    fn grid_refinement_reduces_error() {
        for errs in [
            [cos_error(49), cos_error(97), cos_error(193)],
            [exp_error(49), exp_error(97), exp_error(193)],
        ] {
            assert!(errs[0] / errs[1] >= 1.5, "{errs:?}");
            assert!(errs[1] / errs[2] >= 1.5, "{errs:?}");
        }
    }

    #[test]
    fn time_dependent_coefficients_are_reversed() {
        // b(t) = t: with u(0) = x the final level is x + int_0^T s ds = x + T^2 / 2
        let c = CoefficientSet::builder(1, 1)
            .drift(|t, _, o| o[0] = t)
            .time_homogeneous(false)
            .build()
            .unwrap();
        let grid = Grid::new(vec![-1.0], vec![1.0], vec![11], 1.0).unwrap().with_dt(0.001).unwrap();
        let sol = solve(&c, &theta1(), &TestFunction::coordinate(1, 0), &grid).unwrap();
        let v = sol.semigroup_value(1.0, &[0.0]).unwrap();
        assert!((v - 0.5).abs() < 2e-3, "{v}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn discrete_comparison(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let shift = rng.random_range(0.0..0.5);
            let (c, _) = drift_pair(0.0);
            let grid = Grid::new(vec![-3.0], vec![3.0], vec![61], 0.3).unwrap().with_boundary(BoundaryRule::Neumann);
            let a2 = a.clone();
            let f = TestFunction::new("f", 1, move |x| a[0] * x[0].sin() + a[1] * (a[2] * x[0]).cos() + a[3] * x[0].tanh());
            let g = TestFunction::new("g", 1, move |x| a2[0] * x[0].sin() + a2[1] * (a2[2] * x[0]).cos() + a2[3] * x[0].tanh() + shift * (1.0 + x[0].cos()));
            let uf = solve(&c, &theta1(), &f, &grid).unwrap();
            let ug = solve(&c, &theta1(), &g, &grid).unwrap();
            for (lf, lg) in uf.levels().iter().zip(ug.levels()) {
                for (x, y) in lf.iter().zip(lg) {
                    prop_assert!(x <= y);
                }
            }
        }

        #[test]
        fn constants_are_preserved(c0 in -10.0..10.0f64) {
            let (c, _) = drift_pair(0.3);
            let grid = Grid::new(vec![-2.0], vec![2.0], vec![41], 0.2).unwrap();
            let sol = solve(&c, &theta1(), &TestFunction::constant(1, c0), &grid).unwrap();
            for u in sol.levels() {
                for v in u {
                    prop_assert_eq!(*v, c0);
                }
            }
        }
    }
}
