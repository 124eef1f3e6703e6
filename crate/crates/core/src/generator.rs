//! Test functions and the nonlinear infinitesimal generator
//!
//! ```text
//! Lf(x) = <Df, b> + G([<Df, h_lk + h_kl> + <D^2f sigma_l, sigma_k>]_{l,k})
//! ```

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::g::{CovarianceSet, SymMatrix};
use crate::gpde::{self, Grid};
use crate::gsde::CoefficientSet;

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes the gradient (length `n`) or the row-major Hessian (`n x n`).
pub type DerivativeField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Pairs sampled by the monotonicity audit.
const MONOTONE_AUDIT_PAIRS: usize = 512;
const MONOTONE_AUDIT_HALF_WIDTH: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothness {
    Lipschitz,
    C2,
    Smooth,
}

#[derive(Clone)]
pub struct TestFunction {
    id: String,
    n: usize,
    f: ScalarField,
    grad: Option<DerivativeField>,
    hess: Option<DerivativeField>,
    monotone: bool,
    smoothness: Smoothness,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("id", &self.id)
            .field("n", &self.n)
            .field("monotone", &self.monotone)
            .field("analytic_gradient", &self.grad.is_some())
            .field("analytic_hessian", &self.hess.is_some())
            .finish()
    }
}

impl TestFunction {
    pub fn new(id: impl Into<String>, n: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        TestFunction {
            id: id.into(),
            n,
            f: Arc::new(f),
            grad: None,
            hess: None,
            monotone: false,
            smoothness: Smoothness::Smooth,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(g));
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hess = Some(Arc::new(h));
        self
    }

    pub fn with_smoothness(mut self, s: Smoothness) -> Self {
        self.smoothness = s;
        self
    }

    /// Drops analytic derivatives so evaluation falls back to finite differences.
    pub fn without_derivatives(mut self) -> Self {
        self.grad = None;
        self.hess = None;
        self
    }

    /// Declares membership in the monotone class after a sampled audit of
    /// `f(x) <= f(y)` for `x <= y` on `[-4, 4]^n`.
    pub fn monotone(mut self) -> Result<Self> {
        if let Some((x, y)) = self.audit_monotone(MONOTONE_AUDIT_HALF_WIDTH, MONOTONE_AUDIT_PAIRS, 0) {
            return Err(Error::Invalid(format!(
                "test function '{}' declared monotone but f({x:?}) > f({y:?})",
                self.id
            )));
        }
        self.monotone = true;
        Ok(self)
    }

    /// First sampled ordered pair `x <= y` with `f(x) > f(y)`.
    pub fn audit_monotone(&self, half_width: f64, pairs: usize, seed: u64) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..pairs {
            let x: Vec<f64> = (0..self.n).map(|_| rng.random_range(-half_width..=half_width)).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&v| if rng.random::<f64>() < 0.25 { v } else { (v + rng.random_range(0.0..=half_width)).min(half_width) })
                .collect();
            if self.eval(&x) > self.eval(&y) {
                return Some((x, y));
            }
        }
        None
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.grad.is_some() && self.hess.is_some()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    /// Gradient, analytic when available, otherwise Richardson-extrapolated
    /// central differences with step `h`.
    pub fn gradient(&self, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        match &self.grad {
            Some(grad) => grad(x, &mut g),
            None => {
                for (i, gi) in g.iter_mut().enumerate() {
                    let d = |s: f64| (self.shifted(x, &[(i, s)]) - self.shifted(x, &[(i, -s)])) / (2.0 * s);
                    *gi = (4.0 * d(h / 2.0) - d(h)) / 3.0;
                }
            }
        }
        g
    }

    /// Row-major Hessian, analytic when available, otherwise
    /// Richardson-extrapolated central differences with step `h`.
    pub fn hessian(&self, x: &[f64], h: f64) -> Vec<f64> {
        let n = self.n;
        let mut m = vec![0.0; n * n];
        match &self.hess {
            Some(hess) => hess(x, &mut m),
            None => {
                let f0 = self.eval(x);
                for i in 0..n {
                    let dii = |s: f64| (self.shifted(x, &[(i, s)]) - 2.0 * f0 + self.shifted(x, &[(i, -s)])) / (s * s);
                    m[i * n + i] = (4.0 * dii(h / 2.0) - dii(h)) / 3.0;
                    for j in (i + 1)..n {
                        let dij = |s: f64| {
                            (self.shifted(x, &[(i, s), (j, s)]) - self.shifted(x, &[(i, s), (j, -s)])
                                - self.shifted(x, &[(i, -s), (j, s)])
                                + self.shifted(x, &[(i, -s), (j, -s)]))
                                / (4.0 * s * s)
                        };
                        let v = (4.0 * dij(h / 2.0) - dij(h)) / 3.0;
                        m[i * n + j] = v;
                        m[j * n + i] = v;
                    }
                }
            }
        }
        m
    }

    fn shifted(&self, x: &[f64], moves: &[(usize, f64)]) -> f64 {
        let mut y = x.to_vec();
        for &(i, s) in moves {
            y[i] += s;
        }
        self.eval(&y)
    }

    /// `sum_i w_i x_i + c`; monotone when every weight is nonnegative.
    pub fn affine(weights: Vec<f64>, c: f64) -> Self {
        let n = weights.len();
        let w1 = weights.clone();
        let w2 = weights.clone();
        let mut out = TestFunction::new(format!("affine{weights:?}+{c}"), n, move |x| {
            w1.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + c
        })
        .with_gradient(move |_, g| g.copy_from_slice(&w2))
        .with_hessian(|_, h| h.fill(0.0));
        out.monotone = weights.iter().all(|&w| w >= 0.0);
        out
    }

    /// `x_i` (zero-based `i`).
    pub fn coordinate(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        TestFunction::affine(w, 0.0).renamed(format!("x_{}", i + 1))
    }

    /// `sign * x_i^2`.
    pub fn square(n: usize, i: usize, sign: f64) -> Self {
        TestFunction::new(format!("{}x_{}^2", if sign < 0.0 { "-" } else { "" }, i + 1), n, move |x| sign * x[i] * x[i])
            .with_gradient(move |x, g| {
                g.fill(0.0);
                g[i] = 2.0 * sign * x[i];
            })
            .with_hessian(move |_, h| {
                h.fill(0.0);
                h[i * n + i] = 2.0 * sign;
            })
    }

    /// `tanh(x_1 + ... + x_n)`.
    pub fn tanh_sum(n: usize) -> Self {
        let mut f = TestFunction::new("tanh(sum x)", n, |x| x.iter().sum::<f64>().tanh())
            .with_gradient(|x, g| {
                let s = x.iter().sum::<f64>().tanh();
                g.fill(1.0 - s * s);
            })
            .with_hessian(|x, h| {
                let s = x.iter().sum::<f64>().tanh();
                h.fill(-2.0 * s * (1.0 - s * s));
            });
        f.monotone = true;
        f
    }

    /// `arctan(x_1) + ... + arctan(x_n)`.
    pub fn arctan_sum(n: usize) -> Self {
        let mut f = TestFunction::new("sum arctan(x)", n, |x| x.iter().map(|v| v.atan()).sum())
            .with_gradient(|x, g| {
                for (gi, v) in g.iter_mut().zip(x) {
                    *gi = 1.0 / (1.0 + v * v);
                }
            })
            .with_hessian(move |x, h| {
                h.fill(0.0);
                for (i, v) in x.iter().enumerate() {
                    h[i * n + i] = -2.0 * v / (1.0 + v * v).powi(2);
                }
            });
        f.monotone = true;
        f
    }

    /// `exp(x_i)`.
    pub fn exp_coordinate(n: usize, i: usize) -> Self {
        let mut f = TestFunction::new(format!("exp(x_{})", i + 1), n, move |x| x[i].exp())
            .with_gradient(move |x, g| {
                g.fill(0.0);
                g[i] = x[i].exp();
            })
            .with_hessian(move |x, h| {
                h.fill(0.0);
                h[i * n + i] = x[i].exp();
            });
        f.monotone = true;
        f
    }

    /// `cos(x_i)`.
    pub fn cos_coordinate(n: usize, i: usize) -> Self {
        TestFunction::new(format!("cos(x_{})", i + 1), n, move |x| x[i].cos())
            .with_gradient(move |x, g| {
                g.fill(0.0);
                g[i] = -x[i].sin();
            })
            .with_hessian(move |x, h| {
                h.fill(0.0);
                h[i * n + i] = -x[i].cos();
            })
    }

    /// Constant `c`.
    pub fn constant(n: usize, c: f64) -> Self {
        let mut f = TestFunction::new(format!("const {c}"), n, move |_| c)
            .with_gradient(|_, g| g.fill(0.0))
            .with_hessian(|_, h| h.fill(0.0));
        f.monotone = true;
        f
    }

    /// Catalogue lookup by name: `x_i`, `x_i^2`, `-x_i^2`, `tanh-sum`,
    /// `arctan-sum`, `exp(x_i)`, `cos(x_i)` (one-based `i`).
    pub fn from_catalogue(name: &str, n: usize) -> Result<Self> {
        let coord = |s: &str| -> Result<usize> {
            let i: usize = s
                .parse()
                .map_err(|_| Error::Invalid(format!("bad coordinate index in test function '{name}'")))?;
            if i == 0 || i > n {
                return Err(Error::Invalid(format!("test function '{name}' refers to x_{i} but n = {n}")));
            }
            Ok(i - 1)
        };
        let name = name.trim();
        if name == "tanh-sum" {
            return Ok(TestFunction::tanh_sum(n));
        }
        if name == "arctan-sum" {
            return Ok(TestFunction::arctan_sum(n));
        }
        if let Some(rest) = name.strip_prefix("-x_").and_then(|r| r.strip_suffix("^2")) {
            return Ok(TestFunction::square(n, coord(rest)?, -1.0));
        }
        if let Some(rest) = name.strip_prefix("x_").and_then(|r| r.strip_suffix("^2")) {
            return Ok(TestFunction::square(n, coord(rest)?, 1.0));
        }
        if let Some(rest) = name.strip_prefix("x_") {
            return Ok(TestFunction::coordinate(n, coord(rest)?));
        }
        if let Some(rest) = name.strip_prefix("exp(x_").and_then(|r| r.strip_suffix(')')) {
            return Ok(TestFunction::exp_coordinate(n, coord(rest)?));
        }
        if let Some(rest) = name.strip_prefix("cos(x_").and_then(|r| r.strip_suffix(')')) {
            return Ok(TestFunction::cos_coordinate(n, coord(rest)?));
        }
        Err(Error::Invalid(format!("unknown test function '{name}'")))
    }

    pub fn renamed(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// `lambda * f`, keeping analytic derivatives.
    pub fn scaled(&self, lambda: f64) -> Self {
        let f = self.f.clone();
        let mut out = TestFunction::new(format!("{lambda}*{}", self.id), self.n, move |x| lambda * f(x));
        out.grad = self.grad.clone().map(|g| {
            Arc::new(move |x: &[f64], o: &mut [f64]| {
                g(x, o);
                o.iter_mut().for_each(|v| *v *= lambda);
            }) as DerivativeField
        });
        out.hess = self.hess.clone().map(|h| {
            Arc::new(move |x: &[f64], o: &mut [f64]| {
                h(x, o);
                o.iter_mut().for_each(|v| *v *= lambda);
            }) as DerivativeField
        });
        out.monotone = self.monotone && lambda >= 0.0;
        out
    }

    /// `f + g`, keeping analytic derivatives when both have them.
    pub fn sum(&self, other: &TestFunction) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::Dimension("test functions of different dimension".into()));
        }
        let (f, g) = (self.f.clone(), other.f.clone());
        let mut out = TestFunction::new(format!("{}+{}", self.id, other.id), self.n, move |x| f(x) + g(x));
        let add = |a: &Option<DerivativeField>, b: &Option<DerivativeField>, len: usize| match (a, b) {
            (Some(a), Some(b)) => {
                let (a, b) = (a.clone(), b.clone());
                Some(Arc::new(move |x: &[f64], o: &mut [f64]| {
                    let mut tmp = vec![0.0; len];
                    a(x, o);
                    b(x, &mut tmp);
                    o.iter_mut().zip(&tmp).for_each(|(v, w)| *v += w);
                }) as DerivativeField)
            }
            _ => None,
        };
        out.grad = add(&self.grad, &other.grad, self.n);
        out.hess = add(&self.hess, &other.hess, self.n * self.n);
        out.monotone = self.monotone && other.monotone;
        Ok(out)
    }
}

/// Default finite-difference step at `x`.
pub fn default_fd_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + crate::numeric::norm(x))
}

fn check_args(c: &CoefficientSet, theta: &CovarianceSet, f: &TestFunction, x: &[f64]) -> Result<()> {
    if f.dim() != c.state_dim() || x.len() != c.state_dim() {
        return Err(Error::Dimension(format!(
            "generator: state dimension {}, test function dimension {}, point of length {}",
            c.state_dim(),
            f.dim(),
            x.len()
        )));
    }
    if theta.dim() != c.noise_dim() {
        return Err(Error::Dimension(format!(
            "generator: covariance set is {}-dimensional, noise dimension is {}",
            theta.dim(),
            c.noise_dim()
        )));
    }
    Ok(())
}

fn derivatives(f: &TestFunction, x: &[f64], fd_step: Option<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = fd_step.unwrap_or_else(|| default_fd_step(x));
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let g = f.gradient(x, h);
    let hess = f.hessian(x, h);
    if g.iter().chain(&hess).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("derivatives of '{}' at x = {x:?}", f.id())));
    }
    Ok((g, hess))
}

/// `Lf(x)` at coefficient time `t`, assembled coordinate-wise:
/// `sum_i D_i f b_i + G([sum_i D_i f (h_lk + h_kl)_i + sum_ij D_ij f (sigma_l)_i (sigma_k)_j])`.
pub fn eval_generator_at(
    c: &CoefficientSet,
    theta: &CovarianceSet,
    f: &TestFunction,
    t: f64,
    x: &[f64],
    fd_step: Option<f64>,
) -> Result<f64> {
    check_args(c, theta, f, x)?;
    let (n, d) = (c.state_dim(), c.noise_dim());
    let (g, hess) = derivatives(f, x, fd_step)?;
    let mut b = vec![0.0; n];
    c.eval_drift(t, x, &mut b);
    let drift: f64 = (0..n).map(|i| g[i] * b[i]).sum();
    let sigma = c.sigma_matrix(t, x);
    let mut arg = vec![0.0; d * d];
    for i in 0..n {
        let hi = c.h_matrix_component(i, t, x);
        for (a, v) in arg.iter_mut().zip(&hi) {
            *a += g[i] * v;
        }
    }
    for l in 0..d {
        for k in 0..d {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += hess[i * n + j] * sigma[i * d + l] * sigma[j * d + k];
                }
            }
            arg[l * d + k] += acc;
        }
    }
    let value = drift + theta.eval_g(&SymMatrix::new(d, arg)?)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("generator value at x = {x:?}")));
    }
    Ok(value)
}

/// `Lf(x)` at `t = 0`.
pub fn eval_generator(c: &CoefficientSet, theta: &CovarianceSet, f: &TestFunction, x: &[f64], fd_step: Option<f64>) -> Result<f64> {
    eval_generator_at(c, theta, f, 0.0, x, fd_step)
}

/// The same operator assembled from inner products
/// `<Df, h_lk + h_kl> + <D^2f sigma_l, sigma_k>`.
pub fn eval_generator_inner_product(
    c: &CoefficientSet,
    theta: &CovarianceSet,
    f: &TestFunction,
    t: f64,
    x: &[f64],
    fd_step: Option<f64>,
) -> Result<f64> {
    check_args(c, theta, f, x)?;
    let (n, d) = (c.state_dim(), c.noise_dim());
    let (g, hess) = derivatives(f, x, fd_step)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut b = vec![0.0; n];
    c.eval_drift(t, x, &mut b);
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|l| {
            let mut s = vec![0.0; n];
            c.eval_sigma(l, t, x, &mut s);
            s
        })
        .collect();
    let hess_cols: Vec<Vec<f64>> = cols
        .iter()
        .map(|s| (0..n).map(|i| dot(&hess[i * n..(i + 1) * n], s)).collect())
        .collect();
    let mut arg = vec![0.0; d * d];
    let mut hlk = vec![0.0; n];
    let mut hkl = vec![0.0; n];
    for l in 0..d {
        for k in 0..d {
            c.eval_h(l, k, t, x, &mut hlk);
            c.eval_h(k, l, t, x, &mut hkl);
            let sum: Vec<f64> = hlk.iter().zip(&hkl).map(|(a, b)| a + b).collect();
            arg[l * d + k] = dot(&g, &sum) + dot(&hess_cols[l], &cols[k]);
        }
    }
    Ok(dot(&g, &b) + theta.eval_g(&SymMatrix::new(d, arg)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub t: f64,
    pub semigroup: f64,
    pub quotient: f64,
    pub generator: f64,
    pub residual: f64,
}

/// Rows `((E_t f(x) - f(x)) / t, Lf(x))` for each `t`, with `E_t f(x)` from
/// `semigroup(t)`.
pub fn limit_table(
    fx: f64,
    generator: f64,
    t_list: &[f64],
    mut semigroup: impl FnMut(f64) -> Result<f64>,
) -> Result<Vec<LimitRow>> {
    if t_list.is_empty() || t_list.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Invalid(format!("limit times must be positive, got {t_list:?}")));
    }
    if t_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invalid(format!("limit times must be strictly decreasing, got {t_list:?}")));
    }
    t_list
        .iter()
        .map(|&t| {
            let e = semigroup(t)?;
            let q = (e - fx) / t;
            Ok(LimitRow {
                t,
                semigroup: e,
                quotient: q,
                generator,
                residual: (q - generator).abs(),
            })
        })
        .collect()
}

/// Limit table with `E_t f(x)` from a separate monotone-scheme solve per `t`
/// on `grid` (its horizon is replaced by each `t`).
pub fn generator_limit_check(
    c: &CoefficientSet,
    theta: &CovarianceSet,
    f: &TestFunction,
    x: &[f64],
    t_list: &[f64],
    grid: &Grid,
) -> Result<Vec<LimitRow>> {
    let lf = eval_generator(c, theta, f, x, None)?;
    limit_table(f.eval(x), lf, t_list, |t| {
        let g = grid.clone().with_horizon(t)?;
        let sol = gpde::solve(c, theta, f, &g)?;
        sol.semigroup_value(t, x)
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

    #[test]
    fn constant_drift_on_coordinate() {
        let c = CoefficientSet::builder(2, 1)
            .drift(|_, _, o| {
                o[0] = 0.7;
                o[1] = -2.0;
            })
            .build()
            .unwrap();
        let lf = eval_generator(&c, &theta1(), &TestFunction::coordinate(2, 0), &[0.3, 0.1], None).unwrap();
        assert!((lf - 0.7).abs() < 1e-15);
    }

    #[test]
    fn square_picks_upper_variance() {
        let c = unit_sigma();
        let lf = eval_generator(&c, &theta1(), &TestFunction::square(1, 0, 1.0), &[0.4], None).unwrap();
        assert!((lf - 1.0).abs() < 1e-15);
        let lf = eval_generator(&c, &theta1(), &TestFunction::square(1, 0, -1.0), &[0.4], None).unwrap();
        assert!((lf + 0.25).abs() < 1e-15);
        let fd = eval_generator(&c, &theta1(), &TestFunction::square(1, 0, 1.0).without_derivatives(), &[0.4], None).unwrap();
        assert!((fd - 1.0).abs() < 1e-6, "{fd}");
    }

    #[test]
    fn catalogue_names() {
        for (name, monotone) in [
            ("x_1", true),
            ("x_2^2", false),
            ("-x_1^2", false),
            ("tanh-sum", true),
            ("arctan-sum", true),
            ("exp(x_2)", true),
            ("cos(x_1)", false),
        ] {
            let f = TestFunction::from_catalogue(name, 2).unwrap();
            assert_eq!(f.is_monotone(), monotone, "{name}");
            if monotone {
                assert!(f.audit_monotone(4.0, 256, 1).is_none(), "{name}");
            }
        }
        assert!(TestFunction::from_catalogue("x_3", 2).is_err());
        assert!(TestFunction::from_catalogue("sin", 2).is_err());
    }

    #[test]
    fn monotone_declaration_is_audited() {
        assert!(TestFunction::new("neg", 1, |x| -x[0]).monotone().is_err());
        assert!(TestFunction::new("cube", 1, |x| x[0].powi(3)).monotone().is_ok());
    }

    fn rich_system() -> CoefficientSet {
        CoefficientSet::builder(2, 2)
            .drift(|_, x, o| {
                o[0] = x[1].atan();
                o[1] = -0.3 * x[0];
            })
            .sigma(0, |_, x, o| {
                o[0] = 0.6 + 0.1 * x[0].tanh();
                o[1] = 0.2;
            })
            .sigma(1, |_, x, o| {
                o[0] = -0.1;
                o[1] = 0.5 + 0.1 * x[1].cos();
            })
            .h_sym(0, 1, |_, x, o| {
                o[0] = 0.1 * x[0];
                o[1] = -0.2;
            })
            .h(0, 0, |_, x, o| {
                o[0] = 0.05;
                o[1] = 0.1 * x[1].sin();
            })
            .build()
            .unwrap()
    }

    fn theta2() -> CovarianceSet {
        CovarianceSet::from_generators(
            2,
            vec![vec![1.0, 0.0, 0.0, 0.5], vec![0.5, 0.2, 0.0, 1.0], vec![0.8, -0.3, 0.3, 0.8]],
        )
        .unwrap()
    }

    fn wavy() -> TestFunction {
        TestFunction::new("wavy", 2, |x| (x[0] * x[1]).sin() + 0.3 * x[0] * x[0] - x[1].exp() * 0.1)
            .with_gradient(|x, g| {
                let c = (x[0] * x[1]).cos();
                g[0] = c * x[1] + 0.6 * x[0];
                g[1] = c * x[0] - 0.1 * x[1].exp();
            })
            .with_hessian(|x, h| {
                let (s, c) = (x[0] * x[1]).sin_cos();
                h[0] = -s * x[1] * x[1] + 0.6;
                h[1] = c - s * x[0] * x[1];
                h[2] = h[1];
                h[3] = -s * x[0] * x[0] - 0.1 * x[1].exp();
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn assembly_forms_agree(x0 in -2.0..2.0f64, x1 in -2.0..2.0f64) {
            let c = rich_system();
            let a = eval_generator(&c, &theta2(), &wavy(), &[x0, x1], None).unwrap();
            let b = eval_generator_inner_product(&c, &theta2(), &wavy(), 0.0, &[x0, x1], None).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn sublinear_in_f(x0 in -2.0..2.0f64, x1 in -2.0..2.0f64) {
            let c = rich_system();
            let f = wavy();
            let g = TestFunction::tanh_sum(2).sum(&TestFunction::square(2, 1, -1.0)).unwrap();
            let fg = f.sum(&g).unwrap();
            let x = [x0, x1];
            let lhs = eval_generator(&c, &theta2(), &fg, &x, None).unwrap();
            let rhs = eval_generator(&c, &theta2(), &f, &x, None).unwrap() + eval_generator(&c, &theta2(), &g, &x, None).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }

        #[test]
        fn positively_homogeneous(x0 in -2.0..2.0f64, x1 in -2.0..2.0f64, lambda in 0.0..5.0f64) {
            let c = rich_system();
            let x = [x0, x1];
            let a = eval_generator(&c, &theta2(), &wavy().scaled(lambda), &x, None).unwrap();
            let b = lambda * eval_generator(&c, &theta2(), &wavy(), &x, None).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }

        #[test]
        fn singleton_theta_is_linear(x0 in -2.0..2.0f64, x1 in -2.0..2.0f64) {
            let c = rich_system();
            let theta = CovarianceSet::from_generators(2, vec![vec![0.9, 0.1, -0.2, 0.7]]).unwrap();
            let f = wavy();
            let g = TestFunction::square(2, 0, -1.0);
            let x = [x0, x1];
            let lhs = eval_generator(&c, &theta, &f.sum(&g).unwrap(), &x, None).unwrap();
            let rhs = eval_generator(&c, &theta, &f, &x, None).unwrap() + eval_generator(&c, &theta, &g, &x, None).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }

        #[test]
        fn finite_differences_match_analytic(x0 in -1.5..1.5f64, x1 in -1.5..1.5f64, e in 2u32..4) {
            let c = rich_system();
            let h = 10f64.powi(-(e as i32));
            let x = [x0, x1];
            let exact = eval_generator(&c, &theta2(), &wavy(), &x, None).unwrap();
            let fd = eval_generator(&c, &theta2(), &wavy().without_derivatives(), &x, Some(h)).unwrap();
            prop_assert!((exact - fd).abs() <= 100.0 * h * h + 1e-6, "h = {}, diff = {}", h, (exact - fd).abs());
        }
    }

    #[test]
    fn limit_table_rejects_bad_times() {
        assert!(limit_table(0.0, 0.0, &[], |_| Ok(0.0)).is_err());
        assert!(limit_table(0.0, 0.0, &[0.1, 0.2], |_| Ok(0.0)).is_err());
        assert!(limit_table(0.0, 0.0, &[0.1, 0.0], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn linear_function_limit_is_zero_and_drift_limit_is_one() {
        let grid = Grid::new(vec![-4.0], vec![4.0], vec![161], 1.0).unwrap();
        let c = unit_sigma();
        let rows = generator_limit_check(&c, &theta1(), &TestFunction::coordinate(1, 0), &[0.0], &[0.2, 0.1], &grid).unwrap();
        for r in rows {
            assert!(r.quotient.abs() < 1e-10, "{r:?}");
            assert_eq!(r.generator, 0.0);
        }
        let drift = CoefficientSet::builder(1, 1).drift(|_, _, o| o[0] = 1.0).build().unwrap();
        let rows = generator_limit_check(&drift, &theta1(), &TestFunction::coordinate(1, 0), &[0.0], &[0.2, 0.1], &grid).unwrap();
        for r in rows {
            assert!((r.quotient - 1.0).abs() < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn square_limit_approaches_upper_variance() {
        let grid = Grid::new(vec![-3.0], vec![3.0], vec![301], 1.0).unwrap();
        let rows = generator_limit_check(&unit_sigma(), &theta1(), &TestFunction::square(1, 0, 1.0), &[0.0], &[0.1, 0.05], &grid).unwrap();
        for r in rows {
            assert!((r.quotient - 1.0).abs() < 1e-8, "{r:?}");
        }
    }
}
