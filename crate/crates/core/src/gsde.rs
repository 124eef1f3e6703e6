//! Euler integration of the G-SDE
//!
//! ```text
//! dX = b(t, X) dt + h_ij(t, X) d<B^i, B^j> + sigma_i(t, X) dB^i
//! ```
//!
//! with repeated indices summed, plus coupled integration of two systems on one
//! scenario for comparison experiments.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::GBrownianPath;

/// `(t, x, out)` writes an `R^n` value into `out`.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Points sampled when auditing `h_ij == h_ji` at construction.
const SYMMETRY_AUDIT_POINTS: usize = 64;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// The coefficients `(b, h_ij, sigma_i)` of one G-SDE with state dimension `n`
/// and noise dimension `d`. Absent entries are identically zero.
#[derive(Clone)]
pub struct CoefficientSet {
    id: String,
    n: usize,
    d: usize,
    drift: Option<VectorField>,
    h: Vec<Option<VectorField>>,
    sigma: Vec<Option<VectorField>>,
    lipschitz: Option<f64>,
    bound: Option<f64>,
    time_homogeneous: bool,
    h_symmetric: bool,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("id", &self.id)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("lipschitz", &self.lipschitz)
            .field("bound", &self.bound)
            .finish_non_exhaustive()
    }
}

pub struct CoefficientSetBuilder {
    inner: CoefficientSet,
}

impl CoefficientSetBuilder {
    pub fn id(mut self, id: impl Into<String>) -> Self {
        self.inner.id = id.into();
        self
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.inner.drift = Some(Arc::new(f));
        self
    }

    pub fn drift_field(mut self, f: Option<VectorField>) -> Self {
        self.inner.drift = f;
        self
    }

    /// Sets `h_lk` only; use [`Self::h_sym`] to set both `h_lk` and `h_kl`.
    pub fn h(mut self, l: usize, k: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        let d = self.inner.d;
        self.inner.h[l * d + k] = Some(Arc::new(f));
        self
    }

    pub fn h_field(mut self, l: usize, k: usize, f: Option<VectorField>) -> Self {
        let d = self.inner.d;
        self.inner.h[l * d + k] = f;
        self
    }

    pub fn h_sym(mut self, l: usize, k: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        let d = self.inner.d;
        let f: VectorField = Arc::new(f);
        self.inner.h[l * d + k] = Some(f.clone());
        self.inner.h[k * d + l] = Some(f);
        self
    }

    pub fn sigma(mut self, i: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.inner.sigma[i] = Some(Arc::new(f));
        self
    }

    pub fn sigma_field(mut self, i: usize, f: Option<VectorField>) -> Self {
        self.inner.sigma[i] = f;
        self
    }

    pub fn lipschitz(mut self, k: f64) -> Self {
        self.inner.lipschitz = Some(k);
        self
    }

    pub fn bound(mut self, m: f64) -> Self {
        self.inner.bound = Some(m);
        self
    }

    pub fn time_homogeneous(mut self, yes: bool) -> Self {
        self.inner.time_homogeneous = yes;
        self
    }

    /// Disables the `h_ij == h_ji` construction audit.
    pub fn h_symmetric(mut self, yes: bool) -> Self {
        self.inner.h_symmetric = yes;
        self
    }

    pub fn build(self) -> Result<CoefficientSet> {
        let c = self.inner;
        if c.h_symmetric {
            c.audit_h_symmetry()?;
        }
        if let Some(k) = c.lipschitz {
            let observed = c.lipschitz_audit(&vec![-2.0; c.n], &vec![2.0; c.n], 256, 0);
            if observed > 1.05 * k {
                log::warn!(
                    "coefficient set '{}': sampled difference quotient {observed:.4} exceeds 1.05 x declared K = {k}",
                    c.id
                );
            }
        }
        Ok(c)
    }
}

impl CoefficientSet {
    pub fn builder(n: usize, d: usize) -> CoefficientSetBuilder {
        assert!(n > 0 && d > 0, "state and noise dimensions must be positive");
        CoefficientSetBuilder {
            inner: CoefficientSet {
                id: "unnamed".into(),
                n,
                d,
                drift: None,
                h: vec![None; d * d],
                sigma: vec![None; d],
                lipschitz: None,
                bound: None,
                time_homogeneous: true,
                h_symmetric: true,
            },
        }
    }

    /// `b = h = sigma = 0`.
    pub fn zero(n: usize, d: usize) -> CoefficientSet {
        Self::builder(n, d).id("zero").build().expect("zero coefficients are symmetric")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.d
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn is_time_homogeneous(&self) -> bool {
        self.time_homogeneous
    }

    pub fn has_h(&self) -> bool {
        self.h.iter().any(Option::is_some)
    }

    pub fn has_sigma(&self, i: usize) -> bool {
        self.sigma[i].is_some()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Same coefficients with drift `b + shift`.
    pub fn with_drift_shift(&self, shift: Vec<f64>) -> Result<CoefficientSet> {
        if shift.len() != self.n {
            return Err(Error::Dimension(format!(
                "drift shift has length {}, state dimension is {}",
                shift.len(),
                self.n
            )));
        }
        let base = self.drift.clone();
        let mut out = self.clone();
        out.drift = Some(Arc::new(move |t, x, o: &mut [f64]| {
            match &base {
                Some(b) => b(t, x, o),
                None => o.fill(0.0),
            }
            for (v, s) in o.iter_mut().zip(&shift) {
                *v += s;
            }
        }));
        out.id = format!("{}+shift", self.id);
        Ok(out)
    }

    /// Same coefficients with every `sigma_i` multiplied by `factor`.
    pub fn with_sigma_scale(&self, factor: f64) -> CoefficientSet {
        let mut out = self.clone();
        out.sigma = self
            .sigma
            .iter()
            .map(|s| {
                s.clone().map(|f| {
                    Arc::new(move |t: f64, x: &[f64], o: &mut [f64]| {
                        f(t, x, o);
                        o.iter_mut().for_each(|v| *v *= factor);
                    }) as VectorField
                })
            })
            .collect();
        out.id = format!("{}*{factor}", self.id);
        out
    }

    /// Same `sigma` as `other`, keeping this set's drift and `h`.
    pub fn with_sigma_from(&self, other: &CoefficientSet) -> Result<CoefficientSet> {
        if other.n != self.n || other.d != self.d {
            return Err(Error::Dimension("sigma source has different dimensions".into()));
        }
        let mut out = self.clone();
        out.sigma = other.sigma.clone();
        Ok(out)
    }

    pub fn eval_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(f) => f(t, x, out),
            None => out.fill(0.0),
        }
    }

    pub fn eval_h(&self, l: usize, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.h[l * self.d + k] {
            Some(f) => f(t, x, out),
            None => out.fill(0.0),
        }
    }

    pub fn eval_sigma(&self, i: usize, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.sigma[i] {
            Some(f) => f(t, x, out),
            None => out.fill(0.0),
        }
    }

    /// `n x d` row-major matrix whose column `l` is `sigma_l(t, x)`.
    pub fn sigma_matrix(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut col = vec![0.0; n];
        let mut m = vec![0.0; n * d];
        for l in 0..d {
            self.eval_sigma(l, t, x, &mut col);
            for i in 0..n {
                m[i * d + l] = col[i];
            }
        }
        m
    }

    /// Row-major `d x d` matrix `[(h_lk)_i + (h_kl)_i]_{l,k}` for state component `i`.
    pub fn h_matrix_component(&self, i: usize, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut buf = vec![0.0; self.n];
        let mut m = vec![0.0; d * d];
        for l in 0..d {
            for k in 0..d {
                self.eval_h(l, k, t, x, &mut buf);
                m[l * d + k] += buf[i];
                m[k * d + l] += buf[i];
            }
        }
        m
    }

    /// Row-major `d x d` matrix `[K . (h_lk + h_kl)]_{l,k}`.
    pub fn h_matrix_weighted(&self, weights: &[f64], t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut buf = vec![0.0; self.n];
        let mut m = vec![0.0; d * d];
        for l in 0..d {
            for k in 0..d {
                self.eval_h(l, k, t, x, &mut buf);
                let v: f64 = weights.iter().zip(&buf).map(|(w, b)| w * b).sum();
                m[l * d + k] += v;
                m[k * d + l] += v;
            }
        }
        m
    }

    fn audit_h_symmetry(&self) -> Result<()> {
        let d = self.d;
        if d == 1 || !self.has_h() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut x = vec![0.0; self.n];
        let mut a = vec![0.0; self.n];
        let mut b = vec![0.0; self.n];
        for _ in 0..SYMMETRY_AUDIT_POINTS {
            x.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            let t = rng.random_range(0.0..1.0);
            for l in 0..d {
                for k in (l + 1)..d {
                    self.eval_h(l, k, t, &x, &mut a);
                    self.eval_h(k, l, t, &x, &mut b);
                    if let Some(c) = (0..self.n).find(|&c| (a[c] - b[c]).abs() > SYMMETRY_TOLERANCE) {
                        return Err(Error::Coefficient(format!(
                            "h_{l}{k} != h_{k}{l} in component {c} at t = {t}, x = {x:?} ({} vs {})",
                            a[c], b[c]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest sampled difference quotient `|phi(t,x) - phi(t,y)| / |x - y|`
    /// over `phi = b, h_ij, sigma_i` on the box.
    pub fn lipschitz_audit(&self, lo: &[f64], hi: &[f64], samples: usize, seed: u64) -> f64 {
        let n = self.n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut fx = vec![0.0; n];
        let mut fy = vec![0.0; n];
        let mut worst: f64 = 0.0;
        let fields: Vec<&VectorField> = self
            .drift
            .iter()
            .chain(self.h.iter().flatten())
            .chain(self.sigma.iter().flatten())
            .collect();
        for _ in 0..samples {
            for c in 0..n {
                x[c] = rng.random_range(lo[c]..=hi[c]);
                y[c] = (x[c] + rng.random_range(-0.05..0.05)).clamp(lo[c], hi[c]);
            }
            let t = rng.random_range(0.0..1.0);
            let dist = crate::numeric::norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
            if dist < 1e-9 {
                continue;
            }
            for f in &fields {
                f(t, &x, &mut fx);
                f(t, &y, &mut fy);
                let diff = crate::numeric::norm(&fx.iter().zip(&fy).map(|(a, b)| a - b).collect::<Vec<_>>());
                worst = worst.max(diff / dist);
            }
        }
        worst
    }
}

/// Where a state path came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub coefficient_id: String,
    pub control_label: String,
    pub noise_seed: u64,
    pub path_index: u64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    times: Vec<f64>,
    n: usize,
    states: Vec<f64>,
    provenance: Provenance,
}

impl StatePath {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// CSV with header `t,X_1,...,X_n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.n {
            out.push_str(&format!(",X_{i}"));
        }
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&format!("{}", self.times[k]));
            for v in self.state(k) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Reusable scratch space for the Euler step.
struct Workspace {
    drift: Vec<f64>,
    buf: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            drift: vec![0.0; n],
            buf: vec![0.0; n],
        }
    }
}

fn check_dims(coeffs: &CoefficientSet, x0: &[f64], path: &GBrownianPath) -> Result<()> {
    if x0.len() != coeffs.n {
        return Err(Error::Dimension(format!(
            "initial state has length {}, state dimension is {}",
            x0.len(),
            coeffs.n
        )));
    }
    if path.dim() != coeffs.d {
        return Err(Error::Dimension(format!(
            "path is driven by {}-dimensional noise, coefficients expect {}",
            path.dim(),
            coeffs.d
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("initial state {x0:?}")));
    }
    Ok(())
}

/// One Euler step with coefficients frozen at `(t, x)`; writes into `next`.
fn euler_step(
    coeffs: &CoefficientSet,
    t: f64,
    dt: f64,
    x: &[f64],
    db: &[f64],
    dqv: &[f64],
    ws: &mut Workspace,
    next: &mut [f64],
) {
    let d = coeffs.d;
    coeffs.eval_drift(t, x, &mut ws.drift);
    for c in 0..coeffs.n {
        next[c] = x[c] + ws.drift[c] * dt;
    }
    for l in 0..d {
        for k in 0..d {
            if coeffs.h[l * d + k].is_none() {
                continue;
            }
            let q = dqv[l * d + k];
            coeffs.eval_h(l, k, t, x, &mut ws.buf);
            for c in 0..coeffs.n {
                next[c] += ws.buf[c] * q;
            }
        }
    }
    for (i, dbi) in db.iter().enumerate() {
        if coeffs.sigma[i].is_none() {
            continue;
        }
        coeffs.eval_sigma(i, t, x, &mut ws.buf);
        for c in 0..coeffs.n {
            next[c] += ws.buf[c] * dbi;
        }
    }
}

fn finite_or_err(coeffs: &CoefficientSet, k: usize, t: f64, prev: &[f64], next: &[f64]) -> Result<()> {
    if next.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "system '{}' left the finite range at step {k} (t = {t}): {prev:?} -> {next:?}",
            coeffs.id
        )))
    }
}

pub fn integrate(coeffs: &CoefficientSet, x0: &[f64], path: &GBrownianPath) -> Result<StatePath> {
    check_dims(coeffs, x0, path)?;
    let n = coeffs.n;
    let steps = path.n_steps();
    let dt = path.dt();
    let mut states = vec![0.0; (steps + 1) * n];
    states[..n].copy_from_slice(x0);
    let mut ws = Workspace::new(n);
    for k in 0..steps {
        let t = path.time(k);
        let (done, rest) = states.split_at_mut((k + 1) * n);
        let x = &done[k * n..];
        let next = &mut rest[..n];
        euler_step(coeffs, t, dt, x, path.db(k), path.dqv(k), &mut ws, next);
        finite_or_err(coeffs, k, t, x, next)?;
    }
    Ok(StatePath {
        times: (0..=steps).map(|k| path.time(k)).collect(),
        n,
        states,
        provenance: provenance(coeffs, path, x0),
    })
}

fn provenance(coeffs: &CoefficientSet, path: &GBrownianPath, x0: &[f64]) -> Provenance {
    Provenance {
        coefficient_id: coeffs.id.clone(),
        control_label: path.control_label().to_string(),
        noise_seed: path.noise_seed(),
        path_index: path.path_index(),
        x0: x0.to_vec(),
    }
}

/// Integrates both systems on the identical `(dB, d<B>)` sequence.
pub fn integrate_coupled(
    ca: &CoefficientSet,
    cb: &CoefficientSet,
    x0: &[f64],
    y0: &[f64],
    path: &GBrownianPath,
) -> Result<(StatePath, StatePath)> {
    if ca.n != cb.n || ca.d != cb.d {
        return Err(Error::Dimension(format!(
            "coupled systems differ in shape: ({}, {}) vs ({}, {})",
            ca.n, ca.d, cb.n, cb.d
        )));
    }
    if x0.iter().zip(y0).any(|(a, b)| a > b) {
        log::warn!("coupled integration with x0 not <= y0 componentwise: {x0:?} vs {y0:?}");
    }
    Ok((integrate(ca, x0, path)?, integrate(cb, y0, path)?))
}

/// Minimum of `Y_k(t) - X_k(t)` over components and grid times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapWitness {
    pub gap: f64,
    /// Zero-based state component.
    pub component: usize,
    pub step: usize,
    pub time: f64,
}

/// Exact minimum of `Y_k(t) - X_k(t)` with the first (earliest step, lowest
/// component) witness.
pub fn pathwise_min_gap(x: &StatePath, y: &StatePath) -> Result<GapWitness> {
    if x.n != y.n || x.times != y.times {
        return Err(Error::Dimension("state paths are not on one grid".into()));
    }
    let mut best = GapWitness {
        gap: f64::INFINITY,
        component: 0,
        step: 0,
        time: x.times[0],
    };
    for k in 0..x.len() {
        for (c, (a, b)) in x.state(k).iter().zip(y.state(k)).enumerate() {
            let gap = b - a;
            if gap < best.gap {
                best = GapWitness {
                    gap,
                    component: c,
                    step: k,
                    time: x.times[k],
                };
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::g::CovarianceSet;
    use crate::scenario::{build_gbm_path, sample_noise, NoisePath, VolatilityControl};

    fn unit_path(n_steps: usize, seed: u64) -> GBrownianPath {
        let theta = CovarianceSet::interval(0.25, 1.0).unwrap();
        let noise = sample_noise(seed, 1.0, n_steps, 1).unwrap();
        build_gbm_path(&noise, &VolatilityControl::constant(1, n_steps), &theta).unwrap()
    }

    #[test]
    fn zero_coefficients_keep_state() {
        let path = unit_path(50, 1);
        let out = integrate(&CoefficientSet::zero(2, 1), &[0.3, -1.0], &path).unwrap();
        for k in 0..out.len() {
            assert_eq!(out.state(k), &[0.3, -1.0]);
        }
    }

    #[test]
    fn unit_drift_moves_with_time() {
        let path = unit_path(64, 1);
        let c = CoefficientSet::builder(1, 1).drift(|_, _, o| o[0] = 1.0).build().unwrap();
        let out = integrate(&c, &[0.5], &path).unwrap();
        for k in 0..out.len() {
            assert!((out.state(k)[0] - (0.5 + out.times()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn h_term_telescopes_to_quadratic_variation() {
        let theta = CovarianceSet::interval(0.25, 1.0).unwrap();
        let noise = sample_noise(4, 1.0, 40, 1).unwrap();
        let control = VolatilityControl::random_switching(2, 40, 2, 0, 0.3).unwrap();
        let path = build_gbm_path(&noise, &control, &theta).unwrap();
        let c = CoefficientSet::builder(1, 1).h(0, 0, |_, _, o| o[0] = 1.0).build().unwrap();
        let out = integrate(&c, &[0.0], &path).unwrap();
        let mut acc = 0.0;
        for k in 0..40 {
            assert_eq!(out.state(k)[0], acc);
            acc += path.dqv(k)[0];
        }
        assert_eq!(out.state(40)[0], acc);
        assert!((acc - path.qv_at(40).get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn coupled_identical_systems_are_bitwise_equal() {
        let path = unit_path(30, 2);
        let c = CoefficientSet::builder(1, 1)
            .drift(|_, x, o| o[0] = -x[0])
            .sigma(0, |_, x, o| o[0] = 0.5 + 0.1 * x[0].tanh())
            .build()
            .unwrap();
        let (a, b) = integrate_coupled(&c, &c, &[0.2], &[0.2], &path).unwrap();
        assert_eq!(a, b);
        let gap = pathwise_min_gap(&a, &b).unwrap();
        assert_eq!((gap.gap, gap.component, gap.step), (0.0, 0, 0));
    }

    #[test]
    fn shifted_drift_gap_is_time() {
        let path = unit_path(100, 3);
        let base = CoefficientSet::builder(2, 1)
            .drift(|_, x, o| {
                o[0] = x[1];
                o[1] = x[0];
            })
            .build()
            .unwrap();
        // without noise the difference solves an ODE; make all else zero
        let zero = CoefficientSet::zero(2, 1);
        let shifted = zero.with_drift_shift(vec![1.0, 1.0]).unwrap();
        let (x, y) = integrate_coupled(&zero, &shifted, &[0.0, 0.0], &[0.0, 0.0], &path).unwrap();
        for k in 0..x.len() {
            for c in 0..2 {
                assert!((y.state(k)[c] - x.state(k)[c] - x.times()[k]).abs() < 1e-12);
            }
        }
        let gap = pathwise_min_gap(&x, &y).unwrap();
        assert_eq!(gap.step, 0);
        assert_eq!(gap.gap, 0.0);
        assert!(base.with_drift_shift(vec![1.0]).is_err());
    }

    #[test]
    fn non_finite_state_aborts_with_step() {
        let path = unit_path(10, 1);
        let c = CoefficientSet::builder(1, 1)
            .drift(|_, x, o| o[0] = if x[0] > 0.55 { f64::INFINITY } else { 1.0 })
            .build()
            .unwrap();
        let err = integrate(&c, &[0.0], &path).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("step 6"), "{err}");
    }

    #[test]
    fn dimension_mismatches_are_errors() {
        let path = unit_path(10, 1);
        assert!(integrate(&CoefficientSet::zero(2, 1), &[0.0], &path).is_err());
        assert!(integrate(&CoefficientSet::zero(1, 2), &[0.0], &path).is_err());
        assert!(integrate(&CoefficientSet::zero(1, 1), &[f64::NAN], &path).is_err());
    }

    #[test]
    fn asymmetric_h_is_rejected() {
        let r = CoefficientSet::builder(1, 2).h(0, 1, |_, _, o| o[0] = 1.0).build();
        assert!(matches!(r, Err(Error::Coefficient(_))));
        let ok = CoefficientSet::builder(1, 2).h_sym(0, 1, |_, _, o| o[0] = 1.0).build();
        assert!(ok.is_ok());
    }

    #[test]
    fn permutation_equivariance() {
        let theta = CovarianceSet::from_generators(2, vec![vec![1.0, 0.0, 0.2, 0.8], vec![0.6, 0.0, 0.0, 0.6]]).unwrap();
        let noise = NoisePath::sample(5, 0, 1.0, 50, 2).unwrap();
        let control = VolatilityControl::random_switching(2, 50, 1, 0, 0.2).unwrap();
        let path = build_gbm_path(&noise, &control, &theta).unwrap();
        let drift = |x0: f64, x1: f64, x2: f64| [x1.atan() - 0.3 * x0, x0 + x2.tanh(), -x2 + 0.1 * x0];
        let a = CoefficientSet::builder(3, 2)
            .drift(move |_, x, o| o.copy_from_slice(&drift(x[0], x[1], x[2])))
            .sigma(0, |_, x, o| {
                o[0] = 0.5 + 0.1 * x[0].tanh();
                o[1] = 0.0;
                o[2] = 0.2;
            })
            .sigma(1, |_, x, o| {
                o[0] = 0.0;
                o[1] = 0.4 + 0.1 * x[1].sin();
                o[2] = 0.1;
            })
            .h_sym(0, 1, |_, x, o| {
                o[0] = 0.1 * x[2];
                o[1] = 0.0;
                o[2] = -0.05;
            })
            .build()
            .unwrap();
        // coordinates relabelled by P = (0 -> 2, 1 -> 0, 2 -> 1): z = (x1, x2, x0)
        let b = CoefficientSet::builder(3, 2)
            .drift(move |_, z, o| {
                let v = drift(z[2], z[0], z[1]);
                o.copy_from_slice(&[v[1], v[2], v[0]]);
            })
            .sigma(0, |_, z, o| {
                o[2] = 0.5 + 0.1 * z[2].tanh();
                o[0] = 0.0;
                o[1] = 0.2;
            })
            .sigma(1, |_, z, o| {
                o[2] = 0.0;
                o[0] = 0.4 + 0.1 * z[0].sin();
                o[1] = 0.1;
            })
            .h_sym(0, 1, |_, z, o| {
                o[2] = 0.1 * z[1];
                o[0] = 0.0;
                o[1] = -0.05;
            })
            .build()
            .unwrap();
        let xa = integrate(&a, &[0.1, -0.2, 0.3], &path).unwrap();
        let xb = integrate(&b, &[-0.2, 0.3, 0.1], &path).unwrap();
        for k in 0..xa.len() {
            let s = xa.state(k);
            assert_eq!(xb.state(k), &[s[1], s[2], s[0]]);
        }
    }

    #[test]
    fn euler_strong_order_on_linear_system() {
        // dX = -X dt + dB, unit constant control; reference is 4x finer than the finest grid.
        let theta = CovarianceSet::interval(1.0, 1.0).unwrap();
        let c = CoefficientSet::builder(1, 1)
            .drift(|_, x, o| o[0] = -x[0])
            .sigma(0, |_, _, o| o[0] = 1.0)
            .build()
            .unwrap();
        let (coarse, fine, reference) = (16, 32, 128);
        let mut err_coarse = 0.0;
        let mut err_fine = 0.0;
        let paths = 400;
        for p in 0..paths {
            let noise = NoisePath::sample(99, p, 1.0, reference, 1).unwrap();
            let full = build_gbm_path(&noise, &VolatilityControl::constant(0, reference), &theta).unwrap();
            let x_ref = integrate(&c, &[1.0], &full).unwrap().last()[0];
            let x_c = integrate(&c, &[1.0], &full.coarsen(reference / coarse).unwrap()).unwrap().last()[0];
            let x_f = integrate(&c, &[1.0], &full.coarsen(reference / fine).unwrap()).unwrap().last()[0];
            err_coarse += (x_c - x_ref).powi(2);
            err_fine += (x_f - x_ref).powi(2);
        }
        let rms_c = (err_coarse / paths as f64).sqrt();
        let rms_f = (err_fine / paths as f64).sqrt();
        let order = (rms_c / rms_f).log2();
        assert!(order >= 0.4, "observed order {order}");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let path = unit_path(4, 1);
        let out = integrate(&CoefficientSet::zero(2, 1), &[1.0, 2.0], &path).unwrap();
        let csv = out.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,X_1,X_2");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "0,1,2");
    }
}
