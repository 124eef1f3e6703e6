//! Scenario generation: reference Gaussian noise, volatility controls, and
//! G-Brownian paths realised scenario-wise as `dB = gamma dW`,
//! `d<B>` = `gamma gamma^T dt`.
//!
//! The supremum over the family of measures behind a sublinear expectation is
//! approximated from below by the maximum of Monte Carlo means over a finite
//! family of controls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::g::{CovarianceSet, SymMatrix};
use crate::numeric::mean_and_std_error;

/// Stream offset separating control randomness from path noise.
const CONTROL_STREAM_BASE: u64 = 1 << 40;

/// i.i.d. `N(0, dt)` increments for one path, fully determined by
/// `(seed, path_index, horizon, n_steps, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    seed: u64,
    path_index: u64,
    horizon: f64,
    n_steps: usize,
    dim: usize,
    increments: Vec<f64>,
}

/// Noise path with index 0 for `seed`.
pub fn sample_noise(seed: u64, horizon: f64, n_steps: usize, dim: usize) -> Result<NoisePath> {
    NoisePath::sample(seed, 0, horizon, n_steps, dim)
}

impl NoisePath {
    pub fn sample(seed: u64, path_index: u64, horizon: f64, n_steps: usize, dim: usize) -> Result<Self> {
        validate_grid(horizon, n_steps)?;
        if dim == 0 {
            return Err(Error::Invalid("noise dimension must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path_index);
        let sd = (horizon / n_steps as f64).sqrt();
        let increments = (0..n_steps * dim)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(NoisePath {
            seed,
            path_index,
            horizon,
            n_steps,
            dim,
            increments,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Row-major `n_steps x dim`.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }
}

fn validate_grid(horizon: f64, n_steps: usize) -> Result<()> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
    }
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be at least 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlPolicy {
    Constant,
    RandomSwitching,
    BangBangCycle,
    Explicit,
}

/// Step-indexed choice of generator: step `k` uses `gamma_{schedule[k]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityControl {
    schedule: Vec<usize>,
    policy: ControlPolicy,
    label: String,
}

impl VolatilityControl {
    pub fn constant(generator: usize, n_steps: usize) -> Self {
        VolatilityControl {
            schedule: vec![generator; n_steps],
            policy: ControlPolicy::Constant,
            label: format!("constant-{generator}"),
        }
    }

    /// Piecewise-constant schedule: starts at a uniformly drawn generator and at
    /// each step jumps to a uniformly drawn one with probability `switch_probability`.
    pub fn random_switching(
        n_generators: usize,
        n_steps: usize,
        seed: u64,
        index: u64,
        switch_probability: f64,
    ) -> Result<Self> {
        if n_generators == 0 {
            return Err(Error::Invalid("random switching needs at least one generator".into()));
        }
        if !(0.0..=1.0).contains(&switch_probability) {
            return Err(Error::Invalid(format!(
                "switch probability {switch_probability} outside [0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(CONTROL_STREAM_BASE + index);
        let mut current = rng.random_range(0..n_generators);
        let schedule = (0..n_steps)
            .map(|_| {
                if rng.random::<f64>() < switch_probability {
                    current = rng.random_range(0..n_generators);
                }
                current
            })
            .collect();
        Ok(VolatilityControl {
            schedule,
            policy: ControlPolicy::RandomSwitching,
            label: format!("random-switching-{index}"),
        })
    }

    /// Cycles through `generators`, holding each for `period` steps.
    pub fn bang_bang_cycle(generators: &[usize], period: usize, n_steps: usize) -> Result<Self> {
        if generators.is_empty() || period == 0 {
            return Err(Error::Invalid("bang-bang cycle needs generators and a positive period".into()));
        }
        let schedule = (0..n_steps)
            .map(|k| generators[(k / period) % generators.len()])
            .collect();
        Ok(VolatilityControl {
            schedule,
            policy: ControlPolicy::BangBangCycle,
            label: format!("bang-bang-{period}"),
        })
    }

    pub fn explicit(schedule: Vec<usize>) -> Self {
        VolatilityControl {
            schedule,
            policy: ControlPolicy::Explicit,
            label: "explicit".into(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn policy(&self) -> ControlPolicy {
        self.policy
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn validate(&self, theta: &CovarianceSet, n_steps: usize) -> Result<()> {
        if self.schedule.len() < n_steps {
            return Err(Error::Dimension(format!(
                "control '{}' covers {} steps, path needs {n_steps}",
                self.label,
                self.schedule.len()
            )));
        }
        if let Some((k, m)) = self.schedule.iter().enumerate().find(|(_, &m)| m >= theta.len()) {
            return Err(Error::Invalid(format!(
                "control '{}' references generator {m} at step {k}; set has {}",
                self.label,
                theta.len()
            )));
        }
        Ok(())
    }
}

/// Constants at every generator (optional) followed by `random_switching`
/// random schedules.
pub fn control_family(
    theta: &CovarianceSet,
    n_steps: usize,
    constants: bool,
    random_switching: usize,
    seed: u64,
    switch_probability: f64,
) -> Result<Vec<VolatilityControl>> {
    let mut controls = Vec::new();
    if constants {
        controls.extend((0..theta.len()).map(|m| VolatilityControl::constant(m, n_steps)));
    }
    for k in 0..random_switching {
        controls.push(VolatilityControl::random_switching(
            theta.len(),
            n_steps,
            seed,
            k as u64,
            switch_probability,
        )?);
    }
    if controls.is_empty() {
        return Err(Error::Invalid("control family is empty".into()));
    }
    Ok(controls)
}

/// Increments of `B` and `<B>` along one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GBrownianPath {
    horizon: f64,
    n_steps: usize,
    dim: usize,
    db: Vec<f64>,
    dqv: Vec<f64>,
    /// `QV(t_k)` from generator occupation counts, `(n_steps + 1) x d x d`.
    qv: Vec<f64>,
    schedule: Vec<usize>,
    noise_seed: u64,
    path_index: u64,
    control_label: String,
}

pub fn build_gbm_path(
    noise: &NoisePath,
    control: &VolatilityControl,
    theta: &CovarianceSet,
) -> Result<GBrownianPath> {
    let d = theta.dim();
    if noise.dim() != d {
        return Err(Error::Dimension(format!(
            "noise dimension {} differs from covariance set dimension {d}",
            noise.dim()
        )));
    }
    let n = noise.n_steps();
    control.validate(theta, n)?;
    let dt = noise.dt();
    let mut db = vec![0.0; n * d];
    let mut dqv = vec![0.0; n * d * d];
    let mut qv = vec![0.0; (n + 1) * d * d];
    let mut counts = vec![0u64; theta.len()];
    for k in 0..n {
        let m = control.schedule[k];
        let gamma = theta.generator(m);
        let dw = noise.step(k);
        for i in 0..d {
            db[k * d + i] = (0..d).map(|j| gamma[i * d + j] * dw[j]).sum();
        }
        let sigma = theta.covariance(m).entries();
        for (out, s) in dqv[k * d * d..(k + 1) * d * d].iter_mut().zip(sigma) {
            *out = s * dt;
        }
        counts[m] += 1;
        let slot = &mut qv[(k + 1) * d * d..(k + 2) * d * d];
        for (mm, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let w = c as f64 * dt;
            for (o, s) in slot.iter_mut().zip(theta.covariance(mm).entries()) {
                *o += w * s;
            }
        }
    }
    Ok(GBrownianPath {
        horizon: noise.horizon(),
        n_steps: n,
        dim: d,
        db,
        dqv,
        qv,
        schedule: control.schedule[..n].to_vec(),
        noise_seed: noise.seed(),
        path_index: noise.path_index(),
        control_label: control.label.clone(),
    })
}

impl GBrownianPath {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn db(&self, k: usize) -> &[f64] {
        &self.db[k * self.dim..(k + 1) * self.dim]
    }

    /// Row-major `d x d` increment of `<B^i, B^j>` over step `k`.
    pub fn dqv(&self, k: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.dqv[k * dd..(k + 1) * dd]
    }

    /// `B(t_k)`.
    pub fn b_at(&self, k: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for j in 0..k {
            for (a, v) in acc.iter_mut().zip(self.db(j)) {
                *a += v;
            }
        }
        acc
    }

    /// `<B>(t_k)`.
    pub fn qv_at(&self, k: usize) -> SymMatrix {
        let dd = self.dim * self.dim;
        SymMatrix::new(self.dim, self.qv[k * dd..(k + 1) * dd].to_vec())
            .expect("quadratic variation is finite and square")
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn control_label(&self) -> &str {
        &self.control_label
    }

    /// Aggregates blocks of `factor` consecutive steps.
    pub fn coarsen(&self, factor: usize) -> Result<GBrownianPath> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::Invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.n_steps
            )));
        }
        let n = self.n_steps / factor;
        let d = self.dim;
        let dd = d * d;
        let mut db = vec![0.0; n * d];
        let mut dqv = vec![0.0; n * dd];
        for k in 0..n {
            for j in k * factor..(k + 1) * factor {
                for (o, v) in db[k * d..(k + 1) * d].iter_mut().zip(self.db(j)) {
                    *o += v;
                }
                for (o, v) in dqv[k * dd..(k + 1) * dd].iter_mut().zip(self.dqv(j)) {
                    *o += v;
                }
            }
        }
        let qv = (0..=n)
            .flat_map(|k| self.qv[k * factor * dd..(k * factor + 1) * dd].iter().copied())
            .collect();
        let schedule = (0..n).map(|k| self.schedule[k * factor]).collect();
        Ok(GBrownianPath {
            horizon: self.horizon,
            n_steps: n,
            dim: d,
            db,
            dqv,
            qv,
            schedule,
            noise_seed: self.noise_seed,
            path_index: self.path_index,
            control_label: self.control_label.clone(),
        })
    }
}

/// Result of [`estimate_sublinear_expectation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublinearEstimate {
    /// Maximum over controls of the Monte Carlo mean. A lower estimate of the
    /// true supremum, since the control family is finite.
    pub estimate: f64,
    pub std_error: f64,
    pub argmax_control: usize,
    pub argmax_label: String,
    pub control_means: Vec<f64>,
}

/// Maximises Monte Carlo means of `functional` over `controls`. Every control
/// sees the same noise paths `(seed, 0..n_paths)`.
pub fn estimate_sublinear_expectation<F>(
    functional: F,
    theta: &CovarianceSet,
    controls: &[VolatilityControl],
    n_paths: usize,
    seed: u64,
    horizon: f64,
    n_steps: usize,
) -> Result<SublinearEstimate>
where
    F: Fn(&GBrownianPath) -> f64 + Sync,
{
    if n_paths < 2 {
        return Err(Error::Invalid("n_paths must be at least 2".into()));
    }
    if controls.is_empty() {
        return Err(Error::Invalid("control family is empty".into()));
    }
    for c in controls {
        c.validate(theta, n_steps)?;
    }
    let noises: Vec<NoisePath> = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| NoisePath::sample(seed, p, horizon, n_steps, theta.dim()))
        .collect::<Result<_>>()?;

    let mut means = Vec::with_capacity(controls.len());
    let mut errors = Vec::with_capacity(controls.len());
    for (ci, control) in controls.iter().enumerate() {
        let values: Vec<f64> = noises
            .par_iter()
            .map(|noise| build_gbm_path(noise, control, theta).map(|p| functional(&p)))
            .collect::<Result<_>>()?;
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "functional returned {} for control {ci} ('{}'), path {p}",
                values[p],
                control.label()
            )));
        }
        let (mean, se) = mean_and_std_error(&values);
        means.push(mean);
        errors.push(se);
    }
    let (best, estimate) = crate::g::argmax_first(means.iter().copied());
    Ok(SublinearEstimate {
        estimate,
        std_error: errors[best],
        argmax_control: best,
        argmax_label: controls[best].label().to_string(),
        control_means: means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interval() -> CovarianceSet {
        CovarianceSet::interval(0.25, 1.0).unwrap()
    }

    #[test]
    fn noise_is_deterministic() {
        let a = sample_noise(1, 1.0, 4, 1).unwrap();
        let b = sample_noise(1, 1.0, 4, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.increments(), sample_noise(2, 1.0, 4, 1).unwrap().increments());
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(sample_noise(1, 0.0, 4, 1).is_err());
        assert!(sample_noise(1, 1.0, 0, 1).is_err());
        assert!(sample_noise(1, 1.0, 4, 0).is_err());
    }

    #[test]
    fn pooled_variance_within_four_sigma() {
        // 10^5 draws with dt = 0.25; sd of the sample variance is dt^2 sqrt(2/(N-1)).
        let n = 100_000;
        let noise = NoisePath::sample(11, 0, 25_000.0, n, 1).unwrap();
        let dt = noise.dt();
        assert_eq!(dt, 0.25);
        let (mean, _) = mean_and_std_error(noise.increments());
        let var = noise.increments().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd_var = dt * dt * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - dt).abs() < 4.0 * sd_var, "var {var}");
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn streams_for_different_seeds_are_uncorrelated() {
        let n = 100_000;
        let a = NoisePath::sample(1, 0, n as f64, n, 1).unwrap();
        let b = NoisePath::sample(2, 0, n as f64, n, 1).unwrap();
        let corr = a.increments().iter().zip(b.increments()).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // unit variance draws: sd of the sample correlation ~ 1/sqrt(n)
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn constant_unit_control_gives_qv_equal_to_t() {
        let theta = CovarianceSet::interval(1.0, 1.0).unwrap();
        let noise = sample_noise(3, 1.0, 10, 1).unwrap();
        let path = build_gbm_path(&noise, &VolatilityControl::constant(0, 10), &theta).unwrap();
        for k in 0..=10 {
            assert_eq!(path.qv_at(k).get(0, 0), path.time(k));
        }
    }

    #[test]
    fn lower_constant_control_gives_lower_rate() {
        let theta = interval();
        let noise = sample_noise(3, 1.0, 10, 1).unwrap();
        let path = build_gbm_path(&noise, &VolatilityControl::constant(0, 10), &theta).unwrap();
        for k in 0..=10 {
            assert_eq!(path.qv_at(k).get(0, 0), 0.25 * path.time(k));
        }
    }

    #[test]
    fn bang_bang_half_half() {
        let theta = interval();
        let noise = sample_noise(3, 1.0, 100, 1).unwrap();
        let control = VolatilityControl::bang_bang_cycle(&[0, 1], 50, 100).unwrap();
        let path = build_gbm_path(&noise, &control, &theta).unwrap();
        // 0.5 * 0.25 + 0.5 * 1.0
        assert!((path.qv_at(100).get(0, 0) - 0.625).abs() < 1e-12);
        for k in 0..=100 {
            let q = path.qv_at(k).get(0, 0);
            let t = path.time(k);
            assert!(q >= 0.25 * t - 1e-15 && q <= t + 1e-15);
        }
    }

    #[test]
    fn build_rejects_mismatches() {
        let theta = interval();
        let noise = sample_noise(3, 1.0, 10, 2).unwrap();
        assert!(build_gbm_path(&noise, &VolatilityControl::constant(0, 10), &theta).is_err());
        let noise = sample_noise(3, 1.0, 10, 1).unwrap();
        assert!(build_gbm_path(&noise, &VolatilityControl::constant(0, 5), &theta).is_err());
        assert!(build_gbm_path(&noise, &VolatilityControl::constant(2, 10), &theta).is_err());
    }

    #[test]
    fn qv_increments_are_psd_and_nondecreasing() {
        let theta = CovarianceSet::from_generators(
            2,
            vec![vec![1.0, 0.0, 0.3, 0.9], vec![0.5, 0.0, 0.0, 0.5]],
        )
        .unwrap();
        let noise = sample_noise(5, 1.0, 20, 2).unwrap();
        let control = VolatilityControl::random_switching(2, 20, 9, 0, 0.3).unwrap();
        let path = build_gbm_path(&noise, &control, &theta).unwrap();
        for k in 0..20 {
            let inc = SymMatrix::new(2, path.dqv(k).to_vec()).unwrap();
            assert!(inc.min_eigenvalue() >= -1e-14);
            let step = path.qv_at(k + 1).sub(&path.qv_at(k)).unwrap();
            assert!(step.min_eigenvalue() >= -1e-12);
        }
    }

    #[test]
    fn martingale_functional_is_centred() {
        let theta = interval();
        let controls = control_family(&theta, 20, true, 8, 4, 0.2).unwrap();
        for c in &controls {
            let est = estimate_sublinear_expectation(
                |p| p.b_at(p.n_steps())[0],
                &theta,
                std::slice::from_ref(c),
                4000,
                17,
                1.0,
                20,
            )
            .unwrap();
            assert!(est.estimate.abs() <= 3.0 * est.std_error, "{est:?}");
        }
    }

    #[test]
    fn convex_functional_picks_upper_variance() {
        let theta = interval();
        let controls = control_family(&theta, 20, true, 0, 0, 0.0).unwrap();
        let est = estimate_sublinear_expectation(
            |p| p.b_at(p.n_steps())[0].powi(2),
            &theta,
            &controls,
            20_000,
            5,
            1.0,
            20,
        )
        .unwrap();
        assert!((est.estimate - 1.0).abs() <= 3.0 * est.std_error, "{est:?}");
        assert_eq!(est.argmax_control, 1);

        let neg = estimate_sublinear_expectation(
            |p| -p.b_at(p.n_steps())[0].powi(2),
            &theta,
            &controls,
            20_000,
            5,
            1.0,
            20,
        )
        .unwrap();
        assert!((neg.estimate + 0.25).abs() <= 3.0 * neg.std_error, "{neg:?}");
        assert_eq!(neg.argmax_control, 0);
    }

    #[test]
    fn adding_controls_never_lowers_the_estimate() {
        let theta = interval();
        let all = control_family(&theta, 16, true, 12, 8, 0.25).unwrap();
        let f = |p: &GBrownianPath| (p.b_at(p.n_steps())[0]).tanh() + p.qv_at(8).get(0, 0);
        let mut previous = f64::NEG_INFINITY;
        for k in 1..=all.len() {
            let est = estimate_sublinear_expectation(f, &theta, &all[..k], 200, 3, 1.0, 16).unwrap();
            assert!(est.estimate >= previous);
            previous = est.estimate;
        }
    }

    #[test]
    fn constant_upper_control_is_best_constant_for_convex_payoff() {
        let theta = CovarianceSet::from_generators(1, vec![vec![0.3], vec![0.9], vec![0.6], vec![0.5]]).unwrap();
        let controls = control_family(&theta, 10, true, 0, 0, 0.0).unwrap();
        let est = estimate_sublinear_expectation(
            |p| p.b_at(p.n_steps())[0].abs().powi(3),
            &theta,
            &controls,
            2000,
            21,
            1.0,
            10,
        )
        .unwrap();
        // same noise for every constant control: gamma |W|^3 scales pathwise
        assert_eq!(est.argmax_control, 1);
    }

    #[test]
    fn non_finite_functional_reports_indices() {
        let theta = interval();
        let controls = control_family(&theta, 4, true, 0, 0, 0.0).unwrap();
        let err = estimate_sublinear_expectation(
            |p| if p.path_index() == 3 { f64::NAN } else { 0.0 },
            &theta,
            &controls,
            5,
            1,
            1.0,
            4,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("control 0") && msg.contains("path 3"), "{msg}");
    }

    #[test]
    fn coarsening_preserves_totals() {
        let theta = interval();
        let noise = sample_noise(8, 1.0, 16, 1).unwrap();
        let path = build_gbm_path(&noise, &VolatilityControl::constant(1, 16), &theta).unwrap();
        let coarse = path.coarsen(4).unwrap();
        assert_eq!(coarse.n_steps(), 4);
        assert!((coarse.b_at(4)[0] - path.b_at(16)[0]).abs() < 1e-14);
        assert_eq!(coarse.qv_at(4), path.qv_at(16));
    }
}
