//! Trajectory generators for the four test systems:
//!
//! * a double-well gradient flow driven by a fast Lorenz 63 signal,
//! * the white-noise driven double-well SDE it homogenizes to,
//! * the two-scale Lorenz 96 system,
//! * the single-scale Lorenz 96 system closed by a scalar closure `c(X_k)`.
//!
//! All generators are pure functions of their spec and seed. Independent sample
//! paths draw from ChaCha8 streams: path `i` of a run seeded with `s` uses
//! `ChaCha8Rng::seed_from_u64(s)` with `set_stream(i)`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{digest, TrajectoryDataset};
use crate::error::{Error, Result};

/// RNG for stream `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_state(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, u64::MAX);
    (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Number of samples on `[discard, duration]` at spacing `dt`.
fn sample_count(duration: f64, discard: f64, dt: f64) -> Result<usize> {
    if !(duration > discard && discard >= 0.0) {
        return Err(Error::Config(format!(
            "need duration > discard >= 0, got duration {duration}, discard {discard}"
        )));
    }
    Ok(((duration - discard) / dt + 1e-9).floor() as usize + 1)
}

/// Duration that yields exactly `n` samples after discarding `discard` time units.
pub fn duration_for_samples(n: usize, dt: f64, discard: f64) -> f64 {
    discard + (n.max(1) - 1) as f64 * dt
}

fn steps_per(interval: f64, step: f64, what: &str) -> Result<usize> {
    if !(step > 0.0) || step > interval * (1.0 + 1e-12) {
        return Err(Error::Config(format!("{what} step {step} must lie in (0, {interval}]")));
    }
    let ratio = interval / step;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-6 * ratio {
        return Err(Error::Config(format!(
            "sampling interval {interval} is not a multiple of the {what} step {step}"
        )));
    }
    Ok(n as usize)
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Classical fourth-order Runge-Kutta step, in place.
fn rk4_step<F>(state: &mut [f64], h: f64, scratch: &mut Rk4Scratch, mut rhs: F) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = state.len();
    let Rk4Scratch { k1, k2, k3, k4, tmp } = scratch;
    rhs(state, k1)?;
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k1[i];
    }
    rhs(tmp, k2)?;
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k2[i];
    }
    rhs(tmp, k3)?;
    for i in 0..n {
        tmp[i] = state[i] + h * k3[i];
    }
    rhs(tmp, k4)?;
    for i in 0..n {
        state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

// ---------------------------------------------------------------------------
// Lorenz 63 driven double well

/// Double-well flow `x' = x - x^3 + 4/(90 eps) y2` driven by a Lorenz 63 signal
/// running on the fast time scale `t / eps^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct L63DrivenSpec {
    pub epsilon: f64,
    /// Initial slow state; uniform on [-1, 1] when absent.
    pub x0: Option<f64>,
    /// Initial fast state; uniform on [-1, 1]^3 when absent.
    pub y0: Option<[f64; 3]>,
    /// Sampling interval.
    pub dt: f64,
    /// Slow (semi-implicit) step.
    pub h_slow: f64,
    /// Fast RK4 step in rescaled time `s = t / eps^2`.
    pub h_fast: f64,
    pub seed: u64,
}

impl Default for L63DrivenSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            x0: None,
            y0: None,
            dt: 0.05,
            h_slow: 0.01,
            h_fast: 0.002,
            seed: 0,
        }
    }
}

impl L63DrivenSpec {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.h_fast > 0.0 && self.h_fast <= 0.005) {
            return Err(Error::Config(format!(
                "fast step {} must lie in (0, 0.005] for a stable Lorenz 63 substep",
                self.h_fast
            )));
        }
        steps_per(self.dt, self.h_slow, "slow")?;
        Ok(())
    }
}

#[inline(always)]
fn lorenz63(y: [f64; 3]) -> [f64; 3] {
    [
        10.0 * (y[1] - y[0]),
        28.0 * y[0] - y[1] - y[0] * y[2],
        y[0] * y[1] - 8.0 / 3.0 * y[2],
    ]
}

#[inline(always)]
fn lorenz63_rk4(y: [f64; 3], h: f64) -> [f64; 3] {
    let k1 = lorenz63(y);
    let k2 = lorenz63([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1], y[2] + 0.5 * h * k1[2]]);
    let k3 = lorenz63([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1], y[2] + 0.5 * h * k2[2]]);
    let k4 = lorenz63([y[0] + h * k3[0], y[1] + h * k3[1], y[2] + h * k3[2]]);
    let w = h / 6.0;
    [
        y[0] + w * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y[1] + w * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        y[2] + w * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Samples `(x, y1, y2, y3)` every `dt` on `[discard, duration]`.
///
/// Each slow step of length `h_slow` first advances the fast block with RK4
/// substeps in rescaled time, accumulating the trapezoidal mean of `y2`; the slow
/// variable then takes one linearly implicit Euler step on `x - x^3` with that
/// mean forcing held fixed.
pub fn simulate_l63_driven(spec: &L63DrivenSpec, duration: f64, discard: f64) -> Result<TrajectoryDataset> {
    spec.validate()?;
    let n_samples = sample_count(duration, discard, spec.dt)?;
    let slow_per_sample = steps_per(spec.dt, spec.h_slow, "slow")?;
    let h = spec.dt / slow_per_sample as f64;
    let fast_span = h / (spec.epsilon * spec.epsilon);
    let n_fast = (fast_span / spec.h_fast).ceil().max(1.0) as usize;
    let hf = fast_span / n_fast as f64;
    let coupling = 4.0 / (90.0 * spec.epsilon);

    let init = uniform_state(spec.seed, 4);
    let mut x = spec.x0.unwrap_or(init[0]);
    let mut y = spec.y0.unwrap_or([init[1], init[2], init[3]]);

    let discard_steps = (discard / h + 1e-9).round() as usize;
    let mut data = Vec::with_capacity(n_samples * 4);
    let total_steps = discard_steps + (n_samples - 1) * slow_per_sample;

    let mut step = 0usize;
    loop {
        if step >= discard_steps && (step - discard_steps).is_multiple_of(slow_per_sample) {
            data.extend_from_slice(&[x, y[0], y[1], y[2]]);
        }
        if step == total_steps {
            break;
        }
        let mut acc = 0.5 * y[1];
        for _ in 0..n_fast - 1 {
            y = lorenz63_rk4(y, hf);
            acc += y[1];
        }
        y = lorenz63_rk4(y, hf);
        acc += 0.5 * y[1];
        let forcing = coupling * acc / n_fast as f64;

        let f = x - x * x * x + forcing;
        let jac = 1.0 - 3.0 * x * x;
        x += h * f / (1.0 - h * jac);
        step += 1;
        if !(x.is_finite() && all_finite(&y)) {
            return Err(Error::IntegrationDiverged { time: step as f64 * h });
        }
    }
    Ok(TrajectoryDataset::new(data, 4, spec.dt, discard)?.with_meta(digest(&format!("{spec:?}"))))
}

// ---------------------------------------------------------------------------
// Double-well SDE

/// Quartic double-well potentials `Xi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Potential {
    /// `Xi(X) = (X - X^2)^2 / 4`, wells at 0 and 1.
    WellsAtZeroAndOne,
    /// `Xi(X) = (1 - X^2)^2 / 4`, wells at -1 and 1; `-Xi'` is the `x - x^3`
    /// drift of the Lorenz 63 driven system.
    WellsAtPlusMinusOne,
}

impl Potential {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Potential::WellsAtZeroAndOne => {
                let u = x - x * x;
                0.25 * u * u
            }
            Potential::WellsAtPlusMinusOne => {
                let u = 1.0 - x * x;
                0.25 * u * u
            }
        }
    }

    /// `dXi/dX`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Potential::WellsAtZeroAndOne => 0.5 * (x - x * x) * (1.0 - 2.0 * x),
            Potential::WellsAtPlusMinusOne => x * x * x - x,
        }
    }

    /// Interval carrying all but a negligible tail of `exp(-Xi/sigma)` for moderate sigma.
    pub fn default_support(self) -> (f64, f64) {
        match self {
            Potential::WellsAtZeroAndOne => (-1.5, 2.5),
            Potential::WellsAtPlusMinusOne => (-3.0, 3.0),
        }
    }
}

/// `dX = -Xi'(X) dt + sqrt(2 sigma) dW`, Euler-Maruyama with step `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoubleWellSDESpec {
    /// Noise intensity; zero gives the deterministic gradient flow.
    pub sigma: f64,
    pub x0: f64,
    pub h: f64,
    /// Spacing of the stored samples (a multiple of `h`).
    pub sample_dt: f64,
    pub seed: u64,
    pub potential: Potential,
}

impl Default for DoubleWellSDESpec {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            x0: 0.0,
            h: 1e-3,
            sample_dt: 0.05,
            seed: 0,
            potential: Potential::WellsAtZeroAndOne,
        }
    }
}

impl DoubleWellSDESpec {
    pub(crate) fn validate(&self) -> Result<usize> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        steps_per(self.sample_dt, self.h, "SDE")
    }

    #[inline]
    pub(crate) fn step(&self, x: f64, noise: f64) -> f64 {
        x - self.potential.derivative(x) * self.h + (2.0 * self.sigma * self.h).sqrt() * noise
    }
}

/// `n_paths` independent paths from `x0`, sampled every `sample_dt` on `[0, duration]`.
pub fn simulate_double_well_sde(
    spec: &DoubleWellSDESpec,
    duration: f64,
    n_paths: usize,
) -> Result<Vec<TrajectoryDataset>> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let per_sample = spec.validate()?;
    let n_samples = sample_count(duration, 0.0, spec.sample_dt)?;
    let meta = digest(&format!("{spec:?}"));
    (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = stream_rng(spec.seed, path as u64);
            let mut x = spec.x0;
            let mut out = Vec::with_capacity(n_samples);
            out.push(x);
            for s in 1..n_samples {
                for _ in 0..per_sample {
                    let xi: f64 = rng.sample(StandardNormal);
                    x = spec.step(x, xi);
                }
                if !x.is_finite() {
                    return Err(Error::IntegrationDiverged {
                        time: s as f64 * spec.sample_dt,
                    });
                }
                out.push(x);
            }
            Ok(TrajectoryDataset::new(out, 1, spec.sample_dt, 0.0)?.with_meta(meta.clone()))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Two-scale Lorenz 96

/// Two-scale Lorenz 96 with `k` slow and `j * k` fast variables.
///
/// State layout: `x_0..x_{K-1}` followed by the fast ring, where `y_{j,k}`
/// sits at offset `K + k*J + j`. The boundary maps `y_{j+J,k} = y_{j,k+1}`
/// make the fast variables a single ring of length `J*K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct L96Spec {
    pub k: usize,
    pub j: usize,
    pub forcing: f64,
    pub hx: f64,
    pub hy: f64,
    pub epsilon: f64,
    /// RK4 step.
    pub step: f64,
    /// Sampling interval.
    pub dt: f64,
    /// Full initial state of length `k + j*k`; uniform on [-1, 1] when absent.
    pub initial: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for L96Spec {
    fn default() -> Self {
        Self {
            k: 9,
            j: 8,
            forcing: 10.0,
            hx: -0.8,
            hy: 1.0,
            epsilon: 1.0 / 128.0,
            step: 5e-4,
            dt: 0.05,
            initial: None,
            seed: 0,
        }
    }
}

impl L96Spec {
    pub fn with_forcing(forcing: f64) -> Self {
        Self {
            forcing,
            ..Self::default()
        }
    }

    pub fn state_len(&self) -> usize {
        self.k + self.j * self.k
    }

    fn validate(&self) -> Result<usize> {
        if self.k < 4 {
            return Err(Error::Config(format!("K must be at least 4, got {}", self.k)));
        }
        if self.j < 1 {
            return Err(Error::Config("J must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if let Some(init) = &self.initial {
            if init.len() != self.state_len() {
                return Err(Error::DimensionMismatch {
                    expected: self.state_len(),
                    got: init.len(),
                });
            }
        }
        steps_per(self.dt, self.step, "L96")
    }

    fn rhs(&self, s: &[f64], out: &mut [f64]) {
        let (kk, jj) = (self.k, self.j);
        let (x, y) = s.split_at(kk);
        let ring = jj * kk;
        let couple = self.hx / jj as f64;
        for k in 0..kk {
            let km1 = (k + kk - 1) % kk;
            let km2 = (k + kk - 2) % kk;
            let kp1 = (k + 1) % kk;
            let fast: f64 = y[k * jj..(k + 1) * jj].iter().sum();
            out[k] = -x[km1] * (x[km2] - x[kp1]) - x[k] + self.forcing + couple * fast;
        }
        let inv_eps = 1.0 / self.epsilon;
        let dy = &mut out[kk..];
        for l in 0..ring {
            let lp1 = if l + 1 == ring { 0 } else { l + 1 };
            let lp2 = (l + 2) % ring;
            let lm1 = if l == 0 { ring - 1 } else { l - 1 };
            dy[l] = inv_eps * (-y[lp1] * (y[lp2] - y[lm1]) - y[l] + self.hy * x[l / jj]);
        }
    }
}

/// Cyclic index shift `x_k -> x_{k+1}` applied to a full two-scale state.
pub fn shift_l96_state(spec: &L96Spec, state: &[f64]) -> Vec<f64> {
    let (kk, jj) = (spec.k, spec.j);
    let ring = kk * jj;
    let mut out = vec![0.0; state.len()];
    for k in 0..kk {
        out[k] = state[(k + 1) % kk];
    }
    for l in 0..ring {
        out[kk + l] = state[kk + (l + jj) % ring];
    }
    out
}

/// Full `(x, y)` trajectory sampled every `dt` on `[discard, duration]`.
pub fn simulate_l96(spec: &L96Spec, duration: f64, discard: f64) -> Result<TrajectoryDataset> {
    let per_sample = spec.validate()?;
    let n_samples = sample_count(duration, discard, spec.dt)?;
    let h = spec.dt / per_sample as f64;
    let mut state = spec
        .initial
        .clone()
        .unwrap_or_else(|| uniform_state(spec.seed, spec.state_len()));
    let discard_steps = (discard / h + 1e-9).round() as usize;
    let total = discard_steps + (n_samples - 1) * per_sample;
    let mut scratch = Rk4Scratch::new(state.len());
    let mut data = Vec::with_capacity(n_samples * state.len());
    for step in 0..=total {
        if step >= discard_steps && (step - discard_steps).is_multiple_of(per_sample) {
            data.extend_from_slice(&state);
        }
        if step == total {
            break;
        }
        rk4_step(&mut state, h, &mut scratch, |s, out| {
            spec.rhs(s, out);
            Ok(())
        })?;
        if !all_finite(&state) {
            return Err(Error::IntegrationDiverged {
                time: (step + 1) as f64 * h,
            });
        }
    }
    Ok(TrajectoryDataset::new(data, spec.state_len(), spec.dt, discard)?
        .with_meta(digest(&format!("{spec:?}"))))
}

/// Per-slow-variable fast mean `(By)_k = (1/J) sum_j y_{j,k}` for every row.
pub fn l96_coupling_means(spec: &L96Spec, data: &TrajectoryDataset) -> Result<Vec<Vec<f64>>> {
    if data.dim() != spec.state_len() {
        return Err(Error::DimensionMismatch {
            expected: spec.state_len(),
            got: data.dim(),
        });
    }
    Ok((0..data.len())
        .map(|i| {
            let row = data.row(i);
            (0..spec.k)
                .map(|k| {
                    row[spec.k + k * spec.j..spec.k + (k + 1) * spec.j].iter().sum::<f64>() / spec.j as f64
                })
                .collect()
        })
        .collect())
}

/// Slow variables augmented with their coupling means: columns `(x_1..x_K, By_1..By_K)`.
pub fn l96_slow_with_coupling(spec: &L96Spec, data: &TrajectoryDataset) -> Result<TrajectoryDataset> {
    let means = l96_coupling_means(spec, data)?;
    let mut out = Vec::with_capacity(data.len() * 2 * spec.k);
    for (i, m) in means.iter().enumerate() {
        out.extend_from_slice(&data.row(i)[..spec.k]);
        out.extend_from_slice(m);
    }
    Ok(TrajectoryDataset::new(out, 2 * spec.k, data.dt(), data.t0())?.with_meta(data.meta.clone()))
}

// ---------------------------------------------------------------------------
// Closed single-scale Lorenz 96

/// Scalar closure `c(X_k)` standing in for the averaged fast coupling.
pub trait Closure: Send + Sync {
    fn eval(&self, x: f64) -> std::result::Result<f64, String>;

    /// Range of slow values the closure was fitted on, if known.
    fn domain(&self) -> Option<(f64, f64)> {
        None
    }
}

/// `c(x) = c0` everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantClosure(pub f64);

impl Closure for ConstantClosure {
    fn eval(&self, _x: f64) -> std::result::Result<f64, String> {
        Ok(self.0)
    }
}

impl<F> Closure for F
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    fn eval(&self, x: f64) -> std::result::Result<f64, String> {
        Ok(self(x))
    }
}

/// `X_k' = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F + hx * c(X_k)`.
#[derive(Clone)]
pub struct ClosedL96Spec {
    pub k: usize,
    pub forcing: f64,
    pub hx: f64,
    pub step: f64,
    pub dt: f64,
    /// Initial slow state of length `k`; uniform on [-1, 1] when absent.
    pub initial: Option<Vec<f64>>,
    pub seed: u64,
    pub closure: Arc<dyn Closure>,
}

impl std::fmt::Debug for ClosedL96Spec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClosedL96Spec")
            .field("k", &self.k)
            .field("forcing", &self.forcing)
            .field("hx", &self.hx)
            .field("step", &self.step)
            .field("dt", &self.dt)
            .field("initial", &self.initial)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl ClosedL96Spec {
    /// Closed system sharing `K`, `F_x`, `h_x` and the sampling interval with a two-scale spec.
    pub fn from_l96(spec: &L96Spec, closure: Arc<dyn Closure>, step: f64) -> Self {
        Self {
            k: spec.k,
            forcing: spec.forcing,
            hx: spec.hx,
            step,
            dt: spec.dt,
            initial: None,
            seed: spec.seed,
            closure,
        }
    }
}

/// K-dimensional slow trajectory sampled every `dt` on `[0, duration]`.
///
/// Leaving the closure's fitted domain is allowed but logged once per run.
pub fn simulate_closed_l96(spec: &ClosedL96Spec, duration: f64) -> Result<TrajectoryDataset> {
    if spec.k < 4 {
        return Err(Error::Config(format!("K must be at least 4, got {}", spec.k)));
    }
    let per_sample = steps_per(spec.dt, spec.step, "closed L96")?;
    let n_samples = sample_count(duration, 0.0, spec.dt)?;
    let h = spec.dt / per_sample as f64;
    let mut state = match &spec.initial {
        Some(v) if v.len() != spec.k => {
            return Err(Error::DimensionMismatch {
                expected: spec.k,
                got: v.len(),
            })
        }
        Some(v) => v.clone(),
        None => uniform_state(spec.seed, spec.k),
    };
    let kk = spec.k;
    let domain = spec.closure.domain();
    let warned = AtomicBool::new(false);
    let mut scratch = Rk4Scratch::new(kk);
    let mut data = Vec::with_capacity(n_samples * kk);
    data.extend_from_slice(&state);
    let mut t = 0.0;
    for s in 1..n_samples {
        for _ in 0..per_sample {
            let time = t;
            rk4_step(&mut state, h, &mut scratch, |x, out| {
                for k in 0..kk {
                    if let Some((lo, hi)) = domain {
                        if (x[k] < lo || x[k] > hi) && !warned.swap(true, Ordering::Relaxed) {
                            log::warn!(
                                "closure extrapolating at t = {time:.3}: x_{k} = {:.4} outside [{lo:.4}, {hi:.4}]",
                                x[k]
                            );
                        }
                    }
                    let c = spec.closure.eval(x[k]).map_err(|message| Error::Closure {
                        time,
                        index: k,
                        value: x[k],
                        message,
                    })?;
                    let km1 = (k + kk - 1) % kk;
                    let km2 = (k + kk - 2) % kk;
                    let kp1 = (k + 1) % kk;
                    out[k] = -x[km1] * (x[km2] - x[kp1]) - x[k] + spec.forcing + spec.hx * c;
                }
                Ok(())
            })?;
            t += h;
        }
        if !all_finite(&state) {
            return Err(Error::IntegrationDiverged {
                time: s as f64 * spec.dt,
            });
        }
        data.extend_from_slice(&state);
    }
    Ok(TrajectoryDataset::new(data, kk, spec.dt, 0.0)?.with_meta(digest(&format!("{spec:?}"))))
}
