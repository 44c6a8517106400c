//! Gaussian-process closure for the slow Lorenz 96 variables.
//!
//! Pairs `(x_k, (By)_k)` are pooled over all `k` (the system is invariant under
//! cyclic index shifts), a random subsample is drawn without replacement, and an
//! exact GP with kernel `s^2 exp(-(a-b)^2 / (2 l^2)) + 0.5 delta_ab` is fitted.
//! `s^2` is the target variance, the prior mean is the target mean, and `l`
//! maximizes the log marginal likelihood. The posterior mean `c_GP` closes the
//! slow equations.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Observable, TrajectoryDataset};
use crate::dynamics::{
    duration_for_samples, l96_coupling_means, l96_slow_with_coupling, simulate_closed_l96, stream_rng, ClosedL96Spec,
    Closure, L96Spec,
};
use crate::error::{Error, Result, StageExt};
use crate::experiment::{prepare_from, ExperimentConfig, ObservationConfig, Prepared, SystemConfig};
use crate::forecast::normalized_rmse;

/// White-noise variance of the closure kernel.
pub const NOISE_LEVEL: f64 = 0.5;
/// Default subsample size.
pub const DEFAULT_SUBSAMPLE: usize = 500;
const LOG_LENGTH_RANGE: (f64, f64) = (-4.605170185988091, 4.605170185988091); // ln 1e-2, ln 1e2

/// Pooled `(x_k(t_n), (By)_k(t_n))` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureTrainingSet {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub meta: String,
}

impl ClosureTrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `K` pairs per stored time step from a full two-scale trajectory.
pub fn collect_closure_data(data: &TrajectoryDataset, spec: &L96Spec) -> Result<ClosureTrainingSet> {
    let means = l96_coupling_means(spec, data)?;
    let mut inputs = Vec::with_capacity(data.len() * spec.k);
    let mut targets = Vec::with_capacity(data.len() * spec.k);
    for (i, m) in means.iter().enumerate() {
        let row = data.row(i);
        for k in 0..spec.k {
            inputs.push(row[k]);
            targets.push(m[k]);
        }
    }
    Ok(ClosureTrainingSet {
        inputs,
        targets,
        meta: data.meta.clone(),
    })
}

/// Fitted GP posterior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpClosure {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise: f64,
    pub prior_mean: f64,
    /// `(K + noise I)^{-1} (targets - prior_mean)`.
    pub weights: Vec<f64>,
    /// Jitter added on top of the noise to factor the Gram matrix.
    pub jitter: f64,
    pub log_likelihood: f64,
}

fn rbf(a: f64, b: f64, s2: f64, l: f64) -> f64 {
    s2 * (-(a - b) * (a - b) / (2.0 * l * l)).exp()
}

fn gram(x: &[f64], s2: f64, l: f64, diag: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| rbf(x[i], x[j], s2, l) + if i == j { diag } else { 0.0 })
}

/// Cholesky factor of `K + (noise + jitter) I`, escalating the jitter on failure.
fn factor(x: &[f64], s2: f64, l: f64, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = 0.0;
    loop {
        if let Some(c) = Cholesky::new(gram(x, s2, l, noise + jitter)) {
            return Ok((c, jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 * s2.max(1.0) } else { jitter * 10.0 };
        if jitter > 1e-2 * s2.max(1.0) {
            return Err(Error::IllConditioned(jitter));
        }
    }
}

fn log_marginal(x: &[f64], y: &DVector<f64>, s2: f64, l: f64, noise: f64) -> Result<(f64, DVector<f64>, f64)> {
    let (chol, jitter) = factor(x, s2, l, noise)?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let n = x.len() as f64;
    let ll = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok((ll, alpha, jitter))
}

/// Fits the closure on `n_sub` pairs drawn without replacement using `seed`.
pub fn fit_gp_closure(ts: &ClosureTrainingSet, n_sub: usize, seed: u64) -> Result<GpClosure> {
    if ts.inputs.len() != ts.targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} inputs for {} targets",
            ts.inputs.len(),
            ts.targets.len()
        )));
    }
    if n_sub == 0 || n_sub > ts.len() {
        return Err(Error::Config(format!(
            "subsample size {n_sub} must lie in 1..={}",
            ts.len()
        )));
    }
    let mut rng = stream_rng(seed, 0x6770);
    let mut idx = sample(&mut rng, ts.len(), n_sub).into_vec();
    idx.sort_unstable();
    let x: Vec<f64> = idx.iter().map(|&i| ts.inputs[i]).collect();
    let t: Vec<f64> = idx.iter().map(|&i| ts.targets[i]).collect();
    fit_gp_on(x, t)
}

/// Exact GP fit on the given pairs.
pub fn fit_gp_on(x: Vec<f64>, t: Vec<f64>) -> Result<GpClosure> {
    let n = x.len() as f64;
    let prior_mean = t.iter().sum::<f64>() / n;
    let s2 = t.iter().map(|v| (v - prior_mean).powi(2)).sum::<f64>() / n;
    let y = DVector::from_iterator(t.len(), t.iter().map(|v| v - prior_mean));
    if s2 == 0.0 {
        // constant targets: the posterior mean is the constant
        let (ll, alpha, jitter) = log_marginal(&x, &y, 0.0, 1.0, NOISE_LEVEL)?;
        return Ok(GpClosure {
            inputs: x,
            targets: t,
            lengthscale: 1.0,
            signal_variance: 0.0,
            noise: NOISE_LEVEL,
            prior_mean,
            weights: alpha.iter().copied().collect(),
            jitter,
            log_likelihood: ll,
        });
    }
    let objective = |log_l: f64| -> f64 {
        log_marginal(&x, &y, s2, log_l.exp(), NOISE_LEVEL)
            .map(|r| r.0)
            .unwrap_or(f64::NEG_INFINITY)
    };
    // coarse scan, then golden section on the bracketing cell
    let (lo, hi) = LOG_LENGTH_RANGE;
    let steps = 24;
    let h = (hi - lo) / steps as f64;
    let scan: Vec<f64> = (0..=steps).map(|i| objective(lo + h * i as f64)).collect();
    let best = (0..=steps)
        .max_by(|&a, &b| scan[a].partial_cmp(&scan[b]).unwrap())
        .unwrap();
    let (mut a, mut b) = ((lo + h * (best as f64 - 1.0)).max(lo), (lo + h * (best as f64 + 1.0)).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    while b - a > 1e-4 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = objective(d);
        }
    }
    let log_l = if scan[best] > fc.max(fd) { lo + h * best as f64 } else { 0.5 * (a + b) };
    let l = log_l.exp();
    let (ll, alpha, jitter) = log_marginal(&x, &y, s2, l, NOISE_LEVEL)?;
    log::info!("GP closure: lengthscale {l:.4}, signal variance {s2:.4}, log likelihood {ll:.3}");
    Ok(GpClosure {
        inputs: x,
        targets: t,
        lengthscale: l,
        signal_variance: s2,
        noise: NOISE_LEVEL,
        prior_mean,
        weights: alpha.iter().copied().collect(),
        jitter,
        log_likelihood: ll,
    })
}

impl GpClosure {
    /// Posterior mean `c_GP(x)`.
    pub fn mean(&self, x: f64) -> f64 {
        self.prior_mean
            + self
                .inputs
                .iter()
                .zip(&self.weights)
                .map(|(&a, w)| w * rbf(x, a, self.signal_variance, self.lengthscale))
                .sum::<f64>()
    }

    /// Posterior standard deviation of the latent function at each point.
    pub fn posterior_sd(&self, points: &[f64]) -> Result<Vec<f64>> {
        let (chol, _) = factor(&self.inputs, self.signal_variance, self.lengthscale, self.noise + self.jitter)?;
        Ok(points
            .iter()
            .map(|&p| {
                let k = DVector::from_iterator(
                    self.inputs.len(),
                    self.inputs.iter().map(|&a| rbf(p, a, self.signal_variance, self.lengthscale)),
                );
                let v = chol.solve(&k);
                (self.signal_variance - k.dot(&v)).max(0.0).sqrt()
            })
            .collect())
    }

    pub fn input_range(&self) -> (f64, f64) {
        let lo = self.inputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.inputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

impl Closure for GpClosure {
    fn eval(&self, x: f64) -> std::result::Result<f64, String> {
        let v = self.mean(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("GP mean is not finite at {x}"))
        }
    }

    fn domain(&self) -> Option<(f64, f64)> {
        Some(self.input_range())
    }
}

/// Settings for the four-way comparison of a two-scale L96 recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub subsample: usize,
    pub gp_seed: u64,
    /// RK4 step of the closed slow model.
    pub closed_step: f64,
    pub tau_max: f64,
    /// Every `stride`-th test row serves as an initial condition.
    pub stride: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            subsample: DEFAULT_SUBSAMPLE,
            gp_seed: 7,
            closed_step: 0.01,
            tau_max: 10.0,
            stride: 5,
        }
    }
}

/// Normalized RMSE of `x_1` for the four predictors on common initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub taus: Vec<f64>,
    /// KAF on the experiment's own observation (`x`).
    pub a: Vec<f64>,
    /// KAF on `(x, By)`.
    pub b: Vec<f64>,
    /// The GP-closed slow model integrated from the true `x`.
    pub c: Vec<f64>,
    /// KAF trained and validated on closed-model data.
    pub d: Vec<f64>,
    pub n_starts: usize,
    pub gp_lengthscale: f64,
}

/// Runs cases b) to d) next to the already trained case a).
///
/// `train_raw`/`out_raw` are the full two-scale trajectories behind `prep_a`.
pub fn compare_methods(
    cfg: &ExperimentConfig,
    cc: &CompareConfig,
    prep_a: &Prepared,
    train_raw: &TrajectoryDataset,
    out_raw: &TrajectoryDataset,
) -> Result<CompareTable> {
    let SystemConfig::L96(spec) = &cfg.system else {
        return Err(Error::Config("the four-way comparison needs the L96 system".into()));
    };
    let (kk, dt) = (spec.k, spec.dt);
    let q_max = (cc.tau_max / dt).round() as usize;
    if cc.stride == 0 {
        return Err(Error::Config("compare stride must be at least 1".into()));
    }
    let leads: Vec<usize> = cfg.leads()?.into_iter().filter(|&q| q <= q_max).collect();
    let starts: Vec<usize> = prep_a.test_starts().step_by(cc.stride).collect();
    let var_end = prep_a.blocks().1;
    let slow: Vec<usize> = (0..kk).collect();
    let x_cfg = {
        let mut c = cfg.clone();
        c.observation = ObservationConfig::columns(&slow, Observable::Column(0));
        c.compare = None;
        c
    };

    log::info!("compare: case b, KAF on (x, By)");
    let mut b_cfg = x_cfg.clone();
    b_cfg.data.coupling = true;
    b_cfg.observation = ObservationConfig::columns(&(0..2 * kk).collect::<Vec<_>>(), Observable::Column(0));
    let prep_b = prepare_from(
        &b_cfg,
        l96_slow_with_coupling(spec, train_raw)?,
        l96_slow_with_coupling(spec, out_raw)?,
    )
    .stage("case b")?;

    log::info!("compare: fitting the GP closure");
    let ts = collect_closure_data(train_raw, spec)?;
    let gp = Arc::new(fit_gp_closure(&ts, cc.subsample, cc.gp_seed).stage("gp closure")?);
    let closed = ClosedL96Spec::from_l96(spec, gp.clone(), cc.closed_step);

    log::info!("compare: case c, closed model from {} initial conditions", starts.len());
    let horizon = q_max.max(1) as f64 * dt;
    let paths: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&m| {
            let run = ClosedL96Spec {
                initial: Some(out_raw.row(m)[..kk].to_vec()),
                ..closed.clone()
            };
            Ok(simulate_closed_l96(&run, horizon)?.column(0))
        })
        .collect::<Result<_>>()
        .stage("case c")?;

    log::info!("compare: case d, KAF on closed-model data");
    let spin = |n: usize, seed: u64| -> Result<TrajectoryDataset> {
        let skip = (cfg.data.discard / dt).round() as usize;
        let run = ClosedL96Spec { seed, ..closed.clone() };
        let data = simulate_closed_l96(&run, duration_for_samples(n + skip, dt, 0.0))?;
        data.slice(skip, skip + n)
    };
    let train_d = spin(cfg.data.n_train + cfg.max_lead()?, cfg.data.train_seed).stage("case d")?;
    // validation rows from the closed model, test rows from the true system
    let valid_d = spin(var_end, cfg.data.test_seed).stage("case d")?;
    let test_true = out_raw.slice(var_end, out_raw.len())?.select_columns(&slow)?;
    let prep_d = prepare_from(&x_cfg, train_d, valid_d.concat(&test_true)?).stage("case d")?;

    let truth_col = out_raw.column(0);
    let mut table = CompareTable {
        taus: Vec::new(),
        a: Vec::new(),
        b: Vec::new(),
        c: Vec::new(),
        d: Vec::new(),
        n_starts: starts.len(),
        gp_lengthscale: gp.lengthscale,
    };
    let kaf = |prep: &Prepared, q: usize| -> Result<f64> {
        let fc = prep.forecaster(q)?;
        let z = fc.predict(&prep.psi.select(&starts))?;
        let truth: Vec<f64> = starts.iter().map(|&m| truth_col[m + q]).collect();
        normalized_rmse(&z, &truth)
    };
    for &q in &leads {
        let truth: Vec<f64> = starts.iter().map(|&m| truth_col[m + q]).collect();
        let pred_c: Vec<f64> = paths.iter().map(|p| p[q]).collect();
        table.taus.push(q as f64 * dt);
        table.a.push(kaf(prep_a, q)?);
        table.b.push(kaf(&prep_b, q)?);
        table.c.push(normalized_rmse(&pred_c, &truth)?);
        table.d.push(kaf(&prep_d, q)?);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn pairs_are_pooled_over_slow_index() {
        let spec = L96Spec {
            k: 4,
            j: 2,
            ..L96Spec::default()
        };
        let mut data = Vec::new();
        for t in 0..3 {
            data.extend((0..4).map(|k| (10 * t + k) as f64));
            data.extend([1.0, 3.0, 2.0, 2.0, 0.0, 0.0, -1.0, 5.0]);
        }
        let d = TrajectoryDataset::new(data, 12, 0.05, 0.0).unwrap();
        let ts = collect_closure_data(&d, &spec).unwrap();
        assert_eq!(ts.len(), 12);
        assert_eq!(&ts.inputs[4..8], &[10.0, 11.0, 12.0, 13.0]);
        assert_eq!(&ts.targets[..4], &[2.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_targets_give_zero_closure() {
        let ts = ClosureTrainingSet {
            inputs: (0..100).map(|i| i as f64 * 0.1).collect(),
            targets: vec![0.0; 100],
            meta: String::new(),
        };
        let gp = fit_gp_closure(&ts, 50, 1).unwrap();
        for x in [-3.0, 0.0, 2.5, 40.0] {
            assert!(gp.mean(x).abs() < 1e-8);
        }
    }

    fn noisy_sine(n: usize, seed: u64) -> ClosureTrainingSet {
        let mut rng = stream_rng(seed, 9);
        let inputs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets = inputs
            .iter()
            .map(|&x| x.sin() + NOISE_LEVEL.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ClosureTrainingSet {
            inputs,
            targets,
            meta: String::new(),
        }
    }

    #[test]
    fn recovers_sine_within_posterior_band() {
        let gp = fit_gp_closure(&noisy_sine(2000, 4), 500, 7).unwrap();
        let grid: Vec<f64> = (0..41).map(|i| -2.5 + 0.125 * i as f64).collect();
        let sd = gp.posterior_sd(&grid).unwrap();
        for (x, s) in grid.iter().zip(&sd) {
            assert!((gp.mean(*x) - x.sin()).abs() <= 3.0 * s, "x = {x}");
        }
        for (x, t) in gp.inputs.iter().zip(&gp.targets) {
            assert!((gp.mean(*x) - t).abs() <= 2.0 * NOISE_LEVEL.sqrt() * 3.0);
        }
    }

    #[test]
    fn subsampling_is_deterministic() {
        let ts = noisy_sine(800, 2);
        let a = fit_gp_closure(&ts, 100, 3).unwrap();
        let b = fit_gp_closure(&ts, 100, 3).unwrap();
        assert_eq!(a, b);
        let c = fit_gp_closure(&ts, 100, 4).unwrap();
        assert_ne!(a.inputs, c.inputs);
        assert!(fit_gp_closure(&ts, 900, 3).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let gp = fit_gp_closure(&noisy_sine(300, 1), 50, 1).unwrap();
        let back = GpClosure::from_toml(&gp.to_toml().unwrap()).unwrap();
        assert_eq!(back, gp);
    }
}
