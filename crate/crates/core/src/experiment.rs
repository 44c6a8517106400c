//! Experiment recipes: typed configuration, staged execution and manifests.
//!
//! A run simulates a training trajectory and a fresh out-of-sample trajectory
//! with its own seed. The first `n_out` out-of-sample rows split 50/25/25: pairs
//! starting in the first half tune the truncation, pairs in the next quarter fit
//! the variance (their truth stays inside that quarter), and pairs in the last
//! quarter are scored. The trajectory runs `max_lead` rows past `n_out` so every
//! test start has its truth.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::closure::{compare_methods, CompareConfig, CompareTable};
use crate::dataset::{digest, Feature, Observable, PointSet, Projection, TrajectoryDataset};
use crate::dynamics::{
    duration_for_samples, l96_slow_with_coupling, simulate_double_well_sde, simulate_l63_driven, simulate_l96,
    DoubleWellSDESpec, L63DrivenSpec, L96Spec, Potential,
};
use crate::error::{Error, Result, StageExt};
use crate::forecast::{
    band_coverage, fit_forecaster, lorenz_analog, normalized_rmse, Forecaster, ObservableSeries,
};
use crate::io::{fmt_f64, table_csv, write_basis, write_trajectory};
use crate::kernel::{build_kernel_system, KernelConfig, KernelSystem};
use crate::oracle::{fit_sigma, mc_conditional_moments, MomentCurves};
use crate::spectral::{compute_eigenbasis, nystrom_extend, EigenBasis, RkhsBasis, SpectralConfig};

/// Library version recorded in manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Names accepted by [`ExperimentConfig::recipe`].
pub const RECIPES: [&str; 6] = [
    "smoke",
    "l63",
    "sde-eigen",
    "l96-periodic",
    "l96-quasiperiodic",
    "l96-chaotic",
];

/// Which system generates the data. Each spec's own `seed` is replaced by the
/// data seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemConfig {
    L63(L63DrivenSpec),
    Sde(DoubleWellSDESpec),
    L96(L96Spec),
}

impl SystemConfig {
    pub fn dt(&self) -> f64 {
        match self {
            SystemConfig::L63(s) => s.dt,
            SystemConfig::Sde(s) => s.sample_dt,
            SystemConfig::L96(s) => s.dt,
        }
    }

    /// Width of a simulated state row.
    pub fn state_dim(&self) -> usize {
        match self {
            SystemConfig::L63(_) => 4,
            SystemConfig::Sde(_) => 1,
            SystemConfig::L96(s) => s.state_len(),
        }
    }

    /// `n` samples after discarding `discard` time units, using `seed`.
    pub fn simulate(&self, n: usize, discard: f64, seed: u64) -> Result<TrajectoryDataset> {
        let duration = duration_for_samples(n, self.dt(), discard);
        let data = match self {
            SystemConfig::L63(s) => simulate_l63_driven(&L63DrivenSpec { seed, ..s.clone() }, duration, discard)?,
            SystemConfig::L96(s) => simulate_l96(&L96Spec { seed, ..s.clone() }, duration, discard)?,
            SystemConfig::Sde(s) => {
                let path = simulate_double_well_sde(&DoubleWellSDESpec { seed, ..s.clone() }, duration, 1)?
                    .pop()
                    .expect("one path");
                let skip = (discard / s.sample_dt + 1e-9).round() as usize;
                path.slice(skip, path.len())?
            }
        };
        if data.len() < n {
            return Err(Error::LengthMismatch(format!("simulated {} samples, wanted {n}", data.len())));
        }
        data.slice(0, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    /// Out-of-sample starts, split 50/25/25 into truncation validation,
    /// variance validation and test.
    pub n_out: usize,
    /// Spin-up time dropped from every trajectory.
    pub discard: f64,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Replace an L96 state by `(x, By)` before projecting.
    pub coupling: bool,
    /// Take the out-of-sample rows from later in the training run instead of a
    /// fresh trajectory, keeping both on the same attractor when several coexist.
    pub continuation: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 20000,
            n_out: 7000,
            discard: 10.0,
            train_seed: 1,
            test_seed: 2,
            coupling: false,
            continuation: false,
        }
    }
}

/// Observation map and prediction observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationConfig {
    pub features: Vec<Feature>,
    pub observable: Observable,
}

impl ObservationConfig {
    pub fn columns(cols: &[usize], observable: Observable) -> Self {
        Self {
            features: Projection::columns(cols).features,
            observable,
        }
    }

    pub fn projection(&self) -> Projection {
        Projection {
            features: self.features.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub tau_max: f64,
    pub tau_step: f64,
    /// Cap on the truncation search; all usable basis functions when absent.
    pub max_ell: Option<usize>,
    /// Test-block row whose trajectory forecast is written out.
    pub anchor: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            tau_max: 20.0,
            tau_step: 0.25,
            max_ell: None,
            anchor: 0,
        }
    }
}

/// Conditional moments from a single initial condition, against SDE Monte Carlo
/// with a fitted noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub x0: f64,
    pub n_paths: usize,
    pub taus: Vec<f64>,
    pub potential: Potential,
    /// State column holding the slow variable.
    pub column: usize,
    /// Euler-Maruyama step.
    pub h: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            x0: -1.10,
            n_paths: 1000,
            taus: vec![0.5, 1.0, 2.0, 3.0, 5.0, 7.5, 10.0, 12.5, 15.0, 20.0],
            potential: Potential::WellsAtPlusMinusOne,
            column: 0,
            h: 1e-3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub system: SystemConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub observation: ObservationConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
}

fn lead_of(tau: f64, dt: f64, what: &str) -> Result<usize> {
    let q = (tau / dt).round();
    if !(tau >= 0.0) || (q * dt - tau).abs() > 1e-9 * dt.max(tau) {
        return Err(Error::Config(format!("{what} {tau} is not a multiple of dt = {dt}")));
    }
    Ok(q as usize)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> Result<String> {
        Ok(digest(&self.to_toml()?))
    }

    /// Width of the rows handed to the observation map.
    pub fn observed_dim(&self) -> usize {
        match (&self.system, self.data.coupling) {
            (SystemConfig::L96(s), true) => 2 * s.k,
            (s, _) => s.state_dim(),
        }
    }

    pub fn dt(&self) -> f64 {
        self.system.dt()
    }

    /// Lead indices `0, step, 2 step, ..` up to `tau_max`.
    pub fn leads(&self) -> Result<Vec<usize>> {
        let dt = self.dt();
        let step = lead_of(self.forecast.tau_step, dt, "tau_step")?;
        let last = lead_of(self.forecast.tau_max, dt, "tau_max")?;
        if step == 0 {
            return Err(Error::Config("tau_step must be positive".into()));
        }
        Ok((0..=last).step_by(step).collect())
    }

    /// Longest lead in steps.
    pub fn max_lead(&self) -> Result<usize> {
        Ok(*self.leads()?.last().expect("lead grid starts at zero"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.coupling && !matches!(self.system, SystemConfig::L96(_)) {
            return Err(Error::Config("coupling columns exist only for the L96 system".into()));
        }
        let dim = self.observed_dim();
        if self.observation.features.is_empty() {
            return Err(Error::Config("observation selects no columns".into()));
        }
        for f in &self.observation.features {
            if f.column >= dim {
                return Err(Error::Config(format!("observed column {} out of range for {dim} columns", f.column)));
            }
        }
        let (Observable::Column(c) | Observable::Square(c)) = self.observation.observable;
        if c >= dim {
            return Err(Error::Config(format!("observable column {c} out of range for {dim} columns")));
        }
        let q_max = *self.leads()?.last().unwrap();
        if q_max >= self.data.n_out / 4 {
            return Err(Error::Config(format!(
                "n_out = {} must exceed four times the longest lead ({q_max} steps)",
                self.data.n_out
            )));
        }
        if self.forecast.anchor >= self.data.n_out - 3 * self.data.n_out / 4 {
            return Err(Error::Config("anchor row lies outside the test block".into()));
        }
        if self.data.n_train < 2 {
            return Err(Error::Config("n_train must be at least 2".into()));
        }
        if let Some(o) = &self.oracle {
            if self.observation.features.len() != 1 {
                return Err(Error::Config("the oracle comparison needs a scalar observation".into()));
            }
            if o.column >= dim {
                return Err(Error::Config(format!("oracle column {} out of range", o.column)));
            }
            for &t in &o.taus {
                if lead_of(t, self.dt(), "oracle lead time")? > q_max {
                    return Err(Error::Config(format!("oracle lead time {t} exceeds tau_max")));
                }
            }
        }
        if let Some(c) = &self.compare {
            let SystemConfig::L96(_) = self.system else {
                return Err(Error::Config("the four-way comparison needs the L96 system".into()));
            };
            if self.data.coupling {
                return Err(Error::Config("the four-way comparison starts from the full L96 state".into()));
            }
            let q = lead_of(c.tau_max, self.dt(), "compare tau_max")?;
            if q > q_max {
                return Err(Error::Config("compare tau_max exceeds forecast tau_max".into()));
            }
        }
        Ok(())
    }

    /// Built-in recipe by name.
    pub fn recipe(name: &str) -> Result<Self> {
        let x_only = ObservationConfig::columns(&[0], Observable::Column(0));
        let l96 = |forcing: f64, compare: bool| {
            let spec = L96Spec::with_forcing(forcing);
            // coexisting shifted tori: stay on the training one
            let data = if forcing == 6.9 {
                DataConfig {
                    discard: 200.0,
                    continuation: true,
                    ..DataConfig::default()
                }
            } else {
                DataConfig::default()
            };
            ExperimentConfig {
                name: name.to_string(),
                output_dir: PathBuf::from("out").join(name),
                observation: ObservationConfig::columns(&(0..spec.k).collect::<Vec<_>>(), Observable::Column(0)),
                system: SystemConfig::L96(spec),
                data,
                kernel: KernelConfig::default(),
                spectral: SpectralConfig::default(),
                forecast: ForecastConfig::default(),
                oracle: None,
                compare: compare.then(CompareConfig::default),
            }
        };
        let cfg = match name {
            "smoke" => ExperimentConfig {
                name: name.into(),
                output_dir: PathBuf::from("out/smoke"),
                system: SystemConfig::L63(L63DrivenSpec {
                    epsilon: 0.1,
                    ..L63DrivenSpec::default()
                }),
                data: DataConfig {
                    n_train: 2000,
                    n_out: 1200,
                    discard: 2.0,
                    ..DataConfig::default()
                },
                observation: x_only,
                kernel: KernelConfig::default(),
                spectral: SpectralConfig::with_size(40),
                forecast: ForecastConfig {
                    tau_max: 2.0,
                    ..ForecastConfig::default()
                },
                oracle: Some(OracleConfig {
                    n_paths: 200,
                    taus: vec![0.5, 1.0, 2.0],
                    ..OracleConfig::default()
                }),
                compare: None,
            },
            "l63" => ExperimentConfig {
                name: name.into(),
                output_dir: PathBuf::from("out/l63"),
                system: SystemConfig::L63(L63DrivenSpec::default()),
                data: DataConfig {
                    n_out: 7500,
                    ..DataConfig::default()
                },
                observation: x_only,
                kernel: KernelConfig::default(),
                spectral: SpectralConfig::default(),
                forecast: ForecastConfig {
                    tau_step: 0.5,
                    ..ForecastConfig::default()
                },
                oracle: Some(OracleConfig::default()),
                compare: None,
            },
            "sde-eigen" => ExperimentConfig {
                name: name.into(),
                output_dir: PathBuf::from("out/sde-eigen"),
                system: SystemConfig::Sde(DoubleWellSDESpec::default()),
                data: DataConfig {
                    n_train: 10000,
                    n_out: 4000,
                    discard: 0.0,
                    ..DataConfig::default()
                },
                observation: x_only,
                kernel: KernelConfig::default(),
                spectral: SpectralConfig::with_size(20),
                forecast: ForecastConfig {
                    tau_max: 2.0,
                    ..ForecastConfig::default()
                },
                oracle: None,
                compare: None,
            },
            "l96-periodic" => l96(5.0, true),
            "l96-quasiperiodic" => l96(6.9, false),
            "l96-chaotic" => l96(10.0, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown recipe `{other}`; known: {}",
                    RECIPES.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Simulated data with the trained basis and the out-of-sample Nyström values.
pub struct Prepared {
    /// Training rows as handed to the observation map.
    pub train: TrajectoryDataset,
    /// Validation block followed by the test block.
    pub outsample: TrajectoryDataset,
    pub projection: Projection,
    pub points: PointSet,
    pub f_train: ObservableSeries,
    pub f_out: Vec<f64>,
    pub ks: KernelSystem,
    pub basis: EigenBasis,
    pub psi: RkhsBasis,
    pub n_out: usize,
    pub max_ell: usize,
}

/// Scores of one lead time on the test block.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadResult {
    pub forecaster: Forecaster,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub truth: Vec<f64>,
    pub rmse: f64,
    pub coverage: f64,
}

/// Raw training and out-of-sample trajectories for a config. The training run is
/// `n_train + max_lead` rows long: the kernel uses the first `n_train`, the
/// shifted observable needs the rest.
pub fn simulate_data(cfg: &ExperimentConfig) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
    let d = &cfg.data;
    let q = cfg.max_lead()?;
    let (n_tr, n_o) = (d.n_train + q, d.n_out + q);
    if d.continuation {
        let run = cfg.system.simulate(n_tr + n_o, d.discard, d.train_seed)?;
        return Ok((run.slice(0, n_tr)?, run.slice(n_tr, n_tr + n_o)?));
    }
    let train = cfg.system.simulate(n_tr, d.discard, d.train_seed)?;
    let out = cfg.system.simulate(n_o, d.discard, d.test_seed)?;
    Ok((train, out))
}

fn observed(cfg: &ExperimentConfig, data: TrajectoryDataset) -> Result<TrajectoryDataset> {
    match (&cfg.system, cfg.data.coupling) {
        (SystemConfig::L96(s), true) => l96_slow_with_coupling(s, &data),
        _ => Ok(data),
    }
}

/// Simulates and trains.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, out) = simulate_data(cfg).stage("simulate")?;
    prepare_from(cfg, observed(cfg, train)?, observed(cfg, out)?)
}

/// Trains on given data; `train` must hold `n_train + max_lead` rows and
/// `outsample` exactly `n_out + max_lead`.
pub fn prepare_from(cfg: &ExperimentConfig, train: TrajectoryDataset, outsample: TrajectoryDataset) -> Result<Prepared> {
    let n_out = cfg.data.n_out;
    if outsample.len() != n_out + cfg.max_lead()? {
        return Err(Error::LengthMismatch(format!(
            "out-of-sample trajectory has {} rows, expected {}",
            outsample.len(),
            n_out + cfg.max_lead()?
        )));
    }
    let n_train = cfg.data.n_train;
    let need = n_train + cfg.max_lead()?;
    if train.len() < need {
        return Err(Error::LengthMismatch(format!(
            "training trajectory has {} rows, expected at least {need}",
            train.len()
        )));
    }
    let projection = cfg.observation.projection();
    let points = projection.apply(&train.slice(0, n_train)?).stage("observe")?;
    let out_points = projection.apply(&outsample).stage("observe")?;
    let f_train = ObservableSeries::new(cfg.observation.observable.evaluate(&train)?, train.dt());
    let f_out = cfg.observation.observable.evaluate(&outsample)?;
    let ks = build_kernel_system(&points, &cfg.kernel).stage("kernel")?;
    let basis = compute_eigenbasis(&ks, &cfg.spectral).stage("eigenbasis")?;
    let psi = nystrom_extend(&ks, &basis, &out_points, None).stage("nystrom")?;
    let max_ell = cfg.forecast.max_ell.unwrap_or(usize::MAX).min(psi.ncols());
    log::info!(
        "basis: {} eigenpairs, {} usable, lambda_1 = {:.6}",
        basis.len(),
        psi.ncols(),
        basis.lambda.get(1).copied().unwrap_or(f64::NAN)
    );
    Ok(Prepared {
        train,
        outsample,
        projection,
        points,
        f_train,
        f_out,
        ks,
        basis,
        psi,
        n_out,
        max_ell,
    })
}

impl Prepared {
    /// Tunes `ell` and the variance for lead `q` on the validation block.
    pub fn forecaster(&self, q: usize) -> Result<Forecaster> {
        let (half, var_end) = self.blocks();
        if q >= var_end - half {
            return Err(Error::Config(format!("lead {q} too long for {} out-of-sample starts", self.n_out)));
        }
        let var_len = var_end - half - q;
        let psi_val = self.psi.rows(0, half)?;
        let psi_var = self.psi.rows(half, var_len)?;
        fit_forecaster(
            &self.basis,
            &self.f_train,
            q,
            &psi_val,
            &self.f_out[q..q + half],
            &psi_var,
            &self.f_out[half + q..half + q + var_len],
            self.max_ell,
        )
    }

    /// Ends of the truncation and variance validation blocks.
    pub fn blocks(&self) -> (usize, usize) {
        (self.n_out / 2, 3 * self.n_out / 4)
    }

    /// Test start rows (indices into the out-of-sample trajectory).
    pub fn test_starts(&self) -> std::ops::Range<usize> {
        self.blocks().1..self.n_out
    }

    pub fn lead(&self, q: usize) -> Result<LeadResult> {
        let forecaster = self.forecaster(q)?;
        let starts = self.test_starts();
        let psi = self.psi.rows(starts.start, starts.len())?;
        let z = forecaster.predict(&psi)?;
        let v = forecaster.variance(&psi)?;
        let truth = self.f_out[starts.start + q..starts.end + q].to_vec();
        let rmse = normalized_rmse(&z, &truth)?;
        let coverage = band_coverage(&z, &v, &truth);
        Ok(LeadResult {
            forecaster,
            z,
            v,
            truth,
            rmse,
            coverage,
        })
    }

    /// Nyström values at arbitrary observation-space points.
    pub fn psi_at(&self, points: &PointSet) -> Result<RkhsBasis> {
        nystrom_extend(&self.ks, &self.basis, points, Some(self.psi.ncols()))
    }
}

/// KAF against SDE Monte Carlo from one initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentComparison {
    pub sigma: f64,
    pub kaf_mean: Vec<f64>,
    pub kaf_var: Vec<f64>,
    pub mc: MomentCurves,
}

pub fn oracle_comparison(prep: &Prepared, cfg: &ExperimentConfig, oc: &OracleConfig) -> Result<MomentComparison> {
    let dt = cfg.dt();
    let sigma = fit_sigma(&prep.train.column(oc.column), oc.potential).stage("fit sigma")?;
    log::info!("fitted sigma = {sigma:.5}");
    let spec = DoubleWellSDESpec {
        sigma,
        x0: oc.x0,
        h: oc.h,
        sample_dt: dt,
        seed: oc.seed,
        potential: oc.potential,
    };
    let mc = mc_conditional_moments(&spec, oc.x0, oc.n_paths, &oc.taus).stage("monte carlo")?;
    let scale = prep.projection.features[0].scale;
    let psi0 = prep.psi_at(&PointSet::from_scalars(&[scale * oc.x0]))?;
    let mut kaf_mean = Vec::new();
    let mut kaf_var = Vec::new();
    for &t in &oc.taus {
        let fc = prep.forecaster(lead_of(t, dt, "oracle lead time")?)?;
        kaf_mean.push(fc.predict(&psi0)?[0]);
        kaf_var.push(fc.variance(&psi0)?[0]);
    }
    Ok(MomentComparison {
        sigma,
        kaf_mean,
        kaf_var,
        mc,
    })
}

/// KAF and Lorenz-analog forecasts from a handful of initial observations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalogComparison {
    pub taus: Vec<f64>,
    /// `[initial condition][lead]`.
    pub kaf: Vec<Vec<f64>>,
    pub kaf_var: Vec<Vec<f64>>,
    pub analog: Vec<Vec<f64>>,
}

pub fn analog_comparison(prep: &Prepared, leads: &[usize], initial: &PointSet) -> Result<AnalogComparison> {
    let psi0 = prep.psi_at(initial)?;
    let n = initial.len();
    let mut out = AnalogComparison {
        taus: leads.iter().map(|&q| q as f64 * prep.f_train.dt).collect(),
        kaf: vec![Vec::new(); n],
        kaf_var: vec![Vec::new(); n],
        analog: vec![Vec::new(); n],
    };
    for &q in leads {
        let fc = prep.forecaster(q)?;
        let z = fc.predict(&psi0)?;
        let v = fc.variance(&psi0)?;
        let a = lorenz_analog(&prep.points, &prep.f_train, initial, q)?;
        for i in 0..n {
            out.kaf[i].push(z[i]);
            out.kaf_var[i].push(v[i]);
            out.analog[i].push(a[i]);
        }
    }
    Ok(out)
}

/// Text stored inside a saved basis: enough to rebuild its kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisRecord {
    /// Training rows the basis was computed on (a prefix of the training file).
    pub n_train: usize,
    pub features: Vec<Feature>,
    pub kernel: KernelConfig,
}

impl BasisRecord {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("basis description: {e}")))
    }

    pub fn projection(&self) -> Projection {
        Projection {
            features: self.features.clone(),
        }
    }
}

/// One emitted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllRow {
    pub tau: f64,
    pub ell: usize,
    pub ell_var: usize,
}

/// Values derived during the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub epsilon: f64,
    pub delta: f64,
    pub m: usize,
    pub knn: usize,
    pub basis_len: usize,
    pub usable_len: usize,
    pub sigma: Option<f64>,
    pub gp_lengthscale: Option<f64>,
    pub ell_table: Vec<EllRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub config_digest: String,
    /// The full config, so the run can be repeated from the manifest alone.
    pub config: String,
    pub derived: Derived,
    pub outputs: Vec<OutputRecord>,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::from_toml(&self.config)?;
        if cfg.digest()? != self.config_digest {
            return Err(Error::Config("manifest config does not match its digest".into()));
        }
        Ok(cfg)
    }
}

/// Everything a run produced, in memory.
pub struct RunSummary {
    pub prepared: Prepared,
    pub leads: Vec<usize>,
    pub results: Vec<LeadResult>,
    pub moments: Option<MomentComparison>,
    pub compare: Option<CompareTable>,
    pub manifest: Manifest,
}

struct Bundle<'a> {
    dir: &'a Path,
    outputs: Vec<OutputRecord>,
}

impl Bundle<'_> {
    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(file), bytes)?;
        self.outputs.push(OutputRecord {
            file: file.to_string(),
            sha256: hex_sha256(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn table(&mut self, file: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        self.write(file, table_csv(header, rows).as_bytes())
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every configured stage and writes the artifact bundle into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let dt = cfg.dt();
    let (train_raw, out_raw) = simulate_data(cfg).stage("simulate")?;
    let mut bundle = Bundle {
        dir,
        outputs: Vec::new(),
    };
    write_trajectory(&dir.join("train.kaf"), &train_raw)?;
    write_trajectory(&dir.join("outsample.kaf"), &out_raw)?;
    for f in ["train.kaf", "outsample.kaf"] {
        let bytes = fs::read(dir.join(f))?;
        bundle.outputs.push(OutputRecord {
            file: f.into(),
            sha256: hex_sha256(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let prep = prepare_from(cfg, observed(cfg, train_raw.clone())?, observed(cfg, out_raw.clone())?)?;
    let record = BasisRecord {
        n_train: cfg.data.n_train,
        features: prep.projection.features.clone(),
        kernel: prep.ks.config(),
    };
    write_basis(&dir.join("basis.kaf"), &prep.basis.to_file(record.to_toml()?))?;
    let bytes = fs::read(dir.join("basis.kaf"))?;
    bundle.outputs.push(OutputRecord {
        file: "basis.kaf".into(),
        sha256: hex_sha256(&bytes),
        bytes: bytes.len() as u64,
    });
    let eig: Vec<Vec<f64>> = prep
        .basis
        .lambda
        .iter()
        .enumerate()
        .map(|(j, l)| vec![j as f64, *l])
        .collect();
    bundle.table("eigenvalues.csv", &["j", "lambda"], &eig)?;

    let leads = cfg.leads()?;
    let mut results = Vec::with_capacity(leads.len());
    for &q in &leads {
        let r = prep.lead(q).stage("forecast")?;
        log::info!(
            "tau = {:6.2}: rmse {:.4}, coverage {:.3}, ell {}, ell_var {}",
            q as f64 * dt,
            r.rmse,
            r.coverage,
            r.forecaster.ell,
            r.forecaster.ell_var
        );
        results.push(r);
    }
    let a = cfg.forecast.anchor;
    let rows: Vec<Vec<f64>> = leads
        .iter()
        .zip(&results)
        .map(|(&q, r)| {
            vec![
                q as f64 * dt,
                r.z[a],
                r.v[a],
                r.truth[a],
                r.rmse,
                r.forecaster.ell as f64,
                r.forecaster.ell_var as f64,
            ]
        })
        .collect();
    bundle.table("forecast.csv", &["tau", "Z", "V", "truth", "rmse", "ell", "ell_var"], &rows)?;
    let rows: Vec<Vec<f64>> = leads
        .iter()
        .zip(&results)
        .map(|(&q, r)| vec![q as f64 * dt, r.rmse, r.coverage])
        .collect();
    bundle.table("rmse.csv", &["tau", "rmse", "coverage"], &rows)?;

    let moments = match &cfg.oracle {
        Some(oc) => {
            let m = oracle_comparison(&prep, cfg, oc)?;
            let rows: Vec<Vec<f64>> = (0..oc.taus.len())
                .map(|i| {
                    vec![
                        oc.taus[i],
                        m.kaf_mean[i],
                        m.kaf_var[i],
                        m.mc.mean[i],
                        m.mc.var[i],
                        m.mc.mean_se[i],
                        m.mc.var_se[i],
                    ]
                })
                .collect();
            bundle.table(
                "moments.csv",
                &["tau", "kaf_mean", "kaf_var", "mc_mean", "mc_var", "mc_mean_se", "mc_var_se"],
                &rows,
            )?;
            Some(m)
        }
        None => None,
    };

    let compare = match &cfg.compare {
        Some(cc) => {
            let table = compare_methods(cfg, cc, &prep, &train_raw, &out_raw).stage("compare")?;
            let rows: Vec<Vec<f64>> = (0..table.taus.len())
                .map(|i| vec![table.taus[i], table.a[i], table.b[i], table.c[i], table.d[i]])
                .collect();
            bundle.table("rmse_abcd.csv", &["tau", "a", "b", "c", "d"], &rows)?;
            Some(table)
        }
        None => None,
    };

    let kc = prep.ks.config();
    let manifest = Manifest {
        name: cfg.name.clone(),
        version: VERSION.to_string(),
        config_digest: cfg.digest()?,
        config: cfg.to_toml()?,
        derived: Derived {
            epsilon: kc.epsilon,
            delta: kc.delta,
            m: kc.m,
            knn: prep.ks.knn(),
            basis_len: prep.basis.len(),
            usable_len: prep.psi.ncols(),
            sigma: moments.as_ref().map(|m| m.sigma),
            gp_lengthscale: compare.as_ref().map(|c| c.gp_lengthscale),
            ell_table: leads
                .iter()
                .zip(&results)
                .map(|(&q, r)| EllRow {
                    tau: q as f64 * dt,
                    ell: r.forecaster.ell,
                    ell_var: r.forecaster.ell_var,
                })
                .collect(),
        },
        outputs: bundle.outputs,
    };
    fs::write(dir.join("manifest.toml"), manifest.to_toml()?)?;
    Ok(RunSummary {
        prepared: prep,
        leads,
        results,
        moments,
        compare,
        manifest,
    })
}

/// Files whose hash differs from the manifest after re-running it into `dir`.
pub fn reproduce(manifest: &Manifest, dir: &Path) -> Result<Vec<String>> {
    let cfg = manifest.experiment()?;
    let rerun = run_experiment(&cfg, dir)?;
    let mut mismatched = Vec::new();
    for rec in &manifest.outputs {
        match rerun.manifest.outputs.iter().find(|r| r.file == rec.file) {
            Some(r) if r.sha256 == rec.sha256 => {}
            _ => mismatched.push(rec.file.clone()),
        }
    }
    Ok(mismatched)
}

/// Human-readable one-line digest of a lead table.
pub fn describe(results: &[LeadResult], leads: &[usize], dt: f64) -> String {
    leads
        .iter()
        .zip(results)
        .map(|(&q, r)| format!("{}:{}", fmt_f64(q as f64 * dt), fmt_f64(r.rmse)))
        .collect::<Vec<_>>()
        .join(" ")
}
