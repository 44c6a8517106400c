use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kaf_core::closure::{collect_closure_data, compare_methods, fit_gp_closure, CompareConfig, GpClosure};
use kaf_core::dataset::{Observable, PointSet, Projection, TrajectoryDataset};
use kaf_core::dynamics::{
    simulate_closed_l96, Closure, ClosedL96Spec, ConstantClosure, DoubleWellSDESpec, L63DrivenSpec, L96Spec, Potential,
};
use kaf_core::experiment::{
    analog_comparison, prepare, prepare_from, reproduce, run_experiment, simulate_data, BasisRecord, ExperimentConfig,
    Manifest, Prepared, SystemConfig,
};
use kaf_core::forecast::ObservableSeries;
use kaf_core::io::{read_basis, read_trajectory, table_csv, trajectory_csv, write_basis, write_table, write_trajectory};
use kaf_core::kernel::{auto_tune_bandwidth, build_kernel_system, KernelConfig};
use kaf_core::oracle::{analytic_eigenfunction, fit_sigma, invariant_density, mc_conditional_moments};
use kaf_core::spectral::{compute_eigenbasis, nystrom_extend, EigenBasis, SpectralConfig};
use kaf_core::{Error, Result};
use serde::de::DeserializeOwned;

use crate::*;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Tune(a) => tune(a),
        Command::Forecast(a) => forecast(a),
        Command::Oracle(a) => match a.mc {
            Some(OracleCommand::Mc(m)) => oracle_mc(m),
            None => oracle(a),
        },
        Command::Closure { command } => match command {
            ClosureCommand::Fit(a) => closure_fit(a),
            ClosureCommand::Compare(a) => closure_compare(a),
        },
        Command::Compare(a) => compare(a),
        Command::Run(a) => run(a),
        Command::Recipe { name } => {
            print!("{}", ExperimentConfig::recipe(&name)?.to_toml()?);
            Ok(())
        }
        Command::Repro { manifest, out } => repro(&manifest, out),
    }
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => Ok(T::default()),
    }
}

/// `0,2,5`, `0..9` or a mix such as `0..3,7`.
fn parse_columns(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad column list `{text}`"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            if b <= a {
                return Err(bad());
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn potential(kind: PotentialKind) -> Potential {
    match kind {
        PotentialKind::PlusMinusOne => Potential::WellsAtPlusMinusOne,
        PotentialKind::ZeroOne => Potential::WellsAtZeroAndOne,
    }
}

fn load_config(config: Option<&Path>, recipe: Option<&str>) -> Result<ExperimentConfig> {
    match (config, recipe) {
        (Some(p), _) => ExperimentConfig::from_file(p),
        (None, Some(r)) => ExperimentConfig::recipe(r),
        (None, None) => Err(Error::Config("pass --config or --recipe".into())),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = a.config.as_deref();
    let data = match a.system {
        SystemKind::L63 => SystemConfig::L63(read_toml::<L63DrivenSpec>(cfg)?).simulate(a.samples, a.discard, a.seed)?,
        SystemKind::Sde => SystemConfig::Sde(read_toml::<DoubleWellSDESpec>(cfg)?).simulate(a.samples, a.discard, a.seed)?,
        SystemKind::L96 => SystemConfig::L96(read_toml::<L96Spec>(cfg)?).simulate(a.samples, a.discard, a.seed)?,
        SystemKind::L96Closed => {
            let spec: L96Spec = read_toml(cfg)?;
            let closure: Arc<dyn Closure> = match (&a.closure, a.constant) {
                (Some(p), _) => Arc::new(GpClosure::from_toml(&fs::read_to_string(p)?)?),
                (None, Some(c)) => Arc::new(ConstantClosure(c)),
                (None, None) => return Err(Error::Config("l96-closed needs --closure or --constant".into())),
            };
            let closed = ClosedL96Spec {
                seed: a.seed,
                ..ClosedL96Spec::from_l96(&spec, closure, a.step)
            };
            let skip = (a.discard / spec.dt).round() as usize;
            let run = simulate_closed_l96(&closed, (a.samples + skip - 1) as f64 * spec.dt)?;
            run.slice(skip, run.len())?
        }
    };
    write_trajectory(&a.out, &data)?;
    if let Some(p) = &a.csv {
        fs::write(p, trajectory_csv(&data))?;
    }
    log::info!("wrote {} samples of dimension {} to {}", data.len(), data.dim(), a.out.display());
    Ok(())
}

fn load_training(paths: &[PathBuf]) -> Result<TrajectoryDataset> {
    let mut data = read_trajectory(&paths[0])?;
    for p in &paths[1..] {
        data = data.concat(&read_trajectory(p)?)?;
    }
    Ok(data)
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_training(&a.data)?;
    let n = a.samples.unwrap_or(data.len());
    if n > data.len() || n < 2 {
        return Err(Error::Config(format!("--samples {n} outside 2..={}", data.len())));
    }
    let projection = Projection::columns(&parse_columns(&a.columns)?);
    let points = projection.apply(&data.slice(0, n)?)?;
    let kernel: KernelConfig = read_toml(a.kernel.as_deref())?;
    let ks = build_kernel_system(&points, &kernel)?;
    let basis = compute_eigenbasis(&ks, &SpectralConfig::with_size(a.basis_size))?;
    let record = BasisRecord {
        n_train: n,
        features: projection.features,
        kernel: ks.config(),
    };
    write_basis(&a.out, &basis.to_file(record.to_toml()?))?;
    if let Some(p) = &a.dump_kernel {
        let d = ks.density();
        let rows: Vec<Vec<f64>> = (0..ks.len())
            .map(|i| vec![d.q_hat[i], d.r_hat[i], ks.v_hat()[i], ks.w_hat()[i]])
            .collect();
        write_table(p, &["q", "r", "v", "w"], &rows)?;
    }
    let c = &record.kernel;
    println!(
        "epsilon = {:e}, delta = {:e}, m = {}, knn = {}, {} eigenpairs ({} usable), lambda_1 = {}",
        c.epsilon,
        c.delta,
        c.m,
        ks.knn(),
        basis.len(),
        basis.usable_len(),
        basis.lambda.get(1).copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn tune(a: TuneArgs) -> Result<()> {
    let data = read_trajectory(&a.data)?;
    let points = Projection::columns(&parse_columns(&a.columns)?).apply(&data)?;
    let t = auto_tune_bandwidth(&points)?;
    println!(
        "epsilon = {:e}\ndelta = {:e}\nm = {}\nfixed_slope = {:.4}\nvariable_slope = {:.4}",
        t.epsilon, t.delta, t.m, t.fixed_slope, t.variable_slope
    );
    Ok(())
}

fn leads(dt: f64, tau_max: f64, tau_step: f64) -> Result<Vec<usize>> {
    let step = (tau_step / dt).round() as usize;
    let last = (tau_max / dt).round() as usize;
    if step == 0 || ((step as f64) * dt - tau_step).abs() > 1e-9 || ((last as f64) * dt - tau_max).abs() > 1e-9 {
        return Err(Error::Config(format!("lead grid must use multiples of dt = {dt}")));
    }
    Ok((0..=last).step_by(step).collect())
}

fn forecast(a: ForecastArgs) -> Result<()> {
    let file = read_basis(&a.basis)?;
    let record = BasisRecord::from_toml(&file.kernel_toml)?;
    let train = read_trajectory(&a.train)?;
    let test = read_trajectory(&a.test)?;
    let dt = train.dt();
    let grid = leads(dt, a.tau_max, a.tau_step.unwrap_or(dt))?;
    let q_max = *grid.last().unwrap();
    if train.len() < record.n_train + q_max {
        return Err(Error::Config(format!(
            "training file has {} rows; the basis uses {} and the longest lead needs {q_max} more",
            train.len(),
            record.n_train
        )));
    }
    if test.len() <= q_max || (test.len() - q_max) / 4 <= q_max {
        return Err(Error::Config(format!(
            "test file has {} rows, too few for a longest lead of {q_max} steps",
            test.len()
        )));
    }
    let projection = record.projection();
    let points = projection.apply(&train.slice(0, record.n_train)?)?;
    let ks = build_kernel_system(&points, &record.kernel)?;
    let basis = EigenBasis::from_file(&ks, &file)?;
    let observable = Observable::parse(&a.observable)?;
    let psi = nystrom_extend(&ks, &basis, &projection.apply(&test)?, None)?;
    let prep = Prepared {
        f_train: ObservableSeries::new(observable.evaluate(&train)?, dt),
        f_out: observable.evaluate(&test)?,
        max_ell: psi.ncols(),
        n_out: test.len() - q_max,
        train,
        outsample: test,
        projection,
        points,
        ks,
        basis,
        psi,
    };
    let mut rows = Vec::with_capacity(grid.len());
    for &q in &grid {
        let r = prep.lead(q)?;
        rows.push(vec![
            q as f64 * dt,
            r.z[0],
            r.v[0],
            r.truth[0],
            r.rmse,
            r.forecaster.ell as f64,
            r.forecaster.ell_var as f64,
        ]);
    }
    write_table(&a.out, &["tau", "Z", "V", "truth", "rmse", "ell", "ell_var"], &rows)?;
    log::info!("wrote {} lead times to {}", rows.len(), a.out.display());
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let pot = potential(a.potential);
    let samples = match &a.data {
        Some(p) => Some(read_trajectory(p)?.column(a.column)),
        None => None,
    };
    let sigma = match (a.sigma.as_str(), &samples) {
        ("auto", Some(s)) => fit_sigma(s, pot)?,
        ("auto", None) => return Err(Error::Config("--sigma auto needs --data".into())),
        (v, _) => v
            .parse()
            .map_err(|_| Error::Config(format!("--sigma must be `auto` or a number, got `{v}`")))?,
    };
    let density = invariant_density(sigma, pot, None, 8001)?;
    println!("sigma = {sigma}\nmean = {}\nvariance = {}", density.mean(), density.variance());
    if let Some(s) = &samples {
        println!("kolmogorov_distance = {}", density.kolmogorov_distance(s));
    }
    if let Some(out) = &a.out {
        let (lo, hi) = match &samples {
            Some(s) => s
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v))),
            None => pot.default_support(),
        };
        let xs: Vec<f64> = (0..=400).map(|i| lo + (hi - lo) * i as f64 / 400.0).collect();
        let phis: Vec<Vec<f64>> = (1..=a.harmonics).map(|k| analytic_eigenfunction(&density, k, &xs)).collect();
        let names: Vec<String> = (1..=a.harmonics).map(|k| format!("phi{k}")).collect();
        let mut header = vec!["x", "rho", "Y"];
        header.extend(names.iter().map(String::as_str));
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let mut r = vec![x, density.density(x), density.cdf_at(x)];
                r.extend(phis.iter().map(|p| p[i]));
                r
            })
            .collect();
        write_table(out, &header, &rows)?;
    }
    Ok(())
}

fn oracle_mc(a: McArgs) -> Result<()> {
    let spec = DoubleWellSDESpec {
        sigma: a.sigma,
        x0: a.x0,
        seed: a.seed,
        potential: potential(a.potential),
        ..DoubleWellSDESpec::default()
    };
    let taus: Vec<f64> = leads(spec.sample_dt, a.tau_max, a.tau_step)?
        .into_iter()
        .map(|q| q as f64 * spec.sample_dt)
        .collect();
    let m = mc_conditional_moments(&spec, a.x0, a.paths, &taus)?;
    let rows: Vec<Vec<f64>> = (0..taus.len())
        .map(|i| vec![taus[i], m.mean[i], m.var[i], m.mean_se[i], m.var_se[i]])
        .collect();
    let header = ["tau", "mean", "var", "mean_se", "var_se"];
    match &a.out {
        Some(p) => write_table(p, &header, &rows)?,
        None => print!("{}", table_csv(&header, &rows)),
    }
    Ok(())
}

fn closure_fit(a: ClosureFitArgs) -> Result<()> {
    let spec: L96Spec = read_toml(a.config.as_deref())?;
    let data = read_trajectory(&a.data)?;
    let ts = collect_closure_data(&data, &spec)?;
    let gp = fit_gp_closure(&ts, a.subsample, a.seed)?;
    fs::write(&a.out, gp.to_toml()?)?;
    println!(
        "{} pairs, lengthscale = {}, signal variance = {}, log likelihood = {}",
        ts.len(),
        gp.lengthscale,
        gp.signal_variance,
        gp.log_likelihood
    );
    if let Some(p) = &a.curve {
        let (lo, hi) = gp.input_range();
        let xs: Vec<f64> = (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect();
        let sd = gp.posterior_sd(&xs)?;
        let rows: Vec<Vec<f64>> = xs.iter().zip(&sd).map(|(&x, &s)| vec![x, gp.mean(x), s]).collect();
        write_table(p, &["x", "mean", "sd"], &rows)?;
    }
    Ok(())
}

fn closure_compare(a: ClosureCompareArgs) -> Result<()> {
    let name = match a.regime {
        Regime::Periodic => "l96-periodic",
        Regime::Quasiperiodic => "l96-quasiperiodic",
        Regime::Chaotic => "l96-chaotic",
    };
    let mut cfg = ExperimentConfig::recipe(name)?;
    if let Some(n) = a.samples {
        cfg.data.n_train = n;
    }
    let cc = cfg.compare.take().unwrap_or_default();
    cfg.forecast.tau_max = cc.tau_max;
    cfg.validate()?;
    let (train, out) = simulate_data(&cfg)?;
    let prep = prepare_from(&cfg, train.clone(), out.clone())?;
    let table = compare_methods(&cfg, &CompareConfig { ..cc }, &prep, &train, &out)?;
    let rows: Vec<Vec<f64>> = (0..table.taus.len())
        .map(|i| vec![table.taus[i], table.a[i], table.b[i], table.c[i], table.d[i]])
        .collect();
    write_table(&a.out, &["tau", "a", "b", "c", "d"], &rows)?;
    log::info!("{} initial conditions, GP lengthscale {}", table.n_starts, table.gp_lengthscale);
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.recipe.as_deref())?;
    let dim = cfg.observation.features.len();
    let mut flat = Vec::new();
    for s in &a.x0 {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad --x0 `{s}`"))))
            .collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
        flat.extend(v);
    }
    let initial = PointSet::new(flat, dim)?;
    let prep = prepare(&cfg)?;
    let grid = cfg.leads()?;
    let c = analog_comparison(&prep, &grid, &initial)?;
    let mut header = vec!["tau".to_string()];
    for i in 0..initial.len() {
        header.extend([format!("kaf{i}"), format!("var{i}"), format!("analog{i}")]);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = (0..c.taus.len())
        .map(|t| {
            let mut r = vec![c.taus[t]];
            for i in 0..initial.len() {
                r.extend([c.kaf[i][t], c.kaf_var[i][t], c.analog[i][t]]);
            }
            r
        })
        .collect();
    write_table(&a.out, &header, &rows)?;
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.recipe.as_deref())?;
    let dir = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let summary = run_experiment(&cfg, &dir)?;
    let d = &summary.manifest.derived;
    println!(
        "{}: epsilon = {:e}, delta = {:e}, m = {}, {} usable eigenfunctions",
        cfg.name, d.epsilon, d.delta, d.m, d.usable_len
    );
    if let Some(s) = d.sigma {
        println!("fitted sigma = {s}");
    }
    for (q, r) in summary.leads.iter().zip(&summary.results) {
        println!(
            "tau {:>6.2}  rmse {:.4}  coverage {:.3}  ell {:>3}  ell_var {:>3}",
            *q as f64 * cfg.dt(),
            r.rmse,
            r.coverage,
            r.forecaster.ell,
            r.forecaster.ell_var
        );
    }
    println!("manifest: {}", dir.join("manifest.toml").display());
    Ok(())
}

fn repro(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let manifest = Manifest::from_toml(&fs::read_to_string(path)?)?;
    let dir = out.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("repro"));
    let bad = reproduce(&manifest, &dir)?;
    if !bad.is_empty() {
        return Err(Error::NotReproduced(bad.join(", ")));
    }
    println!("all {} outputs reproduced bit for bit", manifest.outputs.len());
    Ok(())
}
