//! Reference quantities for the double-well system.
//!
//! * the invariant density `rho(x) = exp(-Xi(x)/sigma) / Z` and its CDF `Y`,
//! * the harmonics `cos(k pi Y(x))`, eigenfunctions of the Laplacian in the
//!   coordinate `Y` with eigenvalue `k pi`,
//! * Monte-Carlo conditional moments of the SDE started from a point,
//! * a maximum-likelihood fit of `sigma` to samples of `x`.

use crate::dynamics::{simulate_double_well_sde, DoubleWellSDESpec, Potential};
use crate::error::{Error, Result};

/// Minimum number of quadrature nodes.
pub const MIN_GRID: usize = 4001;
/// Endpoint density, relative to the peak, above which the grid is too narrow.
pub const TAIL_TOLERANCE: f64 = 1e-12;

/// Normalized invariant density tabulated on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantDensity {
    pub sigma: f64,
    pub potential: Potential,
    /// `Z = int exp(-Xi/sigma)`.
    pub normalization: f64,
    pub grid: Vec<f64>,
    pub rho: Vec<f64>,
    /// `Y(x) = int_{-inf}^x rho`.
    pub cdf: Vec<f64>,
}

/// Composite Simpson weights times `h` for an odd number of nodes.
fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    debug_assert!(n % 2 == 1 && n >= 3);
    let mut s = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + h * i as f64).collect()
}

/// Normalizing constant of `exp(-Xi/sigma)` on `[lo, hi]`.
fn partition(potential: Potential, sigma: f64, lo: f64, hi: f64, n: usize) -> f64 {
    let grid = uniform_grid(lo, hi, n);
    let vals: Vec<f64> = grid.iter().map(|&x| (-potential.value(x) / sigma).exp()).collect();
    simpson(&vals, grid[1] - grid[0])
}

/// Tabulates the invariant density on `support` (the potential's default when `None`).
pub fn invariant_density(
    sigma: f64,
    potential: Potential,
    support: Option<(f64, f64)>,
    nodes: usize,
) -> Result<InvariantDensity> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (lo, hi) = support.unwrap_or_else(|| potential.default_support());
    if !(hi > lo) {
        return Err(Error::Config(format!("empty support [{lo}, {hi}]")));
    }
    let mut n = nodes.max(MIN_GRID);
    if n.is_multiple_of(2) {
        n += 1;
    }
    let grid = uniform_grid(lo, hi, n);
    let h = grid[1] - grid[0];
    let unnorm: Vec<f64> = grid.iter().map(|&x| (-potential.value(x) / sigma).exp()).collect();
    let peak = unnorm.iter().cloned().fold(0.0, f64::max);
    let tail = unnorm[0].max(unnorm[n - 1]) / peak;
    if tail > TAIL_TOLERANCE {
        return Err(Error::GridTooNarrow(tail));
    }
    let z = simpson(&unnorm, h);
    let rho: Vec<f64> = unnorm.iter().map(|v| v / z).collect();

    // Simpson partial sums on even nodes; odd nodes use the matching
    // third-order rule over the first half of the next panel.
    let mut cdf = vec![0.0; n];
    for i in (2..n).step_by(2) {
        cdf[i] = cdf[i - 2] + h / 3.0 * (rho[i - 2] + 4.0 * rho[i - 1] + rho[i]);
        let half = cdf[i - 2] + h / 12.0 * (5.0 * rho[i - 2] + 8.0 * rho[i - 1] - rho[i]);
        // the one-sided rule can overshoot in steep tails
        cdf[i - 1] = half.clamp(cdf[i - 2], cdf[i]);
    }
    Ok(InvariantDensity {
        sigma,
        potential,
        normalization: z,
        grid,
        rho,
        cdf,
    })
}

impl InvariantDensity {
    pub fn with_sigma(sigma: f64, potential: Potential) -> Result<Self> {
        invariant_density(sigma, potential, None, MIN_GRID)
    }

    fn h(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// `rho(x)` from the closed form (zero outside the grid).
    pub fn density(&self, x: f64) -> f64 {
        if x < self.grid[0] || x > self.grid[self.grid.len() - 1] {
            return 0.0;
        }
        (-self.potential.value(x) / self.sigma).exp() / self.normalization
    }

    /// `Y(x)` by piecewise-linear interpolation of the tabulated CDF.
    pub fn cdf_at(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if x <= self.grid[0] {
            return 0.0;
        }
        if x >= self.grid[n - 1] {
            return 1.0;
        }
        let pos = (x - self.grid[0]) / self.h();
        let i = (pos.floor() as usize).min(n - 2);
        let t = pos - i as f64;
        (1.0 - t) * self.cdf[i] + t * self.cdf[i + 1]
    }

    /// `int g rho`.
    pub fn expectation(&self, g: impl Fn(f64) -> f64) -> f64 {
        let vals: Vec<f64> = self.grid.iter().zip(&self.rho).map(|(&x, r)| g(x) * r).collect();
        simpson(&vals, self.h())
    }

    pub fn mean(&self) -> f64 {
        self.expectation(|x| x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.expectation(|x| (x - m) * (x - m))
    }

    /// `sup |F_emp - Y|` of samples against this density (Kolmogorov distance).
    pub fn kolmogorov_distance(&self, samples: &[f64]) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len() as f64;
        s.iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = self.cdf_at(x);
                (y - i as f64 / n).abs().max(((i + 1) as f64 / n - y).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Harmonic `cos(k pi Y)` with its Laplacian eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticEigenfunction {
    pub k: usize,
    pub eigenvalue: f64,
}

impl AnalyticEigenfunction {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            eigenvalue: k as f64 * std::f64::consts::PI,
        }
    }
}

/// `cos(k pi Y(x))` at each point.
pub fn analytic_eigenfunction(density: &InvariantDensity, k: usize, points: &[f64]) -> Vec<f64> {
    let f = AnalyticEigenfunction::new(k);
    points
        .iter()
        .map(|&x| (f.eigenvalue * density.cdf_at(x)).cos())
        .collect()
}

/// Pearson correlation; zero when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Monte-Carlo mean and variance of `X_tau` with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCurves {
    pub taus: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub var_se: Vec<f64>,
    pub n_paths: usize,
}

/// Sample mean and unbiased variance with their standard errors.
pub fn sample_moments(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    let mean_se = (var / n).sqrt();
    let var_se = ((m4 - m2 * m2).max(0.0) / n).sqrt();
    (mean, var, mean_se, var_se)
}

/// Runs `n_paths` SDE paths from `x0` and reports moments at each lead time.
/// Lead times must be multiples of `spec.sample_dt`.
pub fn mc_conditional_moments(
    spec: &DoubleWellSDESpec,
    x0: f64,
    n_paths: usize,
    taus: &[f64],
) -> Result<MomentCurves> {
    if n_paths < 100 {
        return Err(Error::Config(format!("need at least 100 paths, got {n_paths}")));
    }
    if taus.is_empty() {
        return Err(Error::Config("empty lead-time grid".into()));
    }
    let dt = spec.sample_dt;
    let mut idx = Vec::with_capacity(taus.len());
    for &t in taus {
        let q = (t / dt).round();
        if t < 0.0 || (q * dt - t).abs() > 1e-9 * dt.max(t) {
            return Err(Error::Config(format!("lead time {t} is not a multiple of {dt}")));
        }
        idx.push(q as usize);
    }
    let last = *idx.iter().max().unwrap();
    let spec = DoubleWellSDESpec {
        x0,
        ..spec.clone()
    };
    // a zero-length run still needs two samples
    let duration = (last.max(1)) as f64 * dt;
    let paths = simulate_double_well_sde(&spec, duration, n_paths)?;
    let mut out = MomentCurves {
        taus: taus.to_vec(),
        mean: Vec::new(),
        var: Vec::new(),
        mean_se: Vec::new(),
        var_se: Vec::new(),
        n_paths,
    };
    for &q in &idx {
        let vals: Vec<f64> = paths.iter().map(|p| p.row(q)[0]).collect();
        let (m, v, ms, vs) = sample_moments(&vals);
        out.mean.push(m);
        out.var.push(v);
        out.mean_se.push(ms);
        out.var_se.push(vs);
    }
    Ok(out)
}

/// Maximum-likelihood `sigma` for samples assumed drawn from `exp(-Xi/sigma)/Z`.
pub fn fit_sigma(samples: &[f64], potential: Potential) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Config("sigma fit needs at least 2 samples".into()));
    }
    let mean_xi = samples.iter().map(|&x| potential.value(x)).sum::<f64>() / samples.len() as f64;
    if !(mean_xi > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let (lo0, hi0) = potential.default_support();
    let smin = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (lo0.min(smin - 1.0), hi0.max(smax + 1.0));
    // negative mean log-likelihood per sample
    let nll = |log_s: f64| {
        let s = log_s.exp();
        mean_xi / s + partition(potential, s, lo, hi, 8001).ln()
    };
    let (mut a, mut b) = ((1e-4f64).ln(), (10.0f64).ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    while b - a > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = nll(d);
        }
    }
    let s = (0.5 * (a + b)).exp();
    log::info!("fitted sigma = {s:.6}");
    Ok(s)
}
