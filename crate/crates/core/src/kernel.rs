//! Variable-bandwidth Gaussian kernel with bistochastic normalization.
//!
//! Given training points `x_0..x_{N-1}` the pipeline is
//!
//! 1. density estimate `q(x) = (pi delta)^{-m/2} (1/N) sum_j exp(-|x - x_j|^2 / delta)`
//!    and bandwidth function `r(x) = q(x)^{-1/m}`,
//! 2. kernel matrix `K_ij = exp(-|x_i - x_j|^2 / (eps r_i r_j)) / N`, optionally
//!    truncated to each row's `knn` largest entries and symmetrized by max,
//! 3. normalizers `v = K 1`, `w = K V^{-1} 1` and `S = V^{-1} K W^{-1/2}`.
//!
//! `G = S S^T` is then a symmetric Markov matrix (unit row sums), whose top
//! eigenvector is constant. `S` is never materialized; it is applied through `K`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sq_dist, PointSet};
use crate::error::{Error, Result};

/// Row count at and above which the default configuration switches to a kNN kernel.
pub const DENSE_LIMIT: usize = 4000;
/// Default neighbor count for the truncated kernel.
pub const DEFAULT_KNN: usize = 1024;
/// Query points whose density falls below this fraction of the smallest
/// in-sample density are treated as extrapolation and get zero kernel rows.
pub const EXTRAPOLATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Kernel bandwidth `eps`.
    pub epsilon: f64,
    /// Density-estimation bandwidth.
    pub delta: f64,
    /// Intrinsic dimension estimate.
    pub m: usize,
    /// Neighbors kept per row; 0 keeps the dense kernel. `None` picks dense below
    /// [`DENSE_LIMIT`] rows and `min(N - 1, DEFAULT_KNN)` above.
    pub knn: Option<usize>,
    /// Estimate `epsilon`, `delta`, `m` from the data, overriding the fields above.
    pub auto_tune: bool,
    /// Use the density-dependent bandwidth; `false` fixes `r = 1`.
    pub variable_bandwidth: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1.0,
            m: 1,
            knn: None,
            auto_tune: true,
            variable_bandwidth: true,
        }
    }
}

impl KernelConfig {
    /// Fixed-bandwidth (`r = 1`) kernel with the given `eps`, dense.
    pub fn fixed(epsilon: f64) -> Self {
        Self {
            epsilon,
            knn: Some(0),
            auto_tune: false,
            variable_bandwidth: false,
            ..Self::default()
        }
    }

    /// Neighbor count actually used for `n` training points (0 = dense).
    pub fn knn_for(&self, n: usize) -> usize {
        match self.knn {
            Some(k) => k,
            None if n < DENSE_LIMIT => 0,
            None => (n - 1).min(DEFAULT_KNN),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !self.auto_tune {
            if !(self.epsilon > 0.0) {
                return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
            }
            if self.variable_bandwidth && !(self.delta > 0.0) {
                return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
            }
            if self.m == 0 {
                return Err(Error::Config("m must be at least 1".into()));
            }
        }
        let knn = self.knn_for(n);
        if knn >= n {
            return Err(Error::Config(format!("knn = {knn} must be below N = {n}")));
        }
        Ok(())
    }
}

/// Per-sample density values and the bandwidth function derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub q_hat: Vec<f64>,
    pub r_hat: Vec<f64>,
    /// `None` for the fixed-bandwidth kernel.
    pub params: Option<DensityParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    pub delta: f64,
    pub m: usize,
}

impl DensityParams {
    fn prefactor(&self) -> f64 {
        (std::f64::consts::PI * self.delta).powf(-(self.m as f64) / 2.0)
    }

    /// `r = q^{-1/m}`.
    pub fn bandwidth(&self, q: f64) -> f64 {
        q.powf(-1.0 / self.m as f64)
    }
}

impl DensityEstimate {
    /// `q = r = 1` everywhere.
    pub fn fixed(n: usize) -> Self {
        Self {
            q_hat: vec![1.0; n],
            r_hat: vec![1.0; n],
            params: None,
        }
    }

    pub fn len(&self) -> usize {
        self.q_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_hat.is_empty()
    }
}

/// Kernel density `q` at `query` from the samples in `data`.
fn density_at(data: &PointSet, params: DensityParams, query: &[f64]) -> f64 {
    let n = data.len();
    let inv = 1.0 / params.delta;
    let sum: f64 = (0..n).map(|j| (-sq_dist(query, data.point(j)) * inv).exp()).sum();
    params.prefactor() * sum / n as f64
}

/// Density estimate and bandwidth function at every training point.
pub fn estimate_density(points: &PointSet, delta: f64, m: usize) -> Result<DensityEstimate> {
    if points.len() < 2 {
        return Err(Error::Config("density estimation needs at least 2 points".into()));
    }
    if !(delta > 0.0) || m == 0 {
        return Err(Error::Config(format!("need delta > 0 and m >= 1, got {delta}, {m}")));
    }
    let params = DensityParams { delta, m };
    let q_hat: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| density_at(points, params, points.point(i)))
        .collect();
    if let Some(index) = q_hat.iter().position(|&q| !(q > 0.0) || !q.is_finite()) {
        return Err(Error::DegenerateBandwidth { index, delta });
    }
    let r_hat = q_hat.iter().map(|&q| params.bandwidth(q)).collect();
    Ok(DensityEstimate {
        q_hat,
        r_hat,
        params: Some(params),
    })
}

// ---------------------------------------------------------------------------
// Bandwidth tuning

/// Result of the log-log kernel-sum slope criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedBandwidth {
    pub epsilon: f64,
    pub delta: f64,
    pub m: usize,
    /// Maximal `dlog Sigma / dlog eps` for the fixed-bandwidth kernel (about m/2).
    pub fixed_slope: f64,
    /// Maximal slope for the variable-bandwidth kernel.
    pub variable_slope: f64,
}

/// Largest number of points used for tuning; longer inputs are strided.
pub const TUNING_SAMPLE: usize = 3000;

/// Locates the peak of `dlog Sigma(e) / dlog e` for `Sigma(e) = sum_ij exp(-d_ij / (e s_ij))`.
fn slope_peak(n: usize, pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    let positive: Vec<f64> = pairs.iter().map(|(d, s)| d / s).filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::TuningFailed("all points coincide".into()));
    }
    // coincident pairs contribute exp(0) at every eps
    let coincident = (pairs.len() - positive.len()) as f64;
    let log_sum = |e: f64| {
        let off: f64 = positive.iter().map(|v| (-v / e).exp()).sum();
        (n as f64 + 2.0 * (off + coincident)).ln()
    };
    let peak_on = |log_lo: f64, log_hi: f64, step: f64| {
        let count = ((log_hi - log_lo) / step).ceil() as usize + 1;
        let logs: Vec<f64> = (0..count).map(|i| log_lo + step * i as f64).collect();
        let sums: Vec<f64> = logs.par_iter().map(|&l| log_sum(l.exp())).collect();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..count - 1 {
            let slope = (sums[i + 1] - sums[i]) / step;
            if slope > best.0 {
                best = (slope, 0.5 * (logs[i] + logs[i + 1]));
            }
        }
        best
    };
    let mut scratch = positive.clone();
    let q = (scratch.len() as f64 * 1e-3) as usize;
    let low = *scratch.select_nth_unstable_by(q, |a, b| a.partial_cmp(b).unwrap()).1;
    let high = positive.iter().cloned().fold(0.0, f64::max);
    let (coarse_slope, at) = peak_on((low / 100.0).ln(), (high * 100.0).ln(), 0.5);
    if !(coarse_slope > 0.1) {
        return Err(Error::TuningFailed(format!(
            "kernel sum is flat (max log-log slope {coarse_slope:.3e})"
        )));
    }
    let (slope, at) = peak_on(at - 1.0, at + 1.0, 0.05);
    Ok((slope, at.exp()))
}

/// Picks `delta`, `m` on the fixed-bandwidth kernel and then `eps` on the
/// variable-bandwidth kernel, each at the maximal log-log slope of the kernel sum.
pub fn auto_tune_bandwidth(points: &PointSet) -> Result<TunedBandwidth> {
    let n_all = points.len();
    if n_all < 32 {
        return Err(Error::Config(format!("bandwidth tuning needs N >= 32, got {n_all}")));
    }
    let sub = points.strided(n_all.div_ceil(TUNING_SAMPLE));
    let n = sub.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(sub.point(i), sub.point(j)));
        }
    }
    let fixed: Vec<(f64, f64)> = dists.iter().map(|&d| (d, 1.0)).collect();
    let (fixed_slope, delta) = slope_peak(n, &fixed)?;
    let m = ((2.0 * fixed_slope).round() as usize).max(1);

    let density = estimate_density(&sub, delta, m)?;
    let r = &density.r_hat;
    let mut variable = Vec::with_capacity(dists.len());
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            variable.push((dists[k], r[i] * r[j]));
            k += 1;
        }
    }
    let (variable_slope, epsilon) = slope_peak(n, &variable)?;
    Ok(TunedBandwidth {
        epsilon,
        delta,
        m,
        fixed_slope,
        variable_slope,
    })
}

// ---------------------------------------------------------------------------
// Kernel matrices

/// Compressed sparse rows with `u32` column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(|r| r.len()).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for row in &rows {
            for &(c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            nrows: rows.len(),
            ncols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let (c, v) = self.row(i);
            *yi = c.iter().zip(v).map(|(&j, &a)| a * x[j as usize]).sum();
        });
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                m[(i, j as usize)] = a;
            }
        }
        m
    }
}

/// Storage of `K`: dense row-major or sparse.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelMatrix {
    Dense { n: usize, data: Vec<f64> },
    Sparse(CsrMatrix),
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        match self {
            KernelMatrix::Dense { n, .. } => *n,
            KernelMatrix::Sparse(c) => c.nrows,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, KernelMatrix::Sparse(_))
    }

    /// Stored entries (N^2 for dense).
    pub fn nnz(&self) -> usize {
        match self {
            KernelMatrix::Dense { n, .. } => n * n,
            KernelMatrix::Sparse(c) => c.nnz(),
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        match self {
            KernelMatrix::Dense { n, data } => {
                y.par_iter_mut().enumerate().for_each(|(i, yi)| {
                    *yi = data[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
                });
            }
            KernelMatrix::Sparse(c) => c.matvec(x, y),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            KernelMatrix::Dense { n, data } => DMatrix::from_row_slice(*n, *n, data),
            KernelMatrix::Sparse(c) => c.to_dense(),
        }
    }

    fn for_each_edge(&self, mut f: impl FnMut(usize, usize)) {
        match self {
            KernelMatrix::Dense { n, data } => {
                for i in 0..*n {
                    for j in i + 1..*n {
                        if data[i * n + j] > 0.0 {
                            f(i, j);
                        }
                    }
                }
            }
            KernelMatrix::Sparse(c) => {
                for i in 0..c.nrows {
                    let (cols, vals) = c.row(i);
                    for (&j, &v) in cols.iter().zip(vals) {
                        if v > 0.0 && (j as usize) > i {
                            f(i, j as usize);
                        }
                    }
                }
            }
        }
    }
}

fn count_components(k: &KernelMatrix) -> usize {
    let n = k.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    k.for_each_edge(|i, j| {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a] = b;
        }
    });
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

/// Immutable kernel artifacts for one training set.
#[derive(Debug, Clone)]
pub struct KernelSystem {
    points: PointSet,
    density: DensityEstimate,
    epsilon: f64,
    knn: usize,
    matrix: KernelMatrix,
    v_hat: Vec<f64>,
    w_hat: Vec<f64>,
    min_q: f64,
}

#[inline]
fn kernel_value(d2: f64, epsilon: f64, ri: f64, rj: f64) -> f64 {
    (-d2 / (epsilon * (ri * rj))).exp()
}

/// `kappa(x, x_j)` for every training point `j`.
fn kernel_row_into(points: &PointSet, r: &[f64], epsilon: f64, x: &[f64], rx: f64, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = kernel_value(sq_dist(x, points.point(j)), epsilon, rx, r[j]);
    }
}

/// Indices and values of the `keep` largest entries of `row`, sorted by index.
fn top_entries(row: &[f64], keep: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    if keep < row.len() {
        idx.select_nth_unstable_by(keep - 1, |&a, &b| {
            row[b as usize]
                .partial_cmp(&row[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.truncate(keep);
    }
    idx.sort_unstable();
    idx.into_iter().map(|j| (j, row[j as usize])).collect()
}

/// Resolves the configuration (tuning if requested) into concrete parameters.
pub fn resolve_config(points: &PointSet, cfg: &KernelConfig) -> Result<KernelConfig> {
    cfg.validate(points.len())?;
    let mut out = cfg.clone();
    if cfg.auto_tune {
        let tuned = auto_tune_bandwidth(points)?;
        log::info!(
            "tuned bandwidth: eps = {:.4e}, delta = {:.4e}, m = {}",
            tuned.epsilon,
            tuned.delta,
            tuned.m
        );
        out.epsilon = tuned.epsilon;
        out.delta = tuned.delta;
        out.m = tuned.m;
        out.auto_tune = false;
    }
    out.knn = Some(cfg.knn_for(points.len()));
    Ok(out)
}

/// Builds `K`, `v`, `w` for the training points.
pub fn build_kernel_system(points: &PointSet, cfg: &KernelConfig) -> Result<KernelSystem> {
    let cfg = resolve_config(points, cfg)?;
    let density = if cfg.variable_bandwidth {
        estimate_density(points, cfg.delta, cfg.m)?
    } else {
        DensityEstimate::fixed(points.len())
    };
    build_with_density(points, density, cfg.epsilon, cfg.knn.unwrap_or(0))
}

/// Builds the kernel system from a precomputed density estimate.
pub fn build_with_density(
    points: &PointSet,
    density: DensityEstimate,
    epsilon: f64,
    knn: usize,
) -> Result<KernelSystem> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Config("kernel needs at least 2 points".into()));
    }
    if density.len() != n {
        return Err(Error::LengthMismatch(format!(
            "density has {} entries for {n} points",
            density.len()
        )));
    }
    if knn >= n {
        return Err(Error::Config(format!("knn = {knn} must be below N = {n}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let inv_n = 1.0 / n as f64;
    let r = &density.r_hat;
    let matrix = if knn == 0 {
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            kernel_row_into(points, r, epsilon, points.point(i), r[i], row);
            row.iter_mut().for_each(|v| *v *= inv_n);
        });
        KernelMatrix::Dense { n, data }
    } else {
        let mut rows: Vec<Vec<(u32, f64)>> = (0..n)
            .into_par_iter()
            .map_init(
                || vec![0.0; n],
                |buf, i| {
                    kernel_row_into(points, r, epsilon, points.point(i), r[i], buf);
                    let mut e = top_entries(buf, knn + 1);
                    e.iter_mut().for_each(|(_, v)| *v *= inv_n);
                    e
                },
            )
            .collect();
        let mut extra: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row {
                if j as usize != i {
                    extra[j as usize].push((i as u32, v));
                }
            }
        }
        rows.par_iter_mut().zip(extra.par_iter_mut()).for_each(|(row, add)| {
            row.append(add);
            row.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(b.1.partial_cmp(&a.1).unwrap()));
            row.dedup_by_key(|e| e.0);
        });
        drop(extra);
        KernelMatrix::Sparse(CsrMatrix::from_rows(n, rows))
    };

    let components = count_components(&matrix);
    if components > 1 {
        return Err(Error::DisconnectedGraph { components });
    }

    let mut v_hat = vec![0.0; n];
    matrix.matvec(&vec![1.0; n], &mut v_hat);
    let inv_v: Vec<f64> = v_hat.iter().map(|v| 1.0 / v).collect();
    let mut w_hat = vec![0.0; n];
    matrix.matvec(&inv_v, &mut w_hat);
    let min_q = density.q_hat.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(KernelSystem {
        points: points.clone(),
        density,
        epsilon,
        knn,
        matrix,
        v_hat,
        w_hat,
        min_q,
    })
}

impl KernelSystem {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn density(&self) -> &DensityEstimate {
        &self.density
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn knn(&self) -> usize {
        self.knn
    }

    pub fn matrix(&self) -> &KernelMatrix {
        &self.matrix
    }

    pub fn v_hat(&self) -> &[f64] {
        &self.v_hat
    }

    pub fn w_hat(&self) -> &[f64] {
        &self.w_hat
    }

    /// Parameters that rebuild this system from the same training points.
    pub fn config(&self) -> KernelConfig {
        let (delta, m, variable) = match self.density.params {
            Some(p) => (p.delta, p.m, true),
            None => (1.0, 1, false),
        };
        KernelConfig {
            epsilon: self.epsilon,
            delta,
            m,
            knn: Some(self.knn),
            auto_tune: false,
            variable_bandwidth: variable,
        }
    }

    /// `y = S x = V^{-1} K W^{-1/2} x`.
    pub fn apply_s(&self, x: &[f64], y: &mut [f64]) {
        let scaled: Vec<f64> = x.iter().zip(&self.w_hat).map(|(a, w)| a / w.sqrt()).collect();
        self.matrix.matvec(&scaled, y);
        y.iter_mut().zip(&self.v_hat).for_each(|(a, v)| *a /= v);
    }

    /// `y = S^T x = W^{-1/2} K V^{-1} x`.
    pub fn apply_st(&self, x: &[f64], y: &mut [f64]) {
        let scaled: Vec<f64> = x.iter().zip(&self.v_hat).map(|(a, v)| a / v).collect();
        self.matrix.matvec(&scaled, y);
        y.iter_mut().zip(&self.w_hat).for_each(|(a, w)| *a /= w.sqrt());
    }

    /// `y = G x = S S^T x`.
    pub fn apply_g(&self, x: &[f64], y: &mut [f64]) {
        let mut tmp = vec![0.0; x.len()];
        self.apply_st(x, &mut tmp);
        self.apply_s(&tmp, y);
    }

    /// Dense `S`; for small problems and tests.
    pub fn normalized_dense(&self) -> DMatrix<f64> {
        let mut s = self.matrix.to_dense();
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                s[(i, j)] /= self.v_hat[i] * self.w_hat[j].sqrt();
            }
        }
        s
    }

    /// Dense Markov matrix `G = S S^T`; for small problems and tests.
    pub fn markov_dense(&self) -> DMatrix<f64> {
        let s = self.normalized_dense();
        &s * s.transpose()
    }

    /// Density and bandwidth at a new point; `None` when it counts as extrapolation.
    fn bandwidth_at(&self, x: &[f64]) -> Option<f64> {
        match self.density.params {
            None => Some(1.0),
            Some(p) => {
                let q = density_at(&self.points, p, x);
                if q > EXTRAPOLATION_FLOOR * self.min_q {
                    Some(p.bandwidth(q))
                } else {
                    None
                }
            }
        }
    }

    /// Kernel row of a query point against the training set.
    pub fn query_row(&self, x: &[f64], buf: &mut Vec<f64>) -> Result<QueryRow> {
        if x.len() != self.points.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.points.dim(),
                got: x.len(),
            });
        }
        let n = self.len();
        let Some(rx) = self.bandwidth_at(x) else {
            return Ok(QueryRow {
                raw: Vec::new(),
                normalized: Vec::new(),
                v_hat: 0.0,
                extrapolated: true,
            });
        };
        buf.resize(n, 0.0);
        kernel_row_into(&self.points, &self.density.r_hat, self.epsilon, x, rx, buf);
        let raw = if self.knn == 0 {
            buf.iter().enumerate().map(|(j, &v)| (j as u32, v)).collect()
        } else {
            top_entries(buf, self.knn + 1)
        };
        let v_hat = raw.iter().map(|e| e.1).sum::<f64>() / n as f64;
        if !(v_hat > 0.0) {
            return Ok(QueryRow {
                raw,
                normalized: Vec::new(),
                v_hat,
                extrapolated: true,
            });
        }
        let scale = 1.0 / (n as f64 * v_hat);
        let normalized = raw
            .iter()
            .map(|&(j, v)| (j, v * scale / self.w_hat[j as usize].sqrt()))
            .collect();
        Ok(QueryRow {
            raw,
            normalized,
            v_hat,
            extrapolated: false,
        })
    }
}

/// One out-of-sample kernel row.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    /// `kappa(x, x_j)` (only the kept entries for a kNN kernel).
    pub raw: Vec<(u32, f64)>,
    /// The matching row of `S`: `kappa(x, x_j) / (N v(x) sqrt(w_j))`.
    pub normalized: Vec<(u32, f64)>,
    /// `v(x) = (1/N) sum_j kappa(x, x_j)`.
    pub v_hat: f64,
    /// Set when the point lies outside the sampled region; rows are then empty.
    pub extrapolated: bool,
}

/// Out-of-sample kernel rows for a batch of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct OutOfSampleRows {
    /// `kappa(x_i, x_j)`.
    pub raw: CsrMatrix,
    /// Rows of `S` extended to the query points.
    pub normalized: CsrMatrix,
    pub extrapolated: Vec<bool>,
}

pub fn out_of_sample_rows(ks: &KernelSystem, points: &PointSet) -> Result<OutOfSampleRows> {
    if points.dim() != ks.points.dim() {
        return Err(Error::DimensionMismatch {
            expected: ks.points.dim(),
            got: points.dim(),
        });
    }
    let rows: Vec<QueryRow> = (0..points.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| ks.query_row(points.point(i), buf))
        .collect::<Result<_>>()?;
    let extrapolated = rows.iter().map(|r| r.extrapolated).collect();
    let (raw, normalized): (Vec<_>, Vec<_>) = rows.into_iter().map(|r| (r.raw, r.normalized)).unzip();
    Ok(OutOfSampleRows {
        raw: CsrMatrix::from_rows(ks.len(), raw),
        normalized: CsrMatrix::from_rows(ks.len(), normalized),
        extrapolated,
    })
}
