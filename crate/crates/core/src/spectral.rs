//! Leading eigenpairs of `G = S S^T` and their Nyström extension.
//!
//! The eigenvectors of `G` are the left singular vectors of `S` and
//! `lambda_j = sigma_j^2`. They are found with a restarted Lanczos iteration
//! (Krylov-Schur style: Rayleigh-Ritz on the full search space, restarts keep the
//! leading Ritz vectors) with full reorthogonalization, applying `G` as `S (S^T x)`.
//! Small problems go straight to a dense symmetric eigensolver.
//!
//! Normalization: `|phi_j|_2 = sqrt(N)`, first non-negligible entry positive.
//! The Nyström functions are
//! `psi_j(x) = lambda_j^{-1/2} sum_n s_n(x) (S^T phi_j)_n`,
//! where `s(x)` is the normalized out-of-sample kernel row, so that
//! `psi_j(x_n) = lambda_j^{1/2} phi_j(x_n)` on the training points.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PointSet;
use crate::dynamics::stream_rng;
use crate::error::{Error, Result};
use crate::io::BasisFile;
use crate::kernel::KernelSystem;

/// Default basis size.
pub const DEFAULT_BASIS_SIZE: usize = 100;
/// Eigenvalues below `LAMBDA_FLOOR * lambda_0` are unusable for Nyström.
pub const LAMBDA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    /// Dense for small problems, Lanczos otherwise.
    Auto,
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    pub basis_size: usize,
    pub solver: Solver,
    /// Relative residual target: `|G u - theta u| <= tol * sqrt(theta)` (unit `u`).
    pub tol: f64,
    /// Absolute residual floor, reached by rounding for tiny eigenvalues.
    pub abs_tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            basis_size: DEFAULT_BASIS_SIZE,
            solver: Solver::Auto,
            tol: 1e-11,
            abs_tol: 1e-13,
            max_restarts: 400,
            seed: 0,
        }
    }
}

impl SpectralConfig {
    pub fn with_size(basis_size: usize) -> Self {
        Self {
            basis_size,
            ..Self::default()
        }
    }
}

/// In-sample eigenpairs of `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    /// Eigenvalues, descending.
    pub lambda: DVector<f64>,
    /// `N x L` eigenvectors with `|phi_j| = sqrt(N)`.
    pub phi: DMatrix<f64>,
    /// `S^T phi_j`, cached for Nyström.
    pub st_phi: DMatrix<f64>,
    /// `|G phi_j - lambda_j phi_j| / sqrt(N)` (unit-vector residuals).
    pub residuals: Vec<f64>,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn floor(&self) -> f64 {
        LAMBDA_FLOOR * self.lambda[0]
    }

    /// Number of leading columns usable for Nyström extension.
    pub fn usable_len(&self) -> usize {
        let floor = self.floor();
        self.lambda.iter().take_while(|&&l| l > floor).count()
    }

    /// Eigenvalues above `threshold`, a rough effective rank.
    pub fn effective_rank(&self, threshold: f64) -> usize {
        self.lambda.iter().filter(|&&l| l > threshold * self.lambda[0]).count()
    }

    /// Rebuilds a basis from stored eigenpairs, recomputing `S^T phi` and residuals.
    pub fn from_parts(ks: &KernelSystem, lambda: DVector<f64>, phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() != ks.len() {
            return Err(Error::DimensionMismatch {
                expected: ks.len(),
                got: phi.nrows(),
            });
        }
        if phi.ncols() != lambda.len() || lambda.is_empty() {
            return Err(Error::LengthMismatch(format!(
                "{} eigenvalues for {} eigenvectors",
                lambda.len(),
                phi.ncols()
            )));
        }
        let (st_phi, residuals) = st_and_residuals(ks, &lambda, &phi);
        Ok(Self {
            lambda,
            phi,
            st_phi,
            residuals,
        })
    }

    pub fn from_file(ks: &KernelSystem, file: &BasisFile) -> Result<Self> {
        Self::from_parts(ks, file.lambda.clone(), file.phi.clone())
    }

    pub fn to_file(&self, kernel_toml: String) -> BasisFile {
        BasisFile {
            lambda: self.lambda.clone(),
            phi: self.phi.clone(),
            kernel_toml,
        }
    }

    /// Hex digest of the eigenvalues and eigenvectors.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.lambda.iter().chain(self.phi.iter()) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn st_and_residuals(ks: &KernelSystem, lambda: &DVector<f64>, phi: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = phi.nrows();
    let cols: Vec<(Vec<f64>, f64)> = (0..phi.ncols())
        .map(|j| {
            let col: Vec<f64> = phi.column(j).iter().copied().collect();
            let mut st = vec![0.0; n];
            ks.apply_st(&col, &mut st);
            let mut g = vec![0.0; n];
            ks.apply_s(&st, &mut g);
            let r: f64 = g
                .iter()
                .zip(&col)
                .map(|(a, b)| (a - lambda[j] * b).powi(2))
                .sum::<f64>()
                .sqrt();
            (st, r / (n as f64).sqrt())
        })
        .collect();
    let mut st_phi = DMatrix::zeros(n, phi.ncols());
    let mut residuals = Vec::with_capacity(phi.ncols());
    for (j, (st, r)) in cols.into_iter().enumerate() {
        st_phi.column_mut(j).copy_from_slice(&st);
        residuals.push(r);
    }
    (st_phi, residuals)
}

/// Scales unit columns to norm `sqrt(N)` and fixes their signs.
fn normalize_columns(u: &mut DMatrix<f64>) {
    let scale = (u.nrows() as f64).sqrt();
    for mut col in u.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
        let max = col.amax();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-6 * max) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        col *= scale;
    }
}

fn dense_eigen(ks: &KernelSystem, k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let g = ks.markov_dense();
    let n = g.nrows();
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let lambda = DVector::from_iterator(k, order[..k].iter().map(|&i| eig.eigenvalues[i]));
    let mut u = DMatrix::zeros(n, k);
    for (j, &i) in order[..k].iter().enumerate() {
        u.column_mut(j).copy_from(&eig.eigenvectors.column(i));
    }
    (lambda, u)
}

/// Orthogonalizes `w` against the first `cols` columns of `v` (two passes).
fn orthogonalize(v: &DMatrix<f64>, cols: usize, w: &mut DVector<f64>) {
    if cols == 0 {
        return;
    }
    let basis = v.columns(0, cols);
    for _ in 0..2 {
        let coef = basis.tr_mul(w);
        w.gemv(-1.0, &basis, &coef, 1.0);
    }
}

fn apply_g(ks: &KernelSystem, x: &DVector<f64>) -> DVector<f64> {
    let mut y = vec![0.0; x.len()];
    ks.apply_g(x.as_slice(), &mut y);
    DVector::from_vec(y)
}

fn random_unit(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    let mut v = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let norm = v.norm();
    v /= norm;
    v
}

fn lanczos(ks: &KernelSystem, k: usize, cfg: &SpectralConfig) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = ks.len();
    let mdim = (2 * k + 20).max(k + 40).min(n);
    let keep = (k + (mdim - k) / 3).min(mdim - 1);
    let mut rng = stream_rng(cfg.seed, 0x5eed);

    let mut v = DMatrix::zeros(n, mdim);
    let mut w = DMatrix::zeros(n, mdim);
    let mut h = DMatrix::zeros(mdim, mdim);
    v.set_column(0, &random_unit(n, &mut rng));
    let mut filled = 0;
    let mut worst = f64::INFINITY;

    for restart in 0..cfg.max_restarts {
        let mut next = DVector::zeros(n);
        for j in filled..mdim {
            let wj = apply_g(ks, &v.column(j).into_owned());
            let hj = v.columns(0, j + 1).tr_mul(&wj);
            for i in 0..=j {
                h[(i, j)] = hj[i];
                h[(j, i)] = hj[i];
            }
            w.set_column(j, &wj);
            let mut cand = wj.clone();
            orthogonalize(&v, j + 1, &mut cand);
            let mut norm = cand.norm();
            if norm < 1e-12 * wj.norm().max(1e-300) {
                // invariant subspace reached; continue with a fresh direction
                cand = random_unit(n, &mut rng);
                orthogonalize(&v, j + 1, &mut cand);
                norm = cand.norm();
            }
            cand /= norm;
            if j + 1 < mdim {
                v.set_column(j + 1, &cand);
            } else {
                next = cand;
            }
        }

        let eig = SymmetricEigen::new(h.clone());
        let mut order: Vec<usize> = (0..mdim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut y = DMatrix::zeros(mdim, keep);
        for (c, &i) in order[..keep].iter().enumerate() {
            y.set_column(c, &eig.eigenvectors.column(i));
        }
        let theta: Vec<f64> = order[..keep].iter().map(|&i| eig.eigenvalues[i]).collect();
        let u = &v * &y;
        let au = &w * &y;

        worst = 0.0;
        let mut converged = true;
        for (j, &t) in theta.iter().enumerate().take(k) {
            let r = (au.column(j) - u.column(j) * t).norm();
            let target = (cfg.tol * t.max(0.0).sqrt()).max(cfg.abs_tol);
            worst = worst.max(r / target);
            converged &= r <= target;
        }
        log::debug!("lanczos restart {restart}: worst residual ratio {worst:.3e}");
        if converged {
            let lambda = DVector::from_iterator(k, theta[..k].iter().copied());
            return Ok((lambda, u.columns(0, k).into_owned()));
        }

        v.columns_mut(0, keep).copy_from(&u);
        w.columns_mut(0, keep).copy_from(&au);
        h.fill(0.0);
        for (i, t) in theta.iter().enumerate() {
            h[(i, i)] = *t;
        }
        // `next` is orthogonal to the old space, hence to the kept Ritz vectors
        orthogonalize(&v, keep, &mut next);
        let norm = next.norm();
        v.set_column(keep, &(next / norm));
        filled = keep;
    }
    Err(Error::SpectralFailure {
        iterations: cfg.max_restarts,
        max_residual: worst,
    })
}

/// Leading `L` eigenpairs of `G`.
pub fn compute_eigenbasis(ks: &KernelSystem, cfg: &SpectralConfig) -> Result<EigenBasis> {
    let n = ks.len();
    let k = cfg.basis_size;
    if k == 0 || k > n {
        return Err(Error::Config(format!("basis size must be in 1..={n}, got {k}")));
    }
    let dense = match cfg.solver {
        Solver::Dense => true,
        Solver::Lanczos => false,
        Solver::Auto => n <= 400 || 2 * k + 20 > n,
    };
    let (lambda, mut u) = if dense || (2 * k + 20).max(k + 40) > n {
        dense_eigen(ks, k)
    } else {
        lanczos(ks, k, cfg)?
    };
    normalize_columns(&mut u);
    let lambda = lambda.map(|l| l.clamp(0.0, 1.0));
    if let Some(index) = (0..k).find(|&j| !(lambda[j] > LAMBDA_FLOOR * lambda[0])) {
        log::warn!(
            "eigenvalue {index} ({:.3e}) is below the usable floor; only {index} columns can be extended",
            lambda[index]
        );
    }
    EigenBasis::from_parts(ks, lambda, u)
}

/// Nyström functions evaluated at query points.
#[derive(Debug, Clone, PartialEq)]
pub struct RkhsBasis {
    /// `n_query x L'` values `psi_j(x_i)`.
    pub psi: DMatrix<f64>,
    /// Rows whose query point lies outside the sampled region (all zeros).
    pub extrapolated: Vec<bool>,
    /// Digest of the source eigenbasis.
    pub source: String,
}

impl RkhsBasis {
    pub fn len(&self) -> usize {
        self.psi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.nrows() == 0
    }

    pub fn ncols(&self) -> usize {
        self.psi.ncols()
    }

    /// Rows `start..start + len` as a new basis.
    pub fn rows(&self, start: usize, len: usize) -> Result<RkhsBasis> {
        if start + len > self.len() {
            return Err(Error::LengthMismatch(format!(
                "rows {start}..{} requested from {} query points",
                start + len,
                self.len()
            )));
        }
        Ok(RkhsBasis {
            psi: self.psi.rows(start, len).into_owned(),
            extrapolated: self.extrapolated[start..start + len].to_vec(),
            source: self.source.clone(),
        })
    }

    /// Rows at the given indices.
    pub fn select(&self, idx: &[usize]) -> RkhsBasis {
        RkhsBasis {
            psi: self.psi.select_rows(idx),
            extrapolated: idx.iter().map(|&i| self.extrapolated[i]).collect(),
            source: self.source.clone(),
        }
    }
}

/// Evaluates `psi_0..psi_{cols-1}` at `points` (all usable columns when `cols` is `None`).
pub fn nystrom_extend(
    ks: &KernelSystem,
    basis: &EigenBasis,
    points: &PointSet,
    cols: Option<usize>,
) -> Result<RkhsBasis> {
    let cols = cols.unwrap_or_else(|| basis.usable_len());
    if cols == 0 || cols > basis.len() {
        return Err(Error::Config(format!(
            "requested {cols} Nyström columns from a basis of {}",
            basis.len()
        )));
    }
    if basis.n() != ks.len() {
        return Err(Error::DimensionMismatch {
            expected: ks.len(),
            got: basis.n(),
        });
    }
    let floor = basis.floor();
    if let Some(index) = (0..cols).find(|&j| !(basis.lambda[j] > floor)) {
        return Err(Error::TruncationRequired {
            index,
            value: basis.lambda[index],
            floor,
        });
    }
    let scale: Vec<f64> = (0..cols).map(|j| basis.lambda[j].powf(-0.5)).collect();
    let rows: Vec<(Vec<f64>, bool)> = (0..points.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            let row = ks.query_row(points.point(i), buf)?;
            let mut out = vec![0.0; cols];
            for &(k, s) in &row.normalized {
                let src = basis.st_phi.row(k as usize);
                for j in 0..cols {
                    out[j] += s * src[j];
                }
            }
            out.iter_mut().zip(&scale).for_each(|(o, c)| *o *= c);
            Ok((out, row.extrapolated))
        })
        .collect::<Result<_>>()?;
    let mut psi = DMatrix::zeros(points.len(), cols);
    let mut extrapolated = Vec::with_capacity(points.len());
    for (i, (row, flag)) in rows.into_iter().enumerate() {
        psi.row_mut(i).copy_from_slice(&row);
        extrapolated.push(flag);
    }
    Ok(RkhsBasis {
        psi,
        extrapolated,
        source: basis.digest(),
    })
}

/// Largest `|psi_j(x_n) - lambda_j^{1/2} phi_j(x_n)|` over training points and the
/// columns with `lambda_j >= min_lambda`.
pub fn nystrom_residual(basis: &EigenBasis, psi_train: &RkhsBasis, min_lambda: f64) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..psi_train.ncols() {
        let l = basis.lambda[j];
        if l < min_lambda {
            continue;
        }
        for n in 0..basis.n() {
            worst = worst.max((psi_train.psi[(n, j)] - l.sqrt() * basis.phi[(n, j)]).abs());
        }
    }
    worst
}
