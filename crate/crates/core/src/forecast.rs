//! Kernel analog forecasts, their conditional variance and error metrics.
//!
//! For a lead of `q` steps the predictor is
//! `Z(x) = sum_{j<ell} c_j lambda_j^{-1/2} psi_j(x)` with
//! `c_j = (1/N) sum_n phi_j(x_n) f_{n+q}`. The truncation `ell` minimizes the
//! RMSE on a validation set. The variance `V` is the same construction applied
//! to the squared in-sample residuals `(f_{n+q} - Z(x_n))^2`, with its own
//! truncation tuned on a second validation set.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::{sq_dist, PointSet};
use crate::error::{Error, Result};
use crate::spectral::{EigenBasis, RkhsBasis};

/// Samples `f_n` of a scalar observable, aligned with a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSeries {
    pub values: Vec<f64>,
    pub dt: f64,
}

impl ObservableSeries {
    pub fn new(values: Vec<f64>, dt: f64) -> Self {
        Self { values, dt }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `[f_q, ..., f_{q+n-1}]`.
    pub fn shifted(&self, q: usize, n: usize) -> Result<&[f64]> {
        if q + n > self.values.len() {
            return Err(Error::LengthMismatch(format!(
                "lead {q} needs {} samples, series has {}",
                q + n,
                self.values.len()
            )));
        }
        Ok(&self.values[q..q + n])
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.values.len() as f64).sqrt()
    }
}

/// `c_j = (1/N) sum_n phi_j(x_n) f_n` for `j < ell`; `f` is already shifted.
pub fn fit_coefficients(basis: &EigenBasis, f: &[f64], ell: usize) -> Result<Vec<f64>> {
    let n = basis.n();
    if f.len() != n {
        return Err(Error::LengthMismatch(format!("{} observable samples for {n} training points", f.len())));
    }
    if ell == 0 || ell > basis.len() {
        return Err(Error::Config(format!("ell must be in 1..={}, got {ell}", basis.len())));
    }
    let fv = nalgebra::DVectorView::from_slice(f, n);
    let c = basis.phi.columns(0, ell).tr_mul(&fv) / n as f64;
    Ok(c.iter().copied().collect())
}

/// `sum_{j<ell} a_j psi_j(x_i)` for every row of `psi`.
fn expand(psi: &DMatrix<f64>, weights: &[f64]) -> Vec<f64> {
    let ell = weights.len();
    (0..psi.nrows())
        .map(|i| (0..ell).map(|j| weights[j] * psi[(i, j)]).sum())
        .collect()
}

/// Coefficient vector divided by `lambda_j^{1/2}`.
fn scaled(basis: &EigenBasis, c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().map(|(j, c)| c / basis.lambda[j].sqrt()).collect()
}

/// Fitted predictor and variance for one lead time.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub lead: usize,
    pub tau: f64,
    pub ell: usize,
    /// `c_j`, `j < ell`.
    pub c: Vec<f64>,
    pub ell_var: usize,
    /// Variance coefficients, `j < ell_var`.
    pub c_hat: Vec<f64>,
    /// `lambda_j` for `j < max(ell, ell_var)`.
    pub lambda: Vec<f64>,
}

impl Forecaster {
    fn check(&self, psi: &RkhsBasis) -> Result<()> {
        let need = self.ell.max(self.ell_var);
        if psi.ncols() < need {
            return Err(Error::Config(format!(
                "forecaster needs {need} basis functions, got {}",
                psi.ncols()
            )));
        }
        Ok(())
    }

    /// `Z_tau` at the query points of `psi`.
    pub fn predict(&self, psi: &RkhsBasis) -> Result<Vec<f64>> {
        self.check(psi)?;
        let w: Vec<f64> = self.c.iter().zip(&self.lambda).map(|(c, l)| c / l.sqrt()).collect();
        Ok(expand(&psi.psi, &w))
    }

    /// `V_tau` at the query points of `psi` (may be slightly negative).
    pub fn variance(&self, psi: &RkhsBasis) -> Result<Vec<f64>> {
        self.check(psi)?;
        if self.ell_var == 0 {
            return Ok(vec![0.0; psi.len()]);
        }
        let w: Vec<f64> = self.c_hat.iter().zip(&self.lambda).map(|(c, l)| c / l.sqrt()).collect();
        Ok(expand(&psi.psi, &w))
    }
}

/// Predictions for `f` using `ell` leading basis functions.
pub fn predict(basis: &EigenBasis, f: &[f64], ell: usize, psi: &RkhsBasis) -> Result<Vec<f64>> {
    let c = fit_coefficients(basis, f, ell)?;
    if psi.ncols() < ell {
        return Err(Error::Config(format!("need {ell} basis functions, got {}", psi.ncols())));
    }
    Ok(expand(&psi.psi, &scaled(basis, &c)))
}

/// Validation RMSE for every prefix `ell' = 1..=max_ell` of a coefficient vector.
fn prefix_rmse(basis: &EigenBasis, c: &[f64], psi: &DMatrix<f64>, rows: &[usize], truth: &[f64]) -> Vec<f64> {
    let w = scaled(basis, c);
    let mut z = vec![0.0; rows.len()];
    let mut out = Vec::with_capacity(c.len());
    for (j, wj) in w.iter().enumerate() {
        let mut sse = 0.0;
        for (k, &i) in rows.iter().enumerate() {
            z[k] += wj * psi[(i, j)];
            sse += (z[k] - truth[k]).powi(2);
        }
        out.push((sse / rows.len() as f64).sqrt());
    }
    out
}

/// Index of the smallest entry plus one; the first minimizer wins ties.
fn argmin_ell(rmse: &[f64]) -> usize {
    let mut best = 0;
    for (i, r) in rmse.iter().enumerate() {
        if *r < rmse[best] {
            best = i;
        }
    }
    best + 1
}

/// Truncation minimizing the validation RMSE of `Z` over `ell' = 1..=max_ell`.
///
/// `f` is the shifted training observable, `psi_val` the basis at the
/// validation points, `truth` their shifted observable values.
pub fn tune_ell(
    basis: &EigenBasis,
    f: &[f64],
    psi_val: &RkhsBasis,
    truth: &[f64],
    max_ell: usize,
) -> Result<(usize, Vec<f64>)> {
    if psi_val.is_empty() || truth.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if truth.len() != psi_val.len() {
        return Err(Error::LengthMismatch(format!(
            "{} validation targets for {} validation points",
            truth.len(),
            psi_val.len()
        )));
    }
    let max_ell = max_ell.min(psi_val.ncols()).min(basis.len());
    let c = fit_coefficients(basis, f, max_ell)?;
    let rows: Vec<usize> = (0..truth.len()).collect();
    let rmse = prefix_rmse(basis, &c, &psi_val.psi, &rows, truth);
    Ok((argmin_ell(&rmse), rmse))
}

/// In-sample predictions `Z(x_n) = sum_{j<ell} c_j phi_j(x_n)`.
fn in_sample(basis: &EigenBasis, c: &[f64]) -> Vec<f64> {
    let ell = c.len();
    let cv = nalgebra::DVector::from_column_slice(c);
    (basis.phi.columns(0, ell) * cv).iter().copied().collect()
}

/// Squared in-sample residuals `g_n = (f_n - Z(x_n))^2`.
pub fn residual_observable(basis: &EigenBasis, f: &[f64], c: &[f64]) -> Vec<f64> {
    in_sample(basis, c)
        .iter()
        .zip(f)
        .map(|(z, f)| (f - z).powi(2))
        .collect()
}

/// Fits and tunes the variance coefficients of a forecaster with fixed `ell`, `c`.
///
/// `psi_var`/`truth_var` is the second validation set; its targets are the
/// squared errors of the already fitted predictor there.
pub fn fit_variance(
    forecaster: &mut Forecaster,
    basis: &EigenBasis,
    f: &[f64],
    psi_var: &RkhsBasis,
    truth_var: &[f64],
    max_ell: usize,
) -> Result<()> {
    let g = residual_observable(basis, f, &forecaster.c);
    let z = forecaster.predict(psi_var)?;
    let g_val: Vec<f64> = z.iter().zip(truth_var).map(|(z, t)| (t - z).powi(2)).collect();
    let (ell_var, _) = tune_ell(basis, &g, psi_var, &g_val, max_ell)?;
    forecaster.c_hat = fit_coefficients(basis, &g, ell_var)?;
    forecaster.ell_var = ell_var;
    let need = forecaster.ell.max(ell_var);
    forecaster.lambda = basis.lambda.iter().take(need).copied().collect();
    Ok(())
}

/// Builds a forecaster for one lead: tunes `ell` on the first validation set and
/// the variance on the second.
#[allow(clippy::too_many_arguments)]
pub fn fit_forecaster(
    basis: &EigenBasis,
    f: &ObservableSeries,
    lead: usize,
    psi_val: &RkhsBasis,
    truth_val: &[f64],
    psi_var: &RkhsBasis,
    truth_var: &[f64],
    max_ell: usize,
) -> Result<Forecaster> {
    let fq = f.shifted(lead, basis.n())?;
    let (ell, _) = tune_ell(basis, fq, psi_val, truth_val, max_ell)?;
    let c = fit_coefficients(basis, fq, ell)?;
    let mut fc = Forecaster {
        lead,
        tau: lead as f64 * f.dt,
        ell,
        c,
        ell_var: 0,
        c_hat: Vec::new(),
        lambda: basis.lambda.iter().take(ell).copied().collect(),
    };
    fit_variance(&mut fc, basis, fq, psi_var, truth_var, max_ell)?;
    Ok(fc)
}

/// Normalized RMSE at each lead time.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseCurve {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// `|truth - mean(truth)|_2` per lead (unnormalized, matches the numerator).
    pub normalizer: Vec<f64>,
}

/// `|z - truth|_2 / |truth - mean(truth)|_2`.
pub fn normalized_rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() || truth.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} truth values",
            predictions.len(),
            truth.len()
        )));
    }
    let (num, den) = rmse_parts(predictions, truth);
    if !(den > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(num / den)
}

fn rmse_parts(predictions: &[f64], truth: &[f64]) -> (f64, f64) {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let num = predictions.iter().zip(truth).map(|(z, t)| (z - t).powi(2)).sum::<f64>().sqrt();
    let den = truth.iter().map(|t| (t - mean).powi(2)).sum::<f64>().sqrt();
    (num, den)
}

/// Normalized RMSE curve from per-lead predictions and truth.
pub fn rmse_curve(taus: &[f64], predictions: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<RmseCurve> {
    if taus.len() != predictions.len() || taus.len() != truth.len() {
        return Err(Error::LengthMismatch("one prediction and truth vector per lead required".into()));
    }
    let mut values = Vec::with_capacity(taus.len());
    let mut normalizer = Vec::with_capacity(taus.len());
    for (z, t) in predictions.iter().zip(truth) {
        values.push(normalized_rmse(z, t)?);
        normalizer.push(rmse_parts(z, t).1);
    }
    Ok(RmseCurve {
        taus: taus.to_vec(),
        values,
        normalizer,
    })
}

/// Fraction of points with `|truth - z| <= 2 sqrt(|v|)`.
pub fn band_coverage(z: &[f64], v: &[f64], truth: &[f64]) -> f64 {
    let hits = z
        .iter()
        .zip(v)
        .zip(truth)
        .filter(|((z, v), t)| (*t - *z).abs() <= 2.0 * v.abs().sqrt())
        .count();
    hits as f64 / truth.len().max(1) as f64
}

/// Index of the nearest training point for each query; ties go to the smallest index.
pub fn analog_indices(train: &PointSet, query: &PointSet) -> Result<Vec<usize>> {
    if train.dim() != query.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            got: query.dim(),
        });
    }
    if train.is_empty() {
        return Err(Error::Config("analog forecast needs training points".into()));
    }
    Ok((0..query.len())
        .into_par_iter()
        .map(|i| {
            let x = query.point(i);
            let mut best = (f64::INFINITY, 0);
            for n in 0..train.len() {
                let d = sq_dist(x, train.point(n));
                if d < best.0 {
                    best = (d, n);
                }
            }
            best.1
        })
        .collect())
}

/// Lorenz's analog forecast: `f_{n* + q}` with `n*` the nearest training point.
pub fn lorenz_analog(train: &PointSet, f: &ObservableSeries, query: &PointSet, lead: usize) -> Result<Vec<f64>> {
    f.shifted(lead, train.len())?;
    Ok(analog_indices(train, query)?
        .into_iter()
        .map(|n| f.values[n + lead])
        .collect())
}
