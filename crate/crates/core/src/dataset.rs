//! Time-ordered trajectory samples and the observation map applied to them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Uniformly sampled trajectory: `n` rows of `d` state coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    n: usize,
    d: usize,
    dt: f64,
    t0: f64,
    data: Vec<f64>,
    /// Digest of the system spec that produced the samples (empty when unknown).
    pub meta: String,
}

impl TrajectoryDataset {
    pub fn new(data: Vec<f64>, d: usize, dt: f64, t0: f64) -> Result<Self> {
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::LengthMismatch(format!(
                "{} values do not form rows of width {d}",
                data.len()
            )));
        }
        let n = data.len() / d;
        if n < 2 {
            return Err(Error::Config(format!("a trajectory needs at least 2 samples, got {n}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged {
                time: t0 + (pos / d) as f64 * dt,
            });
        }
        Ok(Self {
            n,
            d,
            dt,
            t0,
            data,
            meta: String::new(),
        })
    }

    pub fn with_meta(mut self, meta: impl Into<String>) -> Self {
        self.meta = meta.into();
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * self.d + j]).collect()
    }

    /// Contiguous sub-range of rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n {
            return Err(Error::Config(format!(
                "row range {start}..{end} invalid for {} rows",
                self.n
            )));
        }
        let mut out = Self::new(
            self.data[start * self.d..end * self.d].to_vec(),
            self.d,
            self.dt,
            self.time(start),
        )?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// Appends rows of another dataset with the same width and sampling interval.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.d != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: other.d,
            });
        }
        if (other.dt - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::Config("cannot concatenate datasets with different dt".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self::new(data, self.d, self.dt, self.t0)?.with_meta(self.meta.clone()))
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let proj = Projection::columns(cols);
        let points = proj.apply(self)?;
        Ok(Self::new(points.data, cols.len(), self.dt, self.t0)?.with_meta(self.meta.clone()))
    }
}

/// A set of points in the observation space, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::LengthMismatch(format!(
                "{} values do not form points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    /// One-dimensional points from a slice of scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// First `n` points.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            dim: self.dim,
            data: self.data[..n * self.dim].to_vec(),
        }
    }

    /// Points `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Self {
        Self {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Every `stride`-th point.
    pub fn strided(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let mut data = Vec::with_capacity(self.data.len() / stride + self.dim);
        for i in (0..self.len()).step_by(stride) {
            data.extend_from_slice(self.point(i));
        }
        Self { dim: self.dim, data }
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One observed coordinate: `scale * state[column]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub column: usize,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

/// The observation map: a list of (scaled) state columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub features: Vec<Feature>,
}

impl Projection {
    pub fn columns(cols: &[usize]) -> Self {
        Self {
            features: cols
                .iter()
                .map(|&column| Feature { column, scale: 1.0 })
                .collect(),
        }
    }

    pub fn range(start: usize, end: usize) -> Self {
        Self::columns(&(start..end).collect::<Vec<_>>())
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn apply(&self, data: &TrajectoryDataset) -> Result<PointSet> {
        if self.features.is_empty() {
            return Err(Error::Config("projection selects no columns".into()));
        }
        if let Some(f) = self.features.iter().find(|f| f.column >= data.dim()) {
            return Err(Error::Config(format!(
                "projection column {} out of range for {} state columns",
                f.column,
                data.dim()
            )));
        }
        let mut out = Vec::with_capacity(data.len() * self.features.len());
        for i in 0..data.len() {
            let row = data.row(i);
            out.extend(self.features.iter().map(|f| f.scale * row[f.column]));
        }
        PointSet::new(out, self.features.len())
    }
}

/// Scalar prediction observable derived from the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "column", rename_all = "lowercase")]
pub enum Observable {
    /// `F(state) = state[column]`
    Column(usize),
    /// `F(state) = state[column]^2`
    Square(usize),
}

impl Observable {
    pub fn evaluate(&self, data: &TrajectoryDataset) -> Result<Vec<f64>> {
        let col = match *self {
            Observable::Column(c) | Observable::Square(c) => c,
        };
        if col >= data.dim() {
            return Err(Error::Config(format!(
                "observable column {col} out of range for {} state columns",
                data.dim()
            )));
        }
        let values = data.column(col);
        Ok(match self {
            Observable::Column(_) => values,
            Observable::Square(_) => values.into_iter().map(|v| v * v).collect(),
        })
    }

    /// Parses `col:3` or `sq:3`.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, idx) = text
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("observable `{text}` must look like col:N or sq:N")))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad observable column in `{text}`")))?;
        match kind.trim() {
            "col" => Ok(Observable::Column(idx)),
            "sq" => Ok(Observable::Square(idx)),
            other => Err(Error::Config(format!("unknown observable kind `{other}`"))),
        }
    }
}

/// Hex SHA-256 of arbitrary text; used for spec and config digests.
pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TrajectoryDataset {
        TrajectoryDataset::new((0..12).map(|v| v as f64).collect(), 3, 0.5, 1.0).unwrap()
    }

    #[test]
    fn rows_and_columns() {
        let d = toy();
        assert_eq!(d.len(), 4);
        assert_eq!(d.row(2), &[6.0, 7.0, 8.0]);
        assert_eq!(d.column(1), vec![1.0, 4.0, 7.0, 10.0]);
        assert_eq!(d.time(3), 2.5);
    }

    #[test]
    fn rejects_non_finite_and_short() {
        assert!(TrajectoryDataset::new(vec![1.0, f64::NAN], 1, 1.0, 0.0).is_err());
        assert!(TrajectoryDataset::new(vec![1.0], 1, 1.0, 0.0).is_err());
        assert!(TrajectoryDataset::new(vec![1.0, 2.0, 3.0], 2, 1.0, 0.0).is_err());
    }

    #[test]
    fn projection_scales_columns() {
        let d = toy();
        let p = Projection {
            features: vec![
                Feature { column: 0, scale: 1.0 },
                Feature { column: 2, scale: 4.0 / 90.0 },
            ],
        };
        let pts = p.apply(&d).unwrap();
        assert_eq!(pts.dim(), 2);
        assert_eq!(pts.point(1), &[3.0, 4.0 / 90.0 * 5.0]);
        assert!(Projection::columns(&[3]).apply(&d).is_err());
    }

    #[test]
    fn observable_parsing() {
        assert_eq!(Observable::parse("col:0").unwrap(), Observable::Column(0));
        assert_eq!(Observable::parse("sq:2").unwrap(), Observable::Square(2));
        assert!(Observable::parse("x").is_err());
        let sq = Observable::Square(1).evaluate(&toy()).unwrap();
        assert_eq!(sq, vec![1.0, 16.0, 49.0, 100.0]);
    }

    #[test]
    fn slicing_keeps_time_origin() {
        let s = toy().slice(1, 3).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.t0(), 1.5);
        assert_eq!(toy().concat(&s).unwrap().len(), 6);
    }
}
