//! Binary containers and CSV export.
//!
//! Trajectories (`KAFT`):
//!
//! | field   | type        |
//! |---------|-------------|
//! | magic   | `b"KAFT"`   |
//! | version | `u32`       |
//! | N       | `u64`       |
//! | d       | `u64`       |
//! | dt      | `f64`       |
//! | payload | `N*d` `f64`, row-major |
//!
//! Bases (`KAFB`): magic, version `u32`, N `u64`, L `u64`, the `L` eigenvalues,
//! the `N x L` eigenvector matrix row-major, then a `u64` byte count followed by
//! UTF-8 TOML describing the kernel that produced the basis.
//!
//! Everything is little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataset::TrajectoryDataset;
use crate::error::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"KAFT";
pub const BASIS_MAGIC: &[u8; 4] = b"KAFB";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_trajectory(data: &TrajectoryDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + data.as_slice().len() * 8);
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&(data.dim() as u64).to_le_bytes());
    out.extend_from_slice(&data.dt().to_le_bytes());
    for v in data.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<TrajectoryDataset> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(TRAJECTORY_MAGIC)?;
    let n = c.u64()? as usize;
    let d = c.u64()? as usize;
    let dt = c.f64()?;
    let payload = c.f64s(n * d)?;
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    TrajectoryDataset::new(payload, d, dt, 0.0)
}

pub fn write_trajectory(path: &Path, data: &TrajectoryDataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_trajectory(data))?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryDataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_trajectory(&bytes)
}

/// CSV with header `t,x1,...,xd`.
pub fn trajectory_csv(data: &TrajectoryDataset) -> String {
    let mut out = String::from("t");
    for j in 1..=data.dim() {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for i in 0..data.len() {
        out.push_str(&fmt_f64(data.time(i)));
        for v in data.row(i) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// Shortest round-trip representation; keeps CSV output bit-reproducible.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a CSV table from a header and rows of numbers.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    fs::write(path, table_csv(header, rows))?;
    Ok(())
}

pub fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Eigenvalues, eigenvectors and the kernel description stored in a basis file.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFile {
    pub lambda: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub kernel_toml: String,
}

pub fn encode_basis(basis: &BasisFile) -> Vec<u8> {
    let (n, l) = basis.phi.shape();
    let mut out = Vec::with_capacity(32 + (n * l + l) * 8 + basis.kernel_toml.len());
    out.extend_from_slice(BASIS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(l as u64).to_le_bytes());
    for v in basis.lambda.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..n {
        for j in 0..l {
            out.extend_from_slice(&basis.phi[(i, j)].to_le_bytes());
        }
    }
    out.extend_from_slice(&(basis.kernel_toml.len() as u64).to_le_bytes());
    out.extend_from_slice(basis.kernel_toml.as_bytes());
    out
}

pub fn decode_basis(bytes: &[u8]) -> Result<BasisFile> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(BASIS_MAGIC)?;
    let n = c.u64()? as usize;
    let l = c.u64()? as usize;
    let lambda = DVector::from_vec(c.f64s(l)?);
    let rows = c.f64s(n * l)?;
    let phi = DMatrix::from_row_slice(n, l, &rows);
    let len = c.u64()? as usize;
    let kernel_toml = String::from_utf8(c.take(len)?.to_vec())
        .map_err(|_| Error::Format("kernel description is not UTF-8".into()))?;
    Ok(BasisFile {
        lambda,
        phi,
        kernel_toml,
    })
}

pub fn write_basis(path: &Path, basis: &BasisFile) -> Result<()> {
    fs::write(path, encode_basis(basis))?;
    Ok(())
}

pub fn read_basis(path: &Path) -> Result<BasisFile> {
    decode_basis(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trajectory_header_layout() {
        let d = TrajectoryDataset::new(vec![1.0, 2.0, 3.0, 4.0], 2, 0.05, 0.0).unwrap();
        let bytes = encode_trajectory(&d);
        assert_eq!(&bytes[0..4], b"KAFT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 0.05);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 32 + 4 * 8);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let d = TrajectoryDataset::new(vec![1.0, 2.0], 1, 1.0, 0.0).unwrap();
        let mut bytes = encode_trajectory(&d);
        assert!(decode_trajectory(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_trajectory(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn csv_header() {
        let d = TrajectoryDataset::new(vec![1.0, 2.0, 3.0, 4.0], 2, 0.5, 0.0).unwrap();
        let csv = trajectory_csv(&d);
        assert!(csv.starts_with("t,x1,x2\n0.0,1.0,2.0\n0.5,3.0,4.0\n"));
    }

    proptest! {
        #[test]
        fn trajectory_roundtrip(values in prop::collection::vec(-1e6f64..1e6, 2..40), d in 1usize..3, dt in 1e-3f64..1.0) {
            let n = values.len() / d;
            prop_assume!(n >= 2);
            let data = TrajectoryDataset::new(values[..n * d].to_vec(), d, dt, 0.0).unwrap();
            let back = decode_trajectory(&encode_trajectory(&data)).unwrap();
            prop_assert_eq!(back, data);
        }

        #[test]
        fn basis_roundtrip(n in 1usize..6, l in 1usize..4, seed in 0u64..1000) {
            let phi = DMatrix::from_fn(n, l, |i, j| (seed as f64 + i as f64 * 1.7 - j as f64).sin());
            let lambda = DVector::from_fn(l, |j, _| 1.0 / (j as f64 + 1.0));
            let b = BasisFile { lambda, phi, kernel_toml: "epsilon = 0.5\n".into() };
            prop_assert_eq!(decode_basis(&encode_basis(&b)).unwrap(), b);
        }
    }
}
