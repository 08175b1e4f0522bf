//! Binary field files and CSV tables.
//!
//! A field file is little-endian throughout:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `COVLABF\0` |
//! | 4 | format version, `u32` |
//! | 4 | dimension `n`, `u32` |
//! | 4 | `grid_n`, `u32` |
//! | 4 + 4 | `nx`, `nt`, `u32` |
//! | 4 | components per node, `u32`: 1 scalar, 2 vector, 4 matrix |
//! | 8 × 3 | `x0`, `t0`, `h`, `f64` |
//! | 8 × nx·nt·c | values, `f64` |
//!
//! Node `(i, j)` sits at `(x0 + i h, t0 + j h)` and is stored at index
//! `j nx + i`. Vectors are `(x, t)` components; matrices are row-major.
//! Invalid nodes are NaN in every component.

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, Mat2, Sample, Vec2};
use serde::Serialize;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"COVLABF\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 6 + 8 * 3;

/// Node values that flatten to a fixed number of `f64`s.
pub trait Components: Sample {
    const N: usize;
    fn push(&self, out: &mut Vec<f64>);
}

impl Components for f64 {
    const N: usize = 1;
    fn push(&self, out: &mut Vec<f64>) {
        out.push(*self);
    }
}

impl Components for Vec2 {
    const N: usize = 2;
    fn push(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&[self[0], self[1]]);
    }
}

impl Components for Mat2 {
    const N: usize = 4;
    fn push(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&[self[(0, 0)], self[(0, 1)], self[(1, 0)], self[(1, 1)]]);
    }
}

/// Header of a field file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FieldHeader {
    pub dim_n: u32,
    pub grid_n: u32,
    pub components: u32,
    pub grid: Grid,
}

/// A field read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawField {
    pub header: FieldHeader,
    /// Node-major, `components` values per node.
    pub values: Vec<f64>,
}

impl RawField {
    /// Component `c` as a scalar field; NaN marks invalid nodes.
    pub fn component(&self, c: usize) -> Result<Field<f64>> {
        let m = self.header.components as usize;
        if c >= m {
            return Err(Error::InvalidInput(format!("component {c} of a {m}-component field")));
        }
        let vals = self.values.iter().skip(c).step_by(m).map(|v| v.is_finite().then_some(*v));
        Ok(Field::from_options(self.header.grid, 0.0, vals))
    }
}

pub fn write_field<T: Components>(w: &mut impl Write, f: &Field<T>, dim_n: u32, grid_n: u32) -> Result<()> {
    let g = f.grid;
    let mut head = Vec::with_capacity(HEADER_LEN);
    head.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, dim_n, grid_n, g.nx as u32, g.nt as u32, T::N as u32] {
        head.extend_from_slice(&v.to_le_bytes());
    }
    for v in [g.x0, g.t0, g.h] {
        head.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&head)?;
    let mut vals = Vec::with_capacity(T::N);
    let mut buf = Vec::with_capacity(8 * T::N * g.len());
    for k in 0..g.len() {
        vals.clear();
        match f.at(k) {
            Some(v) => v.push(&mut vals),
            None => vals.resize(T::N, f64::NAN),
        }
        for v in &vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_field<T: Components>(path: &Path, f: &Field<T>, dim_n: u32, grid_n: u32) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_field(&mut w, f, dim_n, grid_n)?;
    w.flush()?;
    Ok(())
}

pub fn read_field(r: &mut impl Read) -> Result<RawField> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    if &head[..8] != MAGIC {
        return Err(Error::InvalidInput("not a field file (bad magic)".into()));
    }
    let u = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let f = |i: usize| f64::from_le_bytes(head[32 + 8 * i..40 + 8 * i].try_into().unwrap());
    if u(0) != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!("field format version {} is not supported", u(0))));
    }
    let (nx, nt, m) = (u(3) as usize, u(4) as usize, u(5) as usize);
    if ![1, 2, 4].contains(&m) {
        return Err(Error::InvalidInput(format!("{m} components per node")));
    }
    let grid = Grid { x0: f(0), t0: f(1), h: f(2), nx, nt };
    let mut body = vec![0u8; 8 * m * nx * nt];
    r.read_exact(&mut body)?;
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawField { header: FieldHeader { dim_n: u(1), grid_n: u(2), components: m as u32, grid }, values })
}

pub fn load_field(path: &Path) -> Result<RawField> {
    read_field(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Serializes rows to a CSV file with a header from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
