//! Uniform grids and the sampled fields that live on them.
//!
//! Every field quantity of the construction (G and its derivatives, the
//! frames, λ, B, C, ρ, the Jacobians and operators) is stored as a
//! [`Field`]: one value per node plus a validity mask. Off-grid evaluation
//! follows one contract: bilinear interpolation from the four corners of the
//! containing cell, all of which must be valid. Bicubic (Catmull–Rom)
//! interpolation is available where the 4×4 stencil is valid.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Row vector times matrix, `v M`, in the row-vector convention.
#[inline]
pub fn vm(v: &Vec2, m: &Mat2) -> Vec2 {
    m.transpose() * v
}

/// Outer product `a b`ᵀ of a column with a row.
#[inline]
pub fn outer(a: &Vec2, b: &Vec2) -> Mat2 {
    a * b.transpose()
}

/// Axis-aligned uniform grid, node `(i, j)` at `(x0 + i h, t0 + j h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x0: f64,
    pub t0: f64,
    pub h: f64,
    pub nx: usize,
    pub nt: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.h
    }

    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.h
    }

    #[inline]
    pub fn point(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.ij(k);
        [self.x(i), self.t(j)]
    }

    pub fn x1(&self) -> f64 {
        self.x(self.nx - 1)
    }

    pub fn t1(&self) -> f64 {
        self.t(self.nt - 1)
    }

    /// Cell containing `p` and the local coordinates in `[0, 1]²`.
    pub fn cell(&self, p: [f64; 2]) -> Option<(usize, usize, f64, f64)> {
        let u = (p[0] - self.x0) / self.h;
        let v = (p[1] - self.t0) / self.h;
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let i = (u.floor() as usize).min(self.nx.checked_sub(2)?);
        let j = (v.floor() as usize).min(self.nt.checked_sub(2)?);
        let fx = u - i as f64;
        let ft = v - j as f64;
        if fx > 1.0 + 1e-12 || ft > 1.0 + 1e-12 {
            return None;
        }
        Some((i, j, fx.min(1.0), ft.min(1.0)))
    }

    /// Index of the node nearest to `p`, if `p` lies in the grid's hull.
    pub fn nearest(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let u = ((p[0] - self.x0) / self.h).round();
        let v = ((p[1] - self.t0) / self.h).round();
        if u < 0.0 || v < 0.0 || u >= self.nx as f64 || v >= self.nt as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }
}

/// Evaluates `f` at every node in parallel.
pub fn par_nodes<T: Send, F>(grid: &Grid, f: F) -> Vec<Option<T>>
where
    F: Fn(usize) -> Option<T> + Sync,
{
    (0..grid.len()).into_par_iter().map(&f).collect()
}

/// Splits per-node pairs into a field and the side values of valid nodes.
pub fn unzip_field<T: Sample, U>(grid: Grid, fill: T, nodes: Vec<Option<(T, U)>>) -> (Field<T>, Vec<U>) {
    let mut values = Vec::with_capacity(nodes.len());
    let mut valid = Vec::with_capacity(nodes.len());
    let mut side = Vec::new();
    for n in nodes {
        match n {
            Some((v, u)) => {
                values.push(v);
                valid.push(true);
                side.push(u);
            }
            None => {
                values.push(fill);
                valid.push(false);
            }
        }
    }
    (Field { grid, values, valid }, side)
}

/// Values that can be interpolated and differenced.
pub trait Sample: Copy + Send + Sync + Add<Output = Self> + Mul<f64, Output = Self> {}
impl<T: Copy + Send + Sync + Add<Output = T> + Mul<f64, Output = T>> Sample for T {}

/// A sampled field with a validity mask.
#[derive(Clone, Debug)]
pub struct Field<T> {
    pub grid: Grid,
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Sample> Field<T> {
    /// All-invalid field with placeholder values.
    pub fn empty(grid: Grid, fill: T) -> Self {
        Field { grid, values: vec![fill; grid.len()], valid: vec![false; grid.len()] }
    }

    /// Builds a field nodewise in parallel; `None` marks the node invalid.
    pub fn from_fn<F>(grid: Grid, fill: T, f: F) -> Self
    where
        F: Fn(usize) -> Option<T> + Sync,
    {
        let out: Vec<Option<T>> = (0..grid.len()).into_par_iter().map(&f).collect();
        let valid = out.iter().map(Option::is_some).collect();
        let values = out.into_iter().map(|v| v.unwrap_or(fill)).collect();
        Field { grid, values, valid }
    }

    /// Field from per-node options, as produced by [`par_nodes`].
    pub fn from_options(grid: Grid, fill: T, nodes: impl IntoIterator<Item = Option<T>>) -> Self {
        let (values, valid) = nodes.into_iter().map(|v| (v.unwrap_or(fill), v.is_some())).unzip();
        Field { grid, values, valid }
    }

    #[inline]
    pub fn at(&self, k: usize) -> Option<T> {
        if self.valid[k] {
            Some(self.values[k])
        } else {
            None
        }
    }

    #[inline]
    pub fn get(&self, i: isize, j: isize) -> Option<T> {
        if i < 0 || j < 0 || i as usize >= self.grid.nx || j as usize >= self.grid.nt {
            return None;
        }
        self.at(self.grid.idx(i as usize, j as usize))
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn map<U: Sample, F>(&self, fill: U, f: F) -> Field<U>
    where
        F: Fn(usize, T) -> Option<U> + Sync,
    {
        Field::from_fn(self.grid, fill, |k| self.at(k).and_then(|v| f(k, v)))
    }

    /// Bilinear interpolation; requires the four cell corners to be valid.
    pub fn bilinear(&self, p: [f64; 2]) -> Option<T> {
        let (i, j, fx, ft) = self.grid.cell(p)?;
        let (i, j) = (i as isize, j as isize);
        let a = self.get(i, j)?;
        let b = self.get(i + 1, j)?;
        let c = self.get(i, j + 1)?;
        let d = self.get(i + 1, j + 1)?;
        Some(a * ((1.0 - fx) * (1.0 - ft)) + b * (fx * (1.0 - ft)) + c * ((1.0 - fx) * ft) + d * (fx * ft))
    }

    /// Catmull–Rom bicubic interpolation; requires the 4×4 stencil.
    pub fn bicubic(&self, p: [f64; 2]) -> Option<T> {
        let (i, j, fx, ft) = self.grid.cell(p)?;
        let wx = catmull_rom(fx);
        let wt = catmull_rom(ft);
        let mut acc: Option<T> = None;
        for (b, wb) in wt.iter().enumerate() {
            let mut row: Option<T> = None;
            for (a, wa) in wx.iter().enumerate() {
                let v = self.get(i as isize + a as isize - 1, j as isize + b as isize - 1)? * *wa;
                row = Some(match row {
                    None => v,
                    Some(r) => r + v,
                });
            }
            let r = row? * *wb;
            acc = Some(match acc {
                None => r,
                Some(s) => s + r,
            });
        }
        acc
    }

    /// Bicubic where the stencil allows it, bilinear otherwise.
    pub fn interp(&self, p: [f64; 2]) -> Option<T> {
        self.bicubic(p).or_else(|| self.bilinear(p))
    }

    /// Fourth-order central first difference along `axis` (0 = x, 1 = t).
    pub fn d1_4(&self, i: usize, j: usize, axis: usize) -> Option<T> {
        let s = |o: isize| self.shifted(i, j, axis, o);
        let h = self.grid.h;
        Some((s(-2)? + s(-1)? * -8.0 + s(1)? * 8.0 + s(2)? * -1.0) * (1.0 / (12.0 * h)))
    }

    /// Second-order central first difference along `axis`.
    pub fn d1_2(&self, i: usize, j: usize, axis: usize) -> Option<T> {
        let s = |o: isize| self.shifted(i, j, axis, o);
        Some((s(1)? + s(-1)? * -1.0) * (0.5 / self.grid.h))
    }

    /// Fourth-order central second difference along `axis`.
    pub fn d2_4(&self, i: usize, j: usize, axis: usize) -> Option<T> {
        let s = |o: isize| self.shifted(i, j, axis, o);
        let h = self.grid.h;
        Some(
            (s(-2)? * -1.0 + s(-1)? * 16.0 + s(0)? * -30.0 + s(1)? * 16.0 + s(2)? * -1.0)
                * (1.0 / (12.0 * h * h)),
        )
    }

    /// Second-order central differences in both axes, `(∂ₓ, ∂ₜ)`.
    pub fn grad2(&self, k: usize) -> Option<(T, T)> {
        let (i, j) = self.grid.ij(k);
        Some((self.d1_2(i, j, 0)?, self.d1_2(i, j, 1)?))
    }

    #[inline]
    fn shifted(&self, i: usize, j: usize, axis: usize, o: isize) -> Option<T> {
        if axis == 0 {
            self.get(i as isize + o, j as isize)
        } else {
            self.get(i as isize, j as isize + o)
        }
    }
}

impl Field<f64> {
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .fold(0.0, |m, (v, _)| m.max(v.abs()))
    }
}

fn catmull_rom(f: f64) -> [f64; 4] {
    let f2 = f * f;
    let f3 = f2 * f;
    [
        0.5 * (-f3 + 2.0 * f2 - f),
        0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
        0.5 * (-3.0 * f3 + 4.0 * f2 + f),
        0.5 * (f3 - f2),
    ]
}

/// Gradient of a scalar field as a column `(∂ₓ, ∂ₜ)` by fourth-order
/// differences, second-order where only the inner stencil is available.
/// The flag reports whether the lower-order fallback was used.
pub fn scalar_gradient(f: &Field<f64>, k: usize) -> Option<(Vec2, bool)> {
    let (i, j) = f.grid.ij(k);
    f.at(k)?;
    match (f.d1_4(i, j, 0), f.d1_4(i, j, 1)) {
        (Some(a), Some(b)) => Some((Vec2::new(a, b), false)),
        _ => Some((Vec2::new(f.d1_2(i, j, 0)?, f.d1_2(i, j, 1)?), true)),
    }
}

/// Frobenius norm of a 2×2 matrix.
#[inline]
pub fn frob(m: &Mat2) -> f64 {
    m.norm()
}

/// Operator 2-norm of a 2×2 matrix.
pub fn op_norm(m: &Mat2) -> f64 {
    let s = m.transpose() * m;
    let tr = s.trace();
    let det = s.determinant();
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    (0.5 * tr + disc).max(0.0).sqrt()
}

/// Largest absolute entry of a 2×2 matrix.
pub fn max_entry(m: &Mat2) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}
