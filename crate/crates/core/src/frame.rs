//! The moving orthonormal frame built from `∇G`, the transversal function
//! `t = G/|∇G|` and the boundary shadow `y = π(X − t vₙ)`.
//!
//! Matrices follow the row convention: `V` has rows `v₁, …, vₙ`, and
//! `P = Vᵀ` changes the Cartesian basis into the frame.

use crate::error::{Error, Result};
use crate::green::GreenData;
use crate::grid::{par_nodes, scalar_gradient, unzip_field, Field, Grid, Mat2, Vec2};
use serde::Serialize;

/// Decreasing Gram–Schmidt seeded by the unit vector `vn`:
/// `ṽᵢ = eᵢ − Σ_{k>i} ⟨eᵢ, v_k⟩ v_k` for `i = n−1, …, 1`.
///
/// Returns the rows `v₁, …, vₙ` and the smallest `|ṽᵢ|`, or `None` if some
/// `|ṽᵢ| < 1e−6`.
pub fn frame_from_normal(vn: &[f64]) -> Option<(Vec<Vec<f64>>, f64)> {
    let n = vn.len();
    let mut rows = vec![Vec::new(); n];
    rows[n - 1] = vn.to_vec();
    let mut min_norm = f64::INFINITY;
    for i in (0..n - 1).rev() {
        let mut v: Vec<f64> = (0..n).map(|c| if c == i { 1.0 } else { 0.0 }).collect();
        for row in rows.iter().skip(i + 1) {
            let c = row[i];
            for (a, b) in v.iter_mut().zip(row) {
                *a -= c * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return None;
        }
        min_norm = min_norm.min(norm);
        rows[i] = v.into_iter().map(|a| a / norm).collect();
    }
    Some((rows, min_norm))
}

/// Empirical constants of the non-degeneracy conditions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct H1H2Report {
    /// `sup G/(δ|∇G|)`.
    pub c_h: f64,
    /// `sup |∇G|/∂ₙG`.
    pub c_2: f64,
    /// `inf δ ∂ₙG/G`.
    pub c_dn: f64,
    /// `min ⟨vₙ, eₙ⟩`, to compare with `1/√(1+M²)`.
    pub min_vn_en: f64,
    pub admissible: usize,
}

/// Checks `G > 0`, `∂ₙG > 0` and reports the constants of (H1), (H2) and
/// `∂ₙG ≥ cG/δ` over admissible nodes.
pub fn check_h1_h2(gd: &GreenData) -> Result<H1H2Report> {
    let nodes = gd.admissible_nodes();
    let mut r = H1H2Report {
        c_h: 0.0,
        c_2: 0.0,
        c_dn: f64::INFINITY,
        min_vn_en: f64::INFINITY,
        admissible: nodes.len(),
    };
    for &k in &nodes {
        let g = gd.g.values[k];
        let dg = gd.grad.values[k];
        let d = gd.delta.values[k];
        let p = gd.grid.point(k);
        if !(g > 0.0) {
            return Err(Error::invariant("frame.positivity", format!("G = {g:.3e} at ({}, {})", p[0], p[1])));
        }
        if !(dg[1] > 0.0) {
            return Err(Error::invariant("frame.dn_g_positive", format!("∂ₙG = {:.3e} at ({}, {})", dg[1], p[0], p[1])));
        }
        let norm = dg.norm();
        r.c_h = r.c_h.max(g / (d * norm));
        r.c_2 = r.c_2.max(norm / dg[1]);
        r.c_dn = r.c_dn.min(d * dg[1] / g);
        r.min_vn_en = r.min_vn_en.min(dg[1] / norm);
    }
    if !(r.c_h.is_finite() && r.c_2.is_finite()) {
        return Err(Error::invariant("frame.h1_h2", format!("C_H = {}, C₂ = {}", r.c_h, r.c_2)));
    }
    Ok(r)
}

/// Frame, transversal fields and their derivatives.
#[derive(Clone, Debug)]
pub struct FrameField {
    pub grid: Grid,
    /// Rows `v₁, v₂`, wherever `∇G` is available.
    pub v: Field<Mat2>,
    pub min_tilde: f64,
    pub h1h2: H1H2Report,
    /// `∂ₓV` and `∂ₜV` at admissible nodes.
    pub dv_x: Field<Mat2>,
    pub dv_t: Field<Mat2>,
    /// `sup |∇v₁|/|∇vₙ|` over admissible nodes with `∇vₙ ≠ 0`.
    pub dv_ratio: f64,
    pub t: Field<f64>,
    pub y: Field<f64>,
    /// `∇t` and `∇y` as columns, wherever the sampled fields allow.
    pub grad_t: Field<Vec2>,
    pub grad_y: Field<Vec2>,
    /// Range of `t/δ` over admissible nodes.
    pub t_over_delta: (f64, f64),
    pub admissible: Vec<bool>,
}

impl FrameField {
    pub fn vn(&self, k: usize) -> Vec2 {
        let v = self.v.values[k];
        Vec2::new(v[(1, 0)], v[(1, 1)])
    }

    pub fn v1(&self, k: usize) -> Vec2 {
        let v = self.v.values[k];
        Vec2::new(v[(0, 0)], v[(0, 1)])
    }

    /// `P = Vᵀ`, whose columns are the frame vectors.
    pub fn p(&self, k: usize) -> Mat2 {
        self.v.values[k].transpose()
    }

    pub fn admissible_nodes(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&k| self.admissible[k]).collect()
    }

    /// `|∇vᵢ|` (Frobenius) for row `i`.
    pub fn grad_v_norm(&self, k: usize, i: usize) -> f64 {
        let (a, b) = (self.dv_x.values[k], self.dv_t.values[k]);
        (a.row(i).norm_squared() + b.row(i).norm_squared()).sqrt()
    }
}

/// Builds `V` from `∇G` after checking (H1)/(H2).
pub fn build_frame(gd: &GreenData) -> Result<FrameField> {
    let h1h2 = check_h1_h2(gd)?;
    let grid = gd.grid;
    let nodes = par_nodes(&grid, |k| {
        let dg = gd.grad.at(k)?;
        let vn = dg / dg.norm();
        let (i, j) = grid.ij(k);
        Some(match frame_from_normal(&[vn[0], vn[1]]) {
            Some((rows, m)) => Ok((Mat2::new(rows[0][0], rows[0][1], rows[1][0], rows[1][1]), m)),
            None => {
                let norm = (1.0 - vn[0] * vn[0]).max(0.0).sqrt();
                Err(Error::FrameDegenerate { i, j, norm })
            }
        })
    });
    let nodes: Vec<Option<(Mat2, f64)>> = nodes.into_iter().map(|n| n.transpose()).collect::<Result<_>>()?;
    let (v, norms) = unzip_field(grid, Mat2::zeros(), nodes);
    let min_tilde = norms.into_iter().fold(f64::INFINITY, f64::min);
    let admissible: Vec<bool> = (0..grid.len()).map(|k| gd.admissible(k)).collect();
    for k in 0..grid.len() {
        if !admissible[k] {
            continue;
        }
        let m = v.values[k];
        let det = m.determinant();
        let sign = m[(0, 0)];
        if (det - 1.0).abs() > 1e-12 || !(sign > 0.0) {
            let p = grid.point(k);
            return Err(Error::invariant(
                "frame.orientation",
                format!("det V = {det}, ⟨v₁, e₁⟩ = {sign} at ({}, {})", p[0], p[1]),
            ));
        }
    }
    let dv_x = Field::from_fn(grid, Mat2::zeros(), |k| {
        let (i, j) = grid.ij(k);
        admissible[k].then(|| v.d1_4(i, j, 0).or_else(|| v.d1_2(i, j, 0))).flatten()
    });
    let dv_t = Field::from_fn(grid, Mat2::zeros(), |k| {
        let (i, j) = grid.ij(k);
        admissible[k].then(|| v.d1_4(i, j, 1).or_else(|| v.d1_2(i, j, 1))).flatten()
    });
    let empty = Field::empty(grid, 0.0);
    let mut ff = FrameField {
        grid,
        v,
        min_tilde,
        h1h2,
        dv_x,
        dv_t,
        dv_ratio: 0.0,
        t: empty.clone(),
        y: empty,
        grad_t: Field::empty(grid, Vec2::zeros()),
        grad_y: Field::empty(grid, Vec2::zeros()),
        t_over_delta: (f64::NAN, f64::NAN),
        admissible,
    };
    let mut ratio: f64 = 0.0;
    for k in ff.admissible_nodes() {
        if !(ff.dv_x.valid[k] && ff.dv_t.valid[k]) {
            continue;
        }
        let n = ff.grad_v_norm(k, 1);
        if n > 1e-12 {
            ratio = ratio.max(ff.grad_v_norm(k, 0) / n);
        }
    }
    ff.dv_ratio = ratio;
    Ok(ff)
}

/// Fills `t`, `y`, `∇t`, `∇y`; derivatives by differencing the sampled
/// fields, not by the chain rule.
pub fn transversal_fields(gd: &GreenData, mut ff: FrameField) -> Result<FrameField> {
    let grid = ff.grid;
    ff.t = Field::from_fn(grid, 0.0, |k| {
        let dg = gd.grad.at(k)?;
        Some(gd.g.values[k] / dg.norm())
    });
    ff.y = Field::from_fn(grid, 0.0, |k| {
        let t = ff.t.at(k)?;
        let vn = ff.v.at(k)?.row(1).transpose();
        Some(grid.point(k)[0] - t * vn[0])
    });
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for k in ff.admissible_nodes() {
        let t = ff.t.values[k];
        if !(t > 0.0) {
            let p = grid.point(k);
            return Err(Error::invariant("frame.t_positive", format!("t = {t:.3e} at ({}, {})", p[0], p[1])));
        }
        let r = t / gd.delta.values[k];
        lo = lo.min(r);
        hi = hi.max(r);
    }
    ff.t_over_delta = (lo, hi);
    // Beyond the admissible set too, so that quantities built from ∇t and
    // ∇y can themselves be differenced at admissible nodes.
    ff.grad_t = Field::from_fn(grid, Vec2::zeros(), |k| scalar_gradient(&ff.t, k).map(|g| g.0));
    ff.grad_y = Field::from_fn(grid, Vec2::zeros(), |k| scalar_gradient(&ff.y, k).map(|g| g.0));
    Ok(ff)
}

/// Carleson candidate `δ max_i |∇vᵢ|`.
pub fn candidate_dv(gd: &GreenData, ff: &FrameField) -> Field<f64> {
    Field::from_fn(ff.grid, 0.0, |k| {
        (ff.dv_x.valid[k] && ff.dv_t.valid[k])
            .then(|| gd.delta.values[k] * ff.grad_v_norm(k, 0).max(ff.grad_v_norm(k, 1)))
    })
}

/// Carleson candidate `|∇t − vₙᵀ|`, which is also `∇(G/|∇G|) − ∇G/|∇G|`.
pub fn candidate_dt(ff: &FrameField) -> Field<f64> {
    Field::from_fn(ff.grid, 0.0, |k| ff.admissible[k].then(|| Some((ff.grad_t.at(k)? - ff.vn(k)).norm())).flatten())
}

/// Carleson candidate `|∇y − I + vₙᵀπ(vₙ)|`.
pub fn candidate_dy(ff: &FrameField) -> Field<f64> {
    Field::from_fn(ff.grid, 0.0, |k| {
        if !ff.admissible[k] {
            return None;
        }
        let vn = ff.vn(k);
        Some((ff.grad_y.at(k)? - Vec2::new(1.0, 0.0) + vn * vn[0]).norm())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, GraphFamily};
    use crate::green::{solve_green, GreenOptions};

    fn frame(fam: GraphFamily, n: usize) -> (GreenData, FrameField) {
        let dom = build_domain(fam, 2, 2.0, n).unwrap();
        let gd = solve_green(&dom, n, &GreenOptions { richardson: false }).unwrap();
        let ff = transversal_fields(&gd, build_frame(&gd).unwrap()).unwrap();
        (gd, ff)
    }

    #[test]
    fn decreasing_gram_schmidt() {
        let (rows, m) = frame_from_normal(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(rows[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(rows[1], vec![0.0, 1.0, 0.0]);
        assert_eq!(m, 1.0);
        let s = 0.5f64.sqrt();
        let (rows, _) = frame_from_normal(&[-s, s]).unwrap();
        // v₁ is vₙ rotated by −π/2, with ⟨v₁, e₁⟩ > 0.
        assert!((rows[0][0] - s).abs() < 1e-15 && (rows[0][1] - s).abs() < 1e-15);
        assert!(frame_from_normal(&[1.0, 0.0]).is_none());
    }

    #[test]
    fn flat_frame_is_cartesian() {
        let (gd, ff) = frame(GraphFamily::Flat, 64);
        let r = &ff.h1h2;
        assert!((r.c_h - 1.0).abs() < 1e-8 && (r.c_2 - 1.0).abs() < 1e-8 && (r.c_dn - 1.0).abs() < 1e-8);
        for k in ff.admissible_nodes() {
            let p = ff.grid.point(k);
            assert!((ff.v.values[k] - Mat2::identity()).norm() < 1e-8);
            assert!((ff.t.values[k] - p[1]).abs() < 1e-8);
            assert!((ff.y.values[k] - p[0]).abs() < 1e-8);
        }
        assert!(candidate_dt(&ff).max_abs() < 1e-6);
        assert!(candidate_dy(&ff).max_abs() < 1e-6);
        assert!(candidate_dv(&gd, &ff).max_abs() < 1e-6);
    }

    #[test]
    fn tilted_c2_is_secant() {
        let m: f64 = 0.75;
        let (_, ff) = frame(GraphFamily::Tilted { slope: m }, 64);
        assert!((ff.h1h2.c_2 - (1.0 + m * m).sqrt()).abs() < 1e-8);
        assert!(ff.h1h2.min_vn_en >= 1.0 / (1.0 + m * m).sqrt() - 1e-8);
    }

    #[test]
    fn cone_axis_transversal_ratio() {
        let (gd, ff) = frame(GraphFamily::Cone { lip: 1.0 }, 128);
        let (i, j) = ff.grid.nearest([0.0, 1.0]).unwrap();
        let k = ff.grid.idx(i, j);
        let r = ff.grid.t(j);
        assert!((ff.t.values[k] - r / 2.0).abs() < 1e-4);
        assert!((ff.t.values[k] / gd.delta.values[k] - 0.5f64.sqrt()).abs() < 1e-4);
        let (lo, hi) = ff.t_over_delta;
        // t/δ = G/(δ|∇G|): bounded above by C_H and below by the inverse
        // gradient-bound constant; the closed form gives [1/√2, 1].
        let c_grad = crate::green::check_gradient_bound(&gd).unwrap().sup;
        assert!(lo >= 1.0 / c_grad - 1e-12 && hi <= ff.h1h2.c_h + 1e-12);
        assert!(lo >= 0.5f64.sqrt() - 1e-3 && hi <= 1.0 + 1e-3, "t/δ ∈ [{lo}, {hi}]");
        // In the plane v₁ is a rotation of vₙ, so |∇v₁| = |∇vₙ|.
        assert!((ff.dv_ratio - 1.0).abs() < 1e-9);
        for k in ff.admissible_nodes() {
            let v = ff.v.values[k];
            assert!((v * v.transpose() - Mat2::identity()).norm() < 1e-12);
            assert!(ff.h1h2.min_vn_en >= 0.5f64.sqrt() - 1e-6);
        }
    }
}
