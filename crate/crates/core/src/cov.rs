//! The perturbed frame `W`, the rotation `𝒪`, the change of variables `ρ`
//! with its Jacobian `J` in the `(v, w)` bases, and the operators `A_ρ`, `A₀`.
//!
//! In the plane `A_∥ = ⟨w̄₁, w₁⟩` is a scalar and `a = det A_∥ = A_∥`, so
//! `J₀ = a I` and `A₀ = det J₀ · P J₀^{-T} J₀^{-1} Pᵀ` is the identity up to
//! rounding. The general formulas are still evaluated as written, so the
//! diagnostics measure the assembly rather than assume it.

use crate::error::{Error, Result};
use crate::frame::FrameField;
use crate::geometry::{BiLipMap, GraphDomain};
use crate::green::GreenData;
use crate::grid::{max_entry, op_norm, par_nodes, scalar_gradient, vm, Field, Grid, Mat2, Vec2};
use crate::perturb::{tensor_gradient, Displacement, PerturbationData};
use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Smallest admissible `|w̃ᵢ|`.
pub const W_TILDE_MIN: f64 = 0.5;
/// Largest fraction of admissible nodes with singular `J`.
pub const MAX_SINGULAR_FRACTION: f64 = 0.01;
/// Beyond this `‖A₀ − I‖∞` the ellipticity bounds are reported, not asserted.
pub const EPS_CAP: f64 = 0.5;

#[inline]
fn rows(a: Vec2, b: Vec2) -> Mat2 {
    Mat2::new(a[0], a[1], b[0], b[1])
}

#[inline]
fn row(m: &Mat2, i: usize) -> Vec2 {
    Vec2::new(m[(i, 0)], m[(i, 1)])
}

/// Increasing Gram–Schmidt of `w̄ᵢ = vᵢ(I + B)`. Returns `W̄`, `W` and the
/// smaller of `|w̃₁|`, `|w̃₂|`.
pub fn w_frame_at(v: &Mat2, b: &Mat2) -> (Mat2, Mat2, f64) {
    let ib = Mat2::identity() + b;
    let wb1 = vm(&row(v, 0), &ib);
    let wb2 = vm(&row(v, 1), &ib);
    let n1 = wb1.norm();
    let w1 = wb1 / n1;
    let wt2 = wb2 - w1 * wb2.dot(&w1);
    let n2 = wt2.norm();
    (rows(wb1, wb2), rows(w1, wt2 / n2), n1.min(n2))
}

/// `A = det M · P M^{-T} M^{-1} Pᵀ`, the pull-back of the Laplacian written
/// in the frame `P`. `None` if `M` is singular.
pub fn pullback(p: &Mat2, m: &Mat2) -> Option<Mat2> {
    let inv = m.try_inverse()?;
    Some(p * inv.transpose() * inv * p.transpose() * m.determinant())
}

/// Algebraic and analytic diagnostics, all over admissible nodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CovReport {
    pub admissible: usize,
    pub min_w_tilde: f64,
    /// `max |W Wᵀ − I|`.
    pub w_orthonormality: f64,
    /// `max |𝒪ᵀ𝒪 − I|`.
    pub o_orthogonality: f64,
    /// `max |wᵢ − vᵢ𝒪|`.
    pub w_consistency: f64,
    /// `max |⟨wᵢ, vⱼ⟩ − Iᵢⱼ|`.
    pub closeness: f64,
    /// `max |⟨w̄ᵢ, wⱼ⟩|` for `j > i`.
    pub upper_triangularity: f64,
    /// `max |det J₀ − a²|`.
    pub det_j0_defect: f64,
    /// `‖J − I‖∞`, `‖J₀ − I‖∞`, `‖A₀ − I‖∞` (operator norms) and
    /// `max |𝒪 − I|` (entries).
    pub sup_j_minus_i: f64,
    pub sup_j0_minus_i: f64,
    pub sup_a0_minus_i: f64,
    pub sup_o_minus_i: f64,
    /// `sup |∇ρ − I|` with `∇ρ = P J Pᵀ 𝒪`.
    pub sup_grad_rho_minus_i: f64,
    /// `max |P J Pᵀ 𝒪 − Dρ|` against fourth-order differences of `ρ`.
    pub jacobian_cross_check: f64,
    pub min_det_grad_rho: f64,
    /// Nodes where the directional stencil left the sampled `ρ`.
    pub stencil_excluded: usize,
    /// Nodes where `J` is singular.
    pub singular_excluded: usize,
    /// `max |A₀vₙᵀ − vₙᵀ|`.
    pub a0_vn_defect: f64,
    /// `max |A₀∇G − ∇G| / |∇G|`.
    pub a0_grad_g_defect: f64,
    pub a0_symmetry: f64,
    /// Extreme eigenvalues of `A₀`.
    pub a0_spectrum: (f64, f64),
    /// False when `‖A₀ − I‖∞ > 1/2`; the ellipticity bounds are then only
    /// reported.
    pub perturbative: bool,
    pub divergence: DivergenceCheck,
}

/// Discrete divergence of `A₀∇G` against that of `∇G`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DivergenceCheck {
    pub residual_a0: f64,
    pub residual_laplacian: f64,
    pub difference: f64,
}

/// Every field of the change of variables.
#[derive(Clone, Debug)]
pub struct CovField {
    pub grid: Grid,
    /// Rows `w̄ᵢ`.
    pub wbar: Field<Mat2>,
    /// Rows `wᵢ`.
    pub w: Field<Mat2>,
    /// `𝒪 = VᵀW`, so that `W = V𝒪`.
    pub o: Field<Mat2>,
    /// The `1×1` block `A_∥ = ⟨w̄₁, w₁⟩`.
    pub a_par: Field<f64>,
    /// `a = det A_∥`.
    pub a: Field<f64>,
    pub j0: Field<Mat2>,
    pub rho: Field<Vec2>,
    /// `Jᵢⱼ = ⟨∂_{vᵢ}ρ, wⱼ⟩` at admissible nodes.
    pub j: Field<Mat2>,
    pub j1: Field<Mat2>,
    /// `∇ρ = P J Pᵀ 𝒪`.
    pub grad_rho: Field<Mat2>,
    pub a_rho: Field<Mat2>,
    pub a_0: Field<Mat2>,
    /// Admissible nodes of the Green data where `J` is usable.
    pub admissible: Vec<bool>,
    pub report: CovReport,
}

impl CovField {
    pub fn admissible_nodes(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&k| self.admissible[k]).collect()
    }

    fn sup_by(&self, f: &Field<Mat2>, norm: fn(&Mat2) -> f64, shift: Mat2) -> f64 {
        self.admissible_nodes().into_iter().filter_map(|k| f.at(k)).map(|m| norm(&(m - shift))).fold(0.0, f64::max)
    }

    fn on_admissible(&self, f: Field<f64>) -> Field<f64> {
        f.map(0.0, |k, v| self.admissible[k].then_some(v))
    }

    /// Carleson candidate `|J₁|`.
    pub fn candidate_j1(&self) -> Field<f64> {
        self.on_admissible(self.j1.map(0.0, |_, m| Some(op_norm(&m))))
    }

    /// Carleson candidate `t|∇𝒪|`.
    pub fn candidate_t_grad_o(&self, ff: &FrameField) -> Field<f64> {
        self.on_admissible(tensor_gradient(&self.o, &ff.t))
    }

    /// Carleson candidate `t|∇J₀|`.
    pub fn candidate_t_grad_j0(&self, ff: &FrameField) -> Field<f64> {
        self.on_admissible(tensor_gradient(&self.j0, &ff.t))
    }

    /// Carleson candidate `t|∇a|`; in the plane also `t|∇A_∥|`.
    pub fn candidate_t_grad_a(&self, ff: &FrameField) -> Field<f64> {
        Field::from_fn(self.grid, 0.0, |k| {
            if !self.admissible[k] {
                return None;
            }
            Some(ff.t.at(k)? * scalar_gradient(&self.a, k)?.0.norm())
        })
    }

    /// Carleson candidate `|A_ρ − A₀|`.
    pub fn candidate_a_rho_minus_a0(&self) -> Field<f64> {
        Field::from_fn(self.grid, 0.0, |k| {
            self.admissible[k].then(|| Some(op_norm(&(self.a_rho.at(k)? - self.a_0.at(k)?)))).flatten()
        })
    }
}

/// Builds `W̄`, `W` and `𝒪` wherever `B` is sampled.
pub fn build_w_frame(ff: &FrameField, pd: &PerturbationData) -> Result<CovField> {
    let grid = ff.grid;
    let nodes = par_nodes(&grid, |k| {
        let v = ff.v.at(k)?;
        let b = pd.b.at(k)?;
        let (wbar, w, m) = w_frame_at(&v, &b);
        if m < W_TILDE_MIN {
            if ff.admissible[k] {
                let (i, j) = grid.ij(k);
                return Some(Err(Error::WFrameDegenerate { i, j, norm: m }));
            }
            return None;
        }
        Some(Ok((wbar, w, v.transpose() * w, m)))
    });
    let nodes: Vec<Option<(Mat2, Mat2, Mat2, f64)>> = nodes.into_iter().map(|n| n.transpose()).collect::<Result<_>>()?;
    let pick = |f: fn(&(Mat2, Mat2, Mat2, f64)) -> Mat2| {
        Field::from_options(grid, Mat2::zeros(), nodes.iter().map(|n| n.as_ref().map(f)))
    };
    let wbar = pick(|n| n.0);
    let w = pick(|n| n.1);
    let o = pick(|n| n.2);

    let mut rep = CovReport { min_w_tilde: f64::INFINITY, perturbative: true, ..Default::default() };
    let i2 = Mat2::identity();
    for k in 0..grid.len() {
        if !(ff.admissible[k] && w.valid[k]) {
            continue;
        }
        let (wk, ok, vk) = (w.values[k], o.values[k], ff.v.values[k]);
        rep.min_w_tilde = rep.min_w_tilde.min(nodes[k].as_ref().map_or(f64::INFINITY, |n| n.3));
        rep.w_orthonormality = rep.w_orthonormality.max(max_entry(&(wk * wk.transpose() - i2)));
        rep.o_orthogonality = rep.o_orthogonality.max(max_entry(&(ok.transpose() * ok - i2)));
        rep.w_consistency = rep.w_consistency.max(max_entry(&(vk * ok - wk)));
        rep.closeness = rep.closeness.max(max_entry(&(wk * vk.transpose() - i2)));
        rep.sup_o_minus_i = rep.sup_o_minus_i.max(max_entry(&(ok - i2)));
    }
    if rep.w_orthonormality > 1e-12 || rep.o_orthogonality > 1e-10 || rep.w_consistency > 1e-10 {
        return Err(Error::invariant(
            "cov.w_frame",
            format!(
                "|WWᵀ − I| = {:.2e}, |𝒪ᵀ𝒪 − I| = {:.2e}, |V𝒪 − W| = {:.2e}",
                rep.w_orthonormality, rep.o_orthogonality, rep.w_consistency
            ),
        ));
    }
    let empty = Field::empty(grid, Mat2::zeros());
    Ok(CovField {
        grid,
        wbar,
        w,
        o,
        a_par: Field::empty(grid, 0.0),
        a: Field::empty(grid, 0.0),
        j0: empty.clone(),
        rho: Field::empty(grid, Vec2::zeros()),
        j: empty.clone(),
        j1: empty.clone(),
        grad_rho: empty.clone(),
        a_rho: empty.clone(),
        a_0: empty,
        admissible: ff.admissible.clone(),
        report: rep,
    })
}

/// Fills `A_∥`, `a` and `J₀`, checking upper-triangularity and
/// `det J₀ = a²`.
pub fn build_j0(cf: &mut CovField) -> Result<()> {
    let grid = cf.grid;
    cf.a_par = cf.w.map(0.0, |k, w| Some(row(&cf.wbar.values[k], 0).dot(&row(&w, 0))));
    cf.a = cf.a_par.map(0.0, |_, ap| Some(ap));
    cf.j0 = cf.a.map(Mat2::zeros(), |k, a| Some(Mat2::new(cf.a_par.values[k], 0.0, 0.0, a)));
    let mut upper: f64 = 0.0;
    let mut det: f64 = 0.0;
    let mut sup: f64 = 0.0;
    for k in 0..grid.len() {
        if !(cf.admissible[k] && cf.j0.valid[k]) {
            continue;
        }
        upper = upper.max(row(&cf.wbar.values[k], 0).dot(&row(&cf.w.values[k], 1)).abs());
        let a = cf.a.values[k];
        let j0 = cf.j0.values[k];
        det = det.max((j0.determinant() - a * a).abs());
        sup = sup.max(op_norm(&(j0 - Mat2::identity())));
    }
    cf.report.upper_triangularity = upper;
    cf.report.det_j0_defect = det;
    cf.report.sup_j0_minus_i = sup;
    if upper > 1e-12 || det > 1e-10 {
        return Err(Error::invariant(
            "cov.j0",
            format!("|⟨w̄₁, w₂⟩| = {upper:.2e}, |det J₀ − a²| = {det:.2e}"),
        ));
    }
    Ok(())
}

/// Samples `ρ = X − t vₙ + λ + a t wₙ`, then `J` by central differences
/// along `vᵢ` with step `min(h, δ/8)` on the interpolated `ρ`, `J₁ = J − J₀`
/// and `∇ρ = P J Pᵀ 𝒪`, cross-checked against Cartesian differences.
pub fn build_rho(gd: &GreenData, ff: &FrameField, pd: &PerturbationData, cf: &mut CovField) -> Result<()> {
    let grid = cf.grid;
    cf.rho = Field::from_fn(grid, Vec2::zeros(), |k| {
        let p = grid.point(k);
        let t = ff.t.at(k)?;
        let w = cf.w.at(k)?;
        Some(Vec2::new(p[0], p[1]) - ff.vn(k) * t + pd.lambda.at(k)? + row(&w, 1) * (cf.a.at(k)? * t))
    });
    let h = grid.h;
    let rho = &cf.rho;
    let jac = par_nodes(&grid, |k| {
        if !(cf.admissible[k] && cf.w.valid[k]) {
            return None;
        }
        let p = grid.point(k);
        let s = h.min(gd.delta.values[k] / 8.0);
        let v = ff.v.values[k];
        let mut d = Mat2::zeros();
        for i in 0..2 {
            let e = row(&v, i) * s;
            let plus = rho.interp([p[0] + e[0], p[1] + e[1]]);
            let minus = rho.interp([p[0] - e[0], p[1] - e[1]]);
            let (Some(a), Some(b)) = (plus, minus) else { return Some(None) };
            let dr = (a - b) / (2.0 * s);
            d[(i, 0)] = dr[0];
            d[(i, 1)] = dr[1];
        }
        Some(Some(d * cf.w.values[k].transpose()))
    });
    let mut stencil = 0;
    let j = Field::from_options(
        grid,
        Mat2::zeros(),
        jac.into_iter().map(|n| {
            if matches!(n, Some(None)) {
                stencil += 1;
            }
            n.flatten()
        }),
    );
    for (k, ok) in cf.admissible.iter_mut().enumerate() {
        *ok &= j.valid[k];
    }
    cf.j1 = j.map(Mat2::zeros(), |k, m| Some(m - cf.j0.at(k)?));
    cf.grad_rho = j.map(Mat2::zeros(), |k, m| {
        let p = ff.p(k);
        Some(p * m * p.transpose() * cf.o.at(k)?)
    });
    cf.j = j;

    let mut cross: f64 = 0.0;
    for k in cf.admissible_nodes() {
        let (i, jj) = grid.ij(k);
        if let (Some(dx), Some(dt)) = (cf.rho.d1_4(i, jj, 0), cf.rho.d1_4(i, jj, 1)) {
            let num = Mat2::new(dx[0], dx[1], dt[0], dt[1]);
            cross = cross.max(op_norm(&(num - cf.grad_rho.values[k])));
        }
    }
    cf.report.stencil_excluded = stencil;
    cf.report.jacobian_cross_check = cross;
    cf.report.sup_j_minus_i = cf.sup_by(&cf.j, op_norm, Mat2::identity());
    cf.report.sup_grad_rho_minus_i = cf.sup_by(&cf.grad_rho, op_norm, Mat2::identity());
    Ok(())
}

/// Assembles `A_ρ` from `∇ρ` and `A₀` from `J₀`, excluding singular `J`,
/// and checks `A₀vₙᵀ = vₙᵀ`, symmetry, ellipticity inside the perturbative
/// regime and the discrete identity `div A₀∇G = div ∇G`.
pub fn assemble_operators(gd: &GreenData, ff: &FrameField, cf: &mut CovField) -> Result<()> {
    let grid = cf.grid;
    cf.a_0 = cf.j0.map(Mat2::zeros(), |k, j0| pullback(&ff.p(k), &j0));
    let total = cf.admissible_nodes().len();
    let mut singular = 0;
    let mut min_det = f64::INFINITY;
    let mut a_rho = Field::empty(grid, Mat2::zeros());
    for k in 0..grid.len() {
        let Some(g) = cf.grad_rho.at(k).filter(|_| cf.admissible[k]) else { continue };
        let d = g.determinant();
        if !(d.is_finite() && d > 1e-8) {
            singular += 1;
            cf.admissible[k] = false;
            continue;
        }
        min_det = min_det.min(d);
        let inv = g.try_inverse().expect("nonsingular");
        a_rho.values[k] = inv.transpose() * inv * d;
        a_rho.valid[k] = true;
    }
    cf.a_rho = a_rho;
    let rep = &mut cf.report;
    rep.singular_excluded = singular;
    rep.min_det_grad_rho = min_det;
    if total > 0 && singular as f64 > MAX_SINGULAR_FRACTION * total as f64 {
        return Err(Error::invariant("cov.singular_j", format!("J singular at {singular} of {total} admissible nodes")));
    }

    let i2 = Mat2::identity();
    let (mut vn_def, mut g_def, mut sym, mut sup) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let nodes: Vec<usize> = (0..grid.len()).filter(|&k| cf.admissible[k]).collect();
    for &k in &nodes {
        let a0 = cf.a_0.values[k];
        let vn = ff.vn(k);
        vn_def = vn_def.max((a0 * vn - vn).norm());
        let dg = gd.grad.values[k];
        g_def = g_def.max((a0 * dg - dg).norm() / dg.norm());
        sym = sym.max(max_entry(&(a0 - a0.transpose())));
        sup = sup.max(op_norm(&(a0 - i2)));
        let ev = a0.symmetric_eigenvalues();
        lo = lo.min(ev.min());
        hi = hi.max(ev.max());
    }
    rep.admissible = nodes.len();
    rep.a0_vn_defect = vn_def;
    rep.a0_grad_g_defect = g_def;
    rep.a0_symmetry = sym;
    rep.sup_a0_minus_i = sup;
    rep.a0_spectrum = (lo, hi);
    rep.perturbative = sup <= EPS_CAP;
    if vn_def > 1e-10 || sym > 1e-10 {
        return Err(Error::invariant("cov.a0", format!("|A₀vₙᵀ − vₙᵀ| = {vn_def:.2e}, asymmetry {sym:.2e}")));
    }
    if rep.perturbative && !nodes.is_empty() && (lo < 0.5 || hi > 2.0) {
        return Err(Error::invariant("cov.ellipticity", format!("A₀ spectrum [{lo:.4}, {hi:.4}] ⊄ [1/2, 2]")));
    }
    if !(min_det > 0.0) && !nodes.is_empty() {
        return Err(Error::invariant("cov.orientation", format!("min det ∇ρ = {min_det:.3e}")));
    }

    let flux = Field::from_fn(grid, Vec2::zeros(), |k| Some(cf.a_0.at(k)? * gd.grad.at(k)?));
    let div = |f: &Field<Vec2>, k: usize| -> Option<f64> {
        let (i, j) = grid.ij(k);
        Some(f.d1_2(i, j, 0)?[0] + f.d1_2(i, j, 1)?[1])
    };
    let mut dc = DivergenceCheck::default();
    for &k in &nodes {
        if let (Some(a), Some(l)) = (div(&flux, k), div(&gd.grad, k)) {
            dc.residual_a0 = dc.residual_a0.max(a.abs());
            dc.residual_laplacian = dc.residual_laplacian.max(l.abs());
            dc.difference = dc.difference.max((a - l).abs());
        }
    }
    rep.divergence = dc;
    let floor = 1e-10 * gd.max_grad() / grid.h;
    if dc.difference > dc.residual_laplacian.max(floor) {
        return Err(Error::invariant(
            "cov.divergence",
            format!("div A₀∇G and ΔG differ by {:.3e} (ΔG residual {:.3e})", dc.difference, dc.residual_laplacian),
        ));
    }
    Ok(())
}

/// Runs the four stages in order.
pub fn build_cov(gd: &GreenData, ff: &FrameField, pd: &PerturbationData) -> Result<CovField> {
    let mut cf = build_w_frame(ff, pd)?;
    build_j0(&mut cf)?;
    build_rho(gd, ff, pd, &mut cf)?;
    assemble_operators(gd, ff, &mut cf)?;
    Ok(cf)
}

// ---------------------------------------------------------------------------
// Diffeomorphism evidence

/// Collar, inversion and near-identity evidence for `ρ : Ω₀ → Ω`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BijectionReport {
    /// Boundary samples used, `|x| ≤ R/2`.
    pub collar_samples: usize,
    /// `max dist(ρ̂(b), ∂Ω) / (h + ε t)` with `ρ̂(b)` extrapolated from
    /// `b + 4hν` and `b + 8hν`, and `t` taken at `b + 4hν`.
    pub boundary_constant: f64,
    /// `max |ρ̂(b) − Φ(b)|`.
    pub boundary_identity: f64,
    pub boundary_ok: bool,
    /// `sup |ρ(X) − X − h(π(X))| / (ε t)` over admissible nodes, or the
    /// absolute deviation when `ε = 0`.
    pub anchor_constant: f64,
    pub targets: usize,
    /// Largest `|X − X*|` over converged inversions.
    pub max_round_trip: f64,
    /// Targets whose inversion failed, as the original points.
    pub failures: Vec<[f64; 2]>,
    pub sup_grad_rho_minus_i: f64,
}

/// Constant in `dist(ρ̂(b), ∂Ω) ≤ C (h + ε t)`.
pub const BOUNDARY_C: f64 = 4.0;
pub const ROUND_TRIP_TOL: f64 = 1e-6;

/// Evidence that `ρ` maps `Ω₀` onto `Ω`. Injectivity is not proved by any
/// finite sample; the inversion test is a necessary condition only.
pub fn check_boundary_and_bijection(
    cf: &CovField,
    ff: &FrameField,
    disp: &Displacement,
    dom_p: &GraphDomain,
    targets: usize,
    seed: u64,
) -> Result<BijectionReport> {
    let dom0 = disp.domain();
    let map: &BiLipMap = disp.map();
    let eps = disp.eps;
    let h = cf.grid.h;
    let mut rep = BijectionReport { boundary_ok: true, ..Default::default() };

    for b in dom0.samples.iter().filter(|b| b.x.abs() <= 0.5 * dom0.r) {
        let at = |s: f64| [b.x + s * b.normal[0], b.t + s * b.normal[1]];
        let (Some(r1), Some(r2), Some(t1)) = (cf.rho.interp(at(4.0 * h)), cf.rho.interp(at(8.0 * h)), ff.t.interp(at(4.0 * h)))
        else {
            continue;
        };
        let hat = r1 * 2.0 - r2;
        let dist = dom_p.dist_unsigned([hat[0], hat[1]]);
        let phi = map.apply([b.x, b.t]);
        rep.collar_samples += 1;
        rep.boundary_constant = rep.boundary_constant.max(dist / (h + eps * t1));
        rep.boundary_identity = rep.boundary_identity.max((hat - Vec2::new(phi[0], phi[1])).norm());
    }
    rep.boundary_ok = rep.collar_samples > 0 && rep.boundary_constant <= BOUNDARY_C;

    for k in cf.admissible_nodes() {
        let (Some(r), Some(t)) = (cf.rho.at(k), ff.t.at(k)) else { continue };
        let p = cf.grid.point(k);
        let dev = (r - Vec2::new(p[0], p[1]) - disp.eval(p[0])).norm();
        rep.anchor_constant = rep.anchor_constant.max(if eps > 0.0 { dev / (eps * t) } else { dev });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = cf.admissible_nodes();
    let picks: Vec<usize> = nodes.iter().copied().choose_multiple(&mut rng, targets);
    for k in picks {
        let p = cf.grid.point(k);
        let x_star = Vec2::new(p[0] + (rng.random::<f64>() - 0.5) * h, p[1] + (rng.random::<f64>() - 0.5) * h);
        rep.targets += 1;
        let ok = cf.rho.interp([x_star[0], x_star[1]]).and_then(|y| invert_rho(cf, y, initial_guess(cf, &nodes, y)?));
        match ok {
            Some(x) if (x - x_star).norm() <= ROUND_TRIP_TOL => {
                rep.max_round_trip = rep.max_round_trip.max((x - x_star).norm());
            }
            _ => rep.failures.push([x_star[0], x_star[1]]),
        }
    }
    rep.sup_grad_rho_minus_i = cf.report.sup_grad_rho_minus_i;
    if rep.targets > 0 && rep.failures.len() as f64 > 0.02 * rep.targets as f64 {
        return Err(Error::invariant(
            "cov.inversion",
            format!("{} of {} Newton inversions failed", rep.failures.len(), rep.targets),
        ));
    }
    if rep.sup_grad_rho_minus_i > 0.5 {
        return Err(Error::invariant("cov.near_identity", format!("sup |∇ρ − I| = {:.4}", rep.sup_grad_rho_minus_i)));
    }
    Ok(rep)
}

/// The admissible node whose image is closest to `y`.
fn initial_guess(cf: &CovField, nodes: &[usize], y: Vec2) -> Option<Vec2> {
    let k = nodes
        .iter()
        .copied()
        .min_by(|&a, &b| (cf.rho.values[a] - y).norm_squared().total_cmp(&(cf.rho.values[b] - y).norm_squared()))?;
    let p = cf.grid.point(k);
    Some(Vec2::new(p[0], p[1]))
}

/// Newton iteration for `ρ(X) = y` with the Jacobian interpolated from the
/// `∇ρ` field. `None` if it leaves the sampled region or stalls.
pub fn invert_rho(cf: &CovField, y: Vec2, start: Vec2) -> Option<Vec2> {
    let mut x = start;
    let tol = 1e-12 * (1.0 + y.norm());
    for _ in 0..100 {
        let p = [x[0], x[1]];
        let r = y - cf.rho.interp(p)?;
        if r.norm() <= tol {
            return Some(x);
        }
        let g = cf.grad_rho.bilinear(p).or_else(|| {
            let (i, j) = cf.grid.nearest(p)?;
            cf.grad_rho.get(i as isize, j as isize)
        })?;
        // Row convention: ρ(X + dX) ≈ ρ(X) + dX ∇ρ.
        x += g.transpose().try_inverse()? * r;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{build_frame, transversal_fields};
    use crate::geometry::{build_domain, recover_graph, GraphFamily, MapSpec};
    use crate::green::{solve_green, GreenOptions};
    use crate::perturb::{boundary_displacement, decompose_b_c, smooth_lambda, Mollifier};

    struct Run {
        gd: GreenData,
        ff: FrameField,
        pd: PerturbationData,
        cf: CovField,
        disp: Displacement,
    }

    fn run(fam: GraphFamily, n: usize, map: BiLipMap) -> Run {
        let dom = build_domain(fam, 2, 2.0, n).unwrap();
        let gd = solve_green(&dom, n, &GreenOptions { richardson: false }).unwrap();
        let ff = transversal_fields(&gd, build_frame(&gd).unwrap()).unwrap();
        let disp = boundary_displacement(&dom, &map).unwrap();
        let moll = Mollifier::default();
        let mut pd = smooth_lambda(&disp, &moll, &ff, &gd.delta).unwrap();
        decompose_b_c(&disp, &moll, &ff, &mut pd, 3).unwrap();
        let cf = build_cov(&gd, &ff, &pd).unwrap();
        Run { gd, ff, pd, cf, disp }
    }

    #[test]
    fn pullback_is_independent_of_rotation() {
        let th: f64 = 0.3;
        let p = Mat2::new(th.cos(), th.sin(), -th.sin(), th.cos());
        let m = Mat2::new(1.1, 0.05, -0.02, 0.95);
        let a = pullback(&p, &m).unwrap();
        assert!((a - a.transpose()).norm() < 1e-14);
        // Direct formula with ∇ρ = P M Pᵀ 𝒪 for an arbitrary rotation 𝒪.
        let o = Mat2::new(0.8, 0.6, -0.6, 0.8);
        let g = p * m * p.transpose() * o;
        let gi = g.try_inverse().unwrap();
        assert!((gi.transpose() * gi * g.determinant() - a).norm() < 1e-13);
        assert_eq!(pullback(&p, &Mat2::zeros()), None);
    }

    #[test]
    fn gram_schmidt_by_hand() {
        // One node of a flat domain with constant B, vₙB = 0.
        let b = Mat2::new(0.03, -0.02, 0.0, 0.0);
        let (wbar, w, m) = w_frame_at(&Mat2::identity(), &b);
        let w1 = Vec2::new(1.03, -0.02) / (1.03f64.powi(2) + 0.02f64.powi(2)).sqrt();
        let w2 = Vec2::new(-w1[1], w1[0]);
        assert!((row(&w, 0) - w1).norm() < 1e-15 && (row(&w, 1) - w2).norm() < 1e-15);
        assert_eq!(row(&wbar, 1), Vec2::new(0.0, 1.0));
        assert!((m - w1[0]).abs() < 1e-15);
    }

    #[test]
    fn identity_map_is_identity() {
        let r = run(GraphFamily::Cone { lip: 1.0 }, 64, BiLipMap::identity());
        let cf = &r.cf;
        assert!(cf.admissible_nodes().len() > 100);
        for k in cf.admissible_nodes() {
            let p = cf.grid.point(k);
            assert!((cf.rho.values[k] - Vec2::new(p[0], p[1])).norm() < 1e-8);
            assert!((cf.j.values[k] - Mat2::identity()).norm() < 1e-8);
            assert!((cf.a_rho.values[k] - Mat2::identity()).norm() < 1e-8);
            assert!((cf.a_0.values[k] - Mat2::identity()).norm() < 1e-12);
        }
        for f in [cf.candidate_j1(), cf.candidate_t_grad_o(&r.ff), cf.candidate_t_grad_j0(&r.ff), cf.candidate_a_rho_minus_a0()] {
            assert!(f.max_abs() < 1e-8);
        }
        let rep = check_boundary_and_bijection(cf, &r.ff, &r.disp, &r.gd.dom, 20, 1).unwrap();
        assert!(rep.failures.is_empty() && rep.boundary_ok && rep.anchor_constant < 1e-8);
    }

    #[test]
    fn translation_shifts_rho() {
        let c = [0.25, -0.125];
        let map = BiLipMap::new(MapSpec::Translation { c }, 0.0).unwrap();
        let r = run(GraphFamily::Sine { amp: 0.1, freq: 3.0 }, 64, map.clone());
        for k in r.cf.admissible_nodes() {
            let p = r.cf.grid.point(k);
            assert!((r.cf.rho.values[k] - Vec2::new(p[0] + c[0], p[1] + c[1])).norm() < 1e-8);
            assert!((r.cf.j.values[k] - Mat2::identity()).norm() < 1e-8);
        }
        let dom_p = recover_graph(&r.gd.dom, &map).unwrap();
        let rep = check_boundary_and_bijection(&r.cf, &r.ff, &r.disp, &dom_p, 20, 2).unwrap();
        // ρ̂(b) = Φ(b) exactly; the distance is the chord error of the
        // tabulated image boundary, far below h.
        assert!(rep.boundary_identity < 1e-10, "{}", rep.boundary_identity);
        assert!(rep.boundary_constant <= 0.01, "{}", rep.boundary_constant);
    }

    #[test]
    fn affine_map_on_flat_matches_hand_assembly() {
        let e = [[0.3, -0.4], [0.7, 0.2]];
        let eps = 0.05;
        let r = run(GraphFamily::Flat, 64, BiLipMap::new(MapSpec::Linear { e }, eps).unwrap());
        // h(z) = εz(E₁₁, E₁₂): λ = εx(E₁₁, E₁₂), B = rows (ε E₁₁, ε E₁₂), (0, 0).
        let wb1 = Vec2::new(1.0 + eps * e[0][0], eps * e[0][1]);
        let a = wb1.norm();
        let w1 = wb1 / a;
        let w2 = Vec2::new(-w1[1], w1[0]);
        let w = rows(w1, w2);
        // ρ(x, t) = (x + ε E₁₁ x, ε E₁₂ x) + a t w₂, so ∇ρ has rows w̄₁ and a w₂.
        let grad = rows(wb1, w2 * a);
        let j = grad * w.transpose();
        for k in r.cf.admissible_nodes() {
            let p = r.cf.grid.point(k);
            let rho = Vec2::new(p[0] + eps * e[0][0] * p[0], eps * e[0][1] * p[0]) + w2 * (a * p[1]);
            assert!((r.cf.rho.values[k] - rho).norm() < 1e-8);
            assert!((r.cf.j.values[k] - j).norm() < 1e-8);
            assert!((r.cf.a.values[k] - a).abs() < 1e-10);
            assert!((r.cf.j1.values[k] - (j - Mat2::identity() * a)).norm() < 1e-8);
        }
        assert!(r.pd.sup_b() > 0.0);
    }

    #[test]
    fn cone_shear_algebra_and_inversion() {
        let map = BiLipMap::new(MapSpec::Shear, 0.05).unwrap();
        let r = run(GraphFamily::Cone { lip: 1.0 }, 128, map.clone());
        let rep = &r.cf.report;
        assert!(rep.w_orthonormality <= 1e-12 && rep.upper_triangularity <= 1e-12);
        assert!(rep.det_j0_defect <= 1e-10 && rep.a0_vn_defect <= 1e-10 && rep.a0_grad_g_defect <= 1e-10);
        assert!(rep.perturbative && rep.min_det_grad_rho > 0.0);
        assert!(rep.sup_j_minus_i > 0.0 && rep.sup_j_minus_i < 0.5);
        assert!(rep.jacobian_cross_check < 0.05, "{}", rep.jacobian_cross_check);
        let dom_p = recover_graph(&r.gd.dom, &map).unwrap();
        let b = check_boundary_and_bijection(&r.cf, &r.ff, &r.disp, &dom_p, 100, 11).unwrap();
        assert!(b.failures.len() <= 2 && b.boundary_ok, "{b:?}");
    }
}
