//! Boundary displacement `h`, its mollification `λ`, the split
//! `∇λ = B + C`, and β-numbers of `h`.
//!
//! In the plane, with `t = t(X)` and `y = y(X)`,
//! `λ(X) = ∫ h(y − t u) η(u) du`. Differentiating under the integral gives
//! `∇λ = ∇t ⊗ I_t + ∇y ⊗ I_y` with
//!
//! ```text
//! I_t = −(1/t) ∫ (h − a)(y − t u) [η + u η′](u) du
//! I_y =  (1/t) ∫ (h − a)(y − t u) η′(u) du
//! ```
//!
//! where `a` is the average of `h` over `B(y, t)`. Both kernels integrate to
//! zero, so `a` changes nothing but the conditioning. The split puts
//! `B = c_B ⊗ I_y` with `c_B = (1, 0) − vₙ (vₙ)₁`, which satisfies `vₙ B = 0`,
//! and `C = ∇t ⊗ I_t + (∇y − c_B) ⊗ I_y`.

use crate::error::{Error, Result};
use crate::frame::FrameField;
use crate::geometry::{BiLipMap, GraphDomain};
use crate::grid::{op_norm, outer, par_nodes, vm, Field, Grid, Mat2, Vec2};
use crate::quad::composite;
use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Relative agreement required between successive panel doublings.
const QUAD_TOL: f64 = 1e-8;
const MIN_PANELS: usize = 4;
const MAX_PANELS: usize = 1024;

fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// The normalized bump `η(u) = c exp(−1/(1 − u²))` on `(−1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Mollifier {
    pub c: f64,
}

impl Default for Mollifier {
    fn default() -> Self {
        let (x, w) = composite(-1.0, 1.0, &[], 64);
        let s: f64 = x.iter().zip(&w).map(|(u, w)| w * bump(*u)).sum();
        Mollifier { c: 1.0 / s }
    }
}

impl Mollifier {
    pub fn eta(&self, u: f64) -> f64 {
        self.c * bump(u)
    }

    pub fn deta(&self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let q = 1.0 - u * u;
        self.eta(u) * (-2.0 * u / (q * q))
    }

    /// `η_t(x) = η(x/t)/t`.
    pub fn scaled(&self, x: f64, t: f64) -> f64 {
        self.eta(x / t) / t
    }

    /// Checks `∫η = 1` and `∫η_t = 1` at three scales with a rule finer than
    /// the one used for the normalization.
    pub fn check(&self) -> Result<()> {
        let mut worst: f64 = 0.0;
        for t in [1.0, 0.01, 37.5] {
            let (x, w) = composite(-t, t, &[], 160);
            let s: f64 = x.iter().zip(&w).map(|(x, w)| w * self.scaled(*x, t)).sum();
            worst = worst.max((s - 1.0).abs());
        }
        if worst > 1e-10 {
            return Err(Error::invariant("perturb.mollifier_mass", format!("|∫η_t − 1| = {worst:.3e}")));
        }
        Ok(())
    }
}

/// `h(z) = Φ(z, g(z)) − (z, g(z))` with its sampled Lipschitz constant.
#[derive(Clone, Debug)]
pub struct Displacement {
    dom: GraphDomain,
    map: BiLipMap,
    /// Largest difference quotient over consecutive boundary samples.
    pub lip_h: f64,
    /// `‖∇Φ − I‖ √(1 + M²)`, the a priori bound on `|∇h|`.
    pub lip_bound: f64,
    /// Operator norm of `∇Φ − I`.
    pub eps: f64,
}

impl Displacement {
    /// `h(z)` as a row.
    pub fn eval(&self, z: f64) -> Vec2 {
        let b = [z, self.dom.g(z)];
        let p = self.map.apply(b);
        Vec2::new(p[0] - b[0], p[1] - b[1])
    }

    /// Points in `(a, b)` where `h` may fail to be smooth.
    pub fn kinks_in(&self, a: f64, b: f64) -> Vec<f64> {
        self.dom.kinks_in(a, b)
    }

    pub fn domain(&self) -> &GraphDomain {
        &self.dom
    }

    pub fn map(&self) -> &BiLipMap {
        &self.map
    }
}

/// Builds `h` and checks its Lipschitz quotient against the a priori bound.
pub fn boundary_displacement(dom: &GraphDomain, map: &BiLipMap) -> Result<Displacement> {
    if dom.dim_n != 2 {
        return Err(Error::InvalidInput("the displacement is implemented for n = 2".into()));
    }
    let eps = map.eps_bound().operator;
    let mut d = Displacement {
        dom: dom.clone(),
        map: map.clone(),
        lip_h: 0.0,
        lip_bound: eps * (1.0 + dom.lipschitz_m * dom.lipschitz_m).sqrt(),
        eps,
    };
    let hs: Vec<Vec2> = dom.samples.iter().map(|s| d.eval(s.x)).collect();
    let mut excess: f64 = 0.0;
    for (s, h) in dom.samples.windows(2).zip(hs.windows(2)) {
        let dx = s[1].x - s[0].x;
        let q = (h[1] - h[0]).norm() / dx;
        d.lip_h = d.lip_h.max(q);
        // h is a difference of nearby coordinates; allow for its rounding.
        let mag = 1.0 + s[1].x.abs().max(s[1].t.abs()) + h[1].norm();
        excess = excess.max(q - d.lip_bound * (1.0 + 1e-9) - 8.0 * f64::EPSILON * mag / dx);
    }
    if excess > 0.0 {
        return Err(Error::invariant(
            "perturb.lip_h",
            format!("sampled Lip(h) = {:.6e} exceeds ε√(1+M²) = {:.6e}", d.lip_h, d.lip_bound),
        ));
    }
    Ok(d)
}

/// The three mollified integrals at one `(y, t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernels {
    pub lambda: Vec2,
    pub i_t: Vec2,
    pub i_y: Vec2,
    /// Average of `h` over `B(y, t)`.
    pub mean: Vec2,
    pub panels: usize,
}

fn rule(disp: &Displacement, y: f64, t: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
    // z = y − t u, so a kink z_k sits at u = (y − z_k)/t.
    let mut breaks: Vec<f64> = disp.kinks_in(y - t, y + t).into_iter().map(|z| (y - z) / t).collect();
    breaks.sort_by(f64::total_cmp);
    composite(-1.0, 1.0, &breaks, panels)
}

/// Integrals on a fixed rule, subtracting `a` inside the derivative kernels.
/// Also returns `max |h|`, `max |h − a|` over the nodes, and the largest
/// discrete mass defect of the three kernels (`η` should integrate to one,
/// the derivative kernels to zero).
fn integrate(
    disp: &Displacement,
    moll: &Mollifier,
    y: f64,
    t: f64,
    nodes: &(Vec<f64>, Vec<f64>),
    a: Option<Vec2>,
) -> (Kernels, f64, f64, f64) {
    let (us, ws) = nodes;
    let hs: Vec<Vec2> = us.iter().map(|u| disp.eval(y - t * u)).collect();
    let mean = hs.iter().zip(ws).map(|(h, w)| h * *w).sum::<Vec2>() * 0.5;
    let a = a.unwrap_or(mean);
    let mut k = Kernels { lambda: Vec2::zeros(), i_t: Vec2::zeros(), i_y: Vec2::zeros(), mean, panels: 0 };
    let mut hmax: f64 = 0.0;
    let mut dmax: f64 = 0.0;
    let mut mass = 0.0;
    let (mut m_t, mut m_y) = (0.0, 0.0);
    for ((u, w), h) in us.iter().zip(ws).zip(&hs) {
        let e = moll.eta(*u);
        let de = moll.deta(*u);
        let d = h - a;
        k.lambda += h * (w * e);
        mass += w * e;
        m_t += w * (e + u * de);
        m_y += w * de;
        k.i_t -= d * (w * (e + u * de));
        k.i_y += d * (w * de);
        hmax = hmax.max(h.norm());
        dmax = dmax.max(d.norm());
    }
    // Dividing by the discrete mass makes the rule reproduce constants.
    k.lambda /= mass;
    k.i_t /= t;
    k.i_y /= t;
    let defect = (mass - 1.0).abs().max(m_t.abs()).max(m_y.abs());
    (k, hmax, dmax, defect)
}

/// `λ`, `I_t`, `I_y` at `(y, t)` by composite Gauss–Legendre, doubling the
/// panels until two successive rules agree to `1e−8` relative to `max|h|`
/// (for `λ`) and `max|h − a|/t` (for the derivative kernels), and the
/// kernels' discrete masses are exact to `1e−8`.
pub fn kernels(disp: &Displacement, moll: &Mollifier, y: f64, t: f64) -> Result<Kernels> {
    let mut panels = MIN_PANELS;
    let (mut prev, ..) = integrate(disp, moll, y, t, &rule(disp, y, t, panels), None);
    while panels < MAX_PANELS {
        panels *= 2;
        let (cur, hmax, dmax, defect) = integrate(disp, moll, y, t, &rule(disp, y, t, panels), None);
        let tol_l = QUAD_TOL * hmax;
        let tol_d = (QUAD_TOL * dmax + 1e-13 * hmax) / t;
        if defect <= QUAD_TOL
            && (cur.lambda - prev.lambda).norm() <= tol_l
            && (cur.i_t - prev.i_t).norm() <= tol_d
            && (cur.i_y - prev.i_y).norm() <= tol_d
        {
            return Ok(Kernels { panels, ..cur });
        }
        prev = cur;
    }
    Err(Error::Quadrature(y, t))
}

/// Mollified displacement, its gradient and the `B`/`C` split on a grid.
#[derive(Clone, Debug)]
pub struct PerturbationData {
    pub grid: Grid,
    pub lip_h: f64,
    pub lip_bound: f64,
    pub eps: f64,
    /// `λ` wherever `t` and `y` are available.
    pub lambda: Field<Vec2>,
    pub i_t: Field<Vec2>,
    pub i_y: Field<Vec2>,
    /// `(∇λ)ᵢⱼ = ∂ᵢλⱼ` wherever `∇t` and `∇y` are available.
    pub grad_lambda: Field<Mat2>,
    pub admissible: Vec<bool>,
    pub b: Field<Mat2>,
    pub c: Field<Mat2>,
    pub max_panels: usize,
    /// Largest `|∇λ − Dλ|` against fourth-order differences of the sampled
    /// `λ`, absolute and relative to `max |∇λ|`.
    pub fd_residual: f64,
    pub fd_relative: f64,
    /// `sup |λ(X) − h(π(X))| / (t(X) ε)` over nodes with `δ < 8h`.
    pub anchor_constant: f64,
    /// Largest change of `I_t`, `I_y` when the mean is not subtracted, at
    /// five random nodes, relative to `max|h|/t`.
    pub mean_invariance: f64,
    /// `max |B + C − ∇λ| / max |∇λ|`.
    pub partition_residual: f64,
    /// `max |vₙ B|`.
    pub vn_b: f64,
}

/// Computes `λ` and the analytic `∇λ`, cross-checks it against differences
/// of `λ`, and checks `|λ − h(π(X))| ≤ 2√(1+M²) t ε` near the boundary.
pub fn smooth_lambda(disp: &Displacement, moll: &Mollifier, ff: &FrameField, delta: &Field<f64>) -> Result<PerturbationData> {
    let grid = ff.grid;
    let nodes = par_nodes(&grid, |k| {
        let t = ff.t.at(k)?;
        let y = ff.y.at(k)?;
        (t > 0.0).then(|| kernels(disp, moll, y, t))
    });
    let nodes: Vec<Option<Kernels>> = nodes.into_iter().map(|n| n.transpose()).collect::<Result<_>>()?;
    let max_panels = nodes.iter().flatten().map(|k| k.panels).max().unwrap_or(0);
    let pick = |f: fn(&Kernels) -> Vec2| Field::from_options(grid, Vec2::zeros(), nodes.iter().map(|n| n.as_ref().map(f)));
    let lambda = pick(|k| k.lambda);
    let i_t = pick(|k| k.i_t);
    let i_y = pick(|k| k.i_y);
    let grad_lambda = Field::from_fn(grid, Mat2::zeros(), |k| {
        Some(outer(&ff.grad_t.at(k)?, &i_t.at(k)?) + outer(&ff.grad_y.at(k)?, &i_y.at(k)?))
    });

    let mut fd_residual: f64 = 0.0;
    let mut gmax: f64 = 0.0;
    for k in 0..grid.len() {
        let Some(g) = grad_lambda.at(k).filter(|_| ff.admissible[k]) else { continue };
        gmax = gmax.max(op_norm(&g));
        let (i, j) = grid.ij(k);
        if let (Some(dx), Some(dt)) = (lambda.d1_4(i, j, 0), lambda.d1_4(i, j, 1)) {
            let num = Mat2::new(dx[0], dx[1], dt[0], dt[1]);
            fd_residual = fd_residual.max(op_norm(&(num - g)));
        }
    }

    let mut anchor: f64 = 0.0;
    let mut bound_ok = true;
    let cap = 2.0 * (1.0 + disp.dom.lipschitz_m.powi(2)).sqrt() * (1.0 + 1e-9);
    for k in 0..grid.len() {
        let (Some(l), Some(t), Some(d)) = (lambda.at(k), ff.t.at(k), delta.at(k)) else { continue };
        if d >= 8.0 * grid.h {
            continue;
        }
        let x = grid.point(k)[0];
        let dev = (l - disp.eval(x)).norm();
        if disp.eps > 0.0 {
            let c = dev / (t * disp.eps);
            anchor = anchor.max(c);
            bound_ok &= c <= cap;
        } else {
            bound_ok &= dev <= 1e-12;
        }
    }
    if !bound_ok {
        return Err(Error::invariant(
            "perturb.anchor",
            format!("|λ − h(π X)| / (t ε) reached {anchor:.3e}, above 2√(1+M²)"),
        ));
    }

    Ok(PerturbationData {
        grid,
        lip_h: disp.lip_h,
        lip_bound: disp.lip_bound,
        eps: disp.eps,
        lambda,
        i_t,
        i_y,
        grad_lambda,
        admissible: ff.admissible.clone(),
        b: Field::empty(grid, Mat2::zeros()),
        c: Field::empty(grid, Mat2::zeros()),
        max_panels,
        fd_residual,
        fd_relative: if gmax > 0.0 { fd_residual / gmax } else { 0.0 },
        anchor_constant: anchor,
        mean_invariance: 0.0,
        partition_residual: 0.0,
        vn_b: 0.0,
    })
}

/// `c_B = (1, 0) − vₙ (vₙ)₁`, the column of `I_{2×1} − vₙᵀπ(vₙ)`.
fn c_b(vn: &Vec2) -> Vec2 {
    Vec2::new(1.0 - vn[0] * vn[0], -vn[1] * vn[0])
}

/// Fills `B` and `C`, checks `B + C = ∇λ`, `vₙ B = 0`, and the mean
/// subtraction invariance at five nodes drawn with `seed`.
pub fn decompose_b_c(disp: &Displacement, moll: &Mollifier, ff: &FrameField, pd: &mut PerturbationData, seed: u64) -> Result<()> {
    let grid = pd.grid;
    let (i_t, i_y) = (&pd.i_t, &pd.i_y);
    let split = |k: usize| -> Option<(Mat2, Mat2)> {
        if !pd.grad_lambda.valid[k] {
            return None;
        }
        let vn = ff.vn(k);
        let cb = c_b(&vn);
        let b = outer(&cb, &i_y.at(k)?);
        let j1 = outer(&ff.grad_t.at(k)?, &i_t.at(k)?);
        let j2 = outer(&(ff.grad_y.at(k)? - cb), &i_y.at(k)?);
        Some((b, j1 + j2))
    };
    let pairs = par_nodes(&grid, split);
    let bf = Field::from_options(grid, Mat2::zeros(), pairs.iter().map(|p| p.map(|q| q.0)));
    let cf = Field::from_options(grid, Mat2::zeros(), pairs.iter().map(|p| p.map(|q| q.1)));

    let mut gmax: f64 = 0.0;
    let mut part: f64 = 0.0;
    let mut vn_b: f64 = 0.0;
    for k in 0..grid.len() {
        let (Some(g), Some(bk), Some(ck)) = (pd.grad_lambda.at(k), bf.at(k), cf.at(k)) else { continue };
        gmax = gmax.max(op_norm(&g));
        part = part.max(op_norm(&(bk + ck - g)));
        vn_b = vn_b.max(vm(&ff.vn(k), &bk).norm());
    }
    let partition = if gmax > 0.0 { part / gmax } else { part };
    if partition > 1e-6 {
        return Err(Error::BcPartition(partition));
    }
    if vn_b > 1e-10 * (1.0 + pd.lip_bound) {
        return Err(Error::invariant("perturb.vn_b", format!("max |vₙB| = {vn_b:.3e}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..grid.len()).filter(|&k| bf.valid[k] && ff.admissible[k]).choose_multiple(&mut rng, 5);
    let mut inv: f64 = 0.0;
    for k in picks {
        let (t, y) = (ff.t.values[k], ff.y.values[k]);
        let kern = kernels(disp, moll, y, t)?;
        let nodes = rule(disp, y, t, kern.panels);
        let (with, hmax, ..) = integrate(disp, moll, y, t, &nodes, None);
        let (without, ..) = integrate(disp, moll, y, t, &nodes, Some(Vec2::zeros()));
        let scale = hmax / t;
        if scale > 0.0 {
            let d = (with.i_y - without.i_y).norm().max((with.i_t - without.i_t).norm());
            inv = inv.max(d / scale);
        }
    }
    // Without the mean, the kernels' discrete mass (zero only up to the
    // quadrature tolerance) multiplies |h|.
    if inv > 10.0 * QUAD_TOL {
        return Err(Error::invariant("perturb.mean_invariance", format!("relative change {inv:.3e}")));
    }

    pd.b = bf;
    pd.c = cf;
    pd.partition_residual = partition;
    pd.vn_b = vn_b;
    pd.mean_invariance = inv;
    Ok(())
}

impl PerturbationData {
    /// Largest operator norm of `f` over admissible nodes.
    pub fn sup(&self, f: &Field<Mat2>) -> f64 {
        (0..f.grid.len()).filter(|&k| self.admissible[k]).filter_map(|k| f.at(k)).map(|m| op_norm(&m)).fold(0.0, f64::max)
    }

    /// `‖∇λ‖∞` over admissible nodes.
    pub fn sup_grad_lambda(&self) -> f64 {
        self.sup(&self.grad_lambda)
    }

    pub fn sup_b(&self) -> f64 {
        self.sup(&self.b)
    }

    /// Carleson candidate `|∂_{vₙ}λ| = |vₙ ∇λ|`.
    pub fn candidate_dvn_lambda(&self, ff: &FrameField) -> Field<f64> {
        self.grad_lambda.map(0.0, |k, g| self.admissible[k].then(|| vm(&ff.vn(k), &g).norm()))
    }

    /// Carleson candidate `|C|`.
    pub fn candidate_c(&self) -> Field<f64> {
        self.c.map(0.0, |k, c| self.admissible[k].then(|| op_norm(&c)))
    }

    /// Carleson candidate `t|∇B|`, differencing the sampled `B`.
    pub fn candidate_t_grad_b(&self, ff: &FrameField) -> Field<f64> {
        let f = tensor_gradient(&self.b, &ff.t);
        f.map(0.0, |k, v| self.admissible[k].then_some(v))
    }
}

/// `t |∇M|` with `|∇M|² = |∂ₓM|² + |∂ₜM|²` (Frobenius), at nodes where `M`
/// is valid, by fourth-order differences with a second-order fallback.
pub fn tensor_gradient(m: &Field<Mat2>, t: &Field<f64>) -> Field<f64> {
    Field::from_fn(m.grid, 0.0, |k| {
        m.at(k)?;
        let (i, j) = m.grid.ij(k);
        let dx = m.d1_4(i, j, 0).or_else(|| m.d1_2(i, j, 0))?;
        let dt = m.d1_4(i, j, 1).or_else(|| m.d1_2(i, j, 1))?;
        Some(t.at(k)? * (dx.norm_squared() + dt.norm_squared()).sqrt())
    })
}

// ---------------------------------------------------------------------------
// β-numbers

/// `β(y, t) = (1/t) inf_{a, b} ⨍_{B(y,t)} |h(z) − a − z b| dz` by iteratively
/// reweighted least squares started from the L² fit. `None` if the
/// iteration does not settle.
pub fn dorronsoro_beta(disp: &Displacement, y: f64, t: f64) -> Option<f64> {
    let mut breaks: Vec<f64> = disp.kinks_in(y - t, y + t).into_iter().map(|z| (z - y) / t).collect();
    breaks.sort_by(f64::total_cmp);
    let (us, ws) = composite(-1.0, 1.0, &breaks, 8);
    let hs: Vec<Vec2> = us.iter().map(|u| disp.eval(y + t * u)).collect();
    let ws: Vec<f64> = ws.iter().map(|w| 0.5 * w).collect();
    let mean = hs.iter().zip(&ws).map(|(h, w)| h * *w).sum::<Vec2>();
    let spread = hs.iter().map(|h| (h - mean).norm()).fold(0.0, f64::max);
    if spread == 0.0 {
        return Some(0.0);
    }
    let floor = 1e-12 * spread;
    let mut omega = vec![1.0; us.len()];
    let mut best = f64::INFINITY;
    let mut prev = f64::INFINITY;
    for _ in 0..2000 {
        // Weighted normal equations for h ≈ a + u b, shared by both
        // components; u = (z − y)/t keeps them well conditioned.
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let (mut r0, mut r1) = (Vec2::zeros(), Vec2::zeros());
        for ((u, w), (h, o)) in us.iter().zip(&ws).zip(hs.iter().zip(&omega)) {
            let c = w * o;
            s0 += c;
            s1 += c * u;
            s2 += c * u * u;
            r0 += h * c;
            r1 += h * (c * u);
        }
        let det = s0 * s2 - s1 * s1;
        if !(det.abs() > 0.0) {
            return None;
        }
        let a = (r0 * s2 - r1 * s1) / det;
        let b = (r1 * s0 - r0 * s1) / det;
        let mut obj = 0.0;
        for (q, (u, w)) in us.iter().zip(&ws).enumerate() {
            let r = (hs[q] - a - b * *u).norm();
            obj += w * r;
            omega[q] = 1.0 / r.max(floor);
        }
        best = best.min(obj);
        if obj <= 1e-14 * spread || (prev - obj).abs() <= 1e-11 * obj {
            return Some(best / t);
        }
        prev = obj;
    }
    None
}

/// One cell of the β mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaCell {
    pub y: f64,
    pub t: f64,
    pub beta: f64,
}

/// β on the dyadic mesh `t = t_top 2^{−j} ≥ t_min`, `y ∈ tℤ ∩ [−2 t_top, 2 t_top]`,
/// and the Carleson norm of `β² dy dt/t`.
#[derive(Clone, Debug, Serialize)]
pub struct BetaTable {
    pub cells: Vec<BetaCell>,
    /// Cells where the fit did not settle.
    pub excluded: usize,
    /// `sup_{x, r} r^{−1} Σ_{|y−x|<r, t≤r} β² t ln 2`.
    pub carleson: f64,
    /// `(x, r)` attaining the sup.
    pub maximizer: (f64, f64),
    /// `carleson / lip_h²` (0 when `h` is constant).
    pub ratio: f64,
    /// Largest `β(y, t)/β(y′, 2t)` over cells and their parents, where the
    /// parent is not negligible.
    pub inclusion_ratio: f64,
}

/// Builds the β mesh and its Carleson norm over boxes `|x| ≤ t_top`,
/// `r ∈ {t_top 2^{−j}}`.
pub fn beta_table(disp: &Displacement, t_top: f64, t_min: f64) -> Result<BetaTable> {
    let spacing = disp.dom.sample_spacing();
    if !(t_min >= 2.0 * spacing && t_top >= t_min) {
        return Err(Error::InvalidInput(format!(
            "β mesh radii must satisfy 2·spacing = {:.3e} ≤ t_min = {t_min:.3e} ≤ t_top = {t_top:.3e}",
            2.0 * spacing
        )));
    }
    let mut levels = Vec::new();
    let mut t = t_top;
    while t >= t_min * (1.0 - 1e-12) {
        levels.push(t);
        t *= 0.5;
    }
    let span = 2.0 * t_top;
    let cand: Vec<(usize, i64)> = levels
        .iter()
        .enumerate()
        .flat_map(|(l, &t)| {
            let m = (span / t).round() as i64;
            (-m..=m).map(move |i| (l, i))
        })
        .collect();
    let fits: Vec<(usize, i64, Option<f64>)> =
        cand.par_iter().map(|&(l, i)| (l, i, dorronsoro_beta(disp, i as f64 * levels[l], levels[l]))).collect();
    let excluded = fits.iter().filter(|f| f.2.is_none()).count();
    let cells: Vec<BetaCell> = fits
        .iter()
        .filter_map(|&(l, i, b)| b.map(|beta| BetaCell { y: i as f64 * levels[l], t: levels[l], beta }))
        .collect();

    let ln2 = std::f64::consts::LN_2;
    let mut carleson: f64 = 0.0;
    let mut maximizer = (0.0, t_top);
    for &r in &levels {
        let m = (t_top / (0.5 * r)).round() as i64;
        for i in -m..=m {
            let x = i as f64 * 0.5 * r;
            let s: f64 = cells
                .iter()
                .filter(|c| c.t <= r * (1.0 + 1e-12) && (c.y - x).abs() < r)
                .map(|c| c.beta * c.beta * c.t * ln2)
                .sum::<f64>()
                / r;
            if s > carleson {
                carleson = s;
                maximizer = (x, r);
            }
        }
    }

    let lookup = |y: f64, t: f64| {
        cells.iter().find(|c| (c.t - t).abs() <= 1e-12 * t && (c.y - y).abs() <= 1e-9 * t).map(|c| c.beta)
    };
    let bmax = cells.iter().map(|c| c.beta).fold(0.0, f64::max);
    let mut inclusion: f64 = 0.0;
    for c in &cells {
        let pt = 2.0 * c.t;
        if pt > t_top * (1.0 + 1e-12) {
            continue;
        }
        let py = (c.y / pt).round() * pt;
        if let Some(pb) = lookup(py, pt) {
            if pb > 1e-6 * bmax {
                inclusion = inclusion.max(c.beta / pb);
            }
        }
    }
    let lip2 = disp.lip_h * disp.lip_h;
    Ok(BetaTable {
        cells,
        excluded,
        carleson,
        maximizer,
        ratio: if lip2 > 0.0 { carleson / lip2 } else { 0.0 },
        inclusion_ratio: inclusion,
    })
}
