//! Green function with pole at infinity for `−Δ` on a truncated graph domain.
//!
//! The Dirichlet problem is discretized with the symmetric ghost-fluid
//! five-point scheme: a neighbour across the graph is replaced by linear
//! extrapolation through the boundary crossing, which keeps the matrix
//! symmetric positive definite and reproduces affine solutions exactly.
//! The truncation walls carry a far-field model of the pole-at-infinity
//! Green function; its error is measured by two auxiliary solves (half
//! the spacing, and a box 1.5 times wider).

use crate::error::{Error, Result};
use crate::geometry::{GraphDomain, GraphFamily};
use crate::grid::{par_nodes, scalar_gradient, unzip_field, Field, Grid, Mat2, Vec2};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

const NONE: usize = usize::MAX;
const PIN_FRACTION: f64 = 1e-6;
const RESIDUAL_TOL: f64 = 1e-10;

/// Far-field model of the Green function, used as wall data.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum FarField {
    /// `r^{π/α} sin(π θ/α)` in the sector of opening `α` between the two
    /// asymptote lines, `θ` measured from the right asymptote.
    Sector { apex: [f64; 2], start: f64, opening: f64 },
    /// Signed distance above the mid-line of two parallel asymptotes.
    Planar { slope: f64, point: [f64; 2] },
    /// `t − amp sin(freq x) e^{−|freq| t}`.
    Sine { amp: f64, freq: f64 },
}

impl FarField {
    pub fn for_domain(dom: &GraphDomain) -> Self {
        if let GraphFamily::Sine { amp, freq } = dom.family {
            return FarField::Sine { amp, freq };
        }
        let (l, r) = dom.asymptotes();
        let il = l.point[1] - l.slope * l.point[0];
        let ir = r.point[1] - r.slope * r.point[0];
        if (l.slope - r.slope).abs() < 1e-12 {
            return FarField::Planar { slope: l.slope, point: [0.0, 0.5 * (il + ir)] };
        }
        let x = (il - ir) / (r.slope - l.slope);
        let start = r.slope.atan();
        FarField::Sector { apex: [x, il + l.slope * x], start, opening: PI + l.slope.atan() - start }
    }

    /// Model value, harmonic and vanishing on the asymptotes.
    pub fn value(&self, p: [f64; 2]) -> f64 {
        match *self {
            FarField::Sector { apex, start, opening } => {
                let (dx, dt) = (p[0] - apex[0], p[1] - apex[1]);
                let k = PI / opening;
                let th = (dt.atan2(dx) - start).rem_euclid(2.0 * PI);
                dx.hypot(dt).powf(k) * (k * th).sin()
            }
            FarField::Planar { slope, point } => {
                (p[1] - point[1] - slope * (p[0] - point[0])) / (1.0 + slope * slope).sqrt()
            }
            FarField::Sine { amp, freq } => p[1] - amp * (freq * p[0]).sin() * (-freq.abs() * p[1]).exp(),
        }
    }

    /// Wall data: the model clamped to be nonnegative.
    pub fn wall(&self, p: [f64; 2]) -> f64 {
        self.value(p).max(0.0)
    }

    /// Conformal coordinate in which the model domain is the upper half plane.
    pub fn to_half_plane(&self, p: [f64; 2]) -> (f64, f64) {
        match *self {
            FarField::Sector { apex, start, opening } => {
                let (dx, dt) = (p[0] - apex[0], p[1] - apex[1]);
                let k = PI / opening;
                let th = (dt.atan2(dx) - start).rem_euclid(2.0 * PI).min(opening);
                let rho = dx.hypot(dt).powf(k);
                (rho * (k * th).cos(), rho * (k * th).sin())
            }
            FarField::Planar { slope, point } => {
                let n = (1.0 + slope * slope).sqrt();
                let (dx, dt) = (p[0] - point[0], p[1] - point[1]);
                ((dx + slope * dt) / n, (dt - slope * dx) / n)
            }
            FarField::Sine { .. } => (p[0], self.value(p)),
        }
    }

    /// Half-plane harmonic measure of the boundary arc between `a` and `b`
    /// seen from `p`, transported by the model map.
    pub fn arc_measure(&self, p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        let (u, v) = self.to_half_plane(p);
        let v = v.max(0.0);
        let ua = self.to_half_plane(a).0;
        let ub = self.to_half_plane(b).0;
        let (lo, hi) = if ua <= ub { (ua, ub) } else { (ub, ua) };
        ((v.atan2(u - hi) - v.atan2(u - lo)) / PI).clamp(0.0, 1.0)
    }

    pub fn describe(&self) -> String {
        match self {
            FarField::Sector { apex, opening, .. } => format!(
                "sector r^(pi/alpha) sin(pi theta/alpha), apex ({:.6}, {:.6}), alpha = {:.6}",
                apex[0], apex[1], opening
            ),
            FarField::Planar { slope, .. } => format!("planar distance above mid-line, slope {slope}"),
            FarField::Sine { amp, freq } => format!("t - {amp} sin({freq} x) exp(-{} t)", freq.abs()),
        }
    }
}

/// The uniform grid covering the truncation box with `cells` cells across.
pub fn grid_for(dom: &GraphDomain, cells: usize) -> Grid {
    let h = 2.0 * dom.r / cells as f64;
    let nt = ((dom.t_hi - dom.t_lo) / h - 1e-9).ceil() as usize + 1;
    Grid { x0: -dom.r, t0: dom.t_lo, h, nx: cells + 1, nt }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Outside,
    Unknown,
    Wall,
    Pinned,
}

#[derive(Clone, Copy, Debug)]
struct Coupling {
    row: usize,
    coef: f64,
    point: [f64; 2],
    wall: bool,
}

/// Factorized Dirichlet problem on one domain and grid.
///
/// The matrix depends only on the geometry, so the factorization is reused
/// for any number of boundary data sets. Data are supplied as a function of
/// the boundary point and whether it lies on a truncation wall.
pub struct DirichletSolver {
    pub grid: Grid,
    kind: Vec<Kind>,
    unknown: Vec<usize>,
    nodes: Vec<usize>,
    diag: Vec<f64>,
    nbrs: Vec<[usize; 4]>,
    couplings: Vec<Coupling>,
    llt: Llt<usize, f64>,
}

impl DirichletSolver {
    pub fn new(dom: &GraphDomain, grid: Grid) -> Result<Self> {
        let (nx, nt) = (grid.nx, grid.nt);
        let inside: Vec<bool> = (0..grid.len()).map(|k| dom.contains(grid.point(k))).collect();
        let nb_of = |k: usize, d: usize| -> Option<usize> {
            let (i, j) = grid.ij(k);
            match d {
                0 if i > 0 => Some(k - 1),
                1 if i + 1 < nx => Some(k + 1),
                2 if j > 0 => Some(k - nx),
                3 if j + 1 < nt => Some(k + nx),
                _ => None,
            }
        };
        // Crossings towards outside neighbours, one per direction.
        let crossing: Vec<[Option<(f64, [f64; 2])>; 4]> = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let mut c = [None; 4];
                if !inside[k] {
                    return c;
                }
                for (d, slot) in c.iter_mut().enumerate() {
                    if let Some(m) = nb_of(k, d) {
                        if !inside[m] {
                            *slot = Some(cross(dom, grid.point(k), d, grid.h));
                        }
                    }
                }
                c
            })
            .collect();
        let mut kind = vec![Kind::Outside; grid.len()];
        for k in 0..grid.len() {
            if !inside[k] {
                continue;
            }
            let (i, j) = grid.ij(k);
            kind[k] = if i == 0 || j == 0 || i + 1 == nx || j + 1 == nt {
                Kind::Wall
            } else if crossing[k].iter().flatten().any(|c| c.0 < PIN_FRACTION) {
                Kind::Pinned
            } else {
                Kind::Unknown
            };
        }
        let mut unknown = vec![NONE; grid.len()];
        let mut nodes = Vec::new();
        for k in 0..grid.len() {
            if kind[k] == Kind::Unknown {
                unknown[k] = nodes.len();
                nodes.push(k);
            }
        }
        let n = nodes.len();
        if n == 0 {
            return Err(Error::Solver("no interior unknowns".into()));
        }
        let mut diag = vec![0.0; n];
        let mut nbrs = vec![[NONE; 4]; n];
        let mut couplings = Vec::new();
        let mut trip = Vec::with_capacity(5 * n);
        for (row, &k) in nodes.iter().enumerate() {
            for d in 0..4 {
                let m = nb_of(k, d).expect("unknowns are interior");
                match kind[m] {
                    Kind::Unknown => {
                        diag[row] += 1.0;
                        nbrs[row][d] = unknown[m];
                        trip.push(Triplet::new(row, unknown[m], -1.0));
                    }
                    Kind::Wall => {
                        diag[row] += 1.0;
                        couplings.push(Coupling { row, coef: 1.0, point: grid.point(m), wall: true });
                    }
                    Kind::Pinned => {
                        diag[row] += 1.0;
                        couplings.push(Coupling { row, coef: 1.0, point: grid.point(m), wall: false });
                    }
                    Kind::Outside => {
                        let (theta, p) = crossing[k][d].expect("crossing computed");
                        diag[row] += 1.0 / theta;
                        couplings.push(Coupling { row, coef: 1.0 / theta, point: p, wall: false });
                    }
                }
            }
            trip.push(Triplet::new(row, row, diag[row]));
        }
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::Solver(format!("assembly: {e:?}")))?;
        let llt = a.sp_cholesky(faer::Side::Lower).map_err(|e| Error::Solver(format!("Cholesky: {e:?}")))?;
        Ok(DirichletSolver { grid, kind, unknown, nodes, diag, nbrs, couplings, llt })
    }

    pub fn unknowns(&self) -> usize {
        self.nodes.len()
    }

    /// Solves one problem per data column. Returns nodal values (NaN below
    /// the graph) and the worst relative residual after refinement.
    pub fn solve_many<F>(&self, cols: usize, data: F) -> Result<(Vec<Vec<f64>>, f64)>
    where
        F: Fn(usize, [f64; 2], bool) -> f64 + Sync,
    {
        let n = self.nodes.len();
        let mut b = Mat::<f64>::zeros(n, cols);
        for c in &self.couplings {
            for col in 0..cols {
                b[(c.row, col)] += c.coef * data(col, c.point, c.wall);
            }
        }
        let mut x = self.llt.solve(&b);
        let mut worst: f64 = 0.0;
        for col in 0..cols {
            let bnorm = (0..n).map(|r| b[(r, col)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            let mut rel = 0.0;
            for _ in 0..4 {
                let r = self.residual(&x, &b, col);
                rel = r.iter().map(|v| v.abs()).fold(0.0, f64::max) / bnorm;
                if rel <= RESIDUAL_TOL {
                    break;
                }
                let corr = self.llt.solve(Mat::from_fn(n, 1, |i, _| r[i]));
                for i in 0..n {
                    x[(i, col)] += corr[(i, 0)];
                }
            }
            if rel > RESIDUAL_TOL {
                return Err(Error::Solver(format!("relative residual {rel:.3e} after refinement")));
            }
            worst = worst.max(rel);
        }
        let out = (0..cols)
            .map(|col| {
                (0..self.grid.len())
                    .map(|k| match self.kind[k] {
                        Kind::Outside => f64::NAN,
                        Kind::Unknown => x[(self.unknown[k], col)],
                        Kind::Wall => data(col, self.grid.point(k), true),
                        Kind::Pinned => data(col, self.grid.point(k), false),
                    })
                    .collect()
            })
            .collect();
        Ok((out, worst))
    }

    pub fn solve<F>(&self, data: F) -> Result<(Vec<f64>, f64)>
    where
        F: Fn([f64; 2], bool) -> f64 + Sync,
    {
        let (mut v, r) = self.solve_many(1, |_, p, w| data(p, w))?;
        Ok((v.pop().expect("one column"), r))
    }

    fn residual(&self, x: &Mat<f64>, b: &Mat<f64>, col: usize) -> Vec<f64> {
        (0..self.nodes.len())
            .map(|row| {
                let mut ax = self.diag[row] * x[(row, col)];
                for &m in &self.nbrs[row] {
                    if m != NONE {
                        ax -= x[(m, col)];
                    }
                }
                b[(row, col)] - ax
            })
            .collect()
    }

    pub fn is_inside(&self, k: usize) -> bool {
        self.kind[k] != Kind::Outside
    }

    /// True for nodes carrying Dirichlet data (walls and pinned nodes).
    pub fn is_dirichlet(&self, k: usize) -> bool {
        matches!(self.kind[k], Kind::Wall | Kind::Pinned)
    }
}

/// Fraction `θ ∈ (0, 1]` of the grid step from `p` to the graph along
/// direction `d` (0 = −x, 1 = +x, 2 = −t, 3 = +t), and the crossing point.
fn cross(dom: &GraphDomain, p: [f64; 2], d: usize, h: f64) -> (f64, [f64; 2]) {
    match d {
        2 => {
            let th = ((p[1] - dom.g(p[0])) / h).clamp(0.0, 1.0);
            (th, [p[0], dom.g(p[0])])
        }
        3 => (1.0, [p[0], p[1] + h]),
        _ => {
            let dir = if d == 0 { -1.0 } else { 1.0 };
            let f = |s: f64| p[1] - dom.g(p[0] + dir * s * h);
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let x = p[0] + dir * hi * h;
            (hi, [x, dom.g(x)])
        }
    }
}

/// Options for [`solve_green`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GreenOptions {
    /// Run the two auxiliary solves that measure the far-field error.
    pub richardson: bool,
}

impl Default for GreenOptions {
    fn default() -> Self {
        GreenOptions { richardson: true }
    }
}

/// Discrepancies of the auxiliary solves, relative to `max G` on the inner
/// half box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Richardson {
    pub fine: f64,
    pub wide: f64,
}

/// The Green function and its derivatives on one grid.
#[derive(Clone, Debug)]
pub struct GreenData {
    pub dom: GraphDomain,
    pub grid: Grid,
    pub h: f64,
    /// `G`, valid at nodes inside the domain and on an extension band of
    /// up to three nodes below the graph.
    pub g: Field<f64>,
    /// Nodes strictly above the graph.
    pub inside: Vec<bool>,
    /// `δ` at inside nodes.
    pub delta: Field<f64>,
    /// `∇G` as a column `(∂ₓG, ∂ₜG)` where `δ ≥ 2h`.
    pub grad: Field<Vec2>,
    /// Nodes where the gradient fell back to second-order differences.
    pub grad_fallback: usize,
    /// `∇²G` where `δ ≥ 4h`, symmetrized.
    pub hess: Field<Mat2>,
    /// Largest `|∂ₜ∂ₓG − ∂ₓ∂ₜG|` before symmetrization.
    pub hess_asymmetry: f64,
    pub z0: [f64; 2],
    /// Unnormalized solution value at `Z₀`.
    pub scale: f64,
    pub farfield: FarField,
    pub farfield_model: String,
    pub solve_residual: f64,
    pub richardson: Option<Richardson>,
    pub warning: Option<String>,
}

/// Solves for the Green function with pole at infinity, normalized by
/// `G(Z₀) = 1` with `Z₀ = (0, g(0) + 1)`.
pub fn solve_green(dom: &GraphDomain, grid_n: usize, opts: &GreenOptions) -> Result<GreenData> {
    if dom.dim_n != 2 {
        return Err(Error::InvalidInput("the Green solve is implemented for n = 2".into()));
    }
    if grid_n < 64 || !grid_n.is_power_of_two() {
        return Err(Error::InvalidInput(format!("grid_n must be a power of two ≥ 64, got {grid_n}")));
    }
    let base = if dom.grid_n == grid_n { dom.clone() } else { GraphDomain::assemble(dom.family.clone(), 2, dom.r, grid_n as f64)? };
    let mut gd = solve_raw(&base, grid_n)?;
    if opts.richardson {
        let fine_dom = GraphDomain::assemble(base.family.clone(), 2, base.r, 2.0 * grid_n as f64)?;
        let fine = solve_raw(&fine_dom, 2 * grid_n)?;
        let wide_dom = base.with_radius(1.5 * base.r)?;
        let wide = solve_raw(&wide_dom, grid_n + grid_n / 2)?;
        let rich = Richardson { fine: discrepancy(&gd, &fine), wide: discrepancy(&gd, &wide) };
        let worst = rich.fine.max(rich.wide);
        if worst > 0.2 {
            return Err(Error::invariant(
                "green.richardson",
                format!("far-field discrepancy {worst:.3} exceeds 20% (fine {:.3e}, wide {:.3e})", rich.fine, rich.wide),
            ));
        }
        if worst > 0.05 {
            gd.warning = Some(format!("Richardson discrepancy {worst:.3} exceeds 5%"));
        }
        gd.richardson = Some(rich);
    }
    Ok(gd)
}

/// One solve, normalized, with derivatives; no auxiliary checks.
fn solve_raw(dom: &GraphDomain, cells: usize) -> Result<GreenData> {
    let grid = grid_for(dom, cells);
    let solver = DirichletSolver::new(dom, grid)?;
    let ff = FarField::for_domain(dom);
    let (u, residual) = solver.solve(|p, wall| if wall { ff.wall(p) } else { 0.0 })?;
    let inside: Vec<bool> = (0..grid.len()).map(|k| solver.is_inside(k)).collect();
    let mut valid = inside.clone();
    let mut values: Vec<f64> = u.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
    extend_below(dom, &grid, &inside, &mut values, &mut valid);
    let raw = Field { grid, values, valid };
    let z0 = [0.0, dom.g(0.0) + 1.0];
    let scale = raw.bicubic(z0).or_else(|| raw.bilinear(z0)).ok_or(Error::OutsideDomain(z0[0], z0[1]))?;
    if !(scale > 0.0) {
        return Err(Error::invariant("green.normalization", format!("u(Z0) = {scale:.3e} is not positive")));
    }
    let g = raw.map(0.0, |_, v| Some(v / scale));
    let delta = Field::from_fn(grid, 0.0, |k| inside[k].then(|| dom.dist_unsigned(grid.point(k))));
    let h = grid.h;
    let grad_nodes = par_nodes(&grid, |k| {
        let d = delta.at(k)?;
        if d < 2.0 * h {
            return None;
        }
        scalar_gradient(&g, k)
    });
    let fallback: Vec<bool> = grad_nodes.iter().map(|v| v.is_some_and(|v| v.1)).collect();
    let (grad, fallbacks) = unzip_field(grid, Vec2::zeros(), grad_nodes);
    let grad_fallback = fallbacks.iter().filter(|&&f| f).count();
    let hess_nodes = par_nodes(&grid, |k| {
        let d = delta.at(k)?;
        if d < 4.0 * h {
            return None;
        }
        let (i, j) = grid.ij(k);
        // Only full fourth-order support: the two cross-derivative routes
        // then commute exactly and the asymmetry measures rounding.
        let (ii, jj) = (i as isize, j as isize);
        let stencil = (-2..=2).flat_map(|o| [(ii + o, jj), (ii, jj + o)]);
        for (a, b) in stencil {
            if a < 0 || b < 0 || a as usize >= grid.nx || b as usize >= grid.nt {
                return None;
            }
            if fallback[grid.idx(a as usize, b as usize)] {
                return None;
            }
        }
        let uxx = g.d2_4(i, j, 0)?;
        let utt = g.d2_4(i, j, 1)?;
        let dt_grad = grad.d1_4(i, j, 1)?;
        let dx_grad = grad.d1_4(i, j, 0)?;
        let (a, b) = (dt_grad[0], dx_grad[1]);
        let uxt = 0.5 * (a + b);
        Some((Mat2::new(uxx, uxt, uxt, utt), (a - b).abs()))
    });
    let (hess, asym) = unzip_field(grid, Mat2::zeros(), hess_nodes);
    let hess_asymmetry = asym.into_iter().fold(0.0, f64::max);
    Ok(GreenData {
        dom: dom.clone(),
        grid,
        h,
        g,
        inside,
        delta,
        grad,
        grad_fallback,
        hess,
        hess_asymmetry,
        z0,
        scale,
        farfield_model: ff.describe(),
        farfield: ff,
        solve_residual: residual,
        richardson: None,
        warning: None,
    })
}

/// Fills up to three nodes below the graph in each column by linear
/// extrapolation along the column through the zero boundary value.
fn extend_below(dom: &GraphDomain, grid: &Grid, inside: &[bool], values: &mut [f64], valid: &mut [bool]) {
    for i in 0..grid.nx {
        let x = grid.x(i);
        let gx = dom.g(x);
        let Some(first) = (0..grid.nt).find(|&j| inside[grid.idx(i, j)]) else { continue };
        let Some(r) = (first..grid.nt).find(|&j| grid.t(j) - gx >= 0.5 * grid.h) else { continue };
        let kr = grid.idx(i, r);
        let slope = values[kr] / (grid.t(r) - gx);
        for j in first.saturating_sub(3)..first {
            let k = grid.idx(i, j);
            values[k] = slope * (grid.t(j) - gx);
            valid[k] = true;
        }
    }
}

/// `max |G_aux − G| / max G` over inner-half-box nodes with `δ ≥ 4h`.
fn discrepancy(base: &GreenData, aux: &GreenData) -> f64 {
    let r = base.dom.r;
    let grid = base.grid;
    let (num, den) = (0..grid.len())
        .into_par_iter()
        .filter_map(|k| {
            let p = grid.point(k);
            let d = base.delta.at(k)?;
            if d < 4.0 * base.h || p[0].abs() > 0.5 * r || p[1] - base.dom.g(p[0]) > 0.5 * r {
                return None;
            }
            let a = aux.g.interp(p)?;
            let b = base.g.at(k)?;
            Some(((a - b).abs(), b.abs()))
        })
        .reduce(|| (0.0, 0.0), |x, y| (x.0.max(y.0), x.1.max(y.1)));
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl GreenData {
    /// Inside, `δ ≥ 4h`, and at least `4h` from the side and top walls.
    pub fn admissible(&self, k: usize) -> bool {
        let Some(d) = self.delta.at(k) else { return false };
        let p = self.grid.point(k);
        let m = 4.0 * self.h;
        d >= m && p[0].abs() <= self.dom.r - m && p[1] <= self.grid.t1() - m && self.hess.valid[k]
    }

    pub fn admissible_nodes(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&k| self.admissible(k)).collect()
    }

    /// Number of inside nodes excluded from the admissible set.
    pub fn collar_excluded(&self) -> usize {
        (0..self.grid.len()).filter(|&k| self.inside[k] && !self.admissible(k)).count()
    }

    /// `G` off-grid by bilinear interpolation.
    pub fn g_at(&self, p: [f64; 2]) -> Option<f64> {
        self.g.bilinear(p)
    }

    pub fn grad_at(&self, p: [f64; 2]) -> Option<Vec2> {
        self.grad.bilinear(p)
    }

    /// `∇²G` off-grid; errors inside the `4h` collar.
    pub fn hess_at(&self, p: [f64; 2]) -> Result<Mat2> {
        let d = self.dom.dist_to_boundary(p)?;
        if d < 4.0 * self.h {
            return Err(Error::InsideHessianCollar(p[0], p[1]));
        }
        self.hess.bilinear(p).ok_or(Error::InsideHessianCollar(p[0], p[1]))
    }

    /// Largest five-point residual `|4G − ΣG_nb|` over nodes whose four
    /// neighbours are inside, relative to `max G`.
    pub fn laplacian_residual(&self) -> f64 {
        let grid = self.grid;
        let worst = (0..grid.len())
            .into_par_iter()
            .filter_map(|k| {
                let (i, j) = grid.ij(k);
                if i == 0 || j == 0 || i + 1 == grid.nx || j + 1 == grid.nt {
                    return None;
                }
                let ks = [k, k - 1, k + 1, k - grid.nx, k + grid.nx];
                if ks.iter().any(|&m| !self.inside[m]) {
                    return None;
                }
                let v = self.g.values[k];
                Some((4.0 * v - ks[1..].iter().map(|&m| self.g.values[m]).sum::<f64>()).abs())
            })
            .reduce(|| 0.0, f64::max);
        worst / self.max_g()
    }

    pub fn max_g(&self) -> f64 {
        (0..self.grid.len()).filter(|&k| self.inside[k]).map(|k| self.g.values[k]).fold(0.0, f64::max)
    }

    /// Largest `|∇G|` over admissible nodes.
    pub fn max_grad(&self) -> f64 {
        self.admissible_nodes().into_iter().map(|k| self.grad.values[k].norm()).fold(0.0, f64::max)
    }

    /// Largest `|G|` interpolated at boundary samples inside the grid hull.
    pub fn boundary_trace(&self) -> f64 {
        self.dom
            .samples
            .iter()
            .filter(|s| s.x.abs() <= self.dom.r - 2.0 * self.h)
            .filter_map(|s| self.g.bilinear([s.x, s.t]))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Carleson candidate `δ²|∇²G|/G` (Frobenius norm) at admissible nodes.
    pub fn hessian_ratio(&self) -> Field<f64> {
        Field::from_fn(self.grid, 0.0, |k| {
            self.admissible(k).then(|| {
                let d = self.delta.values[k];
                d * d * self.hess.values[k].norm() / self.g.values[k]
            })
        })
    }

    /// Admissible node positions at distance `≥ exclude` from the origin.
    pub fn admissible_points(&self, exclude: f64) -> Vec<[f64; 2]> {
        self.admissible_nodes()
            .into_iter()
            .map(|k| self.grid.point(k))
            .filter(|p| p[0].hypot(p[1]) >= exclude)
            .collect()
    }

    /// Largest relative error against the closed form over admissible nodes
    /// at distance `≥ exclude` from the origin.
    pub fn closed_form_error(&self, exclude: f64) -> Option<f64> {
        self.closed_form_error_at(&self.admissible_points(exclude))
    }

    /// Largest relative closed-form error at the grid nodes nearest to
    /// `points`. Passing the admissible nodes of a coarser grid compares
    /// two resolutions on the same set.
    pub fn closed_form_error_at(&self, points: &[[f64; 2]]) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for p in points {
            let (i, j) = self.grid.nearest(*p)?;
            let q = [self.grid.x(i), self.grid.t(j)];
            let exact = closed_form(&self.dom, &q)?;
            worst = worst.max((self.g.values[self.grid.idx(i, j)] - exact).abs() / exact.abs());
        }
        Some(worst)
    }
}

/// Exact normalized Green function for flat, tilted and cone domains.
/// In `n = 3` only the flat and tilted families have one.
pub fn closed_form(dom: &GraphDomain, p: &[f64]) -> Option<f64> {
    let t = *p.last()?;
    match (&dom.family, p.len()) {
        (GraphFamily::Flat, _) => Some(t),
        (GraphFamily::Tilted { slope }, _) => Some(t - slope * p[0]),
        (GraphFamily::Cone { .. }, 2) => {
            let ff = FarField::for_domain(dom);
            Some(ff.value([p[0], p[1]]) / ff.value([0.0, 1.0]))
        }
        _ => None,
    }
}

/// Exact gradient of [`closed_form`] in `n = 2`.
pub fn closed_form_grad(dom: &GraphDomain, p: [f64; 2]) -> Option<Vec2> {
    match &dom.family {
        GraphFamily::Flat => Some(Vec2::new(0.0, 1.0)),
        GraphFamily::Tilted { slope } => Some(Vec2::new(-slope, 1.0)),
        GraphFamily::Cone { .. } => {
            let FarField::Sector { apex, start, opening } = FarField::for_domain(dom) else { return None };
            let k = PI / opening;
            let (dx, dt) = (p[0] - apex[0], p[1] - apex[1]);
            let r = dx.hypot(dt);
            let phi = dt.atan2(dx);
            let th = (phi - start).rem_euclid(2.0 * PI);
            let (gr, gth) = (k * r.powf(k - 1.0) * (k * th).sin(), k * r.powf(k - 1.0) * (k * th).cos());
            let (s, c) = phi.sin_cos();
            let norm = FarField::for_domain(dom).value([0.0, 1.0]);
            Some(Vec2::new(gr * c - gth * s, gr * s + gth * c) / norm)
        }
        _ => None,
    }
}

/// Result of [`check_gradient_bound`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientBound {
    /// `sup δ|∇G|/G` over admissible nodes.
    pub sup: f64,
    pub argmax: [f64; 2],
    /// The same supremum from the closed form, where one exists.
    pub oracle: Option<f64>,
    pub admissible: usize,
    pub excluded: usize,
}

/// Empirical constant of `|∇G| ≤ C G/δ`.
pub fn check_gradient_bound(gd: &GreenData) -> Result<GradientBound> {
    let nodes = gd.admissible_nodes();
    let mut sup = 0.0;
    let mut argmax = [0.0; 2];
    let mut oracle: Option<f64> = Some(0.0);
    for &k in &nodes {
        let p = gd.grid.point(k);
        let d = gd.delta.values[k];
        let v = d * gd.grad.values[k].norm() / gd.g.values[k];
        if v > sup {
            sup = v;
            argmax = p;
        }
        oracle = match (oracle, closed_form(&gd.dom, &p), closed_form_grad(&gd.dom, p)) {
            (Some(o), Some(g), Some(dg)) => Some(o.max(d * dg.norm() / g)),
            _ => None,
        };
    }
    if !sup.is_finite() {
        return Err(Error::invariant("green.gradient_bound", format!("δ|∇G|/G = {sup} at {argmax:?}")));
    }
    Ok(GradientBound { sup, argmax, oracle, admissible: nodes.len(), excluded: gd.collar_excluded() })
}
