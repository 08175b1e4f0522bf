//! Truncated Lipschitz graph domains, bi-Lipschitz maps, Whitney layering
//! and recovery of the perturbed graph.
//!
//! A domain is `{(x, t) : t > g(x)}` cut to the box
//! `[-R, R] × [min g − 0.1, max g + R]`. The boundary is carried as an
//! ordered polyline of exact graph samples, spaced at most `R/grid_n` in
//! arclength, with every kink of `g` included as a vertex. Distances are
//! computed by projection onto that polyline, which is exact for piecewise
//! linear `g`.

use crate::error::{Error, Result};
use crate::grid::{Mat2, Vec2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Named graph families `g : ℝ → ℝ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphFamily {
    Flat,
    Tilted { slope: f64 },
    /// `g(x) = M|x|`.
    Cone { lip: f64 },
    /// `g(x) = amp · sin(freq · x)`.
    Sine { amp: f64, freq: f64 },
    /// Linear interpolation of `[x, g]` knots, extended by the end slopes.
    PiecewiseLinear { knots: Vec<[f64; 2]> },
    /// Tabulated graph, interpolated linearly.
    CustomTable { xs: Vec<f64>, gs: Vec<f64> },
}

impl GraphFamily {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        match self {
            GraphFamily::Flat => Ok(()),
            GraphFamily::Tilted { slope } if !slope.is_finite() => bad("tilted slope must be finite"),
            GraphFamily::Cone { lip } if !(lip.is_finite() && *lip >= 0.0) => bad("cone M must be finite and ≥ 0"),
            GraphFamily::Sine { amp, freq } if !(amp.is_finite() && freq.is_finite()) => {
                bad("sine parameters must be finite")
            }
            GraphFamily::PiecewiseLinear { knots } => {
                if knots.len() < 2 {
                    return bad("piecewise-linear graph needs at least two knots");
                }
                if knots.iter().any(|k| !(k[0].is_finite() && k[1].is_finite())) {
                    return bad("piecewise-linear knots must be finite");
                }
                if knots.windows(2).any(|w| w[1][0] <= w[0][0]) {
                    return bad("piecewise-linear knots must have strictly increasing x");
                }
                Ok(())
            }
            GraphFamily::CustomTable { xs, gs } => {
                if xs.len() < 2 || xs.len() != gs.len() {
                    return bad("custom table needs matching xs/gs of length ≥ 2");
                }
                if xs.iter().chain(gs).any(|v| !v.is_finite()) {
                    return bad("custom table entries must be finite");
                }
                if xs.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("custom table xs must be strictly increasing");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn table(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            GraphFamily::PiecewiseLinear { knots } => {
                Some((knots.iter().map(|k| k[0]).collect(), knots.iter().map(|k| k[1]).collect()))
            }
            GraphFamily::CustomTable { xs, gs } => Some((xs.clone(), gs.clone())),
            _ => None,
        }
    }

    /// Exact Lipschitz constant of the family.
    pub fn lipschitz(&self) -> f64 {
        match self {
            GraphFamily::Flat => 0.0,
            GraphFamily::Tilted { slope } => slope.abs(),
            GraphFamily::Cone { lip } => *lip,
            GraphFamily::Sine { amp, freq } => (amp * freq).abs(),
            _ => {
                let (xs, gs) = self.table().expect("tabulated family");
                xs.windows(2)
                    .zip(gs.windows(2))
                    .map(|(x, g)| ((g[1] - g[0]) / (x[1] - x[0])).abs())
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Piecewise-linear interpolant with linear extension beyond the ends.
#[derive(Clone, Debug)]
struct Table {
    xs: Vec<f64>,
    gs: Vec<f64>,
    kinks: Vec<f64>,
}

impl Table {
    fn new(xs: Vec<f64>, gs: Vec<f64>) -> Self {
        let slope = |k: usize| (gs[k + 1] - gs[k]) / (xs[k + 1] - xs[k]);
        let kinks = (1..xs.len() - 1)
            .filter(|&k| (slope(k) - slope(k - 1)).abs() > 1e-9 * (1.0 + slope(k).abs()))
            .map(|k| xs[k])
            .collect();
        Table { xs, gs, kinks }
    }

    fn segment(&self, x: f64) -> usize {
        let k = self.xs.partition_point(|&v| v <= x);
        k.saturating_sub(1).min(self.xs.len() - 2)
    }

    fn eval(&self, x: f64) -> f64 {
        let k = self.segment(x);
        let s = (self.gs[k + 1] - self.gs[k]) / (self.xs[k + 1] - self.xs[k]);
        self.gs[k] + s * (x - self.xs[k])
    }

    fn slope(&self, x: f64) -> f64 {
        let k = self.segment(x);
        (self.gs[k + 1] - self.gs[k]) / (self.xs[k + 1] - self.xs[k])
    }
}

/// One boundary sample: the graph point, its arclength coordinate and the
/// inward unit normal (bisector at kinks).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySample {
    pub x: f64,
    pub t: f64,
    pub s: f64,
    pub normal: [f64; 2],
}

/// An asymptote line `t = t₀ + slope (x − x₀)` through `point = (x₀, t₀)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Line {
    pub slope: f64,
    pub point: [f64; 2],
}

/// A truncated Lipschitz graph domain.
#[derive(Clone, Debug)]
pub struct GraphDomain {
    pub family: GraphFamily,
    pub dim_n: usize,
    pub lipschitz_m: f64,
    pub r: f64,
    pub grid_n: usize,
    /// Bottom of the truncation box, `min g − 0.1`.
    pub t_lo: f64,
    /// Top of the truncation box, `max g + R`.
    pub t_hi: f64,
    pub samples: Vec<BoundarySample>,
    table: Option<Table>,
    tree: SegmentTree,
}

/// Builds a domain, checking the family parameters and its Lipschitz bound.
///
/// `grid_n` must be a power of two ≥ 64. Dimension 3 is limited to the
/// flat, tilted and cone families and supports closed-form queries only.
pub fn build_domain(family: GraphFamily, n: usize, r: f64, grid_n: usize) -> Result<GraphDomain> {
    if grid_n < 64 || !grid_n.is_power_of_two() {
        return Err(Error::InvalidInput(format!("grid_n must be a power of two ≥ 64, got {grid_n}")));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidInput(format!("R must be positive, got {r}")));
    }
    match n {
        2 => {}
        3 if matches!(family, GraphFamily::Flat | GraphFamily::Tilted { .. } | GraphFamily::Cone { .. }) => {}
        3 => return Err(Error::InvalidInput("n = 3 supports flat, tilted and cone only".into())),
        _ => return Err(Error::InvalidInput(format!("dimension {n} unsupported (n ∈ {{2, 3}})"))),
    }
    GraphDomain::assemble(family, n, r, grid_n as f64)
}

impl GraphDomain {
    /// `cells` is `2R/h`; internal callers use non-power-of-two values for
    /// auxiliary boxes at the same spacing.
    pub(crate) fn assemble(family: GraphFamily, n: usize, r: f64, cells: f64) -> Result<Self> {
        family.validate()?;
        let lip = family.lipschitz();
        let table = family.table().map(|(xs, gs)| Table::new(xs, gs));
        let mut dom = GraphDomain {
            family,
            dim_n: n,
            lipschitz_m: lip,
            r,
            grid_n: cells.round() as usize,
            t_lo: 0.0,
            t_hi: 0.0,
            samples: Vec::new(),
            table,
            tree: SegmentTree::default(),
        };
        if n == 3 {
            // g(x) = slope·x₁ or M|x|: extremes over the box are explicit.
            let m = lip * r * std::f64::consts::SQRT_2;
            let lo = if matches!(dom.family, GraphFamily::Cone { .. }) { 0.0 } else { -m };
            dom.t_lo = lo - 0.1;
            dom.t_hi = m + r;
            return Ok(dom);
        }
        dom.samples = dom.sample_boundary(cells);
        dom.tree = SegmentTree::new(&dom.samples);
        let sampled = dom.sampled_lipschitz();
        if sampled > dom.lipschitz_m + 1e-9 {
            return Err(Error::Lipschitz { sampled, declared: dom.lipschitz_m });
        }
        let (gmin, gmax) = dom
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s.t), b.max(s.t)));
        dom.t_lo = gmin - 0.1;
        dom.t_hi = gmax + r;
        Ok(dom)
    }

    /// Same family and sample spacing on a box of half-width `r`.
    pub(crate) fn with_radius(&self, r: f64) -> Result<Self> {
        let cells = self.grid_n as f64 * r / self.r;
        GraphDomain::assemble(self.family.clone(), self.dim_n, r, cells)
    }

    /// The graph function `g`.
    pub fn g(&self, x: f64) -> f64 {
        match &self.family {
            GraphFamily::Flat => 0.0,
            GraphFamily::Tilted { slope } => slope * x,
            GraphFamily::Cone { lip } => lip * x.abs(),
            GraphFamily::Sine { amp, freq } => amp * (freq * x).sin(),
            _ => self.table.as_ref().expect("tabulated family").eval(x),
        }
    }

    /// Right derivative of `g`.
    pub fn slope(&self, x: f64) -> f64 {
        match &self.family {
            GraphFamily::Flat => 0.0,
            GraphFamily::Tilted { slope } => *slope,
            GraphFamily::Cone { lip } => {
                if x >= 0.0 {
                    *lip
                } else {
                    -lip
                }
            }
            GraphFamily::Sine { amp, freq } => amp * freq * (freq * x).cos(),
            _ => self.table.as_ref().expect("tabulated family").slope(x),
        }
    }

    /// `g` on `ℝ^{n−1}`; for `n = 3` the tilt acts on the first coordinate.
    pub fn g_nd(&self, x: &[f64]) -> f64 {
        match (&self.family, x.len()) {
            (_, 1) => self.g(x[0]),
            (GraphFamily::Flat, _) => 0.0,
            (GraphFamily::Tilted { slope }, _) => slope * x[0],
            (GraphFamily::Cone { lip }, _) => lip * x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            _ => unreachable!("n = 3 restricted to flat, tilted, cone"),
        }
    }

    /// Kinks of `g` strictly inside `(a, b)`.
    pub fn kinks_in(&self, a: f64, b: f64) -> Vec<f64> {
        let all: &[f64] = match &self.family {
            GraphFamily::Cone { .. } => &[0.0],
            GraphFamily::PiecewiseLinear { .. } | GraphFamily::CustomTable { .. } => {
                &self.table.as_ref().expect("tabulated family").kinks
            }
            _ => &[],
        };
        let lo = all.partition_point(|&k| k <= a);
        let hi = all.partition_point(|&k| k < b);
        all[lo..hi].to_vec()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[1] > self.g(p[0])
    }

    /// Largest arclength gap between consecutive boundary samples.
    pub fn sample_spacing(&self) -> f64 {
        self.samples.windows(2).map(|w| w[1].s - w[0].s).fold(0.0, f64::max)
    }

    fn sample_boundary(&self, cells: f64) -> Vec<BoundarySample> {
        let r = self.r;
        let dx = (r / cells) / (1.0 + self.lipschitz_m * self.lipschitz_m).sqrt();
        let k = (2.0 * r / dx).ceil() as usize;
        let mut xs: Vec<f64> = (0..=k).map(|i| -r + 2.0 * r * i as f64 / k as f64).collect();
        xs.extend(self.kinks_in(-r, r));
        if let Some(tab) = &self.table {
            xs.extend(tab.xs.iter().copied().filter(|&x| x > -r && x < r));
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * r);
        let pts: Vec<[f64; 2]> = xs.iter().map(|&x| [x, self.g(x)]).collect();
        let seg_normal = |a: [f64; 2], b: [f64; 2]| {
            let (dx, dt) = (b[0] - a[0], b[1] - a[1]);
            let l = dx.hypot(dt);
            [-dt / l, dx / l]
        };
        let mut s = 0.0;
        let mut out = Vec::with_capacity(pts.len());
        for (k, p) in pts.iter().enumerate() {
            if k > 0 {
                s += (p[0] - pts[k - 1][0]).hypot(p[1] - pts[k - 1][1]);
            }
            let mut nrm = [0.0, 0.0];
            if k > 0 {
                let n = seg_normal(pts[k - 1], *p);
                nrm = [nrm[0] + n[0], nrm[1] + n[1]];
            }
            if k + 1 < pts.len() {
                let n = seg_normal(*p, pts[k + 1]);
                nrm = [nrm[0] + n[0], nrm[1] + n[1]];
            }
            let l = nrm[0].hypot(nrm[1]);
            out.push(BoundarySample { x: p[0], t: p[1], s, normal: [nrm[0] / l, nrm[1] / l] });
        }
        out
    }

    /// Largest difference quotient over consecutive boundary samples.
    pub fn sampled_lipschitz(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| ((w[1].t - w[0].t) / (w[1].x - w[0].x)).abs())
            .fold(0.0, f64::max)
    }

    /// `δ(X) = dist(X, ∂Ω)`; errors for points below the graph.
    pub fn dist_to_boundary(&self, p: [f64; 2]) -> Result<f64> {
        if p[1] < self.g(p[0]) {
            return Err(Error::OutsideDomain(p[0], p[1]));
        }
        Ok(self.dist_unsigned(p))
    }

    /// Distance to the boundary polyline from either side.
    pub fn dist_unsigned(&self, p: [f64; 2]) -> f64 {
        self.closest_point(p).1
    }

    /// Nearest point on the boundary polyline and its distance.
    pub fn closest_point(&self, p: [f64; 2]) -> ([f64; 2], f64) {
        let gx = self.g(p[0]);
        let mut best = ((p[1] - gx).abs(), [p[0], gx]);
        let tree = &self.tree;
        if tree.nodes.is_empty() {
            return (best.1, best.0);
        }
        let sm = &self.samples;
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            let node = &tree.nodes[i];
            if node.bbox_dist(p) >= best.0 {
                continue;
            }
            match node.children {
                None => {
                    for k in node.segs.0..node.segs.1 {
                        let (q, d) = seg_closest(p, [sm[k].x, sm[k].t], [sm[k + 1].x, sm[k + 1].t]);
                        if d < best.0 {
                            best = (d, q);
                        }
                    }
                }
                Some((a, b)) => {
                    // Nearer child on top.
                    let (near, far) =
                        if tree.nodes[a].bbox_dist(p) <= tree.nodes[b].bbox_dist(p) { (a, b) } else { (b, a) };
                    stack.push(far);
                    stack.push(near);
                }
            }
        }
        (best.1, best.0)
    }

    /// Distance in `n = 3` from the closed-form geometry of the family.
    pub fn dist_nd(&self, p: &[f64]) -> Result<f64> {
        let (xs, t) = p.split_at(p.len() - 1);
        let t = t[0];
        if t < self.g_nd(xs) {
            return Err(Error::OutsideDomain(p[0], t));
        }
        Ok(match &self.family {
            GraphFamily::Flat => t,
            GraphFamily::Tilted { slope } => (t - slope * xs[0]) / (1.0 + slope * slope).sqrt(),
            GraphFamily::Cone { lip } => {
                // Meridian half-plane: distance to the ray t = Mρ, ρ ≥ 0.
                let rho = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                seg_closest([rho, t], [0.0, 0.0], [1e12, lip * 1e12]).1.min(rho.hypot(t))
            }
            _ => self.dist_unsigned([xs[0], t]),
        })
    }

    /// Asymptote lines at `x → −∞` and `x → +∞`.
    ///
    /// Tabulated graphs use their end segments (piecewise linear) or a least
    /// squares fit of the outer tenth of the samples (custom tables).
    pub fn asymptotes(&self) -> (Line, Line) {
        let line = |slope: f64, p: [f64; 2]| Line { slope, point: p };
        match &self.family {
            GraphFamily::Flat | GraphFamily::Sine { .. } => (line(0.0, [0.0, 0.0]), line(0.0, [0.0, 0.0])),
            GraphFamily::Tilted { slope } => (line(*slope, [0.0, 0.0]), line(*slope, [0.0, 0.0])),
            GraphFamily::Cone { lip } => (line(-lip, [0.0, 0.0]), line(*lip, [0.0, 0.0])),
            GraphFamily::PiecewiseLinear { knots } => {
                let n = knots.len();
                let sl = |a: [f64; 2], b: [f64; 2]| (b[1] - a[1]) / (b[0] - a[0]);
                (line(sl(knots[0], knots[1]), knots[0]), line(sl(knots[n - 2], knots[n - 1]), knots[n - 1]))
            }
            GraphFamily::CustomTable { xs, gs } => {
                let n = xs.len();
                let m = (n / 10).max(2);
                (fit_line(&xs[..m], &gs[..m]), fit_line(&xs[n - m..], &gs[n - m..]))
            }
        }
    }

    /// Writes the boundary samples as CSV `x,t,arclength`.
    pub fn write_boundary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "t", "arclength"])?;
        for s in &self.samples {
            w.write_record(&[fmt(s.x), fmt(s.t), fmt(s.s)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Checks convexity of `g` by second differences over the samples.
    pub fn check_convex(&self) -> Result<()> {
        for w in self.samples.windows(3) {
            let s0 = (w[1].t - w[0].t) / (w[1].x - w[0].x);
            let s1 = (w[2].t - w[1].t) / (w[2].x - w[1].x);
            let d2 = s1 - s0;
            if d2 < -1e-9 {
                return Err(Error::NotConvex(d2, w[1].x));
            }
        }
        Ok(())
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn fit_line(xs: &[f64], gs: &[f64]) -> Line {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let mg = gs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxg: f64 = xs.iter().zip(gs).map(|(x, g)| (x - mx) * (g - mg)).sum();
    Line { slope: sxg / sxx, point: [mx, mg] }
}

/// Closest point of segment `[a, b]` to `p`, and the distance.
/// Bounding boxes over runs of consecutive boundary segments, for nearest
/// point queries in `O(√(δ/h))` segment tests instead of `O(δ/h)`.
#[derive(Clone, Debug, Default)]
struct SegmentTree {
    nodes: Vec<TreeNode>,
}

#[derive(Clone, Debug)]
struct TreeNode {
    /// `[x_min, x_max, t_min, t_max]`.
    bbox: [f64; 4],
    /// Segments `k..l`, segment `k` joining samples `k` and `k + 1`.
    segs: (usize, usize),
    children: Option<(usize, usize)>,
}

impl TreeNode {
    fn bbox_dist(&self, p: [f64; 2]) -> f64 {
        let [x0, x1, t0, t1] = self.bbox;
        let dx = (x0 - p[0]).max(p[0] - x1).max(0.0);
        let dt = (t0 - p[1]).max(p[1] - t1).max(0.0);
        dx.hypot(dt)
    }
}

const LEAF_SEGMENTS: usize = 8;

impl SegmentTree {
    fn new(samples: &[BoundarySample]) -> Self {
        let mut tree = SegmentTree { nodes: Vec::new() };
        if samples.len() >= 2 {
            tree.build(samples, 0, samples.len() - 1);
        }
        tree
    }

    fn build(&mut self, sm: &[BoundarySample], lo: usize, hi: usize) -> usize {
        let id = self.nodes.len();
        let bbox = sm[lo..=hi].iter().fold(
            [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY],
            |b, s| [b[0].min(s.x), b[1].max(s.x), b[2].min(s.t), b[3].max(s.t)],
        );
        self.nodes.push(TreeNode { bbox, segs: (lo, hi), children: None });
        if hi - lo > LEAF_SEGMENTS {
            let mid = lo + (hi - lo) / 2;
            let a = self.build(sm, lo, mid);
            let b = self.build(sm, mid, hi);
            self.nodes[id].children = Some((a, b));
        }
        id
    }
}

pub(crate) fn seg_closest(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> ([f64; 2], f64) {
    let (dx, dt) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dt * dt;
    let u = if l2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dt) / l2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + u * dx, a[1] + u * dt];
    (q, (p[0] - q[0]).hypot(p[1] - q[1]))
}

// ---------------------------------------------------------------------------
// Bi-Lipschitz maps

/// The perturbation family. `ε` scales every non-rigid part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MapSpec {
    Identity,
    /// `Φ(X) = X + c`.
    Translation { c: [f64; 2] },
    /// `Φ(X) = X (I + εE)`, row-vector convention.
    Linear { e: [[f64; 2]; 2] },
    /// `Φ(x, t) = (x + εt, t)`.
    Shear,
    /// `Φ(x, t) = (x, t + ε sin x)`.
    Wavy,
    /// `Φ(X) = X R(θ)` with `θ = ε · angle`.
    Rotation { angle: f64 },
}

/// `Φ` with its analytic Jacobian `(∇Φ)ᵢⱼ = ∂ᵢΦⱼ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiLipMap {
    pub spec: MapSpec,
    pub eps: f64,
}

/// Both norms of `∇Φ − I` the map guarantees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpsBound {
    pub max_entry: f64,
    pub operator: f64,
}

impl BiLipMap {
    pub fn new(spec: MapSpec, eps: f64) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::InvalidInput(format!("ε must be finite and ≥ 0, got {eps}")));
        }
        Ok(BiLipMap { spec, eps })
    }

    pub fn identity() -> Self {
        BiLipMap { spec: MapSpec::Identity, eps: 0.0 }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (x, t, e) = (p[0], p[1], self.eps);
        match &self.spec {
            MapSpec::Identity => p,
            MapSpec::Translation { c } => [x + c[0], t + c[1]],
            MapSpec::Linear { e: m } => [
                x + e * (x * m[0][0] + t * m[1][0]),
                t + e * (x * m[0][1] + t * m[1][1]),
            ],
            MapSpec::Shear => [x + e * t, t],
            MapSpec::Wavy => [x, t + e * x.sin()],
            MapSpec::Rotation { angle } => {
                let (s, c) = (e * angle).sin_cos();
                [x * c - t * s, x * s + t * c]
            }
        }
    }

    /// Row-convention Jacobian: row `i` is `∂ᵢΦ`.
    pub fn jacobian(&self, p: [f64; 2]) -> Mat2 {
        let e = self.eps;
        match &self.spec {
            MapSpec::Identity | MapSpec::Translation { .. } => Mat2::identity(),
            MapSpec::Linear { e: m } => {
                Mat2::new(1.0 + e * m[0][0], e * m[0][1], e * m[1][0], 1.0 + e * m[1][1])
            }
            MapSpec::Shear => Mat2::new(1.0, 0.0, e, 1.0),
            MapSpec::Wavy => Mat2::new(1.0, e * p[0].cos(), 0.0, 1.0),
            MapSpec::Rotation { angle } => {
                let (s, c) = (e * angle).sin_cos();
                Mat2::new(c, s, -s, c)
            }
        }
    }

    /// Sup over the plane of `‖∇Φ − I‖` in both norms.
    pub fn eps_bound(&self) -> EpsBound {
        let e = self.eps;
        match &self.spec {
            MapSpec::Identity | MapSpec::Translation { .. } => EpsBound { max_entry: 0.0, operator: 0.0 },
            MapSpec::Linear { e: m } => {
                let em = Mat2::new(m[0][0], m[0][1], m[1][0], m[1][1]) * e;
                EpsBound { max_entry: crate::grid::max_entry(&em), operator: crate::grid::op_norm(&em) }
            }
            MapSpec::Shear | MapSpec::Wavy => EpsBound { max_entry: e, operator: e },
            MapSpec::Rotation { angle } => {
                let th = (e * angle).abs();
                EpsBound { max_entry: th.sin().max(1.0 - th.cos()), operator: 2.0 * (0.5 * th).sin() }
            }
        }
    }

    /// Solves `Φ(X) = y` by Newton's method.
    pub fn invert(&self, y: [f64; 2]) -> Option<[f64; 2]> {
        let mut x = Vec2::new(y[0], y[1]);
        for _ in 0..50 {
            let f = self.apply([x[0], x[1]]);
            let r = Vec2::new(y[0] - f[0], y[1] - f[1]);
            if r.norm() <= 1e-13 * (1.0 + x.norm()) {
                return Some([x[0], x[1]]);
            }
            let j = self.jacobian([x[0], x[1]]);
            x += j.transpose().try_inverse()? * r;
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Whitney layering

/// An axis-aligned square inside the domain with side comparable to δ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WhitneyBox {
    pub center: [f64; 2],
    pub half_width: f64,
    pub generation: usize,
    pub delta_at_center: f64,
}

impl WhitneyBox {
    pub fn area(&self) -> f64 {
        4.0 * self.half_width * self.half_width
    }
}

/// Result of [`whitney_decomposition`].
#[derive(Clone, Debug, Serialize)]
pub struct WhitneyDecomposition {
    pub x0: f64,
    pub r: f64,
    pub boxes: Vec<WhitneyBox>,
    /// Number of resolved generations.
    pub generations: usize,
    /// Smallest generation scale `d` kept; boxes need `half_width = d/8 ≥ 2h`.
    pub cutoff: f64,
    /// δ below which nothing is resolved (`d_last / 2`).
    pub collar_delta: f64,
    /// Uncovered fraction of `{Y ∈ B(x₀, r) ∩ Ω : δ(Y) ≥ collar_delta}`.
    pub leakage: f64,
}

impl WhitneyDecomposition {
    pub fn generation(&self, j: usize) -> impl Iterator<Item = &WhitneyBox> {
        self.boxes.iter().filter(move |b| b.generation == j)
    }
}

/// Dyadic layering of `B((x₀, g(x₀)), r) ∩ Ω`.
///
/// Generation `j` has scale `d = r 2^{-j}` and consists of the lattice
/// squares of side `d/4` (anchored at the boundary point) whose centers have
/// `δ ∈ [d/2, d)` and which meet the ball. Then `half_width/δ ∈ (1/8, 1/4]`.
/// Generations with `half_width < 2h` are dropped.
pub fn whitney_decomposition(dom: &GraphDomain, x0: f64, r: f64, h: f64) -> Result<WhitneyDecomposition> {
    if dom.dim_n != 2 {
        return Err(Error::InvalidInput("Whitney layering is implemented for n = 2".into()));
    }
    if !(r > 0.0 && r <= 0.5 * dom.r + 1e-12 && x0.abs() <= 0.5 * dom.r + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "Carleson box (x0 = {x0}, r = {r}) outside the safe family |x0| ≤ R/2, r ≤ R/2 (R = {})",
            dom.r
        )));
    }
    let cutoff = 16.0 * h;
    let anchor = [x0, dom.g(x0)];
    let mut boxes = Vec::new();
    let mut generations = 0;
    let mut d = r;
    while d / 8.0 >= 2.0 * h * (1.0 - 1e-12) {
        let gen = generations;
        let s = d / 4.0;
        let kmax = ((r + s) / s).ceil() as i64;
        let lmin = ((dom.t_lo - anchor[1]) / s).floor() as i64;
        let lmax = ((r + s) / s).ceil() as i64;
        let cand: Vec<(i64, i64)> = (-kmax..kmax).flat_map(|k| (lmin..lmax).map(move |l| (k, l))).collect();
        let found: Vec<WhitneyBox> = cand
            .par_iter()
            .filter_map(|&(k, l)| {
                let c = [anchor[0] + (k as f64 + 0.5) * s, anchor[1] + (l as f64 + 0.5) * s];
                if !dom.contains(c) || !square_meets_disk(c, 0.5 * s, anchor, r) {
                    return None;
                }
                let delta = dom.dist_unsigned(c);
                (delta >= 0.5 * d && delta < d).then_some(WhitneyBox {
                    center: c,
                    half_width: 0.5 * s,
                    generation: gen,
                    delta_at_center: delta,
                })
            })
            .collect();
        boxes.extend(found);
        generations += 1;
        d *= 0.5;
    }
    let collar_delta = if generations > 0 { r * 0.5f64.powi(generations as i32) } else { r };
    for b in &boxes {
        let c = b.center;
        let hw = b.half_width;
        if c[0] - hw < -dom.r || c[0] + hw > dom.r || c[1] + hw > dom.t_hi {
            return Err(Error::InvalidInput(format!(
                "Whitney box at ({}, {}) leaves the truncation box",
                c[0], c[1]
            )));
        }
    }
    let leakage = if boxes.is_empty() { 0.0 } else { coverage_leakage(dom, anchor, r, collar_delta, &boxes) };
    Ok(WhitneyDecomposition { x0, r, boxes, generations, cutoff, collar_delta, leakage })
}

fn square_meets_disk(c: [f64; 2], hw: f64, center: [f64; 2], r: f64) -> bool {
    let dx = ((c[0] - center[0]).abs() - hw).max(0.0);
    let dt = ((c[1] - center[1]).abs() - hw).max(0.0);
    dx * dx + dt * dt < r * r
}

/// Area accounting on a point lattice finer than the smallest boxes.
fn coverage_leakage(dom: &GraphDomain, anchor: [f64; 2], r: f64, floor: f64, boxes: &[WhitneyBox]) -> f64 {
    let step = (floor / 4.0).max(r / 400.0);
    let n = (r / step).ceil() as i64;
    let (inside, covered) = (-n..=n)
        .into_par_iter()
        .map(|a| {
            let mut inside = 0usize;
            let mut covered = 0usize;
            for b in -n..=n {
                let p = [anchor[0] + (a as f64 + 0.5) * step, anchor[1] + (b as f64 + 0.5) * step];
                let dx = p[0] - anchor[0];
                let dt = p[1] - anchor[1];
                if dx * dx + dt * dt >= r * r || !dom.contains(p) || dom.dist_unsigned(p) < floor {
                    continue;
                }
                inside += 1;
                if boxes.iter().any(|w| {
                    (p[0] - w.center[0]).abs() <= w.half_width && (p[1] - w.center[1]).abs() <= w.half_width
                }) {
                    covered += 1;
                }
            }
            (inside, covered)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if inside == 0 {
        0.0
    } else {
        1.0 - covered as f64 / inside as f64
    }
}

// ---------------------------------------------------------------------------
// Graph recovery

/// Represents `Φ(Ω₀)` as a tabulated graph.
///
/// For each abscissa `x` the preimage `z` with `Φ₁(z, g(z)) = x` is found by
/// safeguarded Newton iteration; the graph value is `Φ₂(z, g(z))`. Images of
/// the kinks of `g` are added as knots so that piecewise-linear boundaries
/// stay exact.
pub fn recover_graph(dom: &GraphDomain, map: &BiLipMap) -> Result<GraphDomain> {
    if dom.dim_n != 2 {
        return Err(Error::InvalidInput("graph recovery is implemented for n = 2".into()));
    }
    if map.spec == MapSpec::Identity {
        return Ok(dom.clone());
    }
    let eb = map.eps_bound().operator;
    if eb * (dom.lipschitz_m + 1.0) >= 0.5 {
        return Err(Error::InvalidInput(format!(
            "ε (M + 1) = {:.3} must be < 1/2 for graph recovery",
            eb * (dom.lipschitz_m + 1.0)
        )));
    }
    let ext = 1.25 * dom.r;
    let spacing = dom.r / dom.grid_n as f64 / (1.0 + dom.lipschitz_m.powi(2)).sqrt();
    let k = (2.0 * ext / spacing).ceil() as usize;
    let mut targets: Vec<f64> = (0..=k).map(|i| -ext + 2.0 * ext * i as f64 / k as f64).collect();
    let kink_images: Vec<[f64; 2]> = dom
        .kinks_in(-2.0 * ext, 2.0 * ext)
        .into_iter()
        .map(|z| map.apply([z, dom.g(z)]))
        .filter(|p| p[0].abs() < ext)
        .collect();
    targets.retain(|x| kink_images.iter().all(|p| (p[0] - x).abs() > 1e-9 * ext));
    let mut knots: Vec<[f64; 2]> = targets
        .par_iter()
        .map(|&x| {
            let z = preimage(dom, map, x)?;
            let p = map.apply([z, dom.g(z)]);
            Ok([x, p[1]])
        })
        .collect::<Result<_>>()?;
    knots.extend(kink_images);
    knots.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let family = GraphFamily::CustomTable {
        xs: knots.iter().map(|k| k[0]).collect(),
        gs: knots.iter().map(|k| k[1]).collect(),
    };
    GraphDomain::assemble(family, 2, dom.r, dom.grid_n as f64)
}

fn preimage(dom: &GraphDomain, map: &BiLipMap, x: f64) -> Result<f64> {
    let f = |z: f64| map.apply([z, dom.g(z)])[0] - x;
    let df = |z: f64| {
        let j = map.jacobian([z, dom.g(z)]);
        // d/dz Φ₁(z, g(z)) = ∂ₓΦ₁ + g'(z) ∂ₜΦ₁.
        j[(0, 0)] + dom.slope(z) * j[(1, 0)]
    };
    // Φ₁(z, g(z)) − z is Lipschitz with constant ≤ ε(1 + M) < 1/2, so the
    // root lies within 2|f(x)| of x; bracket it before iterating.
    let mut z = x;
    let r0 = f(z).abs();
    let (mut lo, mut hi) = (x - 2.0 * r0 - 1e-9, x + 2.0 * r0 + 1e-9);
    for _ in 0..50 {
        let v = f(z);
        if v.abs() <= 1e-12 * (1.0 + x.abs()) {
            let p = map.apply([z, dom.g(z)]);
            if (p[0] - x).abs() <= 1e-8 {
                return Ok(z);
            }
        }
        if v > 0.0 {
            hi = hi.min(z);
        } else {
            lo = lo.max(z);
        }
        let d = df(z);
        let mut next = if d.abs() > 1e-14 { z - v / d } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        z = next;
    }
    if f(z).abs() <= 1e-8 {
        return Ok(z);
    }
    Err(Error::GraphRecovery { x })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cone() -> GraphDomain {
        build_domain(GraphFamily::Cone { lip: 1.0 }, 2, 2.0, 128).unwrap()
    }

    #[test]
    fn family_examples() {
        let flat = build_domain(GraphFamily::Flat, 2, 4.0, 256).unwrap();
        assert_eq!(flat.lipschitz_m, 0.0);
        assert_eq!(flat.g(1.3), 0.0);
        let c = cone();
        assert_eq!(c.lipschitz_m, 1.0);
        assert_eq!(c.g(-0.7), 0.7);
        let s = build_domain(GraphFamily::Sine { amp: 0.3, freq: 2.0 }, 2, 4.0, 256).unwrap();
        // Oracle: sup |g'| from a dense grid of the derivative.
        let sup = (0..200_001)
            .map(|i| -4.0 + 8.0 * i as f64 / 200_000.0)
            .map(|x| (0.3 * 2.0 * (2.0 * x).cos()).abs())
            .fold(0.0, f64::max);
        assert!((s.lipschitz_m - sup).abs() < 1e-9);
        assert!((s.lipschitz_m - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sample_spacing_and_exactness() {
        for dom in [cone(), build_domain(GraphFamily::Sine { amp: 0.3, freq: 2.0 }, 2, 4.0, 64).unwrap()] {
            assert!(dom.sample_spacing() <= dom.r / dom.grid_n as f64 * (1.0 + 1e-12));
            for s in &dom.samples {
                assert_eq!(s.t, dom.g(s.x));
            }
        }
        assert!(cone().samples.iter().any(|s| s.x == 0.0));
    }

    #[test]
    fn distance_examples() {
        let flat = build_domain(GraphFamily::Flat, 2, 4.0, 256).unwrap();
        assert!((flat.dist_to_boundary([0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = cone();
        assert!((c.dist_to_boundary([0.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
        let tl = build_domain(GraphFamily::Tilted { slope: 0.5 }, 2, 4.0, 256).unwrap();
        assert!((tl.dist_to_boundary([0.0, 1.0]).unwrap() - 1.0 / 1.25f64.sqrt()).abs() < 1e-14);
        assert!(matches!(c.dist_to_boundary([0.5, 0.2]), Err(Error::OutsideDomain(..))));
    }

    #[test]
    fn dimension_three_closed_forms() {
        let c = build_domain(GraphFamily::Cone { lip: 1.0 }, 3, 2.0, 64).unwrap();
        assert!((c.dist_nd(&[0.0, 0.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        let t = build_domain(GraphFamily::Tilted { slope: 0.5 }, 3, 2.0, 64).unwrap();
        assert!((t.dist_nd(&[0.0, 0.3, 1.0]).unwrap() - 1.0 / 1.25f64.sqrt()).abs() < 1e-14);
        assert!(build_domain(GraphFamily::Sine { amp: 0.1, freq: 1.0 }, 3, 2.0, 64).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_domain(GraphFamily::Flat, 2, 4.0, 100).is_err());
        assert!(build_domain(GraphFamily::Flat, 2, 4.0, 32).is_err());
        assert!(build_domain(GraphFamily::PiecewiseLinear { knots: vec![[0.0, 0.0], [0.0, 1.0]] }, 2, 1.0, 64).is_err());
    }

    #[test]
    fn whitney_flat_layers() {
        let flat = build_domain(GraphFamily::Flat, 2, 4.0, 1024).unwrap();
        let h = 2.0 * flat.r / 1024.0;
        let wd = whitney_decomposition(&flat, 0.0, 1.0, h).unwrap();
        assert_eq!(wd.generations, 4);
        let counts: Vec<usize> = (0..4).map(|j| wd.generation(j).count()).collect();
        for j in 0..4 {
            let hw = 1.0 / 8.0 * 0.5f64.powi(j as i32);
            assert!(wd.generation(j).all(|b| (b.half_width - hw).abs() < 1e-15));
        }
        // Oracle: the band δ ∈ [d/2, d) holds two rows of squares of side
        // d/4 across a chord of length ≈ 2r, i.e. about 16·2^j boxes, so the
        // count doubles from one generation to the next.
        for j in 1..4 {
            let q = counts[j] as f64 / counts[j - 1] as f64;
            assert!((1.6..=2.4).contains(&q), "counts {counts:?}");
        }
        let area: f64 = wd.generation(3).map(|b| b.area()).sum();
        let band = 2.0 * (1.0f64 - 0.125 * 0.125).sqrt() * 0.0625;
        assert!((area / band - 1.0).abs() < 0.25, "band area {area} vs {band}");
        for b in &wd.boxes {
            let q = b.half_width / b.delta_at_center;
            assert!((0.125..=0.25).contains(&q));
        }
        assert!(wd.leakage <= 0.05, "leakage {}", wd.leakage);
    }

    #[test]
    fn whitney_empty_below_cutoff() {
        let flat = build_domain(GraphFamily::Flat, 2, 4.0, 256).unwrap();
        let h = 2.0 * flat.r / 256.0;
        let wd = whitney_decomposition(&flat, 0.0, 1.9 * h, h).unwrap();
        assert!(wd.boxes.is_empty());
        assert_eq!(wd.cutoff, 16.0 * h);
        let wd = whitney_decomposition(&flat, 0.0, 16.0 * h, h).unwrap();
        assert!(!wd.boxes.is_empty());
    }

    #[test]
    fn whitney_cone_tip_coverage() {
        let c = build_domain(GraphFamily::Cone { lip: 1.0 }, 2, 2.0, 512).unwrap();
        let h = 2.0 * c.r / 512.0;
        let wd = whitney_decomposition(&c, 0.0, 1.0, h).unwrap();
        // Sector of opening π/2 and radius 1 minus the unresolved collar:
        // the collar {δ < a} inside the sector has area ≈ 2a·1 − a² near the
        // two edges, which the covered measure must exceed.
        let a = wd.collar_delta;
        let target = std::f64::consts::FRAC_PI_4 - (2.0 * a - a * a);
        let covered = target * (1.0 - wd.leakage);
        assert!(covered >= 0.95 * target, "covered {covered} target {target}");
    }

    #[test]
    fn recover_graph_examples() {
        let c = cone();
        let same = recover_graph(&c, &BiLipMap::identity()).unwrap();
        for s in &c.samples {
            assert!((same.g(s.x) - s.t).abs() < 1e-12);
        }
        let tr = BiLipMap::new(MapSpec::Translation { c: [0.0, 0.3] }, 0.0).unwrap();
        let up = recover_graph(&c, &tr).unwrap();
        for s in &c.samples {
            assert!((up.g(s.x) - s.t - 0.3).abs() < 1e-12);
        }
        let flat = build_domain(GraphFamily::Flat, 2, 2.0, 128).unwrap();
        let wavy = BiLipMap::new(MapSpec::Wavy, 0.1).unwrap();
        let w = recover_graph(&flat, &wavy).unwrap();
        // Knots sit on the exact image; between knots the chord error is
        // bounded by ε·spacing²/8.
        for x in [-1.3, 0.0, 0.77, 1.9] {
            assert!((w.g(x) - 0.1 * f64::sin(x)).abs() < 1e-5);
        }
        assert!(w.lipschitz_m >= w.sampled_lipschitz());
    }

    #[test]
    fn recover_rejects_large_eps() {
        let c = cone();
        let m = BiLipMap::new(MapSpec::Shear, 0.3).unwrap();
        assert!(recover_graph(&c, &m).is_err());
    }

    #[test]
    fn map_jacobian_and_bounds() {
        let m = BiLipMap::new(MapSpec::Shear, 0.05).unwrap();
        assert_eq!(m.eps_bound().operator, 0.05);
        let j = m.jacobian([0.3, 0.4]);
        assert!((crate::grid::op_norm(&(j - Mat2::identity())) - 0.05).abs() < 1e-15);
        let y = m.apply([0.3, 0.4]);
        let back = m.invert(y).unwrap();
        assert!((back[0] - 0.3).abs() < 1e-12 && (back[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn tree_query_matches_exhaustive_scan() {
        let fams = [GraphFamily::Flat, GraphFamily::Cone { lip: 1.0 }, GraphFamily::Sine { amp: 0.3, freq: 2.0 }];
        for fam in fams {
            let dom = build_domain(fam, 2, 2.0, 64).unwrap();
            let sm = &dom.samples;
            for i in 0..41 {
                for j in 0..23 {
                    let p = [-2.5 + 0.125 * i as f64, -0.7 + 0.17 * j as f64];
                    let brute = sm
                        .windows(2)
                        .map(|w| seg_closest(p, [w[0].x, w[0].t], [w[1].x, w[1].t]).1)
                        .fold((p[1] - dom.g(p[0])).abs(), f64::min);
                    assert_eq!(dom.dist_unsigned(p), brute, "{p:?}");
                }
            }
        }
    }
}
