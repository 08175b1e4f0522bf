//! Gauss–Legendre rules and composite quadrature on intervals.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Nodes and weights of the `m`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(m, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(m, z);
        if d != 0.0 {
            dp = d;
        }
        x[i] = -z;
        x[m - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[m - 1 - i] = wi;
    }
    (x, w)
}

fn legendre(m: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// The ten-point rule used for every panel in this crate.
pub fn gl10() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(10))
}

/// Composite rule: `panels` equal panels on each piece between consecutive
/// breakpoints of `[a, b]`. Returns absolute nodes and weights.
pub fn composite(a: f64, b: f64, breaks: &[f64], panels: usize) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gl10();
    let mut cuts = vec![a];
    cuts.extend(breaks.iter().copied().filter(|&c| c > a && c < b));
    cuts.push(b);
    let mut xs = Vec::with_capacity(cuts.len() * panels * gx.len());
    let mut ws = Vec::with_capacity(xs.capacity());
    for win in cuts.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        let len = (hi - lo) / panels as f64;
        for p in 0..panels {
            let c = lo + (p as f64 + 0.5) * len;
            for (x, w) in gx.iter().zip(gw) {
                xs.push(c + 0.5 * len * x);
                ws.push(0.5 * len * w);
            }
        }
    }
    (xs, ws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_high_degree_polynomials() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((s - 2.0 / 19.0).abs() < 1e-14);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn composite_respects_kinks() {
        let (x, w) = composite(-1.0, 2.0, &[0.0], 2);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.abs()).sum();
        assert!((s - 2.5).abs() < 1e-14);
    }
}
