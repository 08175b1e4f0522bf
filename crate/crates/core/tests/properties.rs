use covlab::carleson::{cm_norm, cmsup_norm, BoxFamily};
use covlab::config::Scenario;
use covlab::cov::{pullback, w_frame_at};
use covlab::frame::frame_from_normal;
use covlab::geometry::{build_domain, recover_graph, whitney_decomposition, BiLipMap, GraphDomain, GraphFamily, MapSpec};
use covlab::grid::{Field, Mat2};
use covlab::io::{read_field, write_field};
use covlab::perturb::{boundary_displacement, dorronsoro_beta};
use covlab::solvability::{rh_constant, KappaSample};
use proptest::prelude::*;
use std::sync::OnceLock;

fn family() -> impl Strategy<Value = GraphFamily> {
    prop_oneof![
        Just(GraphFamily::Flat),
        (-1.0..1.0f64).prop_map(|slope| GraphFamily::Tilted { slope }),
        (0.1..1.5f64).prop_map(|lip| GraphFamily::Cone { lip }),
        (0.05..0.4f64, 0.5..3.0f64).prop_map(|(amp, freq)| GraphFamily::Sine { amp, freq }),
    ]
}

fn flat() -> &'static GraphDomain {
    static DOM: OnceLock<GraphDomain> = OnceLock::new();
    DOM.get_or_init(|| build_domain(GraphFamily::Flat, 2, 2.0, 64).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn whitney_boxes_are_whitney(fam in family(), x0 in -1.0..1.0f64, r in 0.1..1.0f64) {
        let dom = build_domain(fam, 2, 2.0, 64).unwrap();
        let dec = whitney_decomposition(&dom, x0, r, 2.0 / 64.0).unwrap();
        for b in &dec.boxes {
            let d = dom.dist_to_boundary(b.center).unwrap();
            prop_assert!((b.delta_at_center - d).abs() <= 1e-9 * (1.0 + d));
            let q = b.half_width / b.delta_at_center;
            prop_assert!((0.125 - 1e-12..=0.25 + 1e-12).contains(&q), "ratio {}", q);
        }
    }

    #[test]
    fn recovered_graph_contains_the_image(
        amp in 0.05..0.3f64,
        eps in 0.0..0.2f64,
        wavy in any::<bool>(),
    ) {
        let dom = build_domain(GraphFamily::Sine { amp, freq: 2.0 }, 2, 2.0, 64).unwrap();
        let map = BiLipMap::new(if wavy { MapSpec::Wavy } else { MapSpec::Shear }, eps).unwrap();
        prop_assume!(map.eps_bound().operator * (dom.lipschitz_m + 1.0) < 0.5);
        let img = recover_graph(&dom, &map).unwrap();
        let spacing = dom.sample_spacing();
        for s in dom.samples.iter().filter(|s| s.x.abs() <= 0.5 * dom.r) {
            let p = map.apply([s.x, s.t]);
            prop_assert!((p[1] - img.g(p[0])).abs() <= 2.0 * spacing);
        }
        for w in img.samples.windows(2) {
            let q = (w[1].t - w[0].t).abs() / (w[1].x - w[0].x);
            prop_assert!(q <= img.lipschitz_m + 1e-9);
        }
    }

    #[test]
    fn bilipschitz_maps_invert_and_respect_eps(
        kind in 0usize..4,
        eps in 0.0..0.3f64,
        x in -2.0..2.0f64,
        t in 0.0..3.0f64,
    ) {
        let spec = [MapSpec::Shear, MapSpec::Wavy, MapSpec::Rotation { angle: 1.0 }, MapSpec::Linear { e: [[0.3, -0.4], [0.7, 0.2]] }][kind].clone();
        let map = BiLipMap::new(spec, eps).unwrap();
        let y = map.apply([x, t]);
        let back = map.invert(y).unwrap();
        prop_assert!((back[0] - x).abs() < 1e-9 && (back[1] - t).abs() < 1e-9);
        let d = map.jacobian([x, t]) - Mat2::identity();
        let op = d.singular_values().max();
        prop_assert!(op <= map.eps_bound().operator + 1e-12);
    }

    #[test]
    fn frame_is_a_positive_rotation(a in -1.2..1.2f64) {
        let vn = [a.sin(), a.cos()];
        let (rows, _) = frame_from_normal(&vn).unwrap();
        let v = Mat2::new(rows[0][0], rows[0][1], rows[1][0], rows[1][1]);
        prop_assert!((v * v.transpose() - Mat2::identity()).norm() < 1e-12);
        prop_assert!((v.determinant() - 1.0).abs() < 1e-12);
        prop_assert!(v[(0, 0)] > 0.0);
    }

    #[test]
    fn w_frame_is_orthonormal_and_triangular(a in -1.0..1.0f64, b in prop::array::uniform4(-0.2..0.2f64)) {
        let (rows, _) = frame_from_normal(&[a.sin(), a.cos()]).unwrap();
        let v = Mat2::new(rows[0][0], rows[0][1], rows[1][0], rows[1][1]);
        let bm = Mat2::new(b[0], b[1], b[2], b[3]);
        let (wbar, w, tilde) = w_frame_at(&v, &bm);
        prop_assert!(tilde > 0.5);
        prop_assert!((w * w.transpose() - Mat2::identity()).norm() < 1e-12);
        // ⟨w̄₁, w₂⟩ = 0: the Gram–Schmidt matrix is upper triangular.
        prop_assert!(wbar.row(0).dot(&w.row(1)).abs() < 1e-12);
    }

    #[test]
    fn pullback_is_unimodular_and_symmetric(m in prop::array::uniform4(-2.0..2.0f64), a in -3.0..3.0f64) {
        let m = Mat2::new(m[0], m[1], m[2], m[3]);
        prop_assume!(m.determinant().abs() > 1e-2);
        let p = Mat2::new(a.cos(), -a.sin(), a.sin(), a.cos());
        let q = pullback(&p, &m).unwrap();
        prop_assert!((q - q.transpose()).norm() < 1e-9 * q.norm());
        prop_assert!((q.determinant() - 1.0).abs() < 1e-9 * q.norm_squared());
        // Scalar J₀ gives the identity.
        prop_assert!((pullback(&p, &(Mat2::identity() * (a.abs() + 0.1))).unwrap() - Mat2::identity()).norm() < 1e-12);
    }

    #[test]
    fn carleson_scaling_and_monotonicity(c in 0.01..100.0f64, k in 0.5..4.0f64) {
        let dom = flat();
        let h = 4.0 / 64.0;
        let grid = covlab::green::grid_for(dom, 64);
        let f = Field::from_fn(grid, 0.0, |n| {
            let p = grid.point(n);
            (p[1] > 0.0).then(|| (k * p[0]).sin().abs() * (-p[1]).exp())
        });
        let g = f.map(0.0, |_, v| Some(c * v));
        let small = BoxFamily::standard(dom, &[0.5], h).unwrap();
        let big = BoxFamily::standard(dom, &[0.5, 1.0], h).unwrap();
        let a = cmsup_norm(&f, &small).unwrap().norm_estimate;
        let b = cmsup_norm(&g, &small).unwrap().norm_estimate;
        prop_assert!((b - c * c * a).abs() <= 1e-12 * b.abs().max(1e-300));
        prop_assert!(cmsup_norm(&f, &big).unwrap().norm_estimate >= a);
        prop_assert!(cm_norm(&f, &small).unwrap().norm_estimate <= a * (1.0 + 1e-12));
    }

    #[test]
    fn rh_ratios_are_power_means(
        coef in prop::array::uniform3(-1.0..1.0f64),
        scale in 0.1..10.0f64,
    ) {
        let dom = flat();
        let kappa: Vec<KappaSample> = dom
            .samples
            .iter()
            .map(|s| {
                let k = scale * (2.0 + coef[0] * s.x.sin() + coef[1] * (3.0 * s.x).cos() + coef[2] * s.x.tanh());
                KappaSample { x: s.x, t: s.t, s: s.s, kappa: k, change: 0.0, residual: 0.0, flagged: false }
            })
            .collect();
        let balls = [(0.0, 0.5), (0.25, 0.5), (-0.5, 0.25)];
        let mut last = f64::INFINITY;
        for p in [1.5, 2.0, 4.0, 8.0] {
            let r = rh_constant(dom, &kappa, p, &balls).unwrap();
            prop_assert!(r.per_ball.iter().all(|b| b.ratio >= 1.0));
            prop_assert!(r.c_p_estimate <= last * (1.0 + 1e-12));
            last = r.c_p_estimate;
            // Ratios are invariant under κ ↦ cκ.
            let scaled: Vec<KappaSample> = kappa.iter().map(|k| KappaSample { kappa: 3.0 * k.kappa, ..*k }).collect();
            let r2 = rh_constant(dom, &scaled, p, &balls).unwrap();
            prop_assert!((r2.c_p_estimate - r.c_p_estimate).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_vanishes_for_affine_displacement(e in prop::array::uniform4(-1.0..1.0f64), y in -0.5..0.5f64, t in 0.125..0.5f64) {
        let map = BiLipMap::new(MapSpec::Linear { e: [[e[0], e[1]], [e[2], e[3]]] }, 0.05).unwrap();
        let disp = boundary_displacement(flat(), &map).unwrap();
        let b = dorronsoro_beta(&disp, y, t).unwrap();
        prop_assert!(b <= 1e-10, "β = {}", b);
    }

    #[test]
    fn field_files_round_trip(vals in prop::collection::vec(prop::option::of(-1e6..1e6f64), 12)) {
        let grid = covlab::grid::Grid { x0: 0.5, t0: -1.0, h: 0.125, nx: 4, nt: 3 };
        let f = Field::from_options(grid, 0.0, vals.iter().copied());
        let mut buf = Vec::new();
        write_field(&mut buf, &f, 2, 64).unwrap();
        let back = read_field(&mut buf.as_slice()).unwrap().component(0).unwrap();
        for k in 0..12 {
            prop_assert_eq!(back.at(k), vals[k]);
        }
    }

    #[test]
    fn scenarios_round_trip(fam in family(), grid in 6u32..10, seed in any::<u64>(), eps in prop::collection::btree_set(0u32..100, 1..4)) {
        let mut s = Scenario::new("prop", fam);
        s.grid_n = 1 << grid;
        s.seed = seed;
        s.eps_sweep = eps.into_iter().map(|e| e as f64 / 200.0).collect();
        let back = Scenario::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }
}
