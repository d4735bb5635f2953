use proptest::prelude::*;

use panonormal::d2n::{depth_to_normal, D2NConfig};
use panonormal::losses::{mse_loss, pixel_angle, quaternion_loss, smooth_loss};
use panonormal::maps::{DepthMap, NormalMap, ValidMask};
use panonormal::metrics::{aggregate, angular_error_map, compare_reports};
use panonormal::runner::{epoch_order, Variant};
use panonormal::sphere_geom::*;
use panonormal::tensor::{FeatureMap, Tensor};

fn unit() -> impl Strategy<Value = [f64; 3]> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 1e-2)
        .prop_map(|(x, y, z)| {
            let l = (x * x + y * y + z * z).sqrt();
            [x / l, y / l, z / l]
        })
}

proptest! {
    #[test]
    fn erp_round_trip(h in 2usize..64, fu in 0.0..1.0f64, fv in 0.02..0.98f64) {
        let grid = ErpGridSpec::new(h).unwrap();
        let (u, v) = (fu * grid.width() as f64, fv * h as f64 - 0.5);
        let d = erp_pixel_to_dir(u, v, &grid);
        prop_assert!((d.dot(&d) - 1.0).abs() < 1e-12);
        let (u2, v2) = dir_to_erp_pixel(&d, &grid);
        let w = grid.width() as f64;
        let du = (u2 - u).rem_euclid(w);
        prop_assert!(du.min(w - du) < 1e-9 && (v2 - v).abs() < 1e-9);
    }

    #[test]
    fn gnomonic_round_trip(c in unit(), x in -1.5..1.5f64, y in -1.5..1.5f64) {
        let tp = TangentPoint::new(SphericalDir::new(c[0], c[1], c[2]).unwrap());
        let d = gnomonic_inverse(&tp, x, y);
        let (x2, y2) = gnomonic_forward(&tp, &d).unwrap();
        prop_assert!((x - x2).abs() < 1e-9 && (y - y2).abs() < 1e-9);
    }

    #[test]
    fn bilinear_wraps_and_reproduces_constants(u in -20.0..40.0f64, v in -2.0..10.0f64, k in 0.5..3.0f64) {
        let f = FeatureMap::from_vec(1, 8, 16, (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = bilinear_sample(&f, &[(u, v), (u + 16.0, v)], true);
        prop_assert!((a[0][0] - a[1][0]).abs() < 1e-12);
        let c = FeatureMap::from_vec(1, 8, 16, vec![k; 128]).unwrap();
        prop_assert!((bilinear_sample(&c, &[(u, v)], true)[0][0] - k).abs() < 1e-12);
    }

    #[test]
    fn angle_is_bounded_and_symmetric(a in unit(), b in unit()) {
        let t = pixel_angle(a, b);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&t));
        prop_assert_eq!(t, pixel_angle(b, a));
        prop_assert_eq!(pixel_angle(a, a), 0.0);
    }

    #[test]
    fn losses_vanish_only_on_agreement(vals in prop::collection::vec(-1.0..1.0f64, 2 * 3 * 4 * 8)) {
        let pred = Tensor::from_vec(&[2, 3, 4, 8], vals.clone()).unwrap();
        let gt = Tensor::from_vec(&[2, 3, 4, 8], vals.iter().map(|x| x * 0.5 + 0.1).collect()).unwrap();
        let masks = vec![ValidMask::all_valid(4, 8); 2];
        let p = vec![pred];
        prop_assert!(mse_loss(&p, &gt, &masks).unwrap() > 0.0);
        prop_assert!(quaternion_loss(&p, &gt, &masks).unwrap() >= 0.0);
        prop_assert!(smooth_loss(&p, &gt, &masks).unwrap() >= 0.0);
        prop_assert_eq!(mse_loss(std::slice::from_ref(&gt), &gt, &masks).unwrap(), 0.0);
    }

    #[test]
    fn metric_report_invariants(pairs in prop::collection::vec((unit(), unit(), any::<bool>()), 32)) {
        let mut pred = NormalMap::zeros(4, 8);
        let mut gt = NormalMap::zeros(4, 8);
        let mut valid = vec![true; 32];
        for (i, (a, b, keep)) in pairs.iter().enumerate() {
            pred.set(i / 8, i % 8, *a);
            gt.set(i / 8, i % 8, *b);
            valid[i] = *keep || i == 0;
        }
        let mask = ValidMask::from_vec(4, 8, valid).unwrap();
        let r = aggregate(&[angular_error_map(&pred, &gt, &mask).unwrap()]).unwrap();
        prop_assert!(r.delta.windows(2).all(|d| d[0] <= d[1]));
        prop_assert!(r.mse_deg2 >= r.mean_deg * r.mean_deg * (1.0 - 1e-12));
        prop_assert!((0.0..=180.0).contains(&r.median_deg));
        prop_assert_eq!(r.valid_pixel_count, mask.count());
        let same = compare_reports(&r, &r);
        if r.mean_deg > 0.0 && r.median_deg > 0.0 && r.mse_deg2 > 0.0 {
            let same = same.unwrap();
            prop_assert_eq!(same.mean_pct, 0.0);
            prop_assert_eq!(same.delta_points, [0.0; 5]);
        }
    }

    /// Normals of an arbitrary plane in front of the camera come back exactly.
    #[test]
    fn depth_to_normal_recovers_planes(n in unit(), offset in 0.5..3.0f64, seed in 0u64..1000) {
        let grid = ErpGridSpec::new(16).unwrap();
        let (h, w) = (grid.height(), grid.width());
        // plane {p : n·p = -offset}; the camera at the origin looks at its front side
        let mut depth = vec![0.0; h * w];
        for v in 0..h {
            for u in 0..w {
                let d = erp_pixel_to_dir(u as f64, v as f64, &grid).as_array();
                let c = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
                if c < -0.3 {
                    depth[v * w + u] = -offset / c;
                }
            }
        }
        let mask = ValidMask::from_vec(h, w, depth.iter().map(|&d| d > 0.0).collect()).unwrap();
        let depth = DepthMap::from_vec(h, w, depth).unwrap();
        let cfg = D2NConfig { num_triangles: 4, neighborhood_radius: 1, seed };
        let (normals, valid) = depth_to_normal(&depth, &grid, &cfg, &mask).unwrap();
        for v in 0..h {
            for u in 0..w {
                if valid.is_valid(v, u) {
                    let got = normals.get(v, u);
                    prop_assert!(pixel_angle(got, n) < 1e-6, "pixel ({}, {}): {:?} vs {:?}", u, v, got, n);
                }
            }
        }
    }

    #[test]
    fn roll_columns_composes(a in 0usize..40, b in 0usize..40) {
        let f = FeatureMap::from_vec(2, 3, 8, (0..48).map(|i| i as f64).collect()).unwrap();
        prop_assert_eq!(f.roll_columns(a).roll_columns(b), f.roll_columns((a + b) % 8));
    }

    #[test]
    fn epoch_orders_are_permutations(seed in any::<u64>(), epoch in 0usize..200, n in 1usize..40) {
        let mut o = epoch_order(seed, epoch, n);
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn variant_strings_round_trip(
        name in prop::sample::select(vec!["baseline", "+decoder", "+decoder+embed", "finest-only"]),
        terms in prop::sample::subsequence(vec!['m', 'q', 'p', 's'], 1..=4),
    ) {
        let text = if terms.len() == 4 { name.to_string() } else { format!("{name}/{}", terms.iter().collect::<String>()) };
        let v: Variant = text.parse().unwrap();
        prop_assert_eq!(v.to_string(), text);
    }
}
