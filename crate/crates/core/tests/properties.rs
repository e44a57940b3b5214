use flowdepth::eval::{compute_metrics, median_scale};
use flowdepth::features::{build_feature_pyramid, census_transform, extract_keypoints, PyramidConfig};
use flowdepth::geometry::{backproject, project, rigid_flow, CameraIntrinsics, DepthMap, FlowField, PoseSE3};
use flowdepth::imaging::{bilinear_sample, inverse_warp, ImagePlane, Mask};
use flowdepth::losses::{
    depth_total, flow_consistency_loss, patch_photometric_loss, smoothness_loss, CensusCoding, CensusParams,
    LossBreakdown, LossConfig,
};
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(60.0, 55.0, 15.5, 11.5, 32, 24).unwrap()
}

fn image(w: usize, h: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
}

fn flow(w: usize, h: usize, seed: u64, amp: f64) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowField::from_fn(w, h, |_, _| (rng.random_range(-amp..amp), rng.random_range(-amp..amp)))
}

fn depth(w: usize, h: usize, seed: u64) -> DepthMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(1.0..8.0)).collect()).unwrap()
}

fn small_vec3(max: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-max..max, -max..max, -max..max).prop_map(|(a, b, c)| Vector3::new(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_round_trip(x in 0.0f64..31.0, y in 0.0f64..23.0, d in 0.05f64..100.0) {
        let k = intrinsics();
        let p = Vector2::new(x, y);
        let back = project(backproject(p, d, &k).unwrap(), &k).unwrap();
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn pose_times_inverse_is_identity(aa in small_vec3(3.0), t in small_vec3(5.0)) {
        let pose = PoseSE3::from_axis_angle(aa, t);
        let id = pose.compose(&pose.inverse());
        prop_assert!((id.rotation - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
        prop_assert!(id.translation.abs().max() < 1e-9);
    }

    #[test]
    fn identity_pose_gives_zero_rigid_flow(seed in any::<u64>()) {
        let k = intrinsics();
        let (f, valid) = rigid_flow(&depth(32, 24, seed), &PoseSE3::identity(), &k).unwrap();
        prop_assert_eq!(valid.count(), 32 * 24);
        prop_assert!(f.u.iter().chain(&f.v).all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn rigid_flow_is_scale_homogeneous(seed in any::<u64>(), aa in small_vec3(0.05), t in small_vec3(0.3), s in 0.1f64..10.0) {
        let k = intrinsics();
        let d = depth(32, 24, seed);
        let (a, ma) = rigid_flow(&d, &PoseSE3::from_axis_angle(aa, t), &k).unwrap();
        let (b, mb) = rigid_flow(&d.scaled(s), &PoseSE3::from_axis_angle(aa, t * s), &k).unwrap();
        prop_assert_eq!(ma, mb);
        for i in 0..a.len() {
            prop_assert!((a.u[i] - b.u[i]).abs() < 1e-9 && (a.v[i] - b.v[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_flow_warp_is_identity(w in 2usize..20, h in 2usize..20, seed in any::<u64>()) {
        let img = image(w, h, seed);
        let (out, valid) = inverse_warp(&img, &FlowField::zeros(w, h)).unwrap();
        prop_assert_eq!(out, img);
        prop_assert_eq!(valid.count(), w * h);
    }

    #[test]
    fn bilinear_sampling_is_lipschitz(seed in any::<u64>(), x in 0.0f64..14.0, y in 0.0f64..10.0, dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
        let img = image(16, 12, seed);
        let mut lip = 0.0f64;
        for yy in 0..12 {
            for xx in 0..16 {
                if xx + 1 < 16 { lip = lip.max((img.get(xx + 1, yy, 0) - img.get(xx, yy, 0)).abs()); }
                if yy + 1 < 12 { lip = lip.max((img.get(xx, yy + 1, 0) - img.get(xx, yy, 0)).abs()); }
            }
        }
        let q = Vector2::new(x, y);
        let delta = Vector2::new(dx, dy) * 1e-6;
        let (a, _) = bilinear_sample(&img, q);
        let (b, _) = bilinear_sample(&img, q + delta);
        prop_assert!((a[0] - b[0]).abs() <= lip * delta.abs().sum() + 1e-15);
    }

    #[test]
    fn warping_is_linear_in_intensity(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let (a, b) = (image(14, 10, seed), image(14, 10, seed ^ 1));
        let f = flow(14, 10, seed ^ 2, 3.0);
        let mix = ImagePlane::new(14, 10, 1, a.data.iter().zip(&b.data).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
        let (wa, ma) = inverse_warp(&a, &f).unwrap();
        let (wb, _) = inverse_warp(&b, &f).unwrap();
        let (wm, mm) = inverse_warp(&mix, &f).unwrap();
        prop_assert_eq!(&ma, &mm);
        for i in 0..wm.data.len() {
            prop_assert!((wm.data[i] - (alpha * wa.data[i] + beta * wb.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn census_ignores_global_brightness(seed in any::<u64>(), shift in -0.5f64..0.5) {
        let img = image(15, 11, seed);
        prop_assert_eq!(census_transform(&img.map(|v| v + shift), 0.02).unwrap(), census_transform(&img, 0.02).unwrap());
    }

    #[test]
    fn keypoint_footprints_stay_inside(w in 8usize..48, h in 8usize..48, seed in any::<u64>(), cap in 1usize..200) {
        let img = image(w, h, seed);
        let patches = extract_keypoints(&img, cap, &Default::default()).unwrap();
        prop_assert!(patches.len() <= cap);
        prop_assert!(patches.fits(w, h));
        let mut kp = patches.keypoints.clone();
        kp.sort_unstable();
        kp.dedup();
        prop_assert_eq!(kp.len(), patches.len());
    }

    #[test]
    fn constant_image_gives_zero_features(c in 0.0f64..1.0) {
        let cfg = PyramidConfig { channels: vec![16, 32, 64], first_level: 0 };
        let pyr = build_feature_pyramid(&ImagePlane::filled(24, 16, 1, c), &cfg).unwrap();
        prop_assert!(pyr.levels.iter().all(|l| l.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn feature_pyramid_is_shift_equivariant(seed in any::<u64>(), sx in 0usize..4, sy in 0usize..4) {
        let (w, h) = (40, 32);
        let big = image(w + 4, h + 4, seed);
        let crop = |ox: usize, oy: usize| ImagePlane::from_fn(w, h, |x, y| big.get(x + ox, y + oy, 0));
        let cfg = PyramidConfig { channels: vec![12], first_level: 0 };
        let a = build_feature_pyramid(&crop(0, 0), &cfg).unwrap();
        let b = build_feature_pyramid(&crop(sx, sy), &cfg).unwrap();
        // filters reach a few pixels; compare well inside both crops
        let m = 10;
        for y in m..h - m - 4 {
            for x in m..w - m - 4 {
                for c in 0..12 {
                    let (va, vb) = (a.levels[0].get(x + sx, y + sy, c), b.levels[0].get(x, y, c));
                    prop_assert!((va - vb).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let (t, s) = (image(20, 16, seed), image(20, 16, seed ^ 7));
        let f = flow(20, 16, seed ^ 3, 2.0);
        let patches = extract_keypoints(&t, 40, &Default::default()).unwrap();
        prop_assert!(patch_photometric_loss(&t, &s, &f, &patches, None, &CensusParams::default()).unwrap().value >= 0.0);
        prop_assert!(smoothness_loss(&f, &t).unwrap().value >= 0.0);
        let all = Mask::new(20, 16, true);
        prop_assert!(flow_consistency_loss(&f, &flow(20, 16, seed ^ 4, 2.0), &all).unwrap().value >= 0.0);
    }

    #[test]
    fn removing_pixels_keeps_other_contributions(seed in any::<u64>(), keep in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (flow(18, 14, seed, 3.0), flow(18, 14, seed ^ 5, 3.0));
        let all = Mask::new(18, 14, true);
        let part = Mask::from_vec(18, 14, (0..18 * 14).map(|_| rng.random_bool(keep)).collect());
        let full = flow_consistency_loss(&a, &b, &all).unwrap();
        let sub = flow_consistency_loss(&a, &b, &part).unwrap();
        for i in 0..18 * 14 {
            if part.data[i] {
                prop_assert_eq!(sub.contributions[i], full.contributions[i]);
            } else {
                prop_assert_eq!(sub.contributions[i], None);
            }
        }
    }

    #[test]
    fn hard_census_patch_loss_ignores_brightness(seed in any::<u64>(), shift in -0.3f64..0.3) {
        let (t, s) = (image(20, 16, seed), image(20, 16, seed ^ 9));
        let f = flow(20, 16, seed ^ 1, 2.0);
        let patches = extract_keypoints(&t, 40, &Default::default()).unwrap();
        let hard = CensusParams { coding: CensusCoding::Hard, ..CensusParams::default() };
        let base = patch_photometric_loss(&t, &s, &f, &patches, None, &hard).unwrap().value;
        let moved = patch_photometric_loss(&t.map(|v| v + shift), &s, &f, &patches, None, &hard).unwrap().value;
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn depth_total_is_linear_in_each_weight(terms in proptest::array::uniform5(0.0f64..5.0), k in 0.0f64..10.0) {
        let b = LossBreakdown {
            patch_photometric: terms[0],
            smoothness: terms[1],
            planar: terms[2],
            flow_consistency: terms[3],
            feature_synthesis: terms[4],
            ..LossBreakdown::default()
        };
        let cfg = LossConfig::default();
        let base = depth_total(&b, &cfg);
        for (which, term) in [(0, terms[1]), (1, terms[2]), (2, terms[4])] {
            let mut scaled = cfg.clone();
            let w = match which {
                0 => &mut scaled.depth_smoothness_weight,
                1 => &mut scaled.planar_weight,
                _ => &mut scaled.feature_weight,
            };
            let old = *w;
            *w *= k;
            prop_assert!((depth_total(&b, &scaled) - (base + (k - 1.0) * old * term)).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_respond_to_scaling(seed in any::<u64>(), s in 0.1f64..10.0) {
        let (p, g) = (depth(9, 7, seed), depth(9, 7, seed ^ 11));
        let m = Mask::new(9, 7, true);
        let base = compute_metrics(&p, &g, &m).unwrap();
        let both = compute_metrics(&p.scaled(s), &g.scaled(s), &m).unwrap();
        prop_assert!((both.abs_rel - base.abs_rel).abs() < 1e-12);
        prop_assert!((both.mean_log10 - base.mean_log10).abs() < 1e-12);
        prop_assert!((both.rms - s * base.rms).abs() < 1e-12 * (1.0 + s * base.rms));
        prop_assert!(base.delta1 <= base.delta2 && base.delta2 <= base.delta3);
        let a = compute_metrics(&median_scale(&p, &g, &m).unwrap(), &g, &m).unwrap();
        let b = compute_metrics(&median_scale(&p.scaled(s), &g, &m).unwrap(), &g, &m).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12 && (a.rms - b.rms).abs() < 1e-12);
    }
}
