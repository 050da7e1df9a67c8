use std::f64::consts::PI;
use std::sync::Arc;

use coordpose::augment::{augment_sample, make_batch, occlude, AugmentConfig, Range, TrainingSample};
use coordpose::geometry::{
    apply_symmetry, axis_rotation, denormalize_coord, normalize_coord, project, rotation_from_axis_angle, Axis,
    CameraIntrinsics, NormalizationBox, Pose, SymmetryPool, Vec2, Vec3,
};
use coordpose::grid::{coord_l1, CoordImage, Mask, RgbImage};
use coordpose::losses::{loss_scan, recon_loss, sym_transform_image, transformer_loss, ScanMode, ScanSetup};
use coordpose::mesh::Mesh;
use coordpose::metrics::{add, adi, is_correct_add, vsd, VsdParams};
use coordpose::pipeline::crop_region;
use coordpose::predictor::{oracle_predict, OracleParams, OracleScene, Stage};
use coordpose::render::{render, render_depth, render_scene_depth};
use coordpose::geometry::BBox;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(300.0, 300.0, 47.5, 39.5, 96, 80).unwrap()
}

fn rotation() -> impl Strategy<Value = coordpose::geometry::Mat3> {
    (-PI..PI, -PI..PI, -PI..PI).prop_map(|(a, b, c)| rotation_from_axis_angle(&(Vec3::new(a, b, c) * 0.577)))
}

/// Pose keeping a ~120 mm object inside the small camera.
fn visible_pose() -> impl Strategy<Value = Pose> {
    (rotation(), -20.0..20.0, -20.0..20.0, 450.0..700.0)
        .prop_map(|(r, x, y, z)| Pose::new(r, Vec3::new(x, y, z)).unwrap())
}

fn any_pose() -> impl Strategy<Value = Pose> {
    (rotation(), -500.0..500.0, -500.0..500.0, -500.0..500.0)
        .prop_map(|(r, x, y, z)| Pose::new(r, Vec3::new(x, y, z)).unwrap())
}

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((-80.0..80.0, -80.0..80.0, -80.0..80.0), n)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
}

fn coord_image(n: usize) -> impl Strategy<Value = CoordImage> {
    prop::collection::vec((0.0..=1.0, 0.0..=1.0, 0.0..=1.0), n * n).prop_map(move |v| {
        CoordImage::from_vec(n, n, v.into_iter().map(|(a, b, c)| [a, b, c]).collect()).unwrap()
    })
}

fn mask(n: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), n * n).prop_map(move |v| Mask::from_vec(n, n, v).unwrap())
}

fn box_mesh() -> Mesh {
    Mesh::cuboid(100.0, 60.0, 40.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_round_trip(x in -50.0..=50.0, y in -30.0..=30.0, z in -20.0..=20.0) {
        let b = NormalizationBox::new(Vec3::new(-50.0, -30.0, -20.0), Vec3::new(50.0, 30.0, 20.0)).unwrap();
        let p = Vec3::new(x, y, z);
        let back = denormalize_coord(&normalize_coord(&p, &b), &b).unwrap();
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn projection_is_homogeneous(x in -200.0..200.0, y in -200.0..200.0, z in 1.0..2000.0, s in 0.1..10.0) {
        let k = small_camera();
        let p = Vec3::new(x, y, z);
        let a = project(&p, &k).unwrap();
        let b = project(&(p * s), &k).unwrap();
        prop_assert!((a - b).norm() <= 1e-9 * (1.0 + a.norm()));
    }

    #[test]
    fn diameter_matches_pairwise_scan(v in points(2..40)) {
        let mesh = Mesh::new(v.clone(), vec![]).unwrap();
        let mut d: f64 = 0.0;
        for a in &v {
            for b in &v {
                d = d.max((a - b).norm());
            }
        }
        prop_assert_eq!(mesh.diameter(), d);
    }

    #[test]
    fn adi_never_exceeds_add(v in points(2..30), est in any_pose(), gt in any_pose()) {
        let mesh = Mesh::new(v, vec![]).unwrap();
        prop_assert!(adi(&est, &gt, &mesh).unwrap() <= add(&est, &gt, &mesh).unwrap() + 1e-12);
    }

    #[test]
    fn add_is_invariant_to_a_shared_rigid_motion(v in points(2..30), est in any_pose(), gt in any_pose(), g in any_pose()) {
        let mesh = Mesh::new(v, vec![]).unwrap();
        let a = add(&est, &gt, &mesh).unwrap();
        let b = add(&g.compose(&est), &g.compose(&gt), &mesh).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn correctness_ignores_pool_rotations(est in visible_pose(), gt in visible_pose(), q in 0usize..2) {
        let mesh = box_mesh();
        let pool = SymmetryPool::cyclic(Axis::Z, 2).unwrap();
        let moved = apply_symmetry(&est, &pool.rotations()[q]);
        prop_assert_eq!(
            is_correct_add(&est, &gt, &mesh, &pool),
            is_correct_add(&moved, &gt, &mesh, &pool)
        );
    }

    #[test]
    fn transformer_bounded_by_recon(p in coord_image(5), t in coord_image(5), m in mask(5), beta in 1.0..5.0) {
        let b = NormalizationBox::cube(50.0).unwrap();
        let pool = SymmetryPool::cyclic(Axis::Z, 4).unwrap();
        let (tl, idx) = transformer_loss(&p, &t, &m, beta, &pool, &b).unwrap();
        let rl = recon_loss(&p, &t, &m, beta).unwrap();
        prop_assert!(tl >= 0.0 && tl <= rl);
        if idx == 0 {
            prop_assert_eq!(tl, rl);
        }
    }

    #[test]
    fn transformer_ignores_pool_substitution(p in coord_image(4), t in coord_image(4), m in mask(4), order in prop::sample::select(vec![2usize, 4])) {
        let b = NormalizationBox::cube(50.0).unwrap();
        let pool = SymmetryPool::cyclic(Axis::Z, order).unwrap();
        let (base, _) = transformer_loss(&p, &t, &m, 3.0, &pool, &b).unwrap();
        for r in pool.rotations() {
            let moved = sym_transform_image(&t, &m, r, &b);
            let (l, _) = transformer_loss(&p, &moved, &m, 3.0, &pool, &b).unwrap();
            prop_assert!((l - base).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_beta_recon_is_mean_pixel_error(p in coord_image(5), t in coord_image(5), m in mask(5)) {
        let direct: f64 = p.as_slice().iter().zip(t.as_slice()).map(|(a, b)| coord_l1(a, b)).sum::<f64>() / 25.0;
        prop_assert!((recon_loss(&p, &t, &m, 1.0).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn occluded_fraction_matches_request(fraction in 0.0..=1.0, seed in any::<u64>(), r in 3usize..12) {
        let n = 32;
        let m = Mask::from_fn(n, n, |x, y| {
            let (dx, dy) = (x as f64 - 15.5, y as f64 - 15.5);
            dx * dx + dy * dy <= (r * r) as f64
        });
        let img = RgbImage::filled(n, n, [200, 100, 50]);
        let bg = RgbImage::filled(n, n, [1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, visible) = occlude(&img, &bg, &m, fraction, &mut rng).unwrap();
        let total = m.count() as f64;
        let got = 1.0 - visible.count() as f64 / total;
        prop_assert!((got - fraction).abs() <= 1.0 / total + 1e-12);
        prop_assert!(visible.as_slice().iter().zip(m.as_slice()).all(|(v, m)| !*v || *m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rendered_coordinates_reproject_onto_their_pixel(pose in visible_pose()) {
        let mesh = box_mesh();
        let k = small_camera();
        let b = mesh.normalization_box().unwrap();
        let out = render(&mesh, &pose, &k, &b);
        prop_assert!(out.mask.count() > 0);
        for (x, y, m) in out.mask.iter_xy() {
            if !*m {
                continue;
            }
            let p = denormalize_coord(out.coord.get(x, y), &b).unwrap();
            let px = project(&pose.transform(&p), &k).unwrap();
            prop_assert!((px - Vec2::new(x as f64, y as f64)).norm() < 1.0);
        }
    }

    #[test]
    fn joint_depth_is_pixelwise_minimum(a in visible_pose(), bpose in visible_pose()) {
        let m1 = box_mesh();
        let m2 = Mesh::cube(50.0);
        let k = small_camera();
        let joint = render_scene_depth(&[(&m1, a), (&m2, bpose)], &k);
        let d1 = render_depth(&m1, &a, &k);
        let d2 = render_depth(&m2, &bpose, &k);
        for i in 0..joint.len() {
            let (x, y, j) = (d1.as_slice()[i], d2.as_slice()[i], joint.as_slice()[i]);
            if x > 0.0 && y > 0.0 {
                prop_assert_eq!(j, x.min(y));
            }
        }
    }

    #[test]
    fn symmetric_poses_render_the_same_surface(pose in visible_pose()) {
        let mesh = box_mesh();
        let k = small_camera();
        let b = mesh.normalization_box().unwrap();
        let other = apply_symmetry(&pose, &axis_rotation(Axis::Z, PI));
        let r1 = render(&mesh, &pose, &k, &b);
        let r2 = render(&mesh, &other, &k, &b);
        prop_assert_eq!(&r1.mask, &r2.mask);
        for (a, c) in r1.depth.as_slice().iter().zip(r2.depth.as_slice()) {
            prop_assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn vsd_is_bounded_symmetric_and_zero_on_itself(a in visible_pose(), bpose in visible_pose()) {
        let mesh = box_mesh();
        let k = small_camera();
        let scene = render_scene_depth(&[(&mesh, a)], &k);
        let params = VsdParams::default();
        let ab = vsd(&a, &bpose, &mesh, &scene, &k, &params).unwrap();
        let ba = vsd(&bpose, &a, &mesh, &scene, &k, &params).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(vsd(&a, &a, &mesh, &scene, &k, &params).unwrap(), 0.0);
    }

    #[test]
    fn oracle_outputs_are_valid(pose in visible_pose(), sigma in 0.0..0.2, occ in 0.0..=1.0, en in 0.0..0.3, seed in any::<u64>()) {
        let mesh = Arc::new(box_mesh());
        let k = small_camera();
        let scene = OracleScene { norm_box: mesh.normalization_box().unwrap(), mesh, pose, k };
        let crop = crop_region(&BBox::new(47.5, 39.5, 60.0, 60.0).unwrap(), 1.5, 32);
        let params = OracleParams { noise_sigma: sigma, occlusion_fraction: occ, err_noise: en };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = oracle_predict(&scene, &crop, &params, &mut rng).unwrap();
        prop_assert!(out.validate().is_ok());
    }

    #[test]
    fn jitter_and_occlusion_leave_targets_alone(seed in any::<u64>(), stage2 in any::<bool>()) {
        let mesh = box_mesh();
        let k = CameraIntrinsics::new(200.0, 200.0, 23.5, 23.5, 48, 48).unwrap();
        let pose = Pose::new(axis_rotation(Axis::X, 0.6), Vec3::new(0.0, 0.0, 600.0)).unwrap();
        let b = mesh.normalization_box().unwrap();
        let out = render(&mesh, &pose, &k, &b);
        let sample = TrainingSample {
            obj_id: 1,
            rgb: RgbImage::filled(48, 48, [120, 90, 60]),
            coord: out.coord.clone(),
            mask: out.mask.clone(),
            pose,
            k,
        };
        let cfg = AugmentConfig {
            rotation_range_deg: Range(0.0, 0.0),
            occlusion_fraction_range: Range(0.0, 0.6),
            ..AugmentConfig::default()
        };
        let bg = RgbImage::filled(48, 48, [5, 5, 5]);
        let stage = if stage2 { Stage::Two } else { Stage::One };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, coord, m, _, _, _) = augment_sample(&sample, Some(&bg), stage, &cfg, &mut rng).unwrap();
        prop_assert_eq!(coord, out.coord);
        prop_assert_eq!(m, out.mask);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn batches_are_reproducible(seed in any::<u64>(), iteration in 0u64..6) {
        let mesh = box_mesh();
        let samples = coordpose::dataset::synthetic_samples(&mesh, 1, 3, 32, 1).unwrap();
        let bgs = vec![RgbImage::filled(32, 32, [30, 60, 90])];
        let cfg = AugmentConfig { batch_size: 4, ..AugmentConfig::default() };
        let a = make_batch(&samples, &bgs, &cfg, seed, iteration).unwrap();
        let b = make_batch(&samples, &bgs, &cfg, seed, iteration).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn transformer_scan_repeats_every_half_turn() {
    let mesh = box_mesh();
    let setup = ScanSetup::reference_view(&mesh, SymmetryPool::cyclic(Axis::Z, 2).unwrap(), 3.0).unwrap();
    let curve = loss_scan(&setup, 36, ScanMode::Transformer).unwrap();
    for i in 0..18 {
        assert!((curve[i].loss - curve[i + 18].loss).abs() < 1e-3, "step {i}");
    }
}
