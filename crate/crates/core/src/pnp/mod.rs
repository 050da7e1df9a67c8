//! Perspective-n-point solvers: EPnP, Levenberg–Marquardt refinement and a
//! seeded RANSAC driver.

mod epnp;
mod lm;
mod ransac;

pub use epnp::epnp;
pub use lm::refine_lm;
pub use ransac::{solve_pnp_ransac, RansacParams, RansacResult};

use nalgebra::Matrix3;

use crate::geometry::{project_unchecked, CameraIntrinsics, Mat3, Pose, Vec2, Vec3};

/// Reprojection error in pixels; infinite for points at or behind the camera.
pub fn reprojection_error(pose: &Pose, point: &Vec3, pixel: &Vec2, k: &CameraIntrinsics) -> f64 {
    let pc = pose.transform(point);
    if pc.z <= 0.0 {
        return f64::INFINITY;
    }
    (project_unchecked(&pc, k) - pixel).norm()
}

pub fn mean_reprojection_error(
    pose: &Pose,
    points: &[Vec3],
    pixels: &[Vec2],
    k: &CameraIntrinsics,
) -> f64 {
    if points.is_empty() {
        return f64::INFINITY;
    }
    let sum: f64 = points
        .iter()
        .zip(pixels)
        .map(|(p, u)| reprojection_error(pose, p, u, k))
        .sum();
    sum / points.len() as f64
}

/// Least-squares rigid transform mapping `src` onto `dst` (Kabsch).
pub(crate) fn rigid_fit(src: &[Vec3], dst: &[Vec3]) -> Option<Pose> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut fix = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = u * fix * v_t;
    let translation = cd - rotation * cs;
    if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
        return None;
    }
    Some(Pose {
        rotation,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_rotation, is_rotation, Axis};
    use approx::assert_relative_eq;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(572.4, 573.6, 325.3, 242.0, 640, 480).unwrap()
    }

    fn true_pose() -> Pose {
        let r = axis_rotation(Axis::X, 0.4) * axis_rotation(Axis::Y, -0.7) * axis_rotation(Axis::Z, 1.1);
        Pose::new(r, Vec3::new(20.0, -15.0, 600.0)).unwrap()
    }

    fn project_all(pose: &Pose, pts: &[Vec3], k: &CameraIntrinsics) -> Vec<Vec2> {
        pts.iter()
            .map(|p| project_unchecked(&pose.transform(p), k))
            .collect()
    }

    #[test]
    fn kabsch_recovers_rigid_motion() {
        let pose = true_pose();
        let src = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(0.0, 20.0, 0.0),
            Vec3::new(0.0, 0.0, 30.0),
        ];
        let dst: Vec<Vec3> = src.iter().map(|p| pose.transform(p)).collect();
        let fit = rigid_fit(&src, &dst).unwrap();
        assert!(is_rotation(&fit.rotation, 1e-9));
        assert_relative_eq!(fit.rotation, pose.rotation, epsilon = 1e-9);
        assert_relative_eq!(fit.translation, pose.translation, epsilon = 1e-7);
    }

    #[test]
    fn epnp_exact_general_points() {
        let k = camera();
        let pose = true_pose();
        let pts = vec![
            Vec3::new(-40.0, -30.0, 10.0),
            Vec3::new(45.0, -20.0, -25.0),
            Vec3::new(30.0, 35.0, 40.0),
            Vec3::new(-25.0, 40.0, -30.0),
            Vec3::new(5.0, -5.0, 50.0),
            Vec3::new(-50.0, 10.0, -45.0),
        ];
        let px = project_all(&pose, &pts, &k);
        let est = epnp(&pts, &px, &k).unwrap();
        assert_relative_eq!(est.rotation, pose.rotation, epsilon = 1e-8);
        assert_relative_eq!(est.translation, pose.translation, epsilon = 1e-5);
    }

    #[test]
    fn epnp_exact_minimal_nonplanar() {
        let k = camera();
        let pose = true_pose();
        let pts = vec![
            Vec3::new(-40.0, -30.0, 10.0),
            Vec3::new(45.0, -20.0, -25.0),
            Vec3::new(30.0, 35.0, 40.0),
            Vec3::new(-25.0, 40.0, -30.0),
        ];
        let px = project_all(&pose, &pts, &k);
        let est = epnp(&pts, &px, &k).unwrap();
        assert!(mean_reprojection_error(&est, &pts, &px, &k) < 1e-6);
    }

    #[test]
    fn epnp_exact_planar() {
        let k = camera();
        let pose = true_pose();
        let pts = vec![
            Vec3::new(-40.0, -30.0, 0.0),
            Vec3::new(45.0, -20.0, 0.0),
            Vec3::new(30.0, 35.0, 0.0),
            Vec3::new(-25.0, 40.0, 0.0),
        ];
        let px = project_all(&pose, &pts, &k);
        let est = epnp(&pts, &px, &k).unwrap();
        assert_relative_eq!(est.rotation, pose.rotation, epsilon = 1e-7);
        assert_relative_eq!(est.translation, pose.translation, epsilon = 1e-4);
    }

    #[test]
    fn epnp_rejects_three_points() {
        let k = camera();
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let px = vec![Vec2::zeros(); 3];
        assert!(matches!(
            epnp(&pts, &px, &k),
            Err(crate::Error::InsufficientCorrespondences { found: 3 })
        ));
    }

    #[test]
    fn lm_polishes_perturbed_pose() {
        let k = camera();
        let pose = true_pose();
        let pts: Vec<Vec3> = (0..30)
            .map(|i| {
                let f = i as f64;
                Vec3::new((f * 7.3).sin() * 50.0, (f * 3.1).cos() * 40.0, (f * 1.7).sin() * 30.0)
            })
            .collect();
        let px = project_all(&pose, &pts, &k);
        let start = Pose {
            rotation: axis_rotation(Axis::Y, 0.05) * pose.rotation,
            translation: pose.translation + Vec3::new(3.0, -2.0, 10.0),
        };
        let refined = refine_lm(&start, &pts, &px, &k);
        assert!(mean_reprojection_error(&refined, &pts, &px, &k) < 1e-8);
        assert_relative_eq!(refined.rotation, pose.rotation, epsilon = 1e-9);
    }

    #[test]
    fn reprojection_behind_camera_is_infinite() {
        let k = camera();
        let e = reprojection_error(&Pose::identity(), &Vec3::new(0.0, 0.0, -5.0), &Vec2::zeros(), &k);
        assert!(e.is_infinite());
    }
}
