use nalgebra::{Matrix6, Vector6};

use crate::geometry::{project_unchecked, rotation_from_axis_angle, CameraIntrinsics, Pose, Vec2, Vec3};

use super::mean_reprojection_error;

const MAX_ITERS: usize = 50;

/// Minimizes squared reprojection error over the pose with a left
/// rotation increment `R = exp(w) R0`. Never returns a pose worse than the
/// starting one.
pub fn refine_lm(start: &Pose, points: &[Vec3], pixels: &[Vec2], k: &CameraIntrinsics) -> Pose {
    let mut pose = *start;
    let Some(mut cost) = sq_cost(&pose, points, pixels, k) else {
        return pose;
    };
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERS {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (p, u) in points.iter().zip(pixels) {
            let rp = pose.rotation * p;
            let c = rp + pose.translation;
            let iz = 1.0 / c.z;
            let proj = project_unchecked(&c, k);
            let r = proj - u;
            // d(u,v)/dc
            let du = Vec3::new(k.fx * iz, 0.0, -k.fx * c.x * iz * iz);
            let dv = Vec3::new(0.0, k.fy * iz, -k.fy * c.y * iz * iz);
            for (d, res) in [(du, r.x), (dv, r.y)] {
                // dc/dw = -[Rp]x, so d/dw = (Rp) x d
                let dw = rp.cross(&d);
                let row = Vector6::new(dw.x, dw.y, dw.z, d.x, d.y, d.z);
                jtj += row * row.transpose();
                jtr += row * res;
            }
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vec3::new(step[0], step[1], step[2]);
            let candidate = Pose {
                rotation: rotation_from_axis_angle(&w) * pose.rotation,
                translation: pose.translation + Vec3::new(step[3], step[4], step[5]),
            };
            match sq_cost(&candidate, points, pixels, k) {
                Some(c) if c < cost => {
                    let gain = cost - c;
                    pose = candidate;
                    cost = c;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if gain <= 1e-14 * (1.0 + cost) {
                        return reorthonormalized(pose);
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            break;
        }
    }
    let pose = reorthonormalized(pose);
    if mean_reprojection_error(&pose, points, pixels, k).is_finite() {
        pose
    } else {
        *start
    }
}

fn reorthonormalized(pose: Pose) -> Pose {
    Pose {
        rotation: crate::geometry::orthonormalize(&pose.rotation),
        translation: pose.translation,
    }
}

fn sq_cost(pose: &Pose, points: &[Vec3], pixels: &[Vec2], k: &CameraIntrinsics) -> Option<f64> {
    let mut sum = 0.0;
    for (p, u) in points.iter().zip(pixels) {
        let c = pose.transform(p);
        if c.z <= 0.0 {
            return None;
        }
        sum += (project_unchecked(&c, k) - u).norm_squared();
    }
    Some(sum)
}
