//! EPnP: pose from n >= 4 correspondences via four (or, for planar point
//! sets, three) virtual control points.
//!
//! Image points are first mapped to normalized camera coordinates. The
//! camera-frame control points are found in the null space of the projection
//! system; their scale comes from preserving inter-control-point distances,
//! with closed-form initializations for kernel dimensions 1-4 polished by
//! Gauss–Newton. The candidate with the lowest reprojection error wins.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat3, Pose, Vec2, Vec3};

use super::{mean_reprojection_error, rigid_fit};

const PLANAR_RATIO: f64 = 1e-10;
const GN_ITERS: usize = 10;

pub fn epnp(points: &[Vec3], pixels: &[Vec2], k: &CameraIntrinsics) -> Result<Pose> {
    let n = points.len();
    if n != pixels.len() {
        return Err(Error::Input("points and pixels differ in length".into()));
    }
    if n < 4 {
        return Err(Error::InsufficientCorrespondences { found: n });
    }

    let controls = ControlPoints::fit(points)?;
    let m = controls.count();
    let alphas: Vec<[f64; 4]> = points.iter().map(|p| controls.alphas(p)).collect();
    let normalized: Vec<Vec2> = pixels
        .iter()
        .map(|px| Vec2::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy))
        .collect();

    // Projection system M x = 0 with x the stacked camera-frame controls.
    // Padded to at least 3m rows so the SVD exposes the full right basis.
    let rows = (2 * n).max(3 * m);
    let mut mat = DMatrix::<f64>::zeros(rows, 3 * m);
    for (i, (a, u)) in alphas.iter().zip(&normalized).enumerate() {
        for j in 0..m {
            mat[(2 * i, 3 * j)] = a[j];
            mat[(2 * i, 3 * j + 2)] = -a[j] * u.x;
            mat[(2 * i + 1, 3 * j + 1)] = a[j];
            mat[(2 * i + 1, 3 * j + 2)] = -a[j] * u.y;
        }
    }
    let svd = mat.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::PoseFailure("EPnP SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let max_kernel = if m == 4 { 4 } else { 3 };
    let kernel: Vec<DVector<f64>> = order[..max_kernel]
        .iter()
        .map(|&r| v_t.row(r).transpose())
        .collect();

    let pairs = controls.pairs();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (controls.world[a] - controls.world[b]).norm_squared())
        .collect();
    // diffs[pair][kernel] = v_k[a] - v_k[b]
    let diffs: Vec<Vec<Vec3>> = pairs
        .iter()
        .map(|&(a, b)| {
            kernel
                .iter()
                .map(|v| {
                    Vec3::new(
                        v[3 * a] - v[3 * b],
                        v[3 * a + 1] - v[3 * b + 1],
                        v[3 * a + 2] - v[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();

    let mut inits: Vec<Vec<f64>> = Vec::new();
    inits.push(betas_n1(&diffs, &rho));
    if let Some(b) = betas_n2(&diffs, &rho) {
        inits.push(b);
    }
    if m == 4 {
        if let Some(b) = betas_n3(&diffs, &rho) {
            inits.push(b);
        }
        if let Some(b) = betas_n4(&diffs, &rho) {
            inits.push(b);
        }
    }

    let mut best: Option<(f64, Pose)> = None;
    for init in inits {
        let mut betas = vec![0.0; max_kernel];
        betas[..init.len()].copy_from_slice(&init);
        gauss_newton(&diffs, &rho, &mut betas);
        let Some(pose) = pose_from_betas(&kernel, &betas, &alphas, points, m) else {
            continue;
        };
        let err = mean_reprojection_error(&pose, points, pixels, k);
        if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::PoseFailure("EPnP found no valid pose".into()))
}

struct ControlPoints {
    world: Vec<Vec3>,
    axes: Vec<Vec3>,
    scales: Vec<f64>,
}

impl ControlPoints {
    /// Centroid plus the principal axes scaled by their standard deviation.
    fn fit(points: &[Vec3]) -> Result<Self> {
        let n = points.len() as f64;
        let c0 = points.iter().sum::<Vec3>() / n;
        let mut cov = Mat3::zeros();
        for p in points {
            let d = p - c0;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let largest = eig.eigenvalues[idx[0]];
        if !(largest > 0.0) {
            return Err(Error::PoseFailure("all 3D points coincide".into()));
        }
        let planar = eig.eigenvalues[idx[2]] <= PLANAR_RATIO * largest;
        if eig.eigenvalues[idx[1]] <= PLANAR_RATIO * largest {
            return Err(Error::PoseFailure("3D points are collinear".into()));
        }
        let used = if planar { 2 } else { 3 };
        let mut world = vec![c0];
        let mut axes = Vec::new();
        let mut scales = Vec::new();
        for &i in &idx[..used] {
            let axis: Vec3 = eig.eigenvectors.column(i).into();
            let s = eig.eigenvalues[i].sqrt();
            world.push(c0 + axis * s);
            axes.push(axis);
            scales.push(s);
        }
        Ok(Self {
            world,
            axes,
            scales,
        })
    }

    fn count(&self) -> usize {
        self.world.len()
    }

    /// Barycentric weights; unused slots stay zero.
    fn alphas(&self, p: &Vec3) -> [f64; 4] {
        let d = p - self.world[0];
        let mut a = [0.0; 4];
        let mut rest = 0.0;
        for j in 0..self.axes.len() {
            a[j + 1] = self.axes[j].dot(&d) / self.scales[j];
            rest += a[j + 1];
        }
        a[0] = 1.0 - rest;
        a
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let m = self.count();
        let mut out = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                out.push((a, b));
            }
        }
        out
    }
}

fn betas_n1(diffs: &[Vec<Vec3>], rho: &[f64]) -> Vec<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (d, r) in diffs.iter().zip(rho) {
        let s = d[0].norm_squared();
        num += s * r;
        den += s * s;
    }
    vec![(num / den).max(0.0).sqrt()]
}

/// Least squares over products of the first `dims` betas, restricted to the
/// listed product terms.
fn solve_products(
    diffs: &[Vec<Vec3>],
    rho: &[f64],
    terms: &[(usize, usize)],
) -> Option<DVector<f64>> {
    if diffs.len() < terms.len() {
        return None;
    }
    let mut l = DMatrix::<f64>::zeros(diffs.len(), terms.len());
    for (r, d) in diffs.iter().enumerate() {
        for (c, &(i, j)) in terms.iter().enumerate() {
            let f = if i == j { 1.0 } else { 2.0 };
            l[(r, c)] = f * d[i].dot(&d[j]);
        }
    }
    let rhs = DVector::from_column_slice(rho);
    l.svd(true, true).solve(&rhs, 1e-12).ok()
}

fn betas_n2(diffs: &[Vec<Vec3>], rho: &[f64]) -> Option<Vec<f64>> {
    let x = solve_products(diffs, rho, &[(0, 0), (0, 1), (1, 1)])?;
    let b1 = x[0].abs().sqrt();
    let b2 = x[2].abs().sqrt() * x[1].signum();
    Some(vec![b1, b2])
}

fn betas_n3(diffs: &[Vec<Vec3>], rho: &[f64]) -> Option<Vec<f64>> {
    let x = solve_products(
        diffs,
        rho,
        &[(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)],
    )?;
    let b1 = x[0].abs().sqrt();
    let b2 = x[3].abs().sqrt() * x[1].signum();
    let b3 = x[5].abs().sqrt() * x[2].signum();
    Some(vec![b1, b2, b3])
}

fn betas_n4(diffs: &[Vec<Vec3>], rho: &[f64]) -> Option<Vec<f64>> {
    let x = solve_products(diffs, rho, &[(0, 0), (0, 1), (0, 2), (0, 3)])?;
    let b1 = x[0].abs().sqrt();
    if b1 == 0.0 {
        return None;
    }
    let sign = x[0].signum();
    Some(vec![b1, sign * x[1] / b1, sign * x[2] / b1, sign * x[3] / b1])
}

fn gauss_newton(diffs: &[Vec<Vec3>], rho: &[f64], betas: &mut [f64]) {
    let dims = betas.len();
    for _ in 0..GN_ITERS {
        let mut jac = DMatrix::<f64>::zeros(diffs.len(), dims);
        let mut res = DVector::<f64>::zeros(diffs.len());
        for (r, d) in diffs.iter().enumerate() {
            let v: Vec3 = (0..dims).map(|k| d[k] * betas[k]).sum();
            res[r] = v.norm_squared() - rho[r];
            for k in 0..dims {
                jac[(r, k)] = 2.0 * v.dot(&d[k]);
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&res, 1e-14) else {
            return;
        };
        for k in 0..dims {
            betas[k] -= step[k];
        }
        if step.norm() < 1e-14 * (1.0 + betas.iter().map(|b| b * b).sum::<f64>().sqrt()) {
            return;
        }
    }
}

fn pose_from_betas(
    kernel: &[DVector<f64>],
    betas: &[f64],
    alphas: &[[f64; 4]],
    points: &[Vec3],
    m: usize,
) -> Option<Pose> {
    let mut x = DVector::<f64>::zeros(3 * m);
    for (v, &b) in kernel.iter().zip(betas) {
        x += v * b;
    }
    let controls: Vec<Vec3> = (0..m)
        .map(|j| Vec3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]))
        .collect();
    let mut cam: Vec<Vec3> = alphas
        .iter()
        .map(|a| (0..m).map(|j| controls[j] * a[j]).sum())
        .collect();
    let mean_z: f64 = cam.iter().map(|p| p.z).sum::<f64>() / cam.len() as f64;
    if mean_z < 0.0 {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    if !cam.iter().all(|p| p.iter().all(|v| v.is_finite())) {
        return None;
    }
    rigid_fit(points, &cam)
}
