#![allow(dead_code)]

use std::sync::Arc;

use coordpose::geometry::{BBox, CameraIntrinsics, Mat3, NormalizationBox, Pose, Vec2, Vec3};
use coordpose::mesh::Mesh;
use coordpose::predictor::OracleScene;
use coordpose::render::render;
use nalgebra::{DMatrix, UnitQuaternion, Quaternion};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn linemod_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(572.4114, 573.57043, 325.2611, 242.04899, 640, 480).unwrap()
}

pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Pose placing the object origin on a random pixel well inside the image.
pub fn random_visible_pose(rng: &mut impl Rng, k: &CameraIntrinsics) -> Pose {
    let u = rng.random_range(150.0..(k.width as f64 - 150.0));
    let v = rng.random_range(130.0..(k.height as f64 - 130.0));
    let z = rng.random_range(550.0..1000.0);
    let ray = k.unproject(&Vec2::new(u, v));
    Pose::new(random_rotation(rng), ray * (z / ray.z)).unwrap()
}

pub struct Scene {
    pub mesh: Arc<Mesh>,
    pub norm_box: NormalizationBox,
    pub pose: Pose,
    pub k: CameraIntrinsics,
    pub bbox: BBox,
}

impl Scene {
    pub fn new(mesh: Arc<Mesh>, pose: Pose, k: CameraIntrinsics) -> Self {
        let norm_box = mesh.normalization_box().unwrap();
        let out = render(&mesh, &pose, &k, &norm_box);
        let bbox = BBox::from_mask(&out.mask).expect("object visible");
        Self {
            mesh,
            norm_box,
            pose,
            k,
            bbox,
        }
    }

    pub fn oracle(&self) -> OracleScene {
        OracleScene {
            mesh: self.mesh.clone(),
            pose: self.pose,
            k: self.k,
            norm_box: self.norm_box,
        }
    }
}

pub fn rotation_error_deg(a: &Mat3, b: &Mat3) -> f64 {
    coordpose::geometry::rotation_angle_between(a, b).to_degrees()
}

/// Direct linear transform on normalized image coordinates followed by
/// projection of the left 3x3 block onto SO(3). Exact for noise-free
/// non-coplanar input.
pub fn dlt_pose(points: &[Vec3], pixels: &[Vec2], k: &CameraIntrinsics) -> Pose {
    let n = points.len();
    let mut a = DMatrix::<f64>::zeros(2 * n.max(6), 12);
    for (i, (p, px)) in points.iter().zip(pixels).enumerate() {
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        let h = [p.x, p.y, p.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -x * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -y * h[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let sol = v_t.row(idx);
    let mut m = Mat3::zeros();
    let mut t = Vec3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = sol[4 * r + c];
        }
        t[r] = sol[4 * r + 3];
    }
    let msvd = m.svd(true, true);
    let (u, vt) = (msvd.u.unwrap(), msvd.v_t.unwrap());
    let scale = msvd.singular_values.mean();
    let mut rot = u * vt;
    let mut t = t / scale;
    if rot.determinant() < 0.0 {
        rot = -rot;
        t = -t;
    }
    Pose::new(rot, t).unwrap()
}

pub fn project_all(pose: &Pose, pts: &[Vec3], k: &CameraIntrinsics) -> Vec<Vec2> {
    pts.iter()
        .map(|p| coordpose::geometry::project(&pose.transform(p), k).unwrap())
        .collect()
}
