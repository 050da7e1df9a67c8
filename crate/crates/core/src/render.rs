//! Z-buffered software rasterizer producing normalized coordinate images,
//! depth maps and object masks.
//!
//! A pixel is covered when its center lies inside the projected triangle;
//! pixel centers sitting exactly on a shared edge go to one triangle only
//! (top-left rule). Attributes use perspective-correct barycentric
//! interpolation. No anti-aliasing, no back-face culling.

use crate::geometry::{
    normalize_coord, project_unchecked, CameraIntrinsics, NormalizationBox, Pose, Vec2, Vec3,
};
use crate::grid::{CoordImage, DepthMap, Mask};
use crate::mesh::Mesh;

/// Triangles are clipped against this camera-frame plane (mm).
const NEAR_PLANE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub coord: CoordImage,
    pub depth: DepthMap,
    pub mask: Mask,
}

#[derive(Clone, Copy)]
struct ClipVertex {
    cam: Vec3,
    obj: Vec3,
}

/// Depth buffer plus per-pixel object point of the nearest fragment.
pub(crate) struct ZBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub point: Vec<Vec3>,
    pub owner: Vec<u32>,
}

pub(crate) const NO_OWNER: u32 = u32::MAX;

impl ZBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; n],
            point: vec![Vec3::zeros(); n],
            owner: vec![NO_OWNER; n],
        }
    }

    /// Rasterizes `mesh` at `pose`, tagging written fragments with `owner`.
    /// The depth test is strict, so on exact ties the earlier triangle (and
    /// the earlier object) wins.
    pub fn draw(&mut self, mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics, owner: u32) {
        let verts = mesh.vertices();
        let cam: Vec<Vec3> = verts.iter().map(|v| pose.transform(v)).collect();
        let mut poly = Vec::with_capacity(4);
        for tri in mesh.triangles() {
            let input = tri.map(|i| ClipVertex {
                cam: cam[i as usize],
                obj: verts[i as usize],
            });
            clip_near(&input, &mut poly);
            for i in 1..poly.len().saturating_sub(1) {
                self.fill_triangle([poly[0], poly[i], poly[i + 1]], k, owner);
            }
        }
    }

    fn fill_triangle(&mut self, mut v: [ClipVertex; 3], k: &CameraIntrinsics, owner: u32) {
        let mut s = v.map(|c| project_unchecked(&c.cam, k));
        let area = edge(&s[0], &s[1], &s[2]);
        if !area.is_finite() || area == 0.0 {
            return;
        }
        if area < 0.0 {
            v.swap(1, 2);
            s.swap(1, 2);
        }

        let min_x = s.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let x0 = min_x.ceil().max(0.0);
        let x1 = max_x.floor().min(self.width as f64 - 1.0);
        let y0 = min_y.ceil().max(0.0);
        let y1 = max_y.floor().min(self.height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return;
        }
        let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);

        let tl = [
            is_top_left(&s[1], &s[2]),
            is_top_left(&s[2], &s[0]),
            is_top_left(&s[0], &s[1]),
        ];
        let inv_z = v.map(|c| 1.0 / c.cam.z);

        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = Vec2::new(x as f64, y as f64);
                let w = [edge(&s[1], &s[2], &p), edge(&s[2], &s[0], &p), edge(&s[0], &s[1], &p)];
                let inside = (0..3).all(|i| w[i] > 0.0 || (w[i] == 0.0 && tl[i]));
                if !inside {
                    continue;
                }
                let wsum = w[0] + w[1] + w[2];
                let q = [
                    w[0] / wsum * inv_z[0],
                    w[1] / wsum * inv_z[1],
                    w[2] / wsum * inv_z[2],
                ];
                let qsum = q[0] + q[1] + q[2];
                let z = 1.0 / qsum;
                let idx = y * self.width + x;
                if z < self.depth[idx] {
                    self.depth[idx] = z;
                    self.point[idx] = (v[0].obj * q[0] + v[1].obj * q[1] + v[2].obj * q[2]) / qsum;
                    self.owner[idx] = owner;
                }
            }
        }
    }
}

/// Signed doubled area of `(a, b, p)`, computed from a canonical endpoint
/// order so that `edge(a, b, p) == -edge(b, a, p)` holds bit-exactly.
#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    #[inline]
    fn raw(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
        (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
    }
    if (a.x, a.y) <= (b.x, b.y) {
        raw(a, b, p)
    } else {
        -raw(b, a, p)
    }
}

/// Exactly one of `is_top_left(a, b)` and `is_top_left(b, a)` holds for
/// distinct endpoints.
#[inline]
fn is_top_left(a: &Vec2, b: &Vec2) -> bool {
    let d = b - a;
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

/// Sutherland–Hodgman clip of one triangle against `z >= NEAR_PLANE`.
fn clip_near(tri: &[ClipVertex; 3], out: &mut Vec<ClipVertex>) {
    out.clear();
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.cam.z >= NEAR_PLANE;
        let b_in = b.cam.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.cam.z) / (b.cam.z - a.cam.z);
            out.push(ClipVertex {
                cam: a.cam + (b.cam - a.cam) * t,
                obj: a.obj + (b.obj - a.obj) * t,
            });
        }
    }
}

/// Renders the coordinate image, depth map and mask of one object.
pub fn render(
    mesh: &Mesh,
    pose: &Pose,
    k: &CameraIntrinsics,
    norm_box: &NormalizationBox,
) -> RenderOutput {
    let mut zb = ZBuffer::new(k.width, k.height);
    zb.draw(mesh, pose, k, 0);
    let (w, h) = (k.width, k.height);
    let mut coord = CoordImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut mask = Mask::new(w, h);
    for (i, &owner) in zb.owner.iter().enumerate() {
        if owner != NO_OWNER {
            coord.as_mut_slice()[i] = normalize_coord(&zb.point[i], norm_box);
            depth.as_mut_slice()[i] = zb.depth[i];
            mask.as_mut_slice()[i] = true;
        }
    }
    RenderOutput { coord, depth, mask }
}

/// Depth-only render of one object (0 where empty).
pub fn render_depth(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics) -> DepthMap {
    render_scene_depth(&[(mesh, *pose)], k)
}

/// Joint depth of several objects (0 where nothing is hit).
pub fn render_scene_depth(objects: &[(&Mesh, Pose)], k: &CameraIntrinsics) -> DepthMap {
    let zb = joint_zbuffer(objects, k);
    let data = zb
        .owner
        .iter()
        .zip(&zb.depth)
        .map(|(&o, &d)| if o == NO_OWNER { 0.0 } else { d })
        .collect();
    DepthMap::from_vec(k.width, k.height, data).expect("buffer sized from intrinsics")
}

fn joint_zbuffer(objects: &[(&Mesh, Pose)], k: &CameraIntrinsics) -> ZBuffer {
    let mut zb = ZBuffer::new(k.width, k.height);
    for (i, (mesh, pose)) in objects.iter().enumerate() {
        zb.draw(mesh, pose, k, i as u32);
    }
    zb
}

/// Per-object visible masks from a joint z-buffer: a pixel belongs to the
/// object nearest to the camera there.
pub fn render_visibility(objects: &[(&Mesh, Pose)], k: &CameraIntrinsics) -> Vec<Mask> {
    let zb = joint_zbuffer(objects, k);
    (0..objects.len())
        .map(|i| {
            let data = zb.owner.iter().map(|&o| o == i as u32).collect();
            Mask::from_vec(k.width, k.height, data).expect("buffer sized from intrinsics")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_rotation, Axis, Mat3};

    fn cam128() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn cube_center_pixel() {
        let mesh = Mesh::cube(100.0);
        let b = mesh.normalization_box().unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 500.0));
        let out = render(&mesh, &pose, &cam128(), &b);
        assert!(out.mask.get(64, 64));
        let c = out.coord.get(64, 64);
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
        assert_eq!(c[2], 0.0);
        assert!((out.depth.get(64, 64) - 450.0).abs() < 1e-9);
        // silhouette: near face spans 64 ± 55.6 px
        assert!(!out.mask.get(2, 2));
        assert_eq!(*out.coord.get(2, 2), [0.0; 3]);
        assert_eq!(*out.depth.get(2, 2), 0.0);
    }

    #[test]
    fn behind_camera_is_empty() {
        let mesh = Mesh::cube(100.0);
        let b = mesh.normalization_box().unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, -500.0));
        let out = render(&mesh, &pose, &cam128(), &b);
        assert_eq!(out.mask.count(), 0);
    }

    #[test]
    fn straddling_near_plane_is_clipped_not_dropped() {
        let mesh = Mesh::cube(100.0);
        let b = mesh.normalization_box().unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 20.0));
        let out = render(&mesh, &pose, &cam128(), &b);
        // camera sits inside the cube: every pixel sees a face
        assert_eq!(out.mask.count(), 128 * 128);
        assert!(out.depth.as_slice().iter().all(|&d| d >= NEAR_PLANE));
    }

    #[test]
    fn mask_depth_coord_consistency() {
        let mesh = Mesh::cuboid(100.0, 60.0, 40.0);
        let b = mesh.normalization_box().unwrap();
        let r = axis_rotation(Axis::X, 0.7) * axis_rotation(Axis::Z, 0.3);
        let pose = Pose::new(r, Vec3::new(5.0, -3.0, 400.0)).unwrap();
        let out = render(&mesh, &pose, &cam128(), &b);
        for i in 0..out.mask.len() {
            let m = out.mask.as_slice()[i];
            assert_eq!(m, out.depth.as_slice()[i] > 0.0);
            if !m {
                assert_eq!(out.coord.as_slice()[i], [0.0; 3]);
            }
        }
        assert!(out.mask.count() > 1000);
    }

    #[test]
    fn shared_edges_have_no_gaps() {
        // A face-on square: every pixel center strictly inside the
        // silhouette must be covered exactly once.
        let mesh = Mesh::cube(100.0);
        let b = mesh.normalization_box().unwrap();
        let pose = Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 500.0)).unwrap();
        let out = render(&mesh, &pose, &cam128(), &b);
        let half = 500.0 * 50.0 / 450.0;
        for y in 0..128 {
            for x in 0..128 {
                let inside = ((x as f64) - 64.0).abs() < half - 1e-6
                    && ((y as f64) - 64.0).abs() < half - 1e-6;
                if inside {
                    assert!(out.mask.get(x, y), "gap at {x},{y}");
                }
            }
        }
    }

    #[test]
    fn visibility_examples() {
        let k = cam128();
        let mesh = Mesh::cube(40.0);
        let b = mesh.normalization_box().unwrap();
        let near = Pose::from_translation(Vec3::new(0.0, 0.0, 400.0));
        let far = Pose::from_translation(Vec3::new(0.0, 0.0, 500.0));

        let single = render_visibility(&[(&mesh, near)], &k);
        assert_eq!(single[0], render(&mesh, &near, &k, &b).mask);

        let masks = render_visibility(&[(&mesh, far), (&mesh, near)], &k);
        let near_mask = render(&mesh, &near, &k, &b).mask;
        let far_mask = render(&mesh, &far, &k, &b).mask;
        for i in 0..near_mask.len() {
            if near_mask.as_slice()[i] && far_mask.as_slice()[i] {
                assert!(!masks[0].as_slice()[i]);
            }
        }
        assert_eq!(masks[1], near_mask);

        let left = Pose::from_translation(Vec3::new(-60.0, 0.0, 500.0));
        let right = Pose::from_translation(Vec3::new(60.0, 0.0, 500.0));
        let masks = render_visibility(&[(&mesh, left), (&mesh, right)], &k);
        assert_eq!(masks[0], render(&mesh, &left, &k, &b).mask);
        assert_eq!(masks[1], render(&mesh, &right, &k, &b).mask);
    }
}
