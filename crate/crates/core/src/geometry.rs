//! Rigid transforms, pinhole projection, coordinate normalization and
//! symmetry pools.
//!
//! Conventions: right-handed camera frame with +z forward, pixel origin at the
//! top-left corner and pixel centers at integer coordinates. Lengths are mm.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_TOL: f64 = 1e-6;

/// Returns true when `r` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    let rtr = r.transpose() * r;
    (rtr - Mat3::identity()).amax() <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Projects an arbitrary 3x3 matrix onto SO(3) via SVD.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

/// Rotation angle (radians) between two rotation matrices.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let d = a.transpose() * b;
    ((d.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Coordinate axis tag used for symmetry axes and scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Vec3 {
        match self {
            Axis::X => Vec3::x(),
            Axis::Y => Vec3::y(),
            Axis::Z => Vec3::z(),
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::Config(format!("unknown axis `{other}`"))),
        }
    }
}

/// Rotation by `angle` radians about a coordinate axis.
///
/// Multiples of a quarter turn produce exact 0/±1 entries so that discrete
/// symmetry groups close exactly under composition.
pub fn axis_rotation(axis: Axis, angle: f64) -> Mat3 {
    let quarter = angle / FRAC_PI_2;
    let (s, c) = if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle.sin_cos()
    };
    match axis {
        Axis::X => Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Rotation from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle(w: &Vec3) -> Mat3 {
    let angle = w.norm();
    if angle < 1e-300 {
        return Mat3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(*w), angle).into_inner()
}

/// Rigid transform taking object-frame points (mm) into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !is_rotation(&rotation, ROTATION_TOL) {
            return Err(Error::Input(
                "pose rotation is not orthonormal with det +1".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from dataset values, re-orthonormalizing a rotation that
    /// passes a looser tolerance.
    pub fn from_row_major(r: &[f64; 9], t: &[f64; 3], tol: f64) -> Result<Self> {
        let m = Mat3::from_row_slice(r);
        if !is_rotation(&m, tol) {
            return Err(Error::Input(format!(
                "rotation is not orthonormal within {tol}"
            )));
        }
        Ok(Self {
            rotation: orthonormalize(&m),
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }

    /// Pure rotation without validation; callers guarantee `rotation` is
    /// proper.
    pub(crate) fn new_unchecked(rotation: Mat3) -> Self {
        Self {
            rotation,
            translation: Vec3::zeros(),
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }
}

/// Symmetric pose: the symmetry acts in the object frame, so only the
/// rotation changes.
pub fn apply_symmetry(pose: &Pose, r: &Mat3) -> Pose {
    Pose {
        rotation: pose.rotation * r,
        translation: pose.translation,
    }
}

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// From a row-major 3x3 `K` matrix as stored in BOP scene files.
    pub fn from_k(k: &[f64; 9], width: usize, height: usize) -> Result<Self> {
        Self::new(k[0], k[4], k[2], k[5], width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be at least 1x1".into()));
        }
        Ok(())
    }

    pub fn k_row_major(&self) -> [f64; 9] {
        [
            self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        ]
    }

    /// Pixel ray direction (z = 1) through `px`.
    pub fn unproject(&self, px: &Vec2) -> Vec3 {
        Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project(point: &Vec3, k: &CameraIntrinsics) -> Result<Vec2> {
    if point.z <= 0.0 {
        return Err(Error::BehindCamera { z: point.z });
    }
    Ok(project_unchecked(point, k))
}

#[inline]
pub(crate) fn project_unchecked(point: &Vec3, k: &CameraIntrinsics) -> Vec2 {
    Vec2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    )
}

/// Axis-aligned 2D box given by center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Input(format!("bounding box size must be positive, got {w}x{h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// From BOP's `[x, y, w, h]` (top-left pixel plus size in pixels).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x - 0.5 + w / 2.0, y - 0.5 + h / 2.0, w, h)
    }

    /// Tight box around the `true` pixels of a mask.
    pub fn from_mask(mask: &crate::grid::Mask) -> Option<Self> {
        let mut lo = (usize::MAX, usize::MAX);
        let mut hi = (0usize, 0usize);
        let mut any = false;
        for (x, y, &m) in mask.iter_xy() {
            if m {
                any = true;
                lo = (lo.0.min(x), lo.1.min(y));
                hi = (hi.0.max(x), hi.1.max(y));
            }
        }
        any.then(|| {
            let w = (hi.0 - lo.0 + 1) as f64;
            let h = (hi.1 - lo.1 + 1) as f64;
            Self {
                cx: (lo.0 + hi.0) as f64 / 2.0,
                cy: (lo.1 + hi.1) as f64 / 2.0,
                w,
                h,
            }
        })
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Axis-aligned bounds mapping object coordinates to colors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationBox {
    min: Vec3,
    max: Vec3,
}

impl NormalizationBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        for a in 0..3 {
            if !(max[a] > min[a]) {
                return Err(Error::Config(format!(
                    "degenerate normalization box on axis {a}: [{}, {}]",
                    min[a], max[a]
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Box symmetric about the origin: each axis spans `[-h, h]` with `h` the
    /// largest absolute vertex coordinate on that axis.
    pub fn centered_on_origin<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Result<Self> {
        let mut half = Vec3::zeros();
        for p in points {
            for a in 0..3 {
                half[a] = half[a].max(p[a].abs());
            }
        }
        Self::new(-half, half)
    }

    pub fn cube(half_extent: f64) -> Result<Self> {
        Self::new(Vec3::repeat(-half_extent), Vec3::repeat(half_extent))
    }

    pub fn min_corner(&self) -> &Vec3 {
        &self.min
    }

    pub fn max_corner(&self) -> &Vec3 {
        &self.max
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }
}

/// Maps a point into `[0,1]^3`, clamping points outside the box.
pub fn normalize_coord(point: &Vec3, b: &NormalizationBox) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (a, out) in c.iter_mut().enumerate() {
        *out = ((point[a] - b.min[a]) / (b.max[a] - b.min[a])).clamp(0.0, 1.0);
    }
    c
}

/// Inverse of [`normalize_coord`] for in-box points.
pub fn denormalize_coord(c: &[f64; 3], b: &NormalizationBox) -> Result<Vec3> {
    for &v in c {
        if !(-1e-6..=1.0 + 1e-6).contains(&v) {
            return Err(Error::Input(format!(
                "normalized coordinate {v} outside [0,1]"
            )));
        }
    }
    Ok(denormalize_unchecked(c, b))
}

#[inline]
pub(crate) fn denormalize_unchecked(c: &[f64; 3], b: &NormalizationBox) -> Vec3 {
    Vec3::new(
        b.min[0] + c[0].clamp(0.0, 1.0) * (b.max[0] - b.min[0]),
        b.min[1] + c[1].clamp(0.0, 1.0) * (b.max[1] - b.min[1]),
        b.min[2] + c[2].clamp(0.0, 1.0) * (b.max[2] - b.min[2]),
    )
}

/// Default discretization used when a continuous axis enters the
/// transformer loss.
pub const DEFAULT_CONTINUOUS_STEPS: usize = 36;

/// Object-frame rotations mapping the object onto itself. The first entry is
/// always the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryPool {
    rotations: Vec<Mat3>,
    continuous_axis: Option<Axis>,
    discretization_count: usize,
}

impl SymmetryPool {
    pub fn new(
        rotations: Vec<Mat3>,
        continuous_axis: Option<Axis>,
        discretization_count: usize,
    ) -> Result<Self> {
        let first = rotations
            .first()
            .ok_or_else(|| Error::Config("symmetry pool is empty".into()))?;
        if (first - Mat3::identity()).amax() > ROTATION_TOL {
            return Err(Error::Config(
                "first symmetry pool entry must be the identity".into(),
            ));
        }
        if let Some(i) = rotations.iter().position(|r| !is_rotation(r, ROTATION_TOL)) {
            return Err(Error::Config(format!(
                "symmetry pool entry {i} is not a proper rotation"
            )));
        }
        Ok(Self {
            rotations,
            continuous_axis,
            discretization_count,
        })
    }

    /// Pool of a non-symmetric object: `[I]`.
    pub fn identity() -> Self {
        Self {
            rotations: vec![Mat3::identity()],
            continuous_axis: None,
            discretization_count: DEFAULT_CONTINUOUS_STEPS,
        }
    }

    /// `[I, R_axis(2π/n), ..., R_axis(2π(n-1)/n)]`.
    pub fn cyclic(axis: Axis, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("cyclic symmetry order must be >= 1".into()));
        }
        let rotations = (0..order)
            .map(|k| axis_rotation(axis, 2.0 * PI * k as f64 / order as f64))
            .collect();
        Self::new(rotations, None, DEFAULT_CONTINUOUS_STEPS)
    }

    /// Object symmetric under any rotation about `axis`.
    pub fn continuous(axis: Axis, discretization_count: usize) -> Self {
        Self {
            rotations: vec![Mat3::identity()],
            continuous_axis: Some(axis),
            discretization_count,
        }
    }

    pub fn rotations(&self) -> &[Mat3] {
        &self.rotations
    }

    pub fn continuous_axis(&self) -> Option<Axis> {
        self.continuous_axis
    }

    pub fn discretization_count(&self) -> usize {
        self.discretization_count
    }

    /// True for `[I]` without a continuous axis.
    pub fn is_trivial(&self) -> bool {
        self.rotations.len() == 1 && self.continuous_axis.is_none()
    }

    /// Finite list of rotations the pool stands for.
    ///
    /// Discrete pools are returned verbatim. A continuous axis contributes
    /// `K` uniformly spaced rotations, each composed with every discrete
    /// entry.
    pub fn expand(&self) -> Result<Vec<Mat3>> {
        let Some(axis) = self.continuous_axis else {
            return Ok(self.rotations.clone());
        };
        let k = self.discretization_count;
        if k < 2 {
            return Err(Error::Config(format!(
                "continuous symmetry needs a discretization count >= 2, got {k}"
            )));
        }
        let mut out = Vec::with_capacity(k * self.rotations.len());
        for r in &self.rotations {
            for i in 0..k {
                out.push(r * axis_rotation(axis, 2.0 * PI * i as f64 / k as f64));
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`SymmetryPool::expand`].
pub fn expand_pool(pool: &SymmetryPool) -> Result<Vec<Mat3>> {
    pool.expand()
}

impl FromStr for SymmetryPool {
    type Err = Error;

    /// Named pools: `none`, `z180`, `y180`, `x180`, `z90` (four-fold about z),
    /// and `cont-z[:K]` style continuous pools.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "none" | "identity" | "i" => return Ok(Self::identity()),
            "z180" => return Self::cyclic(Axis::Z, 2),
            "y180" => return Self::cyclic(Axis::Y, 2),
            "x180" => return Self::cyclic(Axis::X, 2),
            "z90" => return Self::cyclic(Axis::Z, 4),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("cont-") {
            let (axis, count) = match rest.split_once(':') {
                Some((a, n)) => (
                    a,
                    n.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad discretization in `{s}`")))?,
                ),
                None => (rest, DEFAULT_CONTINUOUS_STEPS),
            };
            let pool = Self::continuous(axis.parse()?, count);
            pool.expand()?;
            return Ok(pool);
        }
        Err(Error::Config(format!("unknown symmetry pool `{s}`")))
    }
}

impl fmt::Display for SymmetryPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.continuous_axis {
            Some(a) => write!(
                f,
                "{} discrete + continuous {:?} (K={})",
                self.rotations.len(),
                a,
                self.discretization_count
            ),
            None => write!(f, "{} discrete", self.rotations.len()),
        }
    }
}
