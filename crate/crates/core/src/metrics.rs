//! Pose error metrics: ADD, ADI, the 10%-of-diameter correctness rule,
//! Visible Surface Discrepancy (step cost) and 2D IoU.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CameraIntrinsics, Pose, SymmetryPool, Vec3};
use crate::grid::DepthMap;
use crate::mesh::Mesh;
use crate::render::render_depth;

/// Fraction of the model diameter below which a pose counts as correct.
pub const ADD_THRESHOLD_FRACTION: f64 = 0.1;

fn check_points(points: &[Vec3]) -> Result<()> {
    if points.is_empty() {
        Err(Error::Input("metric needs at least one model point".into()))
    } else {
        Ok(())
    }
}

/// Mean distance between corresponding model points under the two poses.
pub fn add_points(est: &Pose, gt: &Pose, points: &[Vec3]) -> Result<f64> {
    check_points(points)?;
    let sum: f64 = points
        .iter()
        .map(|v| (est.transform(v) - gt.transform(v)).norm())
        .sum();
    Ok(sum / points.len() as f64)
}

/// Mean distance from each estimated model point to the nearest ground-truth
/// model point.
pub fn adi_points(est: &Pose, gt: &Pose, points: &[Vec3]) -> Result<f64> {
    check_points(points)?;
    let gt_pts: Vec<Vec3> = points.iter().map(|v| gt.transform(v)).collect();
    let nearest: Vec<f64> = points
        .par_iter()
        .map(|v| {
            let e = est.transform(v);
            gt_pts
                .iter()
                .map(|g| (e - g).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    Ok(nearest.iter().sum::<f64>() / points.len() as f64)
}

pub fn add(est: &Pose, gt: &Pose, mesh: &Mesh) -> Result<f64> {
    add_points(est, gt, mesh.vertices())
}

pub fn adi(est: &Pose, gt: &Pose, mesh: &Mesh) -> Result<f64> {
    adi_points(est, gt, mesh.vertices())
}

/// ADD (or ADI when the object has symmetries) below 10% of the diameter.
pub fn is_correct_add(est: &Pose, gt: &Pose, mesh: &Mesh, pool: &SymmetryPool) -> bool {
    let err = if pool.is_trivial() {
        add(est, gt, mesh)
    } else {
        adi(est, gt, mesh)
    }
    .expect("meshes always have vertices");
    err < ADD_THRESHOLD_FRACTION * mesh.diameter()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VsdParams {
    /// Misalignment tolerance (mm).
    pub tau: f64,
    /// Visibility tolerance (mm).
    pub delta: f64,
    /// A pose is correct when its VSD error is below this value.
    pub threshold: f64,
}

impl Default for VsdParams {
    fn default() -> Self {
        Self {
            tau: 20.0,
            delta: 15.0,
            threshold: 0.3,
        }
    }
}

impl VsdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.delta > 0.0) {
            return Err(Error::Config("VSD tau and delta must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config("VSD threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Visible part of a rendered object: rendered, measured, and not behind the
/// measured surface by more than `delta`.
fn visibility(rendered: &DepthMap, scene: &DepthMap, delta: f64) -> Vec<bool> {
    rendered
        .as_slice()
        .iter()
        .zip(scene.as_slice())
        .map(|(&r, &s)| r > 0.0 && s > 0.0 && r - s <= delta)
        .collect()
}

/// VSD between two renderings already available as depth maps.
pub fn vsd_from_depths(
    est_depth: &DepthMap,
    gt_depth: &DepthMap,
    scene_depth: &DepthMap,
    params: &VsdParams,
) -> Result<f64> {
    est_depth.check_dims(scene_depth, "vsd")?;
    gt_depth.check_dims(scene_depth, "vsd")?;
    let ve = visibility(est_depth, scene_depth, params.delta);
    let vg = visibility(gt_depth, scene_depth, params.delta);
    let mut union = 0usize;
    let mut cost = 0usize;
    for i in 0..ve.len() {
        if !(ve[i] || vg[i]) {
            continue;
        }
        union += 1;
        let matched = ve[i]
            && vg[i]
            && (est_depth.as_slice()[i] - gt_depth.as_slice()[i]).abs() < params.tau;
        if !matched {
            cost += 1;
        }
    }
    if union == 0 {
        return Err(Error::UndefinedMetric(
            "neither pose has visible pixels".into(),
        ));
    }
    Ok(cost as f64 / union as f64)
}

/// Visible Surface Discrepancy with the step cost.
pub fn vsd(
    est: &Pose,
    gt: &Pose,
    mesh: &Mesh,
    scene_depth: &DepthMap,
    k: &CameraIntrinsics,
    params: &VsdParams,
) -> Result<f64> {
    params.validate()?;
    if scene_depth.dims() != (k.width, k.height) {
        return Err(Error::Input(format!(
            "scene depth is {}x{} but the camera is {}x{}",
            scene_depth.width(),
            scene_depth.height(),
            k.width,
            k.height
        )));
    }
    let de = render_depth(mesh, est, k);
    let dg = render_depth(mesh, gt, k);
    vsd_from_depths(&de, &dg, scene_depth, params)
}

pub fn iou2d(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x_min() + a.w).min(b.x_min() + b.w) - a.x_min().max(b.x_min())).max(0.0);
    let iy = ((a.y_min() + a.h).min(b.y_min() + b.h) - a.y_min().max(b.y_min())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// ADD, or ADI for objects with a non-trivial symmetry pool.
    Add,
    Adi,
    Vsd,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(MetricKind::Add),
            "adi" => Ok(MetricKind::Adi),
            "vsd" => Ok(MetricKind::Vsd),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::Add => "add",
            MetricKind::Adi => "adi",
            MetricKind::Vsd => "vsd",
        })
    }
}

/// One line of a recall report.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub obj_id: u32,
    pub metric: MetricKind,
    pub recall: f64,
    pub n: usize,
}

/// CSV with header `obj_id,metric,recall,n`.
pub fn write_recall_csv(out: &mut impl Write, rows: &[RecallRow]) -> Result<()> {
    writeln!(out, "obj_id,metric,recall,n")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.obj_id, r.metric, r.recall, r.n)?;
    }
    Ok(())
}
