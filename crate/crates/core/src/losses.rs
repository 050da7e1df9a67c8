//! Reconstruction, symmetry-aware transformer, error-prediction and GAN
//! losses, plus the loss-landscape scan over rotations about an object axis.
//!
//! All reductions run in row-major pixel order so results are bit-stable.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    axis_rotation, denormalize_unchecked, normalize_coord, Axis, CameraIntrinsics, Mat3,
    NormalizationBox, Pose, SymmetryPool,
};
use crate::grid::{coord_l1, CoordImage, ErrorImage, Mask};
use crate::mesh::Mesh;
use crate::render::render;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight on pixels inside the object mask.
    pub beta: f64,
    /// Weight of the coordinate loss in the combined objective.
    pub lambda1: f64,
    /// Weight of the error-prediction loss in the combined objective.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 3.0,
            lambda1: 100.0,
            lambda2: 50.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be positive".into()));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta >= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must be >= 1, got {beta}")))
    }
}

/// Mask-weighted mean per-pixel L1 distance.
pub fn recon_loss(pred: &CoordImage, target: &CoordImage, mask: &Mask, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    pred.check_dims(target, "recon_loss")?;
    pred.check_dims(mask, "recon_loss")?;
    Ok(recon_loss_unchecked(pred, target, mask, beta))
}

fn recon_loss_unchecked(pred: &CoordImage, target: &CoordImage, mask: &Mask, beta: f64) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let mut inside = 0.0;
    let mut outside = 0.0;
    for ((p, t), &m) in pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .zip(mask.as_slice())
    {
        let d = coord_l1(p, t);
        if m {
            inside += d;
        } else {
            outside += d;
        }
    }
    (beta * inside + outside) / n as f64
}

/// Moves every masked target pixel to its symmetric counterpart: the stored
/// coordinate is denormalized, rotated by `r` and normalized again.
/// Unmasked pixels are copied unchanged.
pub fn sym_transform_image(
    target: &CoordImage,
    mask: &Mask,
    r: &Mat3,
    norm_box: &NormalizationBox,
) -> CoordImage {
    let mut out = target.clone();
    for (c, &m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        if m {
            let p = denormalize_unchecked(c, norm_box);
            *c = normalize_coord(&(r * p), norm_box);
        }
    }
    out
}

/// Minimum reconstruction loss over the symmetric versions of the target.
/// Returns the loss and the index (into the expanded pool) of the minimizer.
pub fn transformer_loss(
    pred: &CoordImage,
    target: &CoordImage,
    mask: &Mask,
    beta: f64,
    pool: &SymmetryPool,
    norm_box: &NormalizationBox,
) -> Result<(f64, usize)> {
    check_beta(beta)?;
    pred.check_dims(target, "transformer_loss")?;
    pred.check_dims(mask, "transformer_loss")?;
    let rotations = pool.expand()?;
    let mut best = (f64::INFINITY, 0);
    for (i, r) in rotations.iter().enumerate() {
        let loss = if i == 0 {
            recon_loss_unchecked(pred, target, mask, beta)
        } else {
            let moved = sym_transform_image(target, mask, r, norm_box);
            recon_loss_unchecked(pred, &moved, mask, beta)
        };
        if loss < best.0 {
            best = (loss, i);
        }
    }
    Ok(best)
}

/// Mean squared difference between the predicted error and the clipped true
/// per-pixel L1 error.
pub fn error_pred_loss(err_pred: &ErrorImage, pred: &CoordImage, target: &CoordImage) -> Result<f64> {
    err_pred.check_dims(pred, "error_pred_loss")?;
    pred.check_dims(target, "error_pred_loss")?;
    let n = pred.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for ((e, p), t) in err_pred
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let d = e - coord_l1(p, t).min(1.0);
        sum += d * d;
    }
    Ok(sum / n as f64)
}

/// `ln D(real) + ln(1 - D(fake))`.
pub fn gan_objective(d_real: f64, d_fake: f64) -> Result<f64> {
    for (name, v) in [("d_real", d_real), ("d_fake", d_fake)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Input(format!("{name} = {v} is outside (0, 1)")));
        }
    }
    Ok(d_real.ln() + (1.0 - d_fake).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// Plain reconstruction loss against the reference render.
    PlainL1,
    /// Plain loss with rotations at or beyond π folded back by π.
    ViewLimit,
    /// Transformer loss over the symmetry pool.
    Transformer,
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "plain_l1" | "plain" | "l1" => Ok(ScanMode::PlainL1),
            "view_limit" | "view_limits" => Ok(ScanMode::ViewLimit),
            "transformer" => Ok(ScanMode::Transformer),
            other => Err(Error::Config(format!("unknown scan mode `{other}`"))),
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanMode::PlainL1 => "plain_l1",
            ScanMode::ViewLimit => "view_limit",
            ScanMode::Transformer => "transformer",
        })
    }
}

/// Scene for a loss-landscape scan.
#[derive(Debug, Clone)]
pub struct ScanSetup<'a> {
    pub mesh: &'a Mesh,
    pub pose_ref: Pose,
    pub axis: Axis,
    pub k: CameraIntrinsics,
    pub norm_box: NormalizationBox,
    pub pool: SymmetryPool,
    pub beta: f64,
}

impl<'a> ScanSetup<'a> {
    /// 128×128 view (f = 500) looking straight down the object z axis from
    /// four diameters away, scanning rotations about that axis.
    pub fn reference_view(mesh: &'a Mesh, pool: SymmetryPool, beta: f64) -> Result<Self> {
        let k = CameraIntrinsics::new(500.0, 500.0, 63.5, 63.5, 128, 128)?;
        let pose_ref = Pose::from_translation(crate::geometry::Vec3::new(0.0, 0.0, 4.0 * mesh.diameter()));
        Ok(Self {
            mesh,
            pose_ref,
            axis: Axis::Z,
            k,
            norm_box: mesh.normalization_box()?,
            pool,
            beta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub angle: f64,
    pub loss: f64,
}

/// Renders the reference pose as target and, for each of `steps` angles in
/// `[0, 2π)`, the object rotated about `axis` as prediction, and evaluates
/// the loss selected by `mode`.
pub fn loss_scan(setup: &ScanSetup<'_>, steps: usize, mode: ScanMode) -> Result<Vec<ScanPoint>> {
    if steps < 2 {
        return Err(Error::Config(format!("loss scan needs >= 2 steps, got {steps}")));
    }
    check_beta(setup.beta)?;
    let rotations = setup.pool.expand()?;
    let target = render(setup.mesh, &setup.pose_ref, &setup.k, &setup.norm_box);
    let targets: Vec<CoordImage> = match mode {
        ScanMode::Transformer => rotations
            .iter()
            .map(|r| sym_transform_image(&target.coord, &target.mask, r, &setup.norm_box))
            .collect(),
        _ => vec![target.coord.clone()],
    };

    let points = (0..steps)
        .into_par_iter()
        .map(|i| {
            let angle = 2.0 * PI * i as f64 / steps as f64;
            let render_angle = if mode == ScanMode::ViewLimit && 2 * i >= steps {
                angle - PI
            } else {
                angle
            };
            let pose = setup
                .pose_ref
                .compose(&Pose::new_unchecked(axis_rotation(setup.axis, render_angle)));
            let pred = render(setup.mesh, &pose, &setup.k, &setup.norm_box).coord;
            let loss = targets
                .iter()
                .map(|t| recon_loss_unchecked(&pred, t, &target.mask, setup.beta))
                .fold(f64::INFINITY, f64::min);
            ScanPoint { angle, loss }
        })
        .collect();
    Ok(points)
}

/// CSV with header `angle_rad,loss`.
pub fn write_scan_csv(out: &mut impl Write, points: &[ScanPoint]) -> Result<()> {
    writeln!(out, "angle_rad,loss")?;
    for p in points {
        writeln!(out, "{},{}", p.angle, p.loss)?;
    }
    Ok(())
}

/// Minimal SVG line plot of one or more labelled scan curves.
pub fn scan_svg(curves: &[(&str, &[ScanPoint])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let max_loss = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.loss))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{xm}\" y=\"{yl}\" font-size=\"12\" text-anchor=\"middle\">angle (rad), 0 to 2π</text>\n\
         <text x=\"4\" y=\"{ym}\" font-size=\"12\">loss</text>\n",
        y0 = H - M,
        x1 = W - M,
        xm = W / 2.0,
        yl = H - 8.0,
        ym = H / 2.0,
    );
    for (ci, (label, pts)) in curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|p| {
                let x = M + p.angle / (2.0 * PI) * (W - 2.0 * M);
                let y = H - M - p.loss / max_loss * (H - 2.0 * M);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            path.join(" "),
            W - M - 120.0,
            M + 14.0 * (ci as f64 + 1.0),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn img(px: &[[f64; 3]]) -> CoordImage {
        CoordImage::from_vec(px.len(), 1, px.to_vec()).unwrap()
    }

    fn mask(m: &[bool]) -> Mask {
        Mask::from_vec(m.len(), 1, m.to_vec()).unwrap()
    }

    #[test]
    fn recon_examples() {
        let a = img(&[[0.2, 0.4, 0.6], [0.1, 0.1, 0.1]]);
        assert_eq!(recon_loss(&a, &a, &mask(&[true, false]), 3.0).unwrap(), 0.0);

        let l = recon_loss(
            &img(&[[0.6, 0.5, 0.5]]),
            &img(&[[0.5, 0.5, 0.5]]),
            &mask(&[true]),
            3.0,
        )
        .unwrap();
        assert!((l - 0.3).abs() < 1e-12);

        let l = recon_loss(
            &img(&[[0.6, 0.5, 0.5], [0.0, 0.0, 0.1]]),
            &img(&[[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]]),
            &mask(&[true, false]),
            3.0,
        )
        .unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn recon_rejects_mismatch_and_small_beta() {
        let a = img(&[[0.0; 3]; 2]);
        let b = img(&[[0.0; 3]; 3]);
        assert!(matches!(
            recon_loss(&a, &b, &mask(&[true, true]), 3.0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            recon_loss(&a, &a, &mask(&[true, true]), 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transformer_examples() {
        let b = NormalizationBox::cube(50.0).unwrap();
        let target = img(&[[0.8, 0.3, 0.6], [0.1, 0.9, 0.2], [0.0, 0.0, 0.0]]);
        let m = mask(&[true, true, false]);
        let pool = SymmetryPool::cyclic(Axis::Z, 2).unwrap();
        let pred = sym_transform_image(&target, &m, &pool.rotations()[1], &b);
        let (loss, idx) = transformer_loss(&pred, &target, &m, 3.0, &pool, &b).unwrap();
        assert!(loss.abs() < 1e-12);
        assert_eq!(idx, 1);

        let trivial = SymmetryPool::identity();
        let noisy = img(&[[0.7, 0.3, 0.6], [0.1, 0.8, 0.2], [0.05, 0.0, 0.0]]);
        let (l, i) = transformer_loss(&noisy, &target, &m, 3.0, &trivial, &b).unwrap();
        assert_eq!(l, recon_loss(&noisy, &target, &m, 3.0).unwrap());
        assert_eq!(i, 0);
    }

    #[test]
    fn sym_transform_keeps_background() {
        let b = NormalizationBox::cube(50.0).unwrap();
        let target = img(&[[0.75, 0.5, 0.25], [0.0, 0.0, 0.0]]);
        let m = mask(&[true, false]);
        let out = sym_transform_image(&target, &m, &axis_rotation(Axis::Z, PI), &b);
        assert_eq!(out.as_slice()[1], [0.0; 3]);
        let expected = normalize_coord(&Vec3::new(-25.0, 0.0, -25.0), &b);
        for c in 0..3 {
            assert!((out.as_slice()[0][c] - expected[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn error_pred_examples() {
        let pred = img(&[[1.0, 1.0, 0.0]]);
        let target = img(&[[0.0, 0.0, 0.0]]);
        let zero = ErrorImage::from_vec(1, 1, vec![0.0]).unwrap();
        assert!((error_pred_loss(&zero, &pred, &target).unwrap() - 1.0).abs() < 1e-15);

        let pred = img(&[[0.3, 0.0, 0.0]]);
        let half = ErrorImage::from_vec(1, 1, vec![0.5]).unwrap();
        assert!((error_pred_loss(&half, &pred, &target).unwrap() - 0.04).abs() < 1e-12);

        let exact = ErrorImage::from_vec(1, 1, vec![0.3]).unwrap();
        assert_eq!(error_pred_loss(&exact, &pred, &target).unwrap(), 0.0);
    }

    #[test]
    fn gan_examples() {
        assert!((gan_objective(0.5, 0.5).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((gan_objective(0.5, 0.5).unwrap() + 1.3863).abs() < 1e-4);
        assert!(gan_objective(1.0 - 1e-12, 1e-12).unwrap().abs() < 1e-9);
        let e_inv = (-1.0f64).exp();
        assert!((gan_objective(e_inv, 1.0 - e_inv).unwrap() + 2.0).abs() < 1e-12);
        assert!(matches!(gan_objective(0.0, 0.5), Err(Error::Input(_))));
        assert!(matches!(gan_objective(0.5, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn scan_mode_parsing() {
        assert_eq!("view-limit".parse::<ScanMode>().unwrap(), ScanMode::ViewLimit);
        assert_eq!("transformer".parse::<ScanMode>().unwrap(), ScanMode::Transformer);
        assert!("x".parse::<ScanMode>().is_err());
    }

    #[test]
    fn reference_scan_shape() {
        let mesh = Mesh::cuboid(100.0, 60.0, 40.0);
        let pool = SymmetryPool::cyclic(Axis::Z, 2).unwrap();
        let setup = ScanSetup::reference_view(&mesh, pool, 3.0).unwrap();
        let tr = loss_scan(&setup, 72, ScanMode::Transformer).unwrap();
        assert_eq!(tr[0].loss, 0.0);
        assert!((tr[36].loss - tr[0].loss).abs() < 1e-3);
        let plain = loss_scan(&setup, 72, ScanMode::PlainL1).unwrap();
        let max = plain.iter().map(|p| p.loss).fold(0.0, f64::max);
        assert!(plain[36].loss >= 0.95 * max);
        let vl = loss_scan(&setup, 72, ScanMode::ViewLimit).unwrap();
        assert!((vl[36].loss - vl[35].loss).abs() >= 0.5 * max);
    }
}
