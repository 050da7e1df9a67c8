//! Two-stage pose estimation from predicted coordinate and error images.
//!
//! Stage 1 crops the detection, keeps pixels with non-zero coordinates and a
//! low predicted error, and recenters the box on that valid region. Stage 2
//! predicts again on the tightened, background-free crop and feeds the
//! confident pixels to PnP with RANSAC.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{denormalize_coord, BBox, CameraIntrinsics, NormalizationBox, Pose, Vec2, Vec3};
use crate::grid::{coord_norm, CoordImage, ErrorImage, Mask, RgbImage};
use crate::pnp::{solve_pnp_ransac, RansacParams};
use crate::predictor::{Predictor, PredictorInput, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub theta_i: f64,
    pub theta_o: f64,
    pub theta_re: f64,
    pub ransac_iters: usize,
    pub ransac_confidence: f64,
    pub crop_factor: f64,
    pub input_size: usize,
    pub nonzero_norm: f64,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta_i: 0.1,
            theta_o: 0.2,
            theta_re: 3.0,
            ransac_iters: 300,
            ransac_confidence: 0.99,
            crop_factor: 1.5,
            input_size: 128,
            nonzero_norm: 0.3,
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_i", self.theta_i),
            ("theta_o", self.theta_o),
            ("theta_re", self.theta_re),
            ("nonzero_norm", self.nonzero_norm),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.crop_factor >= 1.0) {
            return Err(Error::Config("crop_factor must be >= 1".into()));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be > 0".into()));
        }
        self.ransac_params(0).validate()
    }

    pub fn ransac_params(&self, stream: u64) -> RansacParams {
        RansacParams {
            theta_re: self.theta_re,
            max_iters: self.ransac_iters,
            confidence: self.ransac_confidence,
            seed: self.rng_seed,
            stream,
            sample_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub obj_id: u32,
    #[serde(with = "bbox_array")]
    pub bbox: BBox,
    #[serde(default)]
    pub score: f64,
}

mod bbox_array {
    use super::BBox;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([b.cx, b.cy, b.w, b.h])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [cx, cy, w, h] = <[f64; 4]>::deserialize(d)?;
        BBox::new(cx, cy, w, h).map_err(D::Error::custom)
    }
}

/// Square source-image region resampled to `size × size` pixels.
///
/// Crop pixel `u` has its center at source position `origin + u * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRegion {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub size: usize,
}

impl CropRegion {
    /// Source pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.size as f64
    }

    fn origin(&self) -> Vec2 {
        let a = self.scale();
        Vec2::new(
            self.cx - 0.5 * self.side + 0.5 * a,
            self.cy - 0.5 * self.side + 0.5 * a,
        )
    }

    pub fn to_source(&self, crop_px: &Vec2) -> Vec2 {
        self.origin() + crop_px * self.scale()
    }

    pub fn to_crop(&self, source_px: &Vec2) -> Vec2 {
        (source_px - self.origin()) / self.scale()
    }

    /// Intrinsics that render directly into the crop.
    pub fn intrinsics(&self, k: &CameraIntrinsics) -> CameraIntrinsics {
        let a = self.scale();
        let o = self.origin();
        CameraIntrinsics {
            fx: k.fx / a,
            fy: k.fy / a,
            cx: (k.cx - o.x) / a,
            cy: (k.cy - o.y) / a,
            width: self.size,
            height: self.size,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            cx: self.cx,
            cy: self.cy,
            w: self.side,
            h: self.side,
        }
    }

    /// Bilinear resampling; outside the source image reads as black.
    pub fn resample_rgb(&self, src: &RgbImage) -> RgbImage {
        let sample = |x: i64, y: i64| src.at(x, y).copied().unwrap_or([0; 3]);
        RgbImage::from_fn(self.size, self.size, |u, v| {
            let p = self.to_source(&Vec2::new(u as f64, v as f64));
            let (x0, y0) = (p.x.floor(), p.y.floor());
            let (fx, fy) = (p.x - x0, p.y - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let q = [
                (sample(x0, y0), (1.0 - fx) * (1.0 - fy)),
                (sample(x0 + 1, y0), fx * (1.0 - fy)),
                (sample(x0, y0 + 1), (1.0 - fx) * fy),
                (sample(x0 + 1, y0 + 1), fx * fy),
            ];
            let mut out = [0u8; 3];
            for (c, o) in out.iter_mut().enumerate() {
                let v: f64 = q.iter().map(|(px, w)| px[c] as f64 * w).sum();
                *o = v.round().clamp(0.0, 255.0) as u8;
            }
            out
        })
    }
}

pub fn crop_region(bbox: &BBox, crop_factor: f64, input_size: usize) -> CropRegion {
    CropRegion {
        cx: bbox.cx,
        cy: bbox.cy,
        side: bbox.w.max(bbox.h) * crop_factor,
        size: input_size,
    }
}

fn check_prediction(coord: &CoordImage, err: &ErrorImage, crop: &CropRegion) -> Result<()> {
    coord.check_dims(err, "error image")?;
    if coord.dims() != (crop.size, crop.size) {
        return Err(Error::Input(format!(
            "prediction is {}x{}, crop is {}x{}",
            coord.width(),
            coord.height(),
            crop.size,
            crop.size
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Result {
    /// Recentered detection box in source pixels.
    pub bbox: BBox,
    /// Valid pixels in the stage-1 crop frame.
    pub valid: Mask,
}

pub fn valid_mask(coord: &CoordImage, err: &ErrorImage, theta_o: f64, nonzero_norm: f64) -> Mask {
    Mask::from_fn(coord.width(), coord.height(), |x, y| {
        coord_norm(coord.get(x, y)) > nonzero_norm && *err.get(x, y) < theta_o
    })
}

pub fn stage1_refine(
    coord: &CoordImage,
    err: &ErrorImage,
    crop: &CropRegion,
    theta_o: f64,
    nonzero_norm: f64,
) -> Result<Stage1Result> {
    check_prediction(coord, err, crop)?;
    let valid = valid_mask(coord, err, theta_o, nonzero_norm);
    let n = valid.count();
    if n == 0 {
        return Err(Error::NoObject);
    }
    let mut centroid = Vec2::zeros();
    for (x, y, _) in valid.iter_xy().filter(|(_, _, &m)| m) {
        centroid += Vec2::new(x as f64, y as f64);
    }
    centroid /= n as f64;
    let half = valid
        .iter_xy()
        .filter(|(_, _, &m)| m)
        .map(|(x, y, _)| (x as f64 - centroid.x).abs().max((y as f64 - centroid.y).abs()))
        .fold(0.0, f64::max)
        + 0.5;
    let center = crop.to_source(&centroid);
    let side = 2.0 * half * crop.scale();
    Ok(Stage1Result {
        bbox: BBox::new(center.x, center.y, side, side)?,
        valid,
    })
}

/// Stage-2 input: the source image resampled into `crop2`, with pixels that
/// fall outside the stage-1 valid mask set to black.
pub fn masked_input(
    src: Option<&RgbImage>,
    crop1: &CropRegion,
    valid: &Mask,
    crop2: &CropRegion,
) -> RgbImage {
    let mut out = match src {
        Some(img) => crop2.resample_rgb(img),
        None => RgbImage::new(crop2.size, crop2.size),
    };
    for v in 0..crop2.size {
        for u in 0..crop2.size {
            let p = crop1.to_crop(&crop2.to_source(&Vec2::new(u as f64, v as f64)));
            let keep = valid
                .at(p.x.round() as i64, p.y.round() as i64)
                .copied()
                .unwrap_or(false);
            if !keep {
                out.set(u, v, [0; 3]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Source-image pixel position.
    pub pixel: Vec2,
    /// Object-frame point in mm.
    pub point: Vec3,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet(pub Vec<Correspondence>);

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.0.iter().map(|c| c.point).collect()
    }

    pub fn pixels(&self) -> Vec<Vec2> {
        self.0.iter().map(|c| c.pixel).collect()
    }
}

pub fn build_correspondences(
    coord: &CoordImage,
    err: &ErrorImage,
    crop: &CropRegion,
    theta_i: f64,
    nonzero_norm: f64,
    norm_box: &NormalizationBox,
) -> Result<CorrespondenceSet> {
    check_prediction(coord, err, crop)?;
    let mut out = Vec::new();
    for (x, y, c) in coord.iter_xy() {
        let e = *err.get(x, y);
        if coord_norm(c) > nonzero_norm && e < theta_i {
            out.push(Correspondence {
                pixel: crop.to_source(&Vec2::new(x as f64, y as f64)),
                point: denormalize_coord(c, norm_box)?,
                err: e,
            });
        }
    }
    if out.len() < 4 {
        return Err(Error::InsufficientCorrespondences { found: out.len() });
    }
    Ok(CorrespondenceSet(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inlier_count: usize,
    /// Mean reprojection error of the inliers, px.
    pub mean_reproj_error: f64,
    pub correspondence_count: usize,
    pub inliers: Vec<usize>,
}

pub fn solve_correspondences(
    cs: &CorrespondenceSet,
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<PoseEstimate> {
    let r = solve_pnp_ransac(&cs.points(), &cs.pixels(), k, params)?;
    Ok(PoseEstimate {
        pose: r.pose,
        inlier_count: r.inliers.len(),
        mean_reproj_error: r.mean_reproj_error,
        correspondence_count: cs.len(),
        inliers: r.inliers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub stage1_crop: CropRegion,
    pub stage1_valid_pixels: usize,
    pub refined_bbox: BBox,
    pub stage2_crop: CropRegion,
    pub correspondences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOutput {
    pub estimate: PoseEstimate,
    pub diagnostics: Diagnostics,
}

/// Everything `estimate` needs besides the predictor.
#[derive(Debug, Clone, Copy)]
pub struct EstimateContext<'a> {
    pub image: Option<&'a RgbImage>,
    pub k: &'a CameraIntrinsics,
    pub norm_box: &'a NormalizationBox,
    pub config: &'a PipelineConfig,
}

/// Runs both stages for one detection. `index` selects the RANSAC stream so
/// results do not depend on processing order.
pub fn estimate(
    det: &Detection,
    index: u64,
    predictor: &dyn Predictor,
    ctx: &EstimateContext,
) -> Result<EstimateOutput> {
    let cfg = ctx.config;
    cfg.validate()?;

    let crop1 = crop_region(&det.bbox, cfg.crop_factor, cfg.input_size);
    let rgb1 = match ctx.image {
        Some(img) => crop1.resample_rgb(img),
        None => RgbImage::new(crop1.size, crop1.size),
    };
    let out1 = predictor.predict(&PredictorInput {
        image_id: det.image_id,
        obj_id: det.obj_id,
        detection_index: index,
        stage: Stage::One,
        crop: crop1,
        rgb: &rgb1,
    })?;
    let s1 = stage1_refine(&out1.coord, &out1.err, &crop1, cfg.theta_o, cfg.nonzero_norm)?;

    let crop2 = crop_region(&s1.bbox, 1.0, cfg.input_size);
    let rgb2 = masked_input(ctx.image, &crop1, &s1.valid, &crop2);
    let out2 = predictor.predict(&PredictorInput {
        image_id: det.image_id,
        obj_id: det.obj_id,
        detection_index: index,
        stage: Stage::Two,
        crop: crop2,
        rgb: &rgb2,
    })?;
    let cs = build_correspondences(
        &out2.coord,
        &out2.err,
        &crop2,
        cfg.theta_i,
        cfg.nonzero_norm,
        ctx.norm_box,
    )?;
    let estimate = solve_correspondences(&cs, ctx.k, &cfg.ransac_params(index))?;
    Ok(EstimateOutput {
        estimate,
        diagnostics: Diagnostics {
            stage1_crop: crop1,
            stage1_valid_pixels: s1.valid.count(),
            refined_bbox: s1.bbox,
            stage2_crop: crop2,
            correspondences: cs.len(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseResult {
    pub image_id: u64,
    pub obj_id: u32,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub inliers: usize,
    pub reproj_err: f64,
}

impl PoseResult {
    pub fn new(det: &Detection, est: &PoseEstimate) -> Self {
        Self {
            image_id: det.image_id,
            obj_id: det.obj_id,
            r: est.pose.rotation_row_major(),
            t: est.pose.translation_array(),
            inliers: est.inlier_count,
            reproj_err: est.mean_reproj_error,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        Pose::from_row_major(&self.r, &self.t, 1e-4)
    }
}

/// Parses JSON lines, skipping blank lines. Errors carry the line number.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut out: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
