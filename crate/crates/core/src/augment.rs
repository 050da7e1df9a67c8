//! Training-pair augmentation: background compositing with a blurred seam,
//! color jitter, background occlusion patches and paired in-plane rotation.
//! Batches alternate between inputs with background (stage 1) and inputs
//! with background removed (stage 2).

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::grid::{CoordImage, Grid, Mask, RgbImage};
use crate::pngio;
use crate::predictor::Stage;

/// Closed sampling interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.0.is_finite() && self.1.is_finite() && self.0 <= self.1 {
            Ok(())
        } else {
            Err(Error::Config(format!("{name}: range [{}, {}] is not ordered", self.0, self.1)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Per-channel additive offset.
    pub add_range: Range,
    pub contrast_range: Range,
    pub multiply_range: Range,
    /// Chance that multiply draws an independent factor per channel.
    pub per_channel_chance: f64,
    pub blur_sigma_range: Range,
    pub rotation_range_deg: Range,
    pub occlusion_fraction_range: Range,
    pub batch_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            add_range: Range(-15.0, 15.0),
            contrast_range: Range(0.8, 1.3),
            multiply_range: Range(0.8, 1.2),
            per_channel_chance: 0.3,
            blur_sigma_range: Range(0.0, 0.5),
            rotation_range_deg: Range(-45.0, 45.0),
            occlusion_fraction_range: Range(0.0, 0.1),
            batch_size: 50,
        }
    }
}

impl AugmentConfig {
    /// Larger occlusions used for datasets with heavy occlusion.
    pub fn occluded_datasets() -> Self {
        Self {
            occlusion_fraction_range: Range(0.04, 0.5),
            ..Self::default()
        }
    }

    /// Every operation at its identity value.
    pub fn identity() -> Self {
        Self {
            add_range: Range(0.0, 0.0),
            contrast_range: Range(1.0, 1.0),
            multiply_range: Range(1.0, 1.0),
            per_channel_chance: 0.0,
            blur_sigma_range: Range(0.0, 0.0),
            rotation_range_deg: Range(0.0, 0.0),
            occlusion_fraction_range: Range(0.0, 0.0),
            batch_size: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.add_range.check("add_range")?;
        self.contrast_range.check("contrast_range")?;
        self.multiply_range.check("multiply_range")?;
        self.blur_sigma_range.check("blur_sigma_range")?;
        self.rotation_range_deg.check("rotation_range_deg")?;
        self.occlusion_fraction_range.check("occlusion_fraction_range")?;
        if self.blur_sigma_range.0 < 0.0 {
            return Err(Error::Config("blur sigma must be >= 0".into()));
        }
        let o = self.occlusion_fraction_range;
        if o.0 < 0.0 || o.1 > 1.0 {
            return Err(Error::Config("occlusion fractions must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.per_channel_chance) {
            return Err(Error::Config("per_channel_chance must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping, in floating point.
fn blur(img: &Grid<[f64; 3]>, sigma: f64) -> Grid<[f64; 3]> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = img.dims();
    let pass = |src: &Grid<[f64; 3]>, dx: i64, dy: i64| {
        Grid::from_fn(w, h, |x, y| {
            let mut acc = [0.0; 3];
            for (j, kv) in k.iter().enumerate() {
                let o = j as i64 - r;
                let sx = (x as i64 + o * dx).clamp(0, w as i64 - 1) as usize;
                let sy = (y as i64 + o * dy).clamp(0, h as i64 - 1) as usize;
                let p = src.get(sx, sy);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            acc
        })
    };
    pass(&pass(img, 1, 0), 0, 1)
}

fn to_float(img: &RgbImage) -> Grid<[f64; 3]> {
    img.map(|p| p.map(f64::from))
}

/// Border band half-width in pixels.
pub const SEAM_WIDTH: usize = 3;
pub const SEAM_SIGMA: f64 = 1.0;

/// Pixels closer than [`SEAM_WIDTH`] (Chebyshev) to a pixel of the other
/// label.
pub fn seam_band(mask: &Mask) -> Mask {
    let (w, h) = mask.dims();
    let r = SEAM_WIDTH as i64 - 1;
    Mask::from_fn(w, h, |x, y| {
        let me = *mask.get(x, y);
        for dy in -r..=r {
            for dx in -r..=r {
                if let Some(&m) = mask.at(x as i64 + dx, y as i64 + dy) {
                    if m != me {
                        return true;
                    }
                }
            }
        }
        false
    })
}

/// Pastes masked object pixels over the background and blurs the seam.
pub fn composite(object: &RgbImage, mask: &Mask, background: &RgbImage) -> Result<RgbImage> {
    object.check_dims(mask, "composite mask")?;
    object.check_dims(background, "composite background")?;
    let mut out = RgbImage::from_fn(object.width(), object.height(), |x, y| {
        if *mask.get(x, y) {
            *object.get(x, y)
        } else {
            *background.get(x, y)
        }
    });
    let band = seam_band(mask);
    if band.count() > 0 {
        let blurred = blur(&to_float(&out), SEAM_SIGMA);
        for (i, b) in band.as_slice().iter().enumerate() {
            if *b {
                out.as_mut_slice()[i] = blurred.as_slice()[i].map(to_u8);
            }
        }
    }
    Ok(out)
}

/// Parameters drawn for one jitter application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub add: [f64; 3],
    pub contrast: f64,
    pub multiply: [f64; 3],
    pub blur_sigma: f64,
}

impl JitterDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let add = [(); 3].map(|_| cfg.add_range.sample(rng));
        let contrast = cfg.contrast_range.sample(rng);
        let multiply = if rng.random_bool(cfg.per_channel_chance) {
            [(); 3].map(|_| cfg.multiply_range.sample(rng))
        } else {
            [cfg.multiply_range.sample(rng); 3]
        };
        let blur_sigma = cfg.blur_sigma_range.sample(rng);
        Self {
            add,
            contrast,
            multiply,
            blur_sigma,
        }
    }

    /// Add, contrast `(v-128)c+128`, multiply, blur; 8-bit rounding and
    /// clamping after each step.
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let out = img.map(|p| {
            let mut q = [0u8; 3];
            for c in 0..3 {
                let v = to_u8(p[c] as f64 + self.add[c]) as f64;
                let v = to_u8((v - 128.0) * self.contrast + 128.0) as f64;
                q[c] = to_u8(v * self.multiply[c]);
            }
            q
        });
        if self.blur_sigma < 1e-3 {
            return out;
        }
        blur(&to_float(&out), self.blur_sigma).map(|p| p.map(to_u8))
    }
}

pub fn color_jitter(img: &RgbImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> RgbImage {
    JitterDraw::sample(cfg, rng).apply(img)
}

/// Replaces a rectangular patch covering `round(fraction * |mask|)` object
/// pixels with the background. Returns the image and the still-visible mask.
pub fn occlude(
    image: &RgbImage,
    background: &RgbImage,
    mask: &Mask,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<(RgbImage, Mask)> {
    image.check_dims(mask, "occlusion mask")?;
    image.check_dims(background, "occlusion background")?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Input(format!("occlusion fraction {fraction} outside [0, 1]")));
    }
    let mut out = image.clone();
    let mut visible = mask.clone();
    let total = mask.count();
    let n = (fraction * total as f64).round() as usize;
    if n == 0 {
        return Ok((out, visible));
    }
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let pick = rng.random_range(0..total);
    let (x, y, _) = mask
        .iter_xy()
        .filter(|(_, _, &m)| m)
        .nth(pick)
        .expect("pick < total");
    let seed = (x as i64, y as i64);
    let (sx, sy) = (aspect.sqrt(), 1.0 / aspect.sqrt());
    // Masked pixels ordered by scaled Chebyshev distance from the seed: every
    // prefix is the mask inside an axis-aligned rectangle of the given aspect.
    let mut order: Vec<(f64, usize)> = mask
        .iter_xy()
        .enumerate()
        .filter(|(_, (_, _, &m))| m)
        .map(|(i, (px, py, _))| {
            let d = ((px as i64 - seed.0).abs() as f64 / sx).max((py as i64 - seed.1).abs() as f64 / sy);
            (d, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, i) in order.iter().take(n) {
        out.as_mut_slice()[i] = background.as_slice()[i];
        visible.as_mut_slice()[i] = false;
    }
    Ok((out, visible))
}

fn exact_trig(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rotated {
    pub rgb: RgbImage,
    pub coord: CoordImage,
    pub mask: Mask,
}

/// In-plane rotation by `angle_deg` about the image center, counterclockwise
/// as displayed. Nearest neighbour for coordinates and mask, bilinear for
/// RGB; everything outside the source reads as zero.
pub fn paired_rotation(rgb: &RgbImage, coord: &CoordImage, mask: &Mask, angle_deg: f64) -> Result<Rotated> {
    rgb.check_dims(coord, "rotation target")?;
    rgb.check_dims(mask, "rotation mask")?;
    let (w, h) = rgb.dims();
    let (s, c) = exact_trig(angle_deg);
    let (ox, oy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Inverse map from output pixel to source position (y points down).
    let src = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 - ox, y as f64 - oy);
        (c * dx - s * dy + ox, s * dx + c * dy + oy)
    };
    let nn = |x: usize, y: usize| {
        let (sx, sy) = src(x, y);
        (sx.round() as i64, sy.round() as i64)
    };
    let coord_out = CoordImage::from_fn(w, h, |x, y| {
        let (sx, sy) = nn(x, y);
        coord.at(sx, sy).copied().unwrap_or([0.0; 3])
    });
    let mask_out = Mask::from_fn(w, h, |x, y| {
        let (sx, sy) = nn(x, y);
        mask.at(sx, sy).copied().unwrap_or(false)
    });
    let sample = |x: i64, y: i64| rgb.at(x, y).copied().unwrap_or([0; 3]);
    let rgb_out = RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let q = [
            (sample(x0, y0), (1.0 - fx) * (1.0 - fy)),
            (sample(x0 + 1, y0), fx * (1.0 - fy)),
            (sample(x0, y0 + 1), (1.0 - fx) * fy),
            (sample(x0 + 1, y0 + 1), fx * fy),
        ];
        [0, 1, 2].map(|ch| to_u8(q.iter().map(|(p, wt)| p[ch] as f64 * wt).sum()))
    });
    Ok(Rotated {
        rgb: rgb_out,
        coord: coord_out,
        mask: mask_out,
    })
}

/// An object crop with its rendered target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub obj_id: u32,
    pub rgb: RgbImage,
    pub coord: CoordImage,
    pub mask: Mask,
    pub pose: Pose,
    /// Intrinsics of the crop.
    pub k: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub sample_index: usize,
    pub rgb: RgbImage,
    /// Full-object target, including occluded pixels.
    pub coord: CoordImage,
    pub mask: Mask,
    pub visible: Mask,
    pub occlusion_fraction: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub iteration: u64,
    pub stage: Stage,
    pub items: Vec<BatchItem>,
}

pub fn stage_for_iteration(iteration: u64) -> Stage {
    if iteration % 2 == 0 {
        Stage::One
    } else {
        Stage::Two
    }
}

/// One augmented pair. Backgrounds must match the sample size; in stage 2
/// the background is black and everything outside the visible object is
/// zero.
pub fn augment_sample(
    sample: &TrainingSample,
    background: Option<&RgbImage>,
    stage: Stage,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(RgbImage, CoordImage, Mask, Mask, f64, f64)> {
    let (w, h) = sample.rgb.dims();
    let black = RgbImage::new(w, h);
    let bg = match (stage, background) {
        (Stage::One, Some(b)) => b,
        _ => &black,
    };
    let jittered = color_jitter(&sample.rgb, cfg, rng);
    let pasted = composite(&jittered, &sample.mask, bg)?;
    let fraction = cfg.occlusion_fraction_range.sample(rng);
    let (occluded, visible) = occlude(&pasted, bg, &sample.mask, fraction, rng)?;
    let angle = cfg.rotation_range_deg.sample(rng);
    let rot = paired_rotation(&occluded, &sample.coord, &sample.mask, angle)?;
    let vis = paired_rotation(&occluded, &sample.coord, &visible, angle)?.mask;
    let mut rgb = rot.rgb;
    if stage == Stage::Two {
        for (p, v) in rgb.as_mut_slice().iter_mut().zip(vis.as_slice()) {
            if !*v {
                *p = [0; 3];
            }
        }
    }
    let total = sample.mask.count();
    let actual = if total == 0 {
        0.0
    } else {
        1.0 - visible.count() as f64 / total as f64
    };
    Ok((rgb, rot.coord, rot.mask, vis, actual, angle))
}

/// Builds the mini-batch for `iteration`. Item `j` draws from ChaCha8
/// stream `iteration * batch_size + j` of `seed`, so the result does not
/// depend on scheduling.
pub fn make_batch(
    samples: &[TrainingSample],
    backgrounds: &[RgbImage],
    cfg: &AugmentConfig,
    seed: u64,
    iteration: u64,
) -> Result<Batch> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let stage = stage_for_iteration(iteration);
    let items = (0..cfg.batch_size)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(iteration * cfg.batch_size as u64 + j as u64);
            let si = rng.random_range(0..samples.len());
            let bg = if backgrounds.is_empty() {
                None
            } else {
                Some(&backgrounds[rng.random_range(0..backgrounds.len())])
            };
            let (rgb, coord, mask, visible, occlusion_fraction, rotation_deg) =
                augment_sample(&samples[si], bg, stage, cfg, &mut rng)?;
            Ok(BatchItem {
                sample_index: si,
                rgb,
                coord,
                mask,
                visible,
                occlusion_fraction,
                rotation_deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        iteration,
        stage,
        items,
    })
}

/// One line of `meta.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub iteration: u64,
    pub stage: Stage,
    pub obj_id: u32,
    pub sample_index: usize,
    /// Pose of the unrotated sample, row-major.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    /// Crop intrinsics, row-major.
    #[serde(rename = "K")]
    pub k: [f64; 9],
    pub width: usize,
    pub height: usize,
    pub occlusion_fraction: f64,
    pub rotation_deg: f64,
}

/// Writes `rgb/`, `coord/` (16-bit), `mask/` and `meta.jsonl` under `dir`,
/// numbering items consecutively across batches.
pub fn write_batches(
    dir: impl AsRef<Path>,
    samples: &[TrainingSample],
    batches: &[Batch],
) -> Result<usize> {
    let dir = dir.as_ref();
    for sub in ["rgb", "coord", "mask"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut meta = std::io::BufWriter::new(std::fs::File::create(dir.join("meta.jsonl"))?);
    let mut index = 0;
    for batch in batches {
        for item in &batch.items {
            let name = format!("{index:06}.png");
            pngio::write_rgb_png(dir.join("rgb").join(&name), &item.rgb)?;
            pngio::write_coord_png(dir.join("coord").join(&name), &item.coord)?;
            pngio::write_mask_png(dir.join("mask").join(&name), &item.mask)?;
            let s = &samples[item.sample_index];
            let rec = DatasetRecord {
                index,
                iteration: batch.iteration,
                stage: batch.stage,
                obj_id: s.obj_id,
                sample_index: item.sample_index,
                r: s.pose.rotation_row_major(),
                t: s.pose.translation_array(),
                k: s.k.k_row_major(),
                width: item.rgb.width(),
                height: item.rgb.height(),
                occlusion_fraction: item.occlusion_fraction,
                rotation_deg: item.rotation_deg,
            };
            serde_json::to_writer(&mut meta, &rec)?;
            meta.write_all(b"\n")?;
            index += 1;
        }
    }
    meta.flush()?;
    Ok(index)
}
