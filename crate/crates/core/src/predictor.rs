//! Sources of coordinate/error predictions for the pose pipeline.
//!
//! [`OraclePredictor`] renders ground truth with controlled corruption and
//! stands in for a trained network. [`FilePredictor`] reads predictions
//! produced by an external model in the on-disk prediction format:
//!
//! - `{stem}_coord.png`: 16-bit RGB, channel value `round(c * 65535)`
//! - `{stem}_err.png`: 16-bit grayscale, `round(e * 65535)`
//! - `{stem}.json`: `{obj_id, bbox: [cx, cy, side, side], stage, width, height}`
//!
//! with `stem = {image_id:06}_{obj_id:06}_{detection_index:04}_s{stage}`.
//! Inputs exported for an external model use `{stem}_input.png` (8-bit RGB)
//! next to the same sidecar.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, NormalizationBox, Pose};
use crate::grid::{coord_l1, CoordImage, ErrorImage, RgbImage};
use crate::mesh::Mesh;
use crate::pipeline::CropRegion;
use crate::pngio;
use crate::render::render;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PredictorInput<'a> {
    pub image_id: u64,
    pub obj_id: u32,
    pub detection_index: u64,
    pub stage: Stage,
    pub crop: CropRegion,
    pub rgb: &'a RgbImage,
}

impl PredictorInput<'_> {
    pub fn stem(&self) -> String {
        format!(
            "{:06}_{:06}_{:04}_s{}",
            self.image_id,
            self.obj_id,
            self.detection_index,
            self.stage.number()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    pub coord: CoordImage,
    pub err: ErrorImage,
}

impl PredictorOutput {
    pub fn validate(&self) -> Result<()> {
        self.coord.check_dims(&self.err, "prediction")?;
        let coord_ok = self
            .coord
            .as_slice()
            .iter()
            .all(|c| c.iter().all(|v| (0.0..=1.0).contains(v)));
        let err_ok = self.err.as_slice().iter().all(|v| (0.0..=1.0).contains(v));
        if coord_ok && err_ok {
            Ok(())
        } else {
            Err(Error::Input("prediction values outside [0, 1]".into()))
        }
    }
}

/// Implementations must tolerate concurrent calls.
pub trait Predictor: Sync {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput>;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput> {
        (**self).predict(input)
    }
}

#[derive(Debug, Clone)]
pub struct OracleScene {
    pub mesh: Arc<Mesh>,
    pub pose: Pose,
    pub k: CameraIntrinsics,
    pub norm_box: NormalizationBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    /// Gaussian noise added to object coordinates.
    pub noise_sigma: f64,
    /// Fraction of object pixels zeroed by a single patch.
    pub occlusion_fraction: f64,
    /// Half-width of uniform noise added to the error map.
    pub err_noise: f64,
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.err_noise >= 0.0) {
            return Err(Error::Config("oracle noise must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Config("occlusion_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ground-truth prediction for `crop`, corrupted per `params`.
///
/// Occluded pixels get zero coordinates and error 1; every other object
/// pixel reports its true L1 error (capped at 1) plus bounded noise.
pub fn oracle_predict(
    scene: &OracleScene,
    crop: &CropRegion,
    params: &OracleParams,
    rng: &mut impl Rng,
) -> Result<PredictorOutput> {
    params.validate()?;
    let kc = crop.intrinsics(&scene.k);
    let truth = render(&scene.mesh, &scene.pose, &kc, &scene.norm_box);
    let mut coord = truth.coord.clone();
    let mut err = ErrorImage::new(crop.size, crop.size);

    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
        for (i, m) in truth.mask.as_slice().iter().enumerate() {
            if *m {
                let c = &mut coord.as_mut_slice()[i];
                for v in c.iter_mut() {
                    *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
    }

    let masked = truth.mask.count();
    let occluded_count = (params.occlusion_fraction * masked as f64).round() as usize;
    let mut occluded = vec![false; crop.size * crop.size];
    if occluded_count > 0 {
        let pick = rng.random_range(0..masked);
        let (x, y, _) = truth
            .mask
            .iter_xy()
            .filter(|(_, _, &m)| m)
            .nth(pick)
            .expect("pick < masked");
        for i in truth.mask.grow_patch((x, y), occluded_count) {
            occluded[i] = true;
        }
    }

    for (i, m) in truth.mask.as_slice().iter().enumerate() {
        if !*m {
            continue;
        }
        if occluded[i] {
            coord.as_mut_slice()[i] = [0.0; 3];
            err.as_mut_slice()[i] = 1.0;
            continue;
        }
        let e = coord_l1(&coord.as_slice()[i], &truth.coord.as_slice()[i]).min(1.0);
        let noise = if params.err_noise > 0.0 {
            rng.random_range(-params.err_noise..=params.err_noise)
        } else {
            0.0
        };
        err.as_mut_slice()[i] = (e + noise).clamp(0.0, 1.0);
    }
    Ok(PredictorOutput { coord, err })
}

/// Oracle over known scenes keyed by `(image_id, obj_id)`. Each call draws
/// from its own stream of `seed`, so results do not depend on call order.
#[derive(Debug, Clone, Default)]
pub struct OraclePredictor {
    pub scenes: HashMap<(u64, u32), OracleScene>,
    pub params: OracleParams,
    pub seed: u64,
}

impl OraclePredictor {
    pub fn new(params: OracleParams, seed: u64) -> Self {
        Self {
            scenes: HashMap::new(),
            params,
            seed,
        }
    }

    pub fn insert(&mut self, image_id: u64, obj_id: u32, scene: OracleScene) {
        self.scenes.insert((image_id, obj_id), scene);
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput> {
        let scene = self
            .scenes
            .get(&(input.image_id, input.obj_id))
            .ok_or_else(|| {
                Error::Input(format!(
                    "oracle has no scene for image {} object {}",
                    input.image_id, input.obj_id
                ))
            })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(input.detection_index * 2 + u64::from(input.stage.number() - 1));
        oracle_predict(scene, &input.crop, &self.params, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionMeta {
    pub obj_id: u32,
    pub bbox: [f64; 4],
    pub stage: Stage,
    pub width: usize,
    pub height: usize,
}

impl PredictionMeta {
    pub fn for_input(input: &PredictorInput) -> Self {
        let b = input.crop.bbox();
        Self {
            obj_id: input.obj_id,
            bbox: [b.cx, b.cy, b.w, b.h],
            stage: input.stage,
            width: input.crop.size,
            height: input.crop.size,
        }
    }
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}_coord.png")),
        dir.join(format!("{stem}_err.png")),
        dir.join(format!("{stem}.json")),
    )
}

fn write_meta(path: &Path, meta: &PredictionMeta) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(meta)?)?;
    Ok(())
}

pub fn write_prediction(
    dir: impl AsRef<Path>,
    stem: &str,
    meta: &PredictionMeta,
    output: &PredictorOutput,
) -> Result<()> {
    let (coord_p, err_p, meta_p) = paths(dir.as_ref(), stem);
    if output.coord.dims() != (meta.width, meta.height) {
        return Err(Error::Input("prediction size differs from metadata".into()));
    }
    output.validate()?;
    pngio::write_coord_png(coord_p, &output.coord)?;
    pngio::write_error_png(err_p, &output.err)?;
    write_meta(&meta_p, meta)
}

/// Reads a prediction written by [`write_prediction`].
pub fn read_prediction(dir: impl AsRef<Path>, stem: &str) -> Result<(PredictionMeta, PredictorOutput)> {
    let (coord_p, err_p, meta_p) = paths(dir.as_ref(), stem);
    if !meta_p.exists() {
        return Err(Error::Format(format!("missing file {}", meta_p.display())));
    }
    let meta: PredictionMeta = serde_json::from_slice(&std::fs::read(&meta_p)?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_p.display())))?;
    let coord = pngio::read_coord_png(&coord_p)?;
    let err = pngio::read_error_png(&err_p)?;
    for (name, dims) in [("coord", coord.dims()), ("err", err.dims())] {
        if dims != (meta.width, meta.height) {
            return Err(Error::Format(format!(
                "{stem}: {name} image is {}x{}, header says {}x{}",
                dims.0, dims.1, meta.width, meta.height
            )));
        }
    }
    Ok((meta, PredictorOutput { coord, err }))
}

pub fn write_input(dir: impl AsRef<Path>, input: &PredictorInput) -> Result<()> {
    let stem = input.stem();
    let (_, _, meta_p) = paths(dir.as_ref(), &stem);
    pngio::write_rgb_png(dir.as_ref().join(format!("{stem}_input.png")), input.rgb)?;
    write_meta(&meta_p, &PredictionMeta::for_input(input))
}

/// Predictions from disk. With `export_inputs`, a missing prediction writes
/// the requested input crop so an external model can fill it in.
#[derive(Debug, Clone)]
pub struct FilePredictor {
    pub dir: PathBuf,
    pub export_inputs: bool,
}

impl FilePredictor {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            export_inputs: false,
        }
    }
}

impl Predictor for FilePredictor {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput> {
        let stem = input.stem();
        let (coord_p, _, _) = paths(&self.dir, &stem);
        if self.export_inputs && !coord_p.exists() {
            write_input(&self.dir, input)?;
            return Err(Error::Format(format!(
                "{stem}: prediction missing, input exported"
            )));
        }
        let (meta, out) = read_prediction(&self.dir, &stem)?;
        let expect = PredictionMeta::for_input(input);
        let bbox_ok = meta
            .bbox
            .iter()
            .zip(&expect.bbox)
            .all(|(a, b)| (a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        if meta.obj_id != expect.obj_id
            || meta.stage != expect.stage
            || (meta.width, meta.height) != (expect.width, expect.height)
            || !bbox_ok
        {
            return Err(Error::Format(format!(
                "{stem}: header does not match the requested crop"
            )));
        }
        Ok(out)
    }
}

/// Passes predictions through and saves them in the prediction format.
pub struct RecordingPredictor<P> {
    pub inner: P,
    pub dir: PathBuf,
}

impl<P: Predictor> Predictor for RecordingPredictor<P> {
    fn predict(&self, input: &PredictorInput) -> Result<PredictorOutput> {
        let out = self.inner.predict(input)?;
        write_prediction(&self.dir, &input.stem(), &PredictionMeta::for_input(input), &out)?;
        Ok(out)
    }
}
