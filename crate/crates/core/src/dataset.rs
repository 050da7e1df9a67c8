//! BOP-style scene I/O, run configuration, per-object threshold tables,
//! outlier-threshold selection and recall evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{make_batch, write_batches, AugmentConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, CameraIntrinsics, Mat3, NormalizationBox, Pose, SymmetryPool, Vec2};
use crate::grid::{coord_l1, coord_norm, CoordImage, DepthMap, ErrorImage, Mask, RgbImage};
use crate::losses::LossConfig;
use crate::mesh::Mesh;
use crate::metrics::{adi, is_correct_add, vsd, MetricKind, RecallRow, VsdParams};
use crate::pipeline::{estimate, Detection, EstimateContext, PipelineConfig, PoseResult};
use crate::pngio;
use crate::predictor::{OracleParams, OraclePredictor, OracleScene, Predictor};
use crate::render::{render, render_scene_depth, render_visibility};

/// Rotation tolerance for dataset annotations.
pub const DATASET_ROTATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub obj_id: u32,
    pub pose: Pose,
    pub bbox_visib: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub image_id: u64,
    pub k: CameraIntrinsics,
    /// Millimetres per depth PNG unit.
    pub depth_scale: f64,
    pub objects: Vec<ObjectAnnotation>,
}

/// A BOP scene directory: `scene_camera.json`, `scene_gt.json`, optional
/// `scene_gt_info.json`, `rgb/` and `depth/`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub dir: PathBuf,
    /// Sorted by image id.
    pub images: Vec<SceneAnnotation>,
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn schema(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {what}", path.display()))
}

fn floats<const N: usize>(v: &Value, path: &Path, key: &str) -> Result<[f64; N]> {
    let arr = v
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| schema(path, format!("missing array `{key}`")))?;
    if arr.len() != N {
        return Err(schema(path, format!("`{key}` needs {N} values, got {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x
            .as_f64()
            .ok_or_else(|| schema(path, format!("`{key}` holds a non-number")))?;
    }
    Ok(out)
}

fn image_key(k: &str, path: &Path) -> Result<u64> {
    k.parse()
        .map_err(|_| schema(path, format!("image key `{k}` is not an integer")))
}

pub fn rgb_path(dir: &Path, image_id: u64) -> PathBuf {
    dir.join("rgb").join(format!("{image_id:06}.png"))
}

pub fn depth_path(dir: &Path, image_id: u64) -> PathBuf {
    dir.join("depth").join(format!("{image_id:06}.png"))
}

impl Scene {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let cam_path = dir.join("scene_camera.json");
        let gt_path = dir.join("scene_gt.json");
        let info_path = dir.join("scene_gt_info.json");
        let cams = read_json(&cam_path)?;
        let gts = read_json(&gt_path)?;
        let info = if info_path.exists() {
            Some(read_json(&info_path)?)
        } else {
            None
        };
        let cams = cams
            .as_object()
            .ok_or_else(|| schema(&cam_path, "expected an object keyed by image id"))?;
        let gts = gts
            .as_object()
            .ok_or_else(|| schema(&gt_path, "expected an object keyed by image id"))?;

        let mut images = Vec::new();
        for (key, cam) in cams {
            let image_id = image_key(key, &cam_path)?;
            let kvals = floats::<9>(cam, &cam_path, "cam_K")?;
            let (w, h) = match (cam.get("width"), cam.get("height")) {
                (Some(w), Some(h)) => (
                    w.as_u64().ok_or_else(|| schema(&cam_path, "bad width"))? as usize,
                    h.as_u64().ok_or_else(|| schema(&cam_path, "bad height"))? as usize,
                ),
                _ => {
                    let rgb = pngio::read_rgb_png(rgb_path(&dir, image_id)).map_err(|_| {
                        schema(&cam_path, format!("image {image_id}: no width/height and no rgb image"))
                    })?;
                    rgb.dims()
                }
            };
            let k = CameraIntrinsics::from_k(&kvals, w, h)
                .map_err(|e| schema(&cam_path, format!("image {image_id}: {e}")))?;
            let depth_scale = cam.get("depth_scale").and_then(Value::as_f64).unwrap_or(1.0);

            let entries = gts
                .get(key)
                .and_then(Value::as_array)
                .ok_or_else(|| schema(&gt_path, format!("no entry for image {image_id}")))?;
            let infos = info
                .as_ref()
                .and_then(|i| i.get(key))
                .and_then(Value::as_array);
            let mut objects = Vec::new();
            for (j, e) in entries.iter().enumerate() {
                let obj_id = e
                    .get("obj_id")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| schema(&gt_path, format!("image {image_id}: missing obj_id")))?
                    as u32;
                let r = floats::<9>(e, &gt_path, "cam_R_m2c")?;
                let t = floats::<3>(e, &gt_path, "cam_t_m2c")?;
                let pose = Pose::from_row_major(&r, &t, DATASET_ROTATION_TOL)
                    .map_err(|err| schema(&gt_path, format!("image {image_id} object {j}: {err}")))?;
                let bbox_visib = infos
                    .and_then(|i| i.get(j))
                    .and_then(|i| floats::<4>(i, &info_path, "bbox_visib").ok())
                    .and_then(|b| BBox::from_xywh(b[0], b[1], b[2], b[3]).ok());
                objects.push(ObjectAnnotation {
                    obj_id,
                    pose,
                    bbox_visib,
                });
            }
            images.push(SceneAnnotation {
                image_id,
                k,
                depth_scale,
                objects,
            });
        }
        images.sort_by_key(|a| a.image_id);
        Ok(Self { dir, images })
    }

    pub fn image(&self, image_id: u64) -> Option<&SceneAnnotation> {
        self.images
            .binary_search_by_key(&image_id, |a| a.image_id)
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn rgb(&self, image_id: u64) -> Option<Result<RgbImage>> {
        let p = rgb_path(&self.dir, image_id);
        p.exists().then(|| pngio::read_rgb_png(p))
    }

    pub fn depth(&self, image_id: u64) -> Option<Result<DepthMap>> {
        let p = depth_path(&self.dir, image_id);
        let scale = self.image(image_id).map_or(1.0, |a| a.depth_scale);
        p.exists().then(|| pngio::read_depth_png(p, scale))
    }
}

/// Writes annotation JSON files for `images` into `dir`.
pub fn write_scene_annotations(dir: impl AsRef<Path>, images: &[SceneAnnotation]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut cams = serde_json::Map::new();
    let mut gts = serde_json::Map::new();
    let mut infos = serde_json::Map::new();
    for a in images {
        let key = a.image_id.to_string();
        cams.insert(
            key.clone(),
            serde_json::json!({
                "cam_K": a.k.k_row_major(),
                "depth_scale": a.depth_scale,
                "width": a.k.width,
                "height": a.k.height,
            }),
        );
        let objs: Vec<Value> = a
            .objects
            .iter()
            .map(|o| {
                serde_json::json!({
                    "cam_R_m2c": o.pose.rotation_row_major(),
                    "cam_t_m2c": o.pose.translation_array(),
                    "obj_id": o.obj_id,
                })
            })
            .collect();
        gts.insert(key.clone(), Value::Array(objs));
        let info: Vec<Value> = a
            .objects
            .iter()
            .map(|o| match o.bbox_visib {
                Some(b) => serde_json::json!({ "bbox_visib": [b.x_min(), b.y_min(), b.w, b.h] }),
                None => serde_json::json!({ "bbox_visib": [-1, -1, -1, -1] }),
            })
            .collect();
        infos.insert(key, Value::Array(info));
    }
    for (name, v) in [
        ("scene_camera.json", cams),
        ("scene_gt.json", gts),
        ("scene_gt_info.json", infos),
    ] {
        std::fs::write(dir.join(name), serde_json::to_vec_pretty(&Value::Object(v))?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Custom,
    Linemod,
    Lmo,
    Tless,
}

const LINEMOD_THETA_O: [(u32, f64); 13] = [
    (1, 0.1),
    (2, 0.2),
    (4, 0.2),
    (5, 0.2),
    (6, 0.2),
    (8, 0.2),
    (9, 0.1),
    (10, 0.2),
    (11, 0.2),
    (12, 0.2),
    (13, 0.2),
    (14, 0.2),
    (15, 0.2),
];

const LMO_THETA_O: [(u32, f64); 8] = [
    (1, 0.2),
    (5, 0.3),
    (6, 0.3),
    (8, 0.3),
    (9, 0.2),
    (10, 0.2),
    (11, 0.3),
    (12, 0.3),
];

const TLESS_THETA_O: [f64; 30] = [
    0.1, 0.1, 0.1, 0.3, 0.2, 0.3, 0.3, 0.3, 0.3, 0.2, 0.3, 0.3, 0.2, 0.2, 0.2, 0.3, 0.3, 0.2,
    0.3, 0.3, 0.2, 0.2, 0.3, 0.1, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3,
];

impl DatasetKind {
    pub fn default_theta_o(self, obj_id: u32) -> Option<f64> {
        match self {
            DatasetKind::Custom => None,
            DatasetKind::Linemod => LINEMOD_THETA_O.iter().find(|e| e.0 == obj_id).map(|e| e.1),
            DatasetKind::Lmo => LMO_THETA_O.iter().find(|e| e.0 == obj_id).map(|e| e.1),
            DatasetKind::Tless => (1..=30)
                .contains(&obj_id)
                .then(|| TLESS_THETA_O[obj_id as usize - 1]),
        }
    }

    /// Symmetry pool name for an object, `None` when not symmetric.
    pub fn default_pool(self, obj_id: u32) -> Option<&'static str> {
        match self {
            DatasetKind::Custom => None,
            DatasetKind::Linemod | DatasetKind::Lmo => {
                matches!(obj_id, 10 | 11).then_some("z180")
            }
            DatasetKind::Tless => match obj_id {
                5..=12 | 25 | 26 | 28 | 29 => Some("z180"),
                19 | 20 => Some("y180"),
                27 => Some("z90"),
                1..=4 | 13..=18 | 24 | 30 => Some("cont-z"),
                _ => None,
            },
        }
    }
}

/// Run configuration, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetKind,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub oracle: OracleParams,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub vsd: VsdParams,
    /// Per-object outlier threshold overrides keyed by object id.
    pub theta_o: BTreeMap<String, f64>,
    /// Per-object symmetry pool overrides keyed by object id.
    pub symmetry: BTreeMap<String, String>,
}

fn parse_obj_key(k: &str) -> Result<u32> {
    k.parse()
        .map_err(|_| Error::Config(format!("object key `{k}` is not an integer id")))
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.oracle.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.vsd.validate()?;
        for (k, v) in &self.theta_o {
            parse_obj_key(k)?;
            if !(*v > 0.0) {
                return Err(Error::Config(format!("theta_o for object {k} must be > 0")));
            }
        }
        for (k, v) in &self.symmetry {
            parse_obj_key(k)?;
            v.parse::<SymmetryPool>()?;
        }
        Ok(())
    }

    /// Override, then dataset table, then `pipeline.theta_o`.
    pub fn theta_o_for(&self, obj_id: u32) -> f64 {
        self.theta_o
            .get(&obj_id.to_string())
            .copied()
            .or_else(|| self.dataset.default_theta_o(obj_id))
            .unwrap_or(self.pipeline.theta_o)
    }

    pub fn pipeline_for(&self, obj_id: u32) -> PipelineConfig {
        PipelineConfig {
            theta_o: self.theta_o_for(obj_id),
            ..self.pipeline.clone()
        }
    }

    pub fn pool_for(&self, obj_id: u32) -> Result<SymmetryPool> {
        match self
            .symmetry
            .get(&obj_id.to_string())
            .map(String::as_str)
            .or_else(|| self.dataset.default_pool(obj_id))
        {
            Some(name) => name.parse(),
            None => Ok(SymmetryPool::identity()),
        }
    }
}

/// Meshes by object id: either one mesh for every id or a BOP `models/`
/// directory with `obj_XXXXXX.ply` files, loaded on demand.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Single(std::sync::Arc<Mesh>),
    Directory(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Models {
    source: ModelSource,
    cache: std::collections::HashMap<u32, std::sync::Arc<Mesh>>,
}

impl Models {
    pub fn single(mesh: Mesh) -> Self {
        Self {
            source: ModelSource::Single(std::sync::Arc::new(mesh)),
            cache: Default::default(),
        }
    }

    pub fn directory(dir: impl Into<PathBuf>) -> Self {
        Self {
            source: ModelSource::Directory(dir.into()),
            cache: Default::default(),
        }
    }

    pub fn get(&mut self, obj_id: u32) -> Result<std::sync::Arc<Mesh>> {
        match &self.source {
            ModelSource::Single(m) => Ok(m.clone()),
            ModelSource::Directory(dir) => {
                if let Some(m) = self.cache.get(&obj_id) {
                    return Ok(m.clone());
                }
                let m = std::sync::Arc::new(Mesh::load_ply(dir.join(format!("obj_{obj_id:06}.ply")))?);
                self.cache.insert(obj_id, m.clone());
                Ok(m)
            }
        }
    }
}

/// Fraction of candidate-quality scores for one θ_o value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaScore {
    pub theta_o: f64,
    /// Share of usable object pixels kept.
    pub recall: f64,
    /// Share of kept pixels that are background or badly predicted.
    pub false_rate: f64,
}

impl ThetaScore {
    pub fn score(&self) -> f64 {
        self.recall - self.false_rate
    }
}

/// One prediction with its ground truth, used for threshold selection.
#[derive(Debug, Clone)]
pub struct LabelledPrediction {
    pub coord: CoordImage,
    pub err: ErrorImage,
    pub truth: CoordImage,
    /// Object pixels visible in the input.
    pub visible: Mask,
}

/// Oracle predictions on synthetic crops of `mesh`, paired with their
/// targets. The visible mask is the rendered object mask.
pub fn oracle_labelled_predictions(
    mesh: &Mesh,
    count: usize,
    size: usize,
    params: &OracleParams,
    seed: u64,
) -> Result<Vec<LabelledPrediction>> {
    let samples = synthetic_samples(mesh, 0, count, size, seed)?;
    let mesh = std::sync::Arc::new(mesh.clone());
    let norm_box = mesh.normalization_box()?;
    let c = (size as f64 - 1.0) / 2.0;
    let whole = crate::pipeline::crop_region(&BBox::new(c, c, size as f64, size as f64)?, 1.0, size);
    samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let scene = OracleScene {
                mesh: mesh.clone(),
                pose: s.pose,
                k: s.k,
                norm_box,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let out = crate::predictor::oracle_predict(&scene, &whole, params, &mut rng)?;
            Ok(LabelledPrediction {
                coord: out.coord,
                err: out.err,
                truth: s.coord,
                visible: s.mask,
            })
        })
        .collect()
}

/// Stage-2 predictions saved in the prediction file format (for example by
/// a recording run or an external model), paired with targets rendered
/// from the scene annotations.
pub fn recorded_labelled_predictions(
    scene: &Scene,
    models: &mut Models,
    dir: impl AsRef<Path>,
) -> Result<Vec<LabelledPrediction>> {
    let dir = dir.as_ref();
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix("_s2.json").map(|s| format!("{s}_s2"))
        })
        .collect();
    stems.sort();
    let mut out = Vec::new();
    for stem in stems {
        let image_id: u64 = stem
            .split('_')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("{stem}: bad prediction file name")))?;
        let (meta, pred) = crate::predictor::read_prediction(dir, &stem)?;
        let img = scene
            .image(image_id)
            .ok_or_else(|| Error::Input(format!("{stem}: image {image_id} not in scene")))?;
        let [cx, cy, side, _] = meta.bbox;
        let crop = crate::pipeline::crop_region(&BBox::new(cx, cy, side, side)?, 1.0, meta.width);
        let Some(obj) = img.objects.iter().find(|o| o.obj_id == meta.obj_id) else {
            continue;
        };
        let mesh = models.get(obj.obj_id)?;
        let truth = render(&mesh, &obj.pose, &crop.intrinsics(&img.k), &mesh.normalization_box()?);
        out.push(LabelledPrediction {
            coord: pred.coord,
            err: pred.err,
            truth: truth.coord,
            visible: truth.mask,
        });
    }
    Ok(out)
}

/// Picks the θ_o maximizing recall of usable pixels minus the false-pixel
/// rate. A pixel is usable when it is visible and its true coordinate
/// error is below `theta_i`; kept pixels are those passing the stage-1
/// valid-mask test. Ties go to the smaller threshold.
pub fn select_theta_o(
    preds: &[LabelledPrediction],
    candidates: &[f64],
    theta_i: f64,
    nonzero_norm: f64,
) -> Result<(f64, Vec<ThetaScore>)> {
    if candidates.is_empty() || preds.is_empty() {
        return Err(Error::Input("theta_o selection needs candidates and samples".into()));
    }
    let mut scores = Vec::new();
    for &theta in candidates {
        let (mut usable, mut kept_usable, mut kept, mut kept_bad) = (0usize, 0usize, 0usize, 0usize);
        for p in preds {
            p.coord.check_dims(&p.err, "theta_o sample")?;
            p.coord.check_dims(&p.truth, "theta_o sample")?;
            p.coord.check_dims(&p.visible, "theta_o sample")?;
            for i in 0..p.coord.len() {
                let c = &p.coord.as_slice()[i];
                let good = p.visible.as_slice()[i] && coord_l1(c, &p.truth.as_slice()[i]) < theta_i;
                let keep = coord_norm(c) > nonzero_norm && p.err.as_slice()[i] < theta;
                usable += good as usize;
                kept += keep as usize;
                kept_usable += (keep && good) as usize;
                kept_bad += (keep && !good) as usize;
            }
        }
        scores.push(ThetaScore {
            theta_o: theta,
            recall: if usable == 0 { 0.0 } else { kept_usable as f64 / usable as f64 },
            false_rate: if kept == 0 { 0.0 } else { kept_bad as f64 / kept as f64 },
        });
    }
    let best = scores
        .iter()
        .fold(None::<&ThetaScore>, |b, s| match b {
            Some(b) if b.score() >= s.score() => Some(b),
            _ => Some(s),
        })
        .expect("non-empty");
    Ok((best.theta_o, scores))
}

/// Per-instance outcome of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome {
    pub image_id: u64,
    pub obj_id: u32,
    /// Metric value of the best matching result, `None` when unmatched.
    pub error: Option<f64>,
    pub correct: bool,
}

/// Scores every ground-truth instance against the results for its image
/// and object; each result is used at most once (greedy, lowest error
/// first).
pub fn evaluate(
    scene: &Scene,
    results: &[PoseResult],
    models: &mut Models,
    config: &Config,
    metric: MetricKind,
) -> Result<Vec<InstanceOutcome>> {
    let mut outcomes = Vec::new();
    for img in &scene.images {
        let scene_depth = if metric == MetricKind::Vsd {
            Some(match scene.depth(img.image_id) {
                Some(d) => d?,
                None => {
                    let meshes: Vec<(std::sync::Arc<Mesh>, Pose)> = img
                        .objects
                        .iter()
                        .map(|o| Ok((models.get(o.obj_id)?, o.pose)))
                        .collect::<Result<_>>()?;
                    let refs: Vec<(&Mesh, Pose)> = meshes.iter().map(|(m, p)| (m.as_ref(), *p)).collect();
                    render_scene_depth(&refs, &img.k)
                }
            })
        } else {
            None
        };
        let mut used = vec![false; results.len()];
        for obj in &img.objects {
            let mesh = models.get(obj.obj_id)?;
            let pool = config.pool_for(obj.obj_id)?;
            let mut best: Option<(usize, f64, bool)> = None;
            for (ri, r) in results.iter().enumerate() {
                if used[ri] || r.image_id != img.image_id || r.obj_id != obj.obj_id {
                    continue;
                }
                let est = r.pose()?;
                let (err, ok) = match metric {
                    MetricKind::Add => {
                        let e = if pool.is_trivial() {
                            crate::metrics::add(&est, &obj.pose, &mesh)?
                        } else {
                            adi(&est, &obj.pose, &mesh)?
                        };
                        (e, is_correct_add(&est, &obj.pose, &mesh, &pool))
                    }
                    MetricKind::Adi => {
                        let e = adi(&est, &obj.pose, &mesh)?;
                        (e, e < crate::metrics::ADD_THRESHOLD_FRACTION * mesh.diameter())
                    }
                    MetricKind::Vsd => {
                        let depth = scene_depth.as_ref().expect("vsd depth");
                        match vsd(&est, &obj.pose, &mesh, depth, &img.k, &config.vsd) {
                            Ok(e) => (e, e < config.vsd.threshold),
                            Err(Error::UndefinedMetric(_)) => (1.0, false),
                            Err(e) => return Err(e),
                        }
                    }
                };
                if best.is_none_or(|(_, be, _)| err < be) {
                    best = Some((ri, err, ok));
                }
            }
            if let Some((ri, _, _)) = best {
                used[ri] = true;
            }
            outcomes.push(InstanceOutcome {
                image_id: img.image_id,
                obj_id: obj.obj_id,
                error: best.map(|b| b.1),
                correct: best.is_some_and(|b| b.2),
            });
        }
    }
    Ok(outcomes)
}

/// Per-object recall, sorted by object id.
pub fn recall_table(outcomes: &[InstanceOutcome], metric: MetricKind) -> Vec<RecallRow> {
    let mut per: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        let e = per.entry(o.obj_id).or_default();
        e.0 += o.correct as usize;
        e.1 += 1;
    }
    per.into_iter()
        .map(|(obj_id, (c, n))| RecallRow {
            obj_id,
            metric,
            recall: c as f64 / n as f64,
            n,
        })
        .collect()
}

/// Fraction of instances whose error is below each threshold; unmatched
/// instances never count.
pub fn threshold_curve(outcomes: &[InstanceOutcome], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let n = outcomes.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| {
            let hits = outcomes
                .iter()
                .filter(|o| o.error.is_some_and(|e| e < t))
                .count();
            (t, hits as f64 / n)
        })
        .collect()
}

pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Random rotation with the object origin on a random pixel at least
/// `margin` pixels inside the image, at depth `z_range`.
pub fn random_pose(rng: &mut impl Rng, k: &CameraIntrinsics, margin: f64, z_range: (f64, f64)) -> Pose {
    let u = rng.random_range(margin..(k.width as f64 - margin).max(margin + 1.0));
    let v = rng.random_range(margin..(k.height as f64 - margin).max(margin + 1.0));
    let z = rng.random_range(z_range.0..=z_range.1);
    let ray = k.unproject(&Vec2::new(u, v));
    Pose {
        rotation: random_rotation(rng),
        translation: ray * (z / ray.z),
    }
}

/// Flat appearance derived from object coordinates, for synthetic scenes.
pub fn coord_appearance(coord: &CoordImage, mask: &Mask) -> RgbImage {
    RgbImage::from_fn(coord.width(), coord.height(), |x, y| {
        if *mask.get(x, y) {
            coord.get(x, y).map(|c| (255.0 * (0.25 + 0.75 * c)).round() as u8)
        } else {
            [0; 3]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub obj_id: u32,
    pub images: usize,
    pub seed: u64,
    pub z_range: (f64, f64),
}

/// Writes a BOP-style scene with one instance per image plus
/// `detections.jsonl` holding the visible ground-truth boxes.
pub fn write_synthetic_scene(
    dir: impl AsRef<Path>,
    mesh: &Mesh,
    k: &CameraIntrinsics,
    spec: &SynthSpec,
) -> Result<Scene> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let norm_box: NormalizationBox = mesh.normalization_box()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let margin = (k.width.min(k.height) as f64 * 0.25).min(150.0);
    let mut images = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..spec.images as u64 {
        let (pose, out) = loop {
            let pose = random_pose(&mut rng, k, margin, spec.z_range);
            let out = render(mesh, &pose, k, &norm_box);
            if out.mask.count() > 0 {
                break (pose, out);
            }
        };
        let visible = render_visibility(&[(mesh, pose)], k);
        let bbox = BBox::from_mask(&visible[0]);
        pngio::write_rgb_png(rgb_path(dir, image_id), &coord_appearance(&out.coord, &out.mask))?;
        pngio::write_depth_png(depth_path(dir, image_id), &out.depth)?;
        if let Some(b) = bbox {
            dets.push(Detection {
                image_id,
                obj_id: spec.obj_id,
                bbox: b,
                score: 1.0,
            });
        }
        images.push(SceneAnnotation {
            image_id,
            k: *k,
            depth_scale: pngio::DEPTH_UNIT_MM,
            objects: vec![ObjectAnnotation {
                obj_id: spec.obj_id,
                pose,
                bbox_visib: bbox,
            }],
        });
    }
    write_scene_annotations(dir, &images)?;
    crate::pipeline::write_jsonl(
        std::io::BufWriter::new(std::fs::File::create(dir.join("detections.jsonl"))?),
        &dets,
    )?;
    Scene::load(dir)
}

/// Renders `count` crops of the mesh under random rotations, framed the way
/// the pipeline frames a detection (diameter ≈ size / 1.5).
pub fn synthetic_samples(mesh: &Mesh, obj_id: u32, count: usize, size: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    let norm_box = mesh.normalization_box()?;
    let f = 500.0;
    let c = (size as f64 - 1.0) / 2.0;
    let k = CameraIntrinsics::new(f, f, c, c, size, size)?;
    let z = f * mesh.diameter() * 1.5 / size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let pose = Pose {
                rotation: random_rotation(&mut rng),
                translation: crate::geometry::Vec3::new(0.0, 0.0, z),
            };
            let out = render(mesh, &pose, &k, &norm_box);
            TrainingSample {
                obj_id,
                rgb: coord_appearance(&out.coord, &out.mask),
                coord: out.coord,
                mask: out.mask,
                pose,
                k,
            }
        })
        .collect())
}

/// Crops every annotated instance of a scene around its visible box, with
/// the target rendered in the crop camera. Instances without any visible
/// pixel are skipped; images without an rgb file use the coordinate
/// appearance.
pub fn scene_samples(scene: &Scene, models: &mut Models, size: usize, crop_factor: f64) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for img in &scene.images {
        let rgb = scene.rgb(img.image_id).transpose()?;
        for obj in &img.objects {
            let mesh = models.get(obj.obj_id)?;
            let norm_box = mesh.normalization_box()?;
            let bbox = match obj.bbox_visib {
                Some(b) => b,
                None => match BBox::from_mask(&render(&mesh, &obj.pose, &img.k, &norm_box).mask) {
                    Some(b) => b,
                    None => continue,
                },
            };
            let crop = crate::pipeline::crop_region(&bbox, crop_factor, size);
            let k = crop.intrinsics(&img.k);
            let target = render(&mesh, &obj.pose, &k, &norm_box);
            if target.mask.count() == 0 {
                continue;
            }
            let crop_rgb = match &rgb {
                Some(src) => crop.resample_rgb(src),
                None => coord_appearance(&target.coord, &target.mask),
            };
            out.push(TrainingSample {
                obj_id: obj.obj_id,
                rgb: crop_rgb,
                coord: target.coord,
                mask: target.mask,
                pose: obj.pose,
                k,
            });
        }
    }
    Ok(out)
}

/// PNG files of a directory in name order, each centre-cropped to a square
/// and resampled (nearest neighbour) to `size`.
pub fn load_backgrounds(dir: impl AsRef<Path>, size: usize) -> Result<Vec<RgbImage>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = pngio::read_rgb_png(p)?;
            let (w, h) = img.dims();
            let side = w.min(h) as f64;
            let bbox = BBox::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, side, side)?;
            let crop = crate::pipeline::crop_region(&bbox, 1.0, size);
            Ok(RgbImage::from_fn(size, size, |x, y| {
                let p = crop.to_source(&Vec2::new(x as f64, y as f64));
                let sx = p.x.round().clamp(0.0, w as f64 - 1.0) as usize;
                let sy = p.y.round().clamp(0.0, h as f64 - 1.0) as usize;
                *img.get(sx, sy)
            }))
        })
        .collect()
}

/// Oracle predictor holding every annotated instance of the scene. Keys are
/// `(image_id, obj_id)`, so only the first instance of an object per image
/// is reachable.
pub fn oracle_for_scene(scene: &Scene, models: &mut Models, params: OracleParams, seed: u64) -> Result<OraclePredictor> {
    let mut oracle = OraclePredictor::new(params, seed);
    for img in &scene.images {
        for obj in &img.objects {
            if oracle.scenes.contains_key(&(img.image_id, obj.obj_id)) {
                continue;
            }
            let mesh = models.get(obj.obj_id)?;
            let norm_box = mesh.normalization_box()?;
            oracle.insert(
                img.image_id,
                obj.obj_id,
                OracleScene {
                    mesh,
                    pose: obj.pose,
                    k: img.k,
                    norm_box,
                },
            );
        }
    }
    Ok(oracle)
}

/// A detection the pipeline could not turn into a pose.
#[derive(Debug)]
pub struct EstimateFailure {
    pub detection_index: usize,
    pub image_id: u64,
    pub obj_id: u32,
    pub error: Error,
}

/// Runs the pipeline over `detections` in parallel. Detections are ordered
/// by image id (stable), and the position in that order is the detection
/// index used for RNG streams and prediction file names. Input and format
/// errors abort; estimation failures are returned alongside the poses.
pub fn estimate_detections(
    scene: &Scene,
    detections: &[Detection],
    models: &mut Models,
    config: &Config,
    predictor: &dyn Predictor,
) -> Result<(Vec<PoseResult>, Vec<EstimateFailure>)> {
    config.validate()?;
    let mut dets: Vec<Detection> = detections.to_vec();
    dets.sort_by_key(|d| d.image_id);

    let mut images = BTreeMap::new();
    let mut meshes = BTreeMap::new();
    for d in &dets {
        let ann = scene
            .image(d.image_id)
            .ok_or_else(|| Error::Input(format!("detection refers to unknown image {}", d.image_id)))?;
        if let std::collections::btree_map::Entry::Vacant(e) = images.entry(d.image_id) {
            e.insert((ann, scene.rgb(d.image_id).transpose()?));
        }
        if let std::collections::btree_map::Entry::Vacant(e) = meshes.entry(d.obj_id) {
            let mesh = models.get(d.obj_id)?;
            e.insert(mesh.normalization_box()?);
        }
    }

    let outcomes: Vec<Result<PoseResult>> = dets
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let (ann, rgb) = &images[&d.image_id];
            let pipeline = config.pipeline_for(d.obj_id);
            let ctx = EstimateContext {
                image: rgb.as_ref(),
                k: &ann.k,
                norm_box: &meshes[&d.obj_id],
                config: &pipeline,
            };
            estimate(d, i as u64, predictor, &ctx).map(|o| PoseResult::new(d, &o.estimate))
        })
        .collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (i, (d, r)) in dets.iter().zip(outcomes).enumerate() {
        match r {
            Ok(p) => results.push(p),
            Err(e) if e.is_input_error() || matches!(e, Error::Io(_) | Error::Image(_)) => return Err(e),
            Err(error) => failures.push(EstimateFailure {
                detection_index: i,
                image_id: d.image_id,
                obj_id: d.obj_id,
                error,
            }),
        }
    }
    Ok((results, failures))
}

/// Generates `iterations` batches and writes them with
/// [`crate::augment::write_batches`]. Returns the number of items written.
pub fn make_dataset(
    out: impl AsRef<Path>,
    samples: &[TrainingSample],
    backgrounds: &[RgbImage],
    cfg: &AugmentConfig,
    seed: u64,
    iterations: u64,
) -> Result<usize> {
    let batches = (0..iterations)
        .map(|it| make_batch(samples, backgrounds, cfg, seed, it))
        .collect::<Result<Vec<_>>>()?;
    write_batches(out, samples, &batches)
}
