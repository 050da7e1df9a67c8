use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use coordpose::dataset::{self, Config, Models, SynthSpec};
use coordpose::geometry::{CameraIntrinsics, Pose};
use coordpose::losses::{loss_scan, scan_svg, write_scan_csv, ScanMode, ScanSetup};
use coordpose::mesh::Mesh;
use coordpose::metrics::{write_recall_csv, MetricKind};
use coordpose::pipeline::{read_jsonl, write_jsonl, Detection, PoseResult};
use coordpose::predictor::{FilePredictor, Predictor, RecordingPredictor};
use coordpose::{pngio, render, Error};

#[derive(Parser)]
#[command(name = "coordpose", version, about = "Object-coordinate pose estimation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render coordinate, depth and mask images of a mesh.
    Render(RenderArgs),
    /// Write a synthetic BOP-style scene with detections.
    SynthScenes(SynthArgs),
    /// Generate augmented training pairs.
    MakeDataset(MakeDatasetArgs),
    /// Estimate poses for a detection list.
    Estimate(EstimateArgs),
    /// Score pose results against scene annotations.
    Evaluate(EvaluateArgs),
    /// Sweep the loss over rotations about the object z axis.
    LossScan(LossScanArgs),
    /// Pick the outlier threshold for an object.
    SelectThetaO(SelectArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// One mesh used for every object id.
    #[arg(long, conflicts_with = "models")]
    mesh: Option<PathBuf>,
    /// Directory of `obj_XXXXXX.ply` meshes.
    #[arg(long)]
    models: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> anyhow::Result<Models> {
        match (&self.mesh, &self.models) {
            (Some(m), _) => Ok(Models::single(load_mesh(m)?)),
            (None, Some(d)) => Ok(Models::directory(d)),
            (None, None) => Err(Error::Input("pass --mesh or --models".into()).into()),
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// `r11,...,r33,tx,ty,tz` (row-major, mm) or a JSON file with `R` and `t`.
    #[arg(long)]
    pose: String,
    /// `fx,fy,cx,cy,width,height`.
    #[arg(long)]
    intrinsics: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value_t = 1)]
    obj_id: u32,
    #[arg(long, default_value_t = 10)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `fx,fy,cx,cy,width,height`.
    #[arg(long, default_value = "572.4114,573.57043,325.2611,242.04899,640,480")]
    intrinsics: String,
    #[arg(long, default_value_t = 550.0)]
    z_min: f64,
    #[arg(long, default_value_t = 1000.0)]
    z_max: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeDatasetArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// BOP scene to crop samples from; synthetic views are used otherwise.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Object id of synthetic samples.
    #[arg(long, default_value_t = 1)]
    obj_id: u32,
    /// Number of synthetic samples.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Directory of background PNGs.
    #[arg(long)]
    backgrounds: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of mini-batches; even ones are stage 1, odd ones stage 2.
    #[arg(long, default_value_t = 2)]
    iterations: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorKind {
    Oracle,
    Files,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, value_enum)]
    predictor: PredictorKind,
    /// Prediction directory for `--predictor files`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Write the requested input crops for missing predictions.
    #[arg(long)]
    export_inputs: bool,
    /// Save every prediction used in the prediction file format.
    #[arg(long)]
    record: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (oracle noise) and pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "add")]
    metric: MetricKind,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write `threshold,fraction` rows (ADD/ADI thresholds are
    /// fractions of the diameter).
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct LossScanArgs {
    /// Mesh to scan; a cuboid from `--cuboid` is used otherwise.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// `x,y,z` cuboid size in mm.
    #[arg(long, default_value = "100,60,40")]
    cuboid: String,
    #[arg(long, default_value = "z180")]
    pool: String,
    #[arg(long, default_value = "transformer")]
    mode: ScanMode,
    #[arg(long, default_value_t = 72)]
    steps: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    obj_id: u32,
    /// Oracle samples used when no recorded predictions are given.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Scene for recorded predictions.
    #[arg(long, requires = "predictions")]
    scenes: Option<PathBuf>,
    /// Recorded stage-2 predictions.
    #[arg(long, requires = "scenes")]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "0.1,0.2,0.3")]
    candidates: String,
    /// Per-candidate scores as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn input(msg: impl Into<String>) -> anyhow::Error {
    Error::Input(msg.into()).into()
}

fn numbers(s: &str, n: usize, what: &str) -> anyhow::Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| input(format!("{what}: `{s}` is not a comma-separated number list")))?;
    if n > 0 && v.len() != n {
        return Err(input(format!("{what}: expected {n} values, got {}", v.len())));
    }
    Ok(v)
}

fn parse_intrinsics(s: &str) -> anyhow::Result<CameraIntrinsics> {
    let v = numbers(s, 6, "intrinsics")?;
    Ok(CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)?)
}

fn parse_pose(s: &str) -> anyhow::Result<Pose> {
    let (r, t) = if Path::new(s).is_file() {
        #[derive(serde::Deserialize)]
        struct PoseFile {
            #[serde(rename = "R")]
            r: [f64; 9],
            t: [f64; 3],
        }
        let p: PoseFile = serde_json::from_reader(BufReader::new(File::open(s)?))
            .map_err(|e| Error::Format(format!("{s}: {e}")))?;
        (p.r, p.t)
    } else {
        let v = numbers(s, 12, "pose")?;
        let mut r = [0.0; 9];
        r.copy_from_slice(&v[..9]);
        (r, [v[9], v[10], v[11]])
    };
    Ok(Pose::from_row_major(&r, &t, 1e-6)?)
}

fn load_mesh(path: &Path) -> anyhow::Result<Mesh> {
    Ok(Mesh::load_ply(path)?)
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| input(format!("{}: {e}", path.display())))
}

/// Writes through a temporary sibling and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| input(format!("{}: not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Builds a directory next to `out` and renames it into place; `out` must
/// not exist or be empty.
fn write_dir_atomic(out: &Path, fill: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    if out.exists() {
        if out.read_dir()?.next().is_some() {
            return Err(input(format!("{}: output directory is not empty", out.display())));
        }
        std::fs::remove_dir(out)?;
    }
    let name = out
        .file_name()
        .ok_or_else(|| input(format!("{}: not a directory path", out.display())))?;
    let tmp = out.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    fill(&tmp)?;
    std::fs::rename(&tmp, out)?;
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> anyhow::Result<ExitCode> {
    let mesh = load_mesh(&a.mesh)?;
    let pose = parse_pose(&a.pose)?;
    let k = parse_intrinsics(&a.intrinsics)?;
    let out = render::render(&mesh, &pose, &k, &mesh.normalization_box()?);
    std::fs::create_dir_all(&a.out)?;
    pngio::write_coord_png(a.out.join("coord.png"), &out.coord)?;
    pngio::write_depth_png(a.out.join("depth.png"), &out.depth)?;
    pngio::write_mask_png(a.out.join("mask.png"), &out.mask)?;
    eprintln!("{} object pixels", out.mask.count());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<ExitCode> {
    let mesh = load_mesh(&a.mesh)?;
    let k = parse_intrinsics(&a.intrinsics)?;
    if !(a.z_min > 0.0 && a.z_max >= a.z_min) {
        return Err(input("need 0 < z-min <= z-max"));
    }
    let spec = SynthSpec {
        obj_id: a.obj_id,
        images: a.images,
        seed: a.seed,
        z_range: (a.z_min, a.z_max),
    };
    write_dir_atomic(&a.out, |dir| {
        dataset::write_synthetic_scene(dir, &mesh, &k, &spec)?;
        Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_make_dataset(a: &MakeDatasetArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let size = cfg.pipeline.input_size;
    let mut models = a.model.load()?;
    let samples = match &a.scenes {
        Some(dir) => {
            let scene = dataset::Scene::load(dir)?;
            dataset::scene_samples(&scene, &mut models, size, cfg.pipeline.crop_factor)?
        }
        None => {
            let mesh = models.get(a.obj_id)?;
            dataset::synthetic_samples(&mesh, a.obj_id, a.samples, size, seed)?
        }
    };
    if samples.is_empty() {
        return Err(input("no training samples"));
    }
    let backgrounds = match &a.backgrounds {
        Some(d) => dataset::load_backgrounds(d, size)?,
        None => Vec::new(),
    };
    let mut written = 0;
    write_dir_atomic(&a.out, |dir| {
        written = dataset::make_dataset(dir, &samples, &backgrounds, &cfg.augment, seed, a.iterations)?;
        Ok(())
    })?;
    eprintln!("{written} training pairs from {} samples", samples.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_estimate(a: &EstimateArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.pipeline.rng_seed = s;
    }
    let detections: Vec<Detection> = read_jsonl(open(&a.detections)?)
        .with_context(|| format!("reading {}", a.detections.display()))?;
    let scene = dataset::Scene::load(&a.scenes)?;
    let mut models = a.model.load()?;

    let base: Box<dyn Predictor> = match a.predictor {
        PredictorKind::Oracle => Box::new(dataset::oracle_for_scene(&scene, &mut models, cfg.oracle, cfg.seed)?),
        PredictorKind::Files => {
            let dir = a
                .predictions
                .clone()
                .ok_or_else(|| input("--predictor files needs --predictions DIR"))?;
            Box::new(FilePredictor {
                dir,
                export_inputs: a.export_inputs,
            })
        }
    };
    let predictor: Box<dyn Predictor> = match &a.record {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Box::new(RecordingPredictor {
                inner: base,
                dir: dir.clone(),
            })
        }
        None => base,
    };

    let (results, failures) =
        dataset::estimate_detections(&scene, &detections, &mut models, &cfg, predictor.as_ref())?;
    for f in &failures {
        eprintln!(
            "detection {} (image {}, object {}): {}",
            f.detection_index, f.image_id, f.obj_id, f.error
        );
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &results)?;
    write_atomic(&a.out, &buf)?;
    eprintln!("{} poses from {} detections", results.len(), detections.len());
    if results.is_empty() && !detections.is_empty() {
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let results: Vec<PoseResult> = read_jsonl(open(&a.results)?)
        .with_context(|| format!("reading {}", a.results.display()))?;
    let scene = dataset::Scene::load(&a.scenes)?;
    let mut models = a.model.load()?;
    let outcomes = dataset::evaluate(&scene, &results, &mut models, &cfg, a.metric)?;
    let rows = dataset::recall_table(&outcomes, a.metric);
    let mut buf = Vec::new();
    write_recall_csv(&mut buf, &rows)?;
    write_atomic(&a.out, &buf)?;
    for r in &rows {
        println!("obj {:>3}  {}  recall {:.4}  (n = {})", r.obj_id, r.metric, r.recall, r.n);
    }

    if let Some(path) = &a.curve {
        let (outcomes, thresholds): (Vec<_>, Vec<f64>) = match a.metric {
            MetricKind::Vsd => (outcomes, (1..=20).map(|i| i as f64 * 0.05).collect()),
            _ => {
                let mut scaled = Vec::with_capacity(outcomes.len());
                for mut o in outcomes {
                    let d = models.get(o.obj_id)?.diameter();
                    o.error = o.error.map(|e| e / d);
                    scaled.push(o);
                }
                (scaled, (1..=20).map(|i| i as f64 * 0.01).collect())
            }
        };
        let mut buf = Vec::new();
        writeln!(buf, "threshold,fraction")?;
        for (t, f) in dataset::threshold_curve(&outcomes, &thresholds) {
            writeln!(buf, "{t},{f}")?;
        }
        write_atomic(path, &buf)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_loss_scan(a: &LossScanArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let mesh = match &a.mesh {
        Some(p) => load_mesh(p)?,
        None => {
            let v = numbers(&a.cuboid, 3, "cuboid")?;
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(input("cuboid sizes must be positive"));
            }
            Mesh::cuboid(v[0], v[1], v[2])
        }
    };
    let setup = ScanSetup::reference_view(&mesh, a.pool.parse()?, cfg.loss.beta)?;
    let points = loss_scan(&setup, a.steps, a.mode)?;
    let mut buf = Vec::new();
    write_scan_csv(&mut buf, &points)?;
    write_atomic(&a.out, &buf)?;
    if let Some(p) = &a.plot {
        let label = a.mode.to_string();
        write_atomic(p, scan_svg(&[(label.as_str(), &points)]).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_select(a: &SelectArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let candidates = numbers(&a.candidates, 0, "candidates")?;
    let pipeline = cfg.pipeline_for(a.obj_id);
    let mut models = a.model.load()?;
    let preds = match (&a.scenes, &a.predictions) {
        (Some(s), Some(p)) => {
            let scene = dataset::Scene::load(s)?;
            dataset::recorded_labelled_predictions(&scene, &mut models, p)?
        }
        _ => {
            let mesh = models.get(a.obj_id)?;
            dataset::oracle_labelled_predictions(&mesh, a.samples, pipeline.input_size, &cfg.oracle, cfg.seed)?
        }
    };
    let (best, scores) = dataset::select_theta_o(&preds, &candidates, pipeline.theta_i, pipeline.nonzero_norm)?;
    let mut buf = Vec::new();
    writeln!(buf, "theta_o,recall,false_rate,score")?;
    for s in &scores {
        writeln!(buf, "{},{},{},{}", s.theta_o, s.recall, s.false_rate, s.score())?;
    }
    if let Some(p) = &a.out {
        write_atomic(p, &buf)?;
    }
    print!("{}", String::from_utf8_lossy(&buf));
    println!("obj {} theta_o {best}", a.obj_id);
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_input_error() => 2,
        Some(Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Some(Error::Image(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Render(a) => cmd_render(a),
        Command::SynthScenes(a) => cmd_synth(a),
        Command::MakeDataset(a) => cmd_make_dataset(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::LossScan(a) => cmd_loss_scan(a),
        Command::SelectThetaO(a) => cmd_select(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
