use coordpose::dataset::{
    estimate_detections, evaluate, oracle_for_scene, recall_table, write_synthetic_scene, Config, Models, Scene,
    SynthSpec,
};
use coordpose::geometry::CameraIntrinsics;
use coordpose::mesh::Mesh;
use coordpose::metrics::MetricKind;
use coordpose::pipeline::{read_jsonl, Detection, PoseResult};

fn setup(dir: &std::path::Path) -> (Scene, Vec<Detection>, Models) {
    let k = CameraIntrinsics::new(572.4114, 573.57043, 325.2611, 242.04899, 640, 480).unwrap();
    let mesh = Mesh::cuboid(100.0, 60.0, 40.0);
    let spec = SynthSpec {
        obj_id: 4,
        images: 6,
        seed: 8,
        z_range: (550.0, 900.0),
    };
    let scene = write_synthetic_scene(dir, &mesh, &k, &spec).unwrap();
    let dets = read_jsonl(std::io::BufReader::new(std::fs::File::open(dir.join("detections.jsonl")).unwrap())).unwrap();
    (scene, dets, Models::single(mesh))
}

#[test]
fn oracle_run_scores_perfectly_under_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, dets, mut models) = setup(dir.path());
    let cfg = Config::default();
    let oracle = oracle_for_scene(&scene, &mut models, cfg.oracle, cfg.seed).unwrap();
    let (results, failures) = estimate_detections(&scene, &dets, &mut models, &cfg, &oracle).unwrap();
    assert!(failures.is_empty());
    assert_eq!(results.len(), 6);
    assert!(results.windows(2).all(|w| w[0].image_id <= w[1].image_id));
    for metric in [MetricKind::Add, MetricKind::Adi, MetricKind::Vsd] {
        let outcomes = evaluate(&scene, &results, &mut models, &cfg, metric).unwrap();
        let rows = recall_table(&outcomes, metric);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].obj_id, rows[0].n, rows[0].recall), (4, 6, 1.0), "{metric}");
    }
}

#[test]
fn recall_matches_a_direct_count() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _, mut models) = setup(dir.path());
    let mesh = models.get(4).unwrap();
    // ground truth for even images, a 30 mm shift for odd ones, nothing for image 5
    let results: Vec<PoseResult> = scene
        .images
        .iter()
        .filter(|a| a.image_id != 5)
        .map(|a| {
            let mut t = a.objects[0].pose.translation_array();
            if a.image_id % 2 == 1 {
                t[0] += 30.0;
            }
            PoseResult {
                image_id: a.image_id,
                obj_id: 4,
                r: a.objects[0].pose.rotation_row_major(),
                t,
                inliers: 0,
                reproj_err: 0.0,
            }
        })
        .collect();
    let cfg = Config::default();
    let outcomes = evaluate(&scene, &results, &mut models, &cfg, MetricKind::Add).unwrap();
    let direct = scene
        .images
        .iter()
        .filter(|a| {
            results.iter().any(|r| {
                r.image_id == a.image_id && {
                    let gt = a.objects[0].pose.translation_array();
                    let shift: f64 = r.t.iter().zip(gt).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    shift < 0.1 * mesh.diameter()
                }
            })
        })
        .count();
    let rows = recall_table(&outcomes, MetricKind::Add);
    assert_eq!(direct, 3);
    assert_eq!(rows[0].recall, direct as f64 / 6.0);
    assert!(outcomes.iter().any(|o| o.image_id == 5 && o.error.is_none() && !o.correct));
}

#[test]
fn empty_detection_list_gives_no_results() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _, mut models) = setup(dir.path());
    let cfg = Config::default();
    let oracle = oracle_for_scene(&scene, &mut models, cfg.oracle, 0).unwrap();
    let (results, failures) = estimate_detections(&scene, &[], &mut models, &cfg, &oracle).unwrap();
    assert!(results.is_empty() && failures.is_empty());
}

#[test]
fn unknown_image_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, mut dets, mut models) = setup(dir.path());
    dets[0].image_id = 99;
    let cfg = Config::default();
    let oracle = oracle_for_scene(&scene, &mut models, cfg.oracle, 0).unwrap();
    let err = estimate_detections(&scene, &dets, &mut models, &cfg, &oracle).unwrap_err();
    assert!(err.is_input_error());
}
