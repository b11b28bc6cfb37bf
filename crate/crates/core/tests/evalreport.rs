use std::path::{Path, PathBuf};

use pin_core::dataset::Split;
use pin_core::evalreport::{
    localisation_error, run_ablation, run_single_vs_multi, AblationCheckpoints, EvalError, EvalOptions,
};
use pin_core::kv::KvMap;
use pin_core::phantom::{generate_dataset, PhantomConfig};
use pin_core::pinfer::{infer_single, NetworkPredictor, Rule};
use pin_core::pinnet::{save_checkpoint, Checkpoint, ModelMode, Network, NetworkConfig};
use pin_core::seeding::stream;
use pin_core::shapemodel::ShapeModel;

fn tiny_data(dir: &Path) -> pin_core::dataset::Manifest {
    let cfg = PhantomConfig { dims: [24, 24, 24], translation_range: 2.0, ..PhantomConfig::default() };
    generate_dataset(&cfg, 7, dir).unwrap()
}

fn tiny_net(channels: usize, n_o: usize, seed: u64) -> Network<f32> {
    let cfg = NetworkConfig {
        input_side: 33,
        input_channels: channels,
        conv_channels: vec![2; 5],
        fc_widths: vec![4, 4],
        n_o,
        dropout_rate: 0.0,
    };
    Network::init(cfg, 0.1, &mut stream(seed, 0)).unwrap()
}

fn save(dir: &Path, name: &str, net: Network<f32>, mode: ModelMode, alpha: f64) -> PathBuf {
    let mut extra = KvMap::new();
    extra.set("alpha", alpha);
    let path = dir.join(name);
    save_checkpoint(&Checkpoint::new(net, mode, &extra), &path).unwrap();
    path
}

fn quick() -> EvalOptions {
    EvalOptions { iterations_a: 12, runtime_repeats: 1, ..EvalOptions::default() }
}

#[test]
fn error_metric_examples() {
    assert_eq!(localisation_error([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.5; 3]), 0.0);
    assert!((localisation_error([0.0; 3], [3.0, 4.0, 0.0], [0.5; 3]) - 2.5).abs() < 1e-12);
    let (a, b) = ([0.3, -1.0, 7.5], [2.0, 4.25, -3.0]);
    assert_eq!(localisation_error(a, b, [0.5, 0.7, 1.1]), localisation_error(b, a, [0.5, 0.7, 1.1]));
}

#[test]
fn ablation_has_five_variants_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_data(&dir.path().join("data"));
    let single = ModelMode::Single { landmark: 2 };
    let checkpoints = AblationCheckpoints {
        classification: Some(save(dir.path(), "c.pinc", tiny_net(3, 3, 1), single, 1.0)),
        regression: Some(save(dir.path(), "r.pinc", tiny_net(3, 3, 2), single, 0.0)),
        joint: Some(save(dir.path(), "j.pinc", tiny_net(3, 3, 3), single, 0.5)),
    };
    let first = run_ablation(&manifest, &checkpoints, &quick()).unwrap();
    let second = run_ablation(&manifest, &checkpoints, &quick()).unwrap();

    let names: Vec<&str> = first.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["PIN1", "PIN2", "PIN3", "PIN4", "PIN5"]);
    let rules: Vec<Rule> = first.rows.iter().map(|r| r.rule).collect();
    assert_eq!(rules, [Rule::A, Rule::B, Rule::A, Rule::B, Rule::C]);
    for (a, b) in first.rows.iter().zip(&second.rows) {
        assert_eq!(a.result.errors_mm, b.result.errors_mm);
        assert_eq!(a.result.overall, b.result.overall);
        assert!(a.result.runtime_s > 0.0);
    }

    // Independent recomputation of the PIN5 cells.
    let joint = pin_core::pinnet::load_checkpoint(checkpoints.joint.as_ref().unwrap()).unwrap();
    let pred = NetworkPredictor { network: &joint.network, shape_model: None };
    let cases = manifest.load(Split::Test).unwrap();
    let cfg = quick().inference(Rule::C);
    let mut flat = Vec::new();
    for (case, row) in cases.iter().zip(&first.rows[4].result.errors_mm) {
        let p = infer_single(&pred, &case.volume, &cfg, None).unwrap().landmark;
        let g = case.landmarks.points()[2];
        let sp = case.volume.spacing();
        let e = ((0..3).map(|a| ((p[a] - g[a]) * sp[a] as f64).powi(2)).sum::<f64>()).sqrt();
        assert!((row[0] - e).abs() < 1e-12);
        flat.push(e);
    }
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    assert!((first.rows[4].result.overall.0 - mean).abs() < 1e-9);

    let out = dir.path().join("results");
    first.write(&out).unwrap();
    let md = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    for label in ["Training loss", "Inference rule", "Localisation error (mm)", "Runtime (s)"] {
        assert!(md.contains(label));
    }
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 6);
}

#[test]
fn missing_or_mislabelled_checkpoint_names_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_data(&dir.path().join("data"));
    let single = ModelMode::Single { landmark: 0 };
    let joint = save(dir.path(), "j.pinc", tiny_net(3, 3, 3), single, 0.5);
    let missing = AblationCheckpoints { classification: None, regression: Some(joint.clone()), joint: Some(joint.clone()) };
    match run_ablation(&manifest, &missing, &quick()) {
        Err(EvalError::Checkpoint { variant, .. }) => assert_eq!(variant, "PIN1"),
        other => panic!("unexpected {other:?}"),
    }
    let wrong_alpha = AblationCheckpoints {
        classification: Some(joint.clone()),
        regression: Some(joint.clone()),
        joint: Some(joint),
    };
    assert!(matches!(run_ablation(&manifest, &wrong_alpha, &quick()), Err(EvalError::Checkpoint { .. })));
}

#[test]
fn single_vs_multi_table_layout_and_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_data(&dir.path().join("data"));
    let shapes: Vec<Vec<f64>> =
        manifest.load(Split::Train).unwrap().iter().map(|c| c.landmarks.flatten()).collect();
    let model = ShapeModel::fit(&shapes, 0.995).unwrap();
    let singles: Vec<PathBuf> = (0..10)
        .map(|l| save(dir.path(), &format!("s{l}.pinc"), tiny_net(3, 3, 10 + l as u64), ModelMode::Single { landmark: l }, 0.5))
        .collect();
    let multi = save(dir.path(), "m.pinc", tiny_net(30, model.n_b(), 99), ModelMode::Multi, 0.5);
    let table = run_single_vs_multi(&manifest, &singles, &multi, &model, &quick()).unwrap();

    for r in [&table.single, &table.multi] {
        assert_eq!(r.per_landmark.len(), 10);
        let flat: Vec<f64> = r.errors_mm.iter().flatten().copied().collect();
        assert!(flat.iter().all(|e| *e >= 0.0));
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!((r.overall.0 - mean).abs() < 1e-9);
    }
    let md = table.to_markdown();
    let header = md.lines().find(|l| l.starts_with("| Landmarks")).unwrap();
    assert_eq!(header.matches(" L").count(), 10 + 1);
    assert!(header.contains("Overall"));

    let err = run_single_vs_multi(&manifest, &singles[..9], &multi, &model, &quick());
    assert!(matches!(err, Err(EvalError::Mismatch(_))));
}
