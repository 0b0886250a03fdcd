use std::path::{Path, PathBuf};

use stegograph::autodiff::{Checkpoint, ParamStore};
use stegograph::dataset::{make_dataset, synthesize_cover, DatasetConfig, Manifest, Split, MANIFEST_FILE};
use stegograph::experiment::{
    compare, dump_graph, evaluate, evaluate_samples, iteration_count, train, train_logged, DataLoader, ExperimentConfig,
    Purpose, RunReport, CHECKPOINT_FILE, GRAPH_HEADER,
};
use stegograph::model::model_forward;
use stegograph::pgm::{read_pgm, write_pgm};
use stegograph::stego::Algorithm;
use stegograph::{GrayImage, Model, ModelKind, Tensor};

fn build_corpus(dir: &Path, covers: &[GrayImage], payload: f64, ratios: [u32; 3], seed: u64) -> PathBuf {
    let cover_dir = dir.join("covers");
    std::fs::create_dir_all(&cover_dir).unwrap();
    for (i, c) in covers.iter().enumerate() {
        write_pgm(&cover_dir.join(format!("c{i:03}.pgm")), c).unwrap();
    }
    let config = DatasetConfig {
        ratios,
        ..DatasetConfig::new(payload, Algorithm::Uniform, seed)
    };
    make_dataset(&cover_dir, &config, &dir.join("data")).unwrap();
    dir.join("data").join(MANIFEST_FILE)
}

fn synthetic(count: usize, seed: u64) -> Vec<GrayImage> {
    (0..count).map(|i| synthesize_cover(32, 32, seed * 1000 + i as u64)).collect()
}

fn tiny_config(model: ModelKind, manifest: &Path) -> ExperimentConfig {
    ExperimentConfig {
        model,
        groups: 1,
        patch_h: 16,
        patch_w: 16,
        batch_size: 4,
        epochs: 2,
        seed: 3,
        manifest: manifest.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn zero_tensor(store: &mut ParamStore<f32>, name: &str) {
    let id = store.id(name).unwrap();
    let p = store.get_mut(id);
    p.value = Tensor::zeros(p.value.shape());
}

#[test]
fn zero_head_model_sits_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = build_corpus(tmp.path(), &synthetic(100, 1), 0.4, [0, 0, 1], 1);
    let samples = DataLoader::open(&manifest).unwrap().load(Split::Test, Purpose::Report).unwrap();
    assert_eq!(samples.len(), 200);
    for (kind, head) in [(ModelKind::CnnGat, "head.fc2"), (ModelKind::Cnn, "cls.fc")] {
        let config = tiny_config(kind, &manifest).model_config(32, 32);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, config, 9).unwrap();
        zero_tensor(&mut store, &format!("{head}.w"));
        zero_tensor(&mut store, &format!("{head}.b"));
        let acc = evaluate_samples(&model, &store, &samples, 16).unwrap().accuracy();
        assert!((0.45..=0.55).contains(&acc), "{kind}: {acc}");
    }
}

#[test]
fn accuracy_equals_independent_recount() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest_path = build_corpus(tmp.path(), &synthetic(12, 2), 0.4, [0, 0, 1], 2);
    let config = tiny_config(ModelKind::CnnGat, &manifest_path).model_config(32, 32);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, config.clone(), 17).unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    Checkpoint::from_store(&store, config.to_meta()).save(&ckpt).unwrap();

    let manifest = Manifest::load(&manifest_path).unwrap();
    let mut right = 0;
    let mut total = 0;
    for e in manifest.split(Split::Test) {
        let img = read_pgm(&manifest.resolve(e)).unwrap();
        let p = model_forward(&img, &model, &store).unwrap();
        let guess = if p[1] > p[0] { 1 } else { 0 };
        right += usize::from(guess == e.role.label());
        total += 1;
    }
    let acc = evaluate(&ckpt, &manifest_path, Split::Test).unwrap();
    assert_eq!(acc, right as f64 / total as f64);
}

#[test]
fn checkpoint_round_trip_preserves_accuracy_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = build_corpus(tmp.path(), &synthetic(10, 3), 0.4, [1, 1, 1], 3);
    let config = tiny_config(ModelKind::Cnn, &manifest);
    let report = train(&config, &tmp.path().join("run")).unwrap();
    let ckpt = tmp.path().join("run").join(CHECKPOINT_FILE);
    let restored = evaluate(&ckpt, &manifest, Split::Test).unwrap();
    assert_eq!(restored.to_bits(), report.test_accuracy.to_bits());
}

#[test]
fn separable_toy_set_is_learned_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let covers = vec![GrayImage::filled(32, 32, 0); 24];
    let manifest = build_corpus(tmp.path(), &covers, 1.0, [1, 1, 1], 4);
    let config = ExperimentConfig {
        epochs: 40,
        stop_train_accuracy: Some(1.0),
        learning_rate: 5e-3,
        ..tiny_config(ModelKind::Cnn, &manifest)
    };
    let report = train(&config, &tmp.path().join("run")).unwrap();
    let acc = evaluate(&tmp.path().join("run").join(CHECKPOINT_FILE), &manifest, Split::Test).unwrap();
    assert_eq!(acc, 1.0, "report: {}", report.to_text());
}

#[test]
fn test_split_never_feeds_training_or_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest_path = build_corpus(tmp.path(), &synthetic(10, 5), 0.4, [2, 1, 2], 5);
    let config = tiny_config(ModelKind::CnnGat, &manifest_path);
    let (report, log) = train_logged(&config, &tmp.path().join("run")).unwrap();

    let manifest = Manifest::load(&manifest_path).unwrap();
    let test_paths: Vec<PathBuf> = manifest.split(Split::Test).map(|e| manifest.resolve(e)).collect();
    let first_test = log.iter().position(|a| a.split == Split::Test).unwrap();
    for (i, a) in log.iter().enumerate() {
        if a.split == Split::Test {
            assert_eq!(a.purpose, Purpose::Report);
            assert!(test_paths.contains(&a.path));
        } else {
            assert!(i < first_test, "non-test access after reporting began");
            assert!(!test_paths.contains(&a.path));
            let expected = if a.split == Split::Train { Purpose::Update } else { Purpose::Select };
            assert_eq!(a.purpose, expected);
        }
    }
    let test_reads = log.iter().filter(|a| a.split == Split::Test).count();
    assert_eq!(test_reads, test_paths.len());
    assert_eq!(report.test_images, test_paths.len());
}

#[test]
fn iteration_bookkeeping() {
    assert_eq!(iteration_count(8000, 32, 300), 75_000);
    let tmp = tempfile::tempdir().unwrap();
    let manifest = build_corpus(tmp.path(), &synthetic(9, 6), 0.4, [1, 0, 0], 6);
    let config = ExperimentConfig {
        batch_size: 4,
        epochs: 3,
        ..tiny_config(ModelKind::Cnn, &manifest)
    };
    let r = train(&config, &tmp.path().join("a")).unwrap();
    assert_eq!(r.train_images, 18);
    assert_eq!(r.iterations_planned, 12);
    assert_eq!(r.iterations_run, 12);
    assert_eq!(r.epochs.len(), 3);
    assert!(r.epochs.iter().all(|e| e.val_accuracy.is_none()));
    assert_eq!(r.best_epoch, 3);

    let capped = ExperimentConfig {
        max_iterations: 5,
        ..config
    };
    let r = train(&capped, &tmp.path().join("b")).unwrap();
    assert_eq!((r.iterations_planned, r.iterations_run, r.epochs.len()), (12, 5, 2));
}

#[test]
fn plan_that_does_not_fit_the_images_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = build_corpus(tmp.path(), &synthetic(4, 7), 0.4, [1, 0, 1], 7);
    let config = ExperimentConfig {
        patch_h: 20,
        patch_w: 20,
        ..tiny_config(ModelKind::CnnGat, &manifest)
    };
    assert!(train(&config, &tmp.path().join("run")).is_err());
    assert!(!tmp.path().join("run").join(CHECKPOINT_FILE).exists());
}

#[test]
fn compare_tabulates_evaluate_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = build_corpus(tmp.path(), &synthetic(8, 8), 0.4, [1, 1, 1], 8);
    let mut runs = Vec::new();
    for (i, kind) in [ModelKind::Cnn, ModelKind::CnnGat, ModelKind::CnnGat].into_iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        let config = ExperimentConfig {
            seed: i as u64,
            ..tiny_config(kind, &manifest)
        };
        train(&config, &dir).unwrap();
        runs.push(dir);
    }
    let table = compare(&runs).unwrap();
    assert_eq!(table.rows.len(), 2);
    let acc = |d: &PathBuf| evaluate(&d.join(CHECKPOINT_FILE), &manifest, Split::Test).unwrap();
    let cnn = table.row(ModelKind::Cnn, 1).unwrap();
    assert_eq!((cnn.runs, cnn.mean_accuracy), (1, acc(&runs[0])));
    let gat = table.row(ModelKind::CnnGat, 1).unwrap();
    assert_eq!(gat.runs, 2);
    assert!((gat.mean_accuracy - (acc(&runs[1]) + acc(&runs[2])) / 2.0).abs() < 1e-12);
    assert_eq!(gat.name, "CNN-GAT-G1-8");
    assert_eq!(table.to_csv().lines().count(), 3);
    assert!(compare(&[tmp.path().join("missing")]).is_err());
}

#[test]
fn run_report_survives_a_text_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = build_corpus(tmp.path(), &synthetic(6, 9), 0.4, [1, 1, 1], 9);
    let dir = tmp.path().join("run");
    let report = train(&tiny_config(ModelKind::CnnGat, &manifest), &dir).unwrap();
    let loaded = RunReport::load(&dir).unwrap();
    assert_eq!(loaded.to_text(), report.to_text());
    assert_eq!(loaded.wall_clock_secs, report.wall_clock_secs);
    assert!(!report.to_text().contains("wall_clock"));
}

#[test]
fn graph_dump_lists_nodes_edges_and_features() {
    let tmp = tempfile::tempdir().unwrap();
    let img = synthesize_cover(32, 32, 1);
    let config = tiny_config(ModelKind::CnnGat, Path::new("unused"));
    let out = tmp.path().join("g.txt");
    let text = dump_graph(&img, &config, None, &out).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], GRAPH_HEADER);
    assert!(lines.contains(&"nodes 9"));
    assert!(lines.contains(&"topology complete"));
    assert!(lines.contains(&"offset 0 1 1"));
    assert!(lines.contains(&"offset 8 17 17"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("edge ")).count(), 81);
    let feats = Checkpoint::load(&out.with_extension("features.ckpt")).unwrap();
    assert_eq!(feats.tensors[0].1.shape(), &[9, 8]);

    let lattice = ExperimentConfig {
        topology: stegograph::TopologyKind::Lattice,
        ..config
    };
    let text = dump_graph(&img, &lattice, None, &out).unwrap();
    // 3x3 king-move lattice: 20 undirected edges, both directions, plus 9 loops.
    assert_eq!(text.lines().filter(|l| l.starts_with("edge ")).count(), 49);
}
