//! Training, evaluation and comparison of baseline and graph models.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamState, Checkpoint, Mode, ParamStore, Tape};
use crate::cnn::{apply_running_stats, BoundCnn};
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::gat::CLASSES;
use crate::model::{predicted_label, Model, ModelConfig, ModelKind};
use crate::patch_graph::{image_to_graph, GrayImage, TopologyKind};
use crate::pgm::read_pgm;
use crate::stego::counter_hash;
use crate::tensor::{softmax_rows, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";

/// Everything a training run depends on. Serialized as flat `key = value`
/// text; absent keys keep their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub groups: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub grid_n: usize,
    pub grid_m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub topology: TopologyKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub manifest: PathBuf,
    /// Stop after this many parameter updates (0: no cap).
    pub max_iterations: usize,
    /// Stop once the eval-mode train accuracy of an epoch reaches this value.
    pub stop_train_accuracy: Option<f64>,
    /// Measure eval-mode accuracy on the whole train split after each epoch.
    pub eval_train: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::CnnGat,
            groups: 2,
            patch_h: 256,
            patch_w: 256,
            grid_n: 3,
            grid_m: 3,
            alpha: 0.5,
            beta: 0.5,
            topology: TopologyKind::Complete,
            batch_size: 32,
            epochs: 300,
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            manifest: PathBuf::from("manifest.tsv"),
            max_iterations: 0,
            stop_train_accuracy: None,
            eval_train: false,
        }
    }
}

impl ExperimentConfig {
    /// The paper-scale profile (512x512 images, 256x256 patches).
    pub fn paper() -> Self {
        Self::default()
    }

    /// Small profile for 128x128 images: 64x64 patches on a 3x3 grid.
    pub fn desk() -> Self {
        Self {
            patch_h: 64,
            patch_w: 64,
            batch_size: 8,
            epochs: 20,
            ..Self::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            writeln!(s, "{k} = {v}").expect("writing to a String cannot fail");
        }
        s
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", self.model.to_string()),
            ("groups", self.groups.to_string()),
            ("patch_h", self.patch_h.to_string()),
            ("patch_w", self.patch_w.to_string()),
            ("grid_n", self.grid_n.to_string()),
            ("grid_m", self.grid_m.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("topology", self.topology.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("seed", self.seed.to_string()),
            ("manifest", self.manifest.display().to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            (
                "stop_train_accuracy",
                self.stop_train_accuracy.map_or_else(|| "none".into(), |v| v.to_string()),
            ),
            ("eval_train", self.eval_train.to_string()),
        ]
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("line {}: {k}: {e}", no + 1));
            macro_rules! num {
                () => {
                    v.parse().map_err(|e| bad(&e))?
                };
            }
            match k {
                "model" => c.model = v.parse()?,
                "groups" => c.groups = num!(),
                "patch_h" => c.patch_h = num!(),
                "patch_w" => c.patch_w = num!(),
                "grid_n" => c.grid_n = num!(),
                "grid_m" => c.grid_m = num!(),
                "alpha" => c.alpha = num!(),
                "beta" => c.beta = num!(),
                "topology" => c.topology = v.parse()?,
                "batch_size" => c.batch_size = num!(),
                "epochs" => c.epochs = num!(),
                "learning_rate" => c.learning_rate = num!(),
                "beta1" => c.beta1 = num!(),
                "beta2" => c.beta2 = num!(),
                "seed" => c.seed = num!(),
                "manifest" => c.manifest = PathBuf::from(v),
                "max_iterations" => c.max_iterations = num!(),
                "stop_train_accuracy" => {
                    c.stop_train_accuracy = if v == "none" { None } else { Some(num!()) }
                }
                "eval_train" => c.eval_train = num!(),
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", no + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Read a config file; a relative manifest path is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        if c.manifest.is_relative() {
            c.manifest = path.parent().unwrap_or(Path::new(".")).join(&c.manifest);
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, image_h: usize, image_w: usize) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            groups: self.groups,
            image_h,
            image_w,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            grid_n: self.grid_n,
            grid_m: self.grid_m,
            alpha: self.alpha,
            beta: self.beta,
            topology: self.topology,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Parameter updates of a full run: `floor(train_size / batch) * epochs`.
pub fn iteration_count(train_size: usize, batch_size: usize, epochs: usize) -> usize {
    (train_size / batch_size) * epochs
}

/// Why an image was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Parameter updates and train-split monitoring.
    Update,
    /// Checkpoint selection.
    Select,
    /// Final reporting.
    Report,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Access {
    pub path: PathBuf,
    pub split: Split,
    pub purpose: Purpose,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: GrayImage,
    /// 0 for cover, 1 for stego.
    pub label: usize,
}

/// Manifest-backed image loader that records every read.
#[derive(Debug)]
pub struct DataLoader {
    manifest: Manifest,
    log: Vec<Access>,
}

impl DataLoader {
    pub fn new(manifest: Manifest) -> Self {
        Self {
            manifest,
            log: Vec::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(Manifest::load(path)?))
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn load(&mut self, split: Split, purpose: Purpose) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for e in self.manifest.split(split) {
            let path = self.manifest.resolve(e);
            out.push(Sample {
                image: read_pgm(&path)?,
                label: e.role.label(),
            });
            self.log.push(Access {
                path,
                split,
                purpose,
            });
        }
        Ok(out)
    }

    pub fn access_log(&self) -> &[Access] {
        &self.log
    }
}

/// Predictions of a model over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn correct(&self) -> usize {
        self.predictions.iter().zip(&self.labels).filter(|(p, l)| p == l).count()
    }

    /// Fraction classified correctly; 0 for an empty set.
    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.correct() as f64 / self.labels.len() as f64
        }
    }
}

/// Eval-mode predictions in chunks of `batch` images.
pub fn evaluate_samples(model: &Model, store: &ParamStore<f32>, samples: &[Sample], batch: usize) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        predictions.extend(model.predict(store, &images)?.iter().map(predicted_label));
    }
    Ok(Evaluation {
        predictions,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

/// A trained model restored from a checkpoint.
pub struct LoadedModel {
    pub model: Model,
    pub store: ParamStore<f32>,
}

pub fn load_model(checkpoint: &Path) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = ModelConfig::from_meta(&ckpt.meta)?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, config, 0)?;
    ckpt.load_into(&mut store)?;
    Ok(LoadedModel { model, store })
}

/// Detection accuracy of a checkpoint on one split of a manifest.
pub fn evaluate(checkpoint: &Path, manifest: &Path, split: Split) -> Result<f64> {
    let loaded = load_model(checkpoint)?;
    let mut loader = DataLoader::open(manifest)?;
    let samples = loader.load(split, Purpose::Report)?;
    if samples.is_empty() {
        return Err(Error::Manifest(format!("split {split} is empty")));
    }
    Ok(evaluate_samples(&loaded.model, &loaded.store, &samples, 32)?.accuracy())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// Train-mode accuracy over the epoch's batches.
    pub train_accuracy: f64,
    /// Eval-mode accuracy on the whole train split, when requested.
    pub train_eval_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub model_name: String,
    pub image_h: usize,
    pub image_w: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub iterations_planned: usize,
    pub iterations_run: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
    /// Kept out of [`RunReport::to_text`] so reports of equal runs are identical.
    pub wall_clock_secs: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("[config]\n");
        s.push_str(&self.config.to_text());
        s.push_str("[result]\n");
        for (k, v) in [
            ("model_name", self.model_name.clone()),
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("train_images", self.train_images.to_string()),
            ("val_images", self.val_images.to_string()),
            ("test_images", self.test_images.to_string()),
            ("iterations_planned", self.iterations_planned.to_string()),
            ("iterations_run", self.iterations_run.to_string()),
            ("best_epoch", self.best_epoch.to_string()),
            ("test_accuracy", self.test_accuracy.to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
        ] {
            writeln!(s, "{k} = {v}").expect("writing to a String cannot fail");
        }
        s.push_str("[epochs]\nepoch iterations train_loss train_accuracy train_eval_accuracy val_accuracy\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{} {} {} {} {} {}",
                e.epoch,
                e.iterations,
                e.train_loss,
                e.train_accuracy,
                opt(e.train_eval_accuracy),
                opt(e.val_accuracy)
            )
            .expect("writing to a String cannot fail");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("run report: {what}"));
        let mut section = "";
        let (mut config, mut result, mut rows) = (String::new(), BTreeMap::new(), Vec::new());
        for line in text.lines() {
            match line {
                "[config]" | "[result]" | "[epochs]" => section = line,
                _ if section == "[config]" => {
                    config.push_str(line);
                    config.push('\n');
                }
                _ if section == "[result]" => {
                    let (k, v) = line.split_once(" = ").ok_or_else(|| bad(line))?;
                    result.insert(k.to_string(), v.to_string());
                }
                _ if section == "[epochs]" && !line.starts_with("epoch ") => rows.push(line.to_string()),
                _ => {}
            }
        }
        let get = |k: &str| result.get(k).ok_or_else(|| bad(&format!("missing {k}")));
        macro_rules! num {
            ($k:expr) => {
                get($k)?.parse().map_err(|_| bad($k))?
            };
        }
        let parse_opt = |v: &str| -> Result<Option<f64>> {
            if v == "-" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad("epoch row"))
            }
        };
        let mut epochs = Vec::new();
        for row in rows {
            let f: Vec<&str> = row.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad("epoch row"));
            }
            epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("epoch row"))?,
                iterations: f[1].parse().map_err(|_| bad("epoch row"))?,
                train_loss: f[2].parse().map_err(|_| bad("epoch row"))?,
                train_accuracy: f[3].parse().map_err(|_| bad("epoch row"))?,
                train_eval_accuracy: parse_opt(f[4])?,
                val_accuracy: parse_opt(f[5])?,
            });
        }
        Ok(Self {
            config: ExperimentConfig::parse(&config)?,
            model_name: get("model_name")?.clone(),
            image_h: num!("image_h"),
            image_w: num!("image_w"),
            train_images: num!("train_images"),
            val_images: num!("val_images"),
            test_images: num!("test_images"),
            iterations_planned: num!("iterations_planned"),
            iterations_run: num!("iterations_run"),
            epochs,
            best_epoch: num!("best_epoch"),
            test_accuracy: num!("test_accuracy"),
            checkpoint: PathBuf::from(get("checkpoint")?),
            wall_clock_secs: 0.0,
        })
    }

    /// Read `report.txt` (and `timing.txt` when present) from a run directory.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut r = Self::parse(&text)?;
        if let Ok(t) = std::fs::read_to_string(run_dir.join(TIMING_FILE)) {
            r.wall_clock_secs = t
                .trim()
                .strip_prefix("wall_clock_secs = ")
                .and_then(|v| v.parse().ok())
                .unwrap_or(0.0);
        }
        Ok(r)
    }
}

fn image_dims(samples: &[Sample]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Manifest("train split is empty".into()))?;
    let dims = (first.image.height(), first.image.width());
    if samples.iter().any(|s| (s.image.height(), s.image.width()) != dims) {
        return Err(Error::Manifest("images in the corpus differ in size".into()));
    }
    Ok(dims)
}

/// Train a model, writing `checkpoint.ckpt`, `report.txt` and `timing.txt`
/// into `out_dir`.
pub fn train(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    Ok(train_logged(config, out_dir)?.0)
}

/// [`train`] that also returns the loader's access log.
pub fn train_logged(config: &ExperimentConfig, out_dir: &Path) -> Result<(RunReport, Vec<Access>)> {
    config.validate()?;
    let started = Instant::now();
    let mut loader = DataLoader::open(&config.manifest)?;
    let train_set = loader.load(Split::Train, Purpose::Update)?;
    let val_set = loader.load(Split::Val, Purpose::Select)?;
    let (image_h, image_w) = image_dims(&train_set)?;
    if val_set.iter().any(|s| (s.image.height(), s.image.width()) != (image_h, image_w)) {
        return Err(Error::Manifest("validation images differ in size from training images".into()));
    }
    let model_config = config.model_config(image_h, image_w);
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, model_config.clone(), config.seed)?;
    let mut adam = AdamState::new(&store, config.adam());

    let per_epoch = train_set.len() / config.batch_size;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training images",
            config.batch_size,
            train_set.len()
        )));
    }
    let planned = iteration_count(train_set.len(), config.batch_size, config.epochs);
    let cap = if config.max_iterations == 0 { planned } else { planned.min(config.max_iterations) };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(counter_hash(config.seed, 1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let meta = model_config.to_meta();

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut iterations = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0, 0, 0);
        for batch in order.chunks_exact(config.batch_size) {
            if iterations >= cap {
                break;
            }
            let images: Vec<&GrayImage> = batch.iter().map(|&i| &train_set[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set[i].label).collect();
            let mut tape = Tape::new();
            let pass = model.logits(&mut tape, &store, model.prepare(&images)?, Mode::Train, None)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            loss_sum += tape.value(loss).data()[0] as f64;
            let probs = softmax_rows(tape.value(pass.logits).data(), CLASSES);
            correct += probs
                .chunks(CLASSES)
                .zip(&labels)
                .filter(|(p, &l)| predicted_label(&[p[0], p[1]]) == l)
                .count();
            seen += labels.len();
            tape.backward_into(loss, &mut store)?;
            adam.step(&mut store);
            apply_running_stats(&mut store, &pass.pending);
            iterations += 1;
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        let train_eval = if config.eval_train || config.stop_train_accuracy.is_some() {
            Some(evaluate_samples(&model, &store, &train_set, config.batch_size)?.accuracy())
        } else {
            None
        };
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_samples(&model, &store, &val_set, config.batch_size)?.accuracy())
        };
        records.push(EpochRecord {
            epoch,
            iterations,
            train_loss: loss_sum / steps as f64,
            train_accuracy: correct as f64 / seen as f64,
            train_eval_accuracy: train_eval,
            val_accuracy: val,
        });
        // Strictly better validation accuracy wins, so ties keep the earliest
        // epoch; without a validation split the latest epoch is kept.
        let score = val.unwrap_or(f64::NEG_INFINITY);
        if val.is_none() || best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, Checkpoint::from_store(&store, meta.clone())));
        }
        if matches!((config.stop_train_accuracy, train_eval), (Some(t), Some(a)) if a >= t) {
            break;
        }
    }
    let (_, best_epoch, ckpt) = best.ok_or_else(|| Error::Config("no training iterations were run".into()))?;
    std::fs::create_dir_all(out_dir)?;
    ckpt.save(&out_dir.join(CHECKPOINT_FILE))?;
    ckpt.load_into(&mut store)?;

    let test_set = loader.load(Split::Test, Purpose::Report)?;
    let test_accuracy = if test_set.is_empty() {
        0.0
    } else {
        evaluate_samples(&model, &store, &test_set, config.batch_size)?.accuracy()
    };
    let report = RunReport {
        config: config.clone(),
        model_name: model_config.name(),
        image_h,
        image_w,
        train_images: train_set.len(),
        val_images: val_set.len(),
        test_images: test_set.len(),
        iterations_planned: planned,
        iterations_run: iterations,
        epochs: records,
        best_epoch,
        test_accuracy,
        checkpoint: PathBuf::from(CHECKPOINT_FILE),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::write(out_dir.join(REPORT_FILE), report.to_text())?;
    std::fs::write(out_dir.join(TIMING_FILE), format!("wall_clock_secs = {}\n", report.wall_clock_secs))?;
    Ok((report, loader.log))
}

/// One row per (model kind, group count); repeated runs are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: ModelKind,
    pub groups: usize,
    pub name: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    const HEADER: [&'static str; 7] = ["model", "groups", "name", "runs", "mean_accuracy", "min_accuracy", "max_accuracy"];

    fn cells(&self) -> Vec<[String; 7]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.model.to_string(),
                    r.groups.to_string(),
                    r.name.clone(),
                    r.runs.to_string(),
                    format!("{:.4}", r.mean_accuracy),
                    format!("{:.4}", r.min_accuracy),
                    format!("{:.4}", r.max_accuracy),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::HEADER.join(",");
        s.push('\n');
        for c in self.cells() {
            s.push_str(&c.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..Self::HEADER.len())
            .map(|i| cells.iter().map(|c| c[i].len()).chain([Self::HEADER[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |row: &[String]| {
            row.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut s = line(&Self::HEADER.map(String::from));
        s.push('\n');
        for c in &cells {
            s.push_str(&line(c));
            s.push('\n');
        }
        s
    }

    pub fn row(&self, model: ModelKind, groups: usize) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model && r.groups == groups)
    }
}

/// Tabulate test accuracy against group count from finished run directories.
pub fn compare(run_dirs: &[PathBuf]) -> Result<ComparisonTable> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no runs given".into()));
    }
    let mut groups: BTreeMap<(ModelKind, usize), (String, Vec<f64>)> = BTreeMap::new();
    for dir in run_dirs {
        let r = RunReport::load(dir)?;
        groups
            .entry((r.config.model, r.config.groups))
            .or_insert_with(|| (r.model_name.clone(), Vec::new()))
            .1
            .push(r.test_accuracy);
    }
    let rows = groups
        .into_iter()
        .map(|((model, groups), (name, accs))| ComparisonRow {
            model,
            groups,
            name,
            runs: accs.len(),
            mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            min_accuracy: accs.iter().copied().fold(f64::INFINITY, f64::min),
            max_accuracy: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    Ok(ComparisonTable { rows })
}

pub const GRAPH_HEADER: &str = "STEGOGRAPH-GRAPH-1";

/// Graph of one image as text (node count, topology, 1-based offsets,
/// edge list), with the node features saved next to it as a checkpoint.
///
/// Features come from the checkpoint's CNN when given, otherwise from a CNN
/// initialized with the config's seed.
pub fn dump_graph(image: &GrayImage, config: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<String> {
    let model_config = ModelConfig {
        kind: ModelKind::CnnGat,
        ..config.model_config(image.height(), image.width())
    };
    let (model, store) = match checkpoint {
        Some(path) => {
            let loaded = load_model(path)?;
            (loaded.model, loaded.store)
        }
        None => {
            let mut store = ParamStore::new();
            (Model::new(&mut store, model_config.clone(), config.seed)?, store)
        }
    };
    let plan = model_config.plan()?;
    let extractor = BoundCnn {
        cnn: &model.cnn,
        store: &store,
    };
    let (topology, features) = image_to_graph(image, &plan, config.topology, &extractor)?;
    let features_path = out.with_extension("features.ckpt");
    let feats = Tensor::new(
        &[features.rows, features.dim],
        features.values.iter().map(|&v| v as f32).collect(),
    )?;
    Checkpoint {
        meta: vec![("content".into(), "node-features".into())],
        tensors: vec![("features".into(), feats)],
    }
    .save(&features_path)?;
    let mut s = format!("{GRAPH_HEADER}\n");
    writeln!(s, "nodes {}", topology.node_count()).ok();
    writeln!(s, "topology {}", config.topology).ok();
    writeln!(s, "grid {} {}", plan.n, plan.m).ok();
    writeln!(s, "patch {} {}", plan.patch_h, plan.patch_w).ok();
    writeln!(s, "feature_dim {}", features.dim).ok();
    writeln!(
        s,
        "features {}",
        features_path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    )
    .ok();
    for (i, (r, c)) in plan.offsets().iter().enumerate() {
        writeln!(s, "offset {i} {r} {c}").ok();
    }
    let n = topology.node_count();
    for i in 0..n {
        for j in 0..n {
            if topology.has_edge(i, j) {
                writeln!(s, "edge {i} {j}").ok();
            }
        }
    }
    std::fs::write(out, &s)?;
    Ok(s)
}
