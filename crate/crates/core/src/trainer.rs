//! Training loops for the backbone and the frozen-feature classifier.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{features_to_tensor, images_to_tensor, tensor_to_features, Backbone, BackboneConfig};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, BatchLoss, LossConfig};
use crate::nn::{AdamW, AdamWConfig, Module, ParamStore};
use crate::raster::Image;
use crate::sampling::{build_sample_set_with_radius, PixelSampleSet};
use crate::viewgen::{make_view_pair, TransformRanges, ViewPair};

/// Optimizer and one-cycle schedule settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// When set, `steps` is derived from the dataset size at run time.
    #[serde(default)]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub initial_lr: f64,
    pub final_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default)]
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_warmup() -> f64 {
    0.05
}

fn default_weight_decay() -> f64 {
    1e-6
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.99)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::backbone_desk()
    }
}

impl TrainConfig {
    fn one_cycle(steps: usize, batch_size: usize, peak_lr: f64, initial_lr: f64, final_lr: f64) -> Self {
        Self {
            steps,
            epochs: None,
            batch_size,
            peak_lr,
            initial_lr,
            final_lr,
            warmup_fraction: default_warmup(),
            weight_decay: default_weight_decay(),
            betas: default_betas(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Experiment-1 backbone: 30k steps, 4e-5 -> 1e-3 -> 1e-7.
    pub fn backbone_exp1() -> Self {
        Self::one_cycle(30_000, 64, 1e-3, 4e-5, 1e-7)
    }

    /// Experiment-1 classifier: 12k steps with a 2e-3 peak.
    pub fn classifier_exp1() -> Self {
        Self::one_cycle(12_000, 64, 2e-3, 8e-5, 2e-7)
    }

    /// Experiment-2 backbone: 6 epochs at batch 32, annealed to 4e-9.
    pub fn backbone_exp2() -> Self {
        Self {
            epochs: Some(6),
            ..Self::one_cycle(0, 32, 1e-3, 4e-5, 4e-9)
        }
    }

    /// Desk-scale backbone budget.
    pub fn backbone_desk() -> Self {
        Self::one_cycle(3_000, 8, 1e-3, 4e-5, 1e-7)
    }

    pub fn classifier_desk() -> Self {
        Self::one_cycle(1_000, 16, 2e-3, 8e-5, 2e-7)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Fixes `steps` for a dataset of `n` items when `epochs` is set.
    pub fn resolve(&self, n: usize) -> Self {
        match self.epochs {
            Some(e) => Self {
                steps: e * n.div_ceil(self.batch_size.max(1)),
                ..self.clone()
            },
            None => self.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.epochs {
            Some(0) => return bad("epochs must be positive".into()),
            None if self.steps == 0 => return bad("steps must be positive".into()),
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.final_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("learning rates must be positive and finite".into());
        }
        if self.initial_lr > self.peak_lr || self.final_lr > self.peak_lr {
            return bad(format!(
                "need initial ({}) <= peak ({}) and final ({}) <= peak",
                self.initial_lr, self.peak_lr, self.final_lr
            ));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0 as f32,
            beta2: self.betas.1 as f32,
            eps: 1e-8,
            weight_decay: self.weight_decay as f32,
        }
    }
}

/// Learning rate at `step`: linear warmup from `initial_lr` to `peak_lr` over
/// the first `warmup_fraction` of the run, then cosine annealing to `final_lr`
/// at `step == steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::Input(format!("step {step} outside [0, {}]", cfg.steps)));
    }
    let t = step as f64;
    let total = cfg.steps as f64;
    let warm = cfg.warmup_fraction * total;
    if t <= warm {
        if warm == 0.0 {
            return Ok(cfg.peak_lr);
        }
        return Ok(cfg.initial_lr + (cfg.peak_lr - cfg.initial_lr) * t / warm);
    }
    let progress = (t - warm) / (total - warm);
    Ok(cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// One row of the backbone metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f32,
    pub loss_within: f32,
    pub loss_between: f32,
    pub wall_time_s: f64,
}

/// One row of the classifier metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRow {
    pub step: usize,
    pub lr: f64,
    pub loss_bce: f32,
    pub wall_time_s: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Where training writes its artifacts and how it reports progress.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dir: Option<PathBuf>,
    /// Write `wall_time_s = 0` so metric files are byte-identical across runs.
    pub deterministic: bool,
    /// Print a progress line to stderr every this many steps (0 = silent).
    pub progress_every: usize,
}

impl RunOptions {
    fn elapsed(&self, start: Instant) -> f64 {
        if self.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        }
    }

    fn dump_dir(&self, stage: &str, seed: u64, step: usize) -> PathBuf {
        let name = format!("nonfinite-{stage}-step{step}");
        match &self.dir {
            Some(d) => d.join(name),
            None => std::env::temp_dir().join(format!("oxel-{seed}-{name}")),
        }
    }
}

/// Where backbone view pairs come from.
#[derive(Debug, Clone, Copy)]
pub enum PairSource<'a> {
    /// Fresh random homography pairs of each image at every draw.
    Homography { images: &'a [Image], ranges: &'a TransformRanges },
    /// Fixed pairs with known correspondences (rendered scenes).
    Prebuilt(&'a [ViewPair]),
}

impl PairSource<'_> {
    pub fn len(&self) -> usize {
        match self {
            PairSource::Homography { images, .. } => images.len(),
            PairSource::Prebuilt(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A training batch of view pairs with their pixel samples.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub indices: Vec<usize>,
    pub pairs: Vec<ViewPair>,
    pub samples: Vec<PixelSampleSet>,
}

/// Draws batches in shuffled epoch order; all randomness comes from one
/// seeded stream so batches are reproducible.
pub struct PairBatcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl PairBatcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    pub fn next(&mut self, source: &PairSource, loss: &LossConfig, batch: usize) -> Result<PairBatch> {
        if source.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let mut out = PairBatch {
            indices: Vec::with_capacity(batch),
            pairs: Vec::with_capacity(batch),
            samples: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let i = self.next_index();
            let pair = match source {
                PairSource::Homography { images, ranges } => make_view_pair(&images[i], &mut self.rng, ranges)?,
                PairSource::Prebuilt(pairs) => pairs[i].clone(),
            };
            let f = match loss.f_range {
                Some((lo, hi)) if hi > lo => self.rng.gen_range(lo..=hi),
                _ => loss.f,
            };
            out.samples.push(build_sample_set_with_radius(&pair.corr, f, loss.exclusion_radius, &mut self.rng)?);
            out.indices.push(i);
            out.pairs.push(pair);
        }
        Ok(out)
    }
}

fn batch_tensor(batch: &PairBatch) -> Result<crate::nn::Tensor> {
    let images: Vec<Image> = batch
        .pairs
        .iter()
        .map(|p| p.view1.clone())
        .chain(batch.pairs.iter().map(|p| p.view2.clone()))
        .collect();
    images_to_tensor(&images)
}

/// The loss of `batch` under `model` in evaluation mode (no dropout).
pub fn evaluate_batch_loss(model: &mut Backbone, batch: &PairBatch, loss: &LossConfig) -> Result<BatchLoss<f32>> {
    let y = model.forward(&batch_tensor(batch)?)?;
    let mut feats = tensor_to_features(&y);
    let view2 = feats.split_off(batch.pairs.len());
    batch_loss(&feats, &view2, &batch.samples, loss.lambda, loss.norm)
}

fn dump_batch(dir: &Path, batch: &PairBatch, info: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, p) in batch.pairs.iter().enumerate() {
        p.view1.save_png(dir.join(format!("pair{k:03}-view1.png")))?;
        p.view2.save_png(dir.join(format!("pair{k:03}-view2.png")))?;
        p.corr.save(dir.join(format!("pair{k:03}.oxcr")))?;
    }
    std::fs::write(dir.join("info.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

pub struct BackboneRun {
    pub model: Backbone,
    pub optimizer: AdamW,
    pub metrics: Vec<MetricRow>,
}

pub const BACKBONE_CKPT: &str = "backbone.oxck";
pub const BACKBONE_METRICS: &str = "metrics_backbone.csv";
pub const CLASSIFIER_CKPT: &str = "classifier.oxck";
pub const CLASSIFIER_METRICS: &str = "metrics_classifier.csv";

/// Trains a fresh backbone on `source` with AdamW and the one-cycle schedule.
///
/// With `opts.dir` set, writes `backbone.oxck` (+ sidecar), the metrics CSV
/// and, when `checkpoint_every > 0`, `backbone-stepN.oxck` snapshots
/// including one at step 0 before any update.
pub fn train_backbone(
    source: &PairSource,
    loss: &LossConfig,
    config: &BackboneConfig,
    train: &TrainConfig,
    opts: &RunOptions,
) -> Result<BackboneRun> {
    let train = train.resolve(source.len());
    train.validate()?;
    if train.steps == 0 {
        return Err(Error::Input("no training steps for an empty dataset".into()));
    }
    loss.validate()?;
    if loss.lambda < 1.0 && train.batch_size < 2 {
        return Err(Error::Config("the between-image term needs batch_size >= 2".into()));
    }
    let mut model = Backbone::new(config.clone(), train.seed)?;
    let mut optimizer = AdamW::new(train.adamw(), &model);
    let mut batcher = PairBatcher::new(source.len(), train.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train.seed);
    dropout_rng.set_stream(2);
    let snapshot = |model: &Backbone, opt: &AdamW, step: usize, name: &str| -> Result<()> {
        if let Some(dir) = &opts.dir {
            let meta = CheckpointMeta::new("backbone", train.seed, step as u64, model.config(), model)?;
            save_checkpoint(&dir.join(name), model, Some(opt), &meta)?;
        }
        Ok(())
    };
    if train.checkpoint_every > 0 {
        snapshot(&model, &optimizer, 0, "backbone-step0.oxck")?;
    }
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(train.steps);
    let write_metrics = |rows: &[MetricRow]| -> Result<()> {
        match &opts.dir {
            Some(dir) => write_csv(&dir.join(BACKBONE_METRICS), rows),
            None => Ok(()),
        }
    };
    for step in 0..train.steps {
        let lr = lr_at(step, &train)?;
        let batch = batcher.next(source, loss, train.batch_size)?;
        let y = model.forward_train(&batch_tensor(&batch)?, &mut dropout_rng)?;
        let mut feats = tensor_to_features(&y);
        let view2 = feats.split_off(batch.pairs.len());
        let bl = batch_loss(&feats, &view2, &batch.samples, loss.lambda, loss.norm)?;
        if !(bl.total.is_finite() && y.all_finite()) {
            write_metrics(&metrics)?;
            let dump = opts.dump_dir("backbone", train.seed, step);
            let info = serde_json::json!({
                "step": step,
                "lr": lr,
                "indices": batch.indices,
                "loss_total": bl.total.to_string(),
                "loss_within": bl.within.to_string(),
                "loss_between": bl.between.to_string(),
                "features_finite": y.all_finite(),
            });
            dump_batch(&dump, &batch, info)?;
            return Err(Error::NonFinite {
                step,
                dump: dump.display().to_string(),
            });
        }
        let grads: Vec<_> = bl.grad_view1.into_iter().chain(bl.grad_view2).collect();
        model.zero_grad();
        model.backward(&features_to_tensor(&grads)?);
        optimizer.update(&mut model, lr as f32)?;
        metrics.push(MetricRow {
            step,
            lr,
            loss_total: bl.total,
            loss_within: bl.within,
            loss_between: bl.between,
            wall_time_s: opts.elapsed(start),
        });
        if opts.progress_every > 0 && (step + 1) % opts.progress_every == 0 {
            let recent = &metrics[metrics.len().saturating_sub(opts.progress_every)..];
            let mean = recent.iter().map(|r| r.loss_total as f64).sum::<f64>() / recent.len() as f64;
            eprintln!("backbone step {}/{} lr {lr:.2e} loss {mean:.5}", step + 1, train.steps);
        }
        if train.checkpoint_every > 0 && (step + 1) % train.checkpoint_every == 0 && step + 1 < train.steps {
            snapshot(&model, &optimizer, step + 1, &format!("backbone-step{}.oxck", step + 1))?;
        }
    }
    snapshot(&model, &optimizer, train.steps, BACKBONE_CKPT)?;
    write_metrics(&metrics)?;
    Ok(BackboneRun {
        model,
        optimizer,
        metrics,
    })
}

pub struct ClassifierRun {
    pub model: Classifier,
    pub optimizer: AdamW,
    pub metrics: Vec<ClassifierRow>,
}

/// Trains a classifier on frozen backbone features with image-level BCE.
pub fn train_classifier(
    backbone: &mut Backbone,
    images: &[Image],
    labels: &[u8],
    config: &ClassifierConfig,
    train: &TrainConfig,
    opts: &RunOptions,
) -> Result<ClassifierRun> {
    let train = train.resolve(images.len());
    train.validate()?;
    config.validate()?;
    if config.feature_dim != backbone.out_channels() {
        return Err(Error::Config(format!(
            "classifier feature_dim {} does not match backbone output {}",
            config.feature_dim,
            backbone.out_channels()
        )));
    }
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Input("need one label per image and a non-empty set".into()));
    }
    let frozen = ParamStore::capture(backbone).digest();
    let mut model = Classifier::new(config.clone(), train.seed)?;
    let mut optimizer = AdamW::new(train.adamw(), &model);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut pos = order.len();
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let lr = lr_at(step, &train)?;
        let mut idx = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            idx.push(order[pos]);
            pos += 1;
        }
        let batch: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let feats = backbone.features(&batch)?;
        model.zero_grad();
        let bce = model.loss_and_backward(&feats, &y)?;
        if !bce.is_finite() {
            let dump = opts.dump_dir("classifier", train.seed, step);
            std::fs::create_dir_all(&dump)?;
            for (k, img) in batch.iter().enumerate() {
                img.save_png(dump.join(format!("image{k:03}.png")))?;
            }
            let info = serde_json::json!({ "step": step, "lr": lr, "indices": idx, "labels": y, "loss_bce": bce.to_string() });
            std::fs::write(dump.join("info.json"), serde_json::to_string_pretty(&info)?)?;
            return Err(Error::NonFinite {
                step,
                dump: dump.display().to_string(),
            });
        }
        optimizer.update(&mut model, lr as f32)?;
        metrics.push(ClassifierRow {
            step,
            lr,
            loss_bce: bce,
            wall_time_s: opts.elapsed(start),
        });
        if opts.progress_every > 0 && (step + 1) % opts.progress_every == 0 {
            let recent = &metrics[metrics.len().saturating_sub(opts.progress_every)..];
            let mean = recent.iter().map(|r| r.loss_bce as f64).sum::<f64>() / recent.len() as f64;
            eprintln!("classifier step {}/{} lr {lr:.2e} bce {mean:.5}", step + 1, train.steps);
        }
    }
    if ParamStore::capture(backbone).digest() != frozen {
        return Err(Error::Input("backbone parameters changed during classifier training".into()));
    }
    if let Some(dir) = &opts.dir {
        let meta = CheckpointMeta::new("classifier", train.seed, train.steps as u64, model.config(), &model)?;
        save_checkpoint(&dir.join(CLASSIFIER_CKPT), &model, Some(&optimizer), &meta)?;
        write_csv(&dir.join(CLASSIFIER_METRICS), &metrics)?;
    }
    Ok(ClassifierRun {
        model,
        optimizer,
        metrics,
    })
}
