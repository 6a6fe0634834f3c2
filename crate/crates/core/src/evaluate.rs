//! Accuracy, nearest-neighbor matching, channel sharpness and sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::classifier::{image_logit, Classifier, ClassifierConfig};
use crate::coloredmnist::{ColoredMnist, ColoredSample};
use crate::correspondence::CorrespondenceMap;
use crate::error::{Error, Result};
use crate::loss::{FeatureMap, LossConfig, Norm};
use crate::raster::Image;
use crate::sampling::Pixel;
use crate::trainer::{train_backbone, train_classifier, write_csv, PairSource, RunOptions, TrainConfig};
use crate::viewgen::TransformRanges;

/// The seven λ values of the sweep.
pub const LAMBDA_GRID: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

const EVAL_BATCH: usize = 32;

/// Hard prediction from an image logit: `sigmoid(z) >= 0.5`, ties to 1.
pub fn predict(logit: f32) -> u8 {
    u8::from(logit >= 0.0)
}

/// Fraction of `labels` matched by the classifier's hard predictions.
pub fn accuracy(classifier: &mut Classifier, backbone: &mut Backbone, images: &[Image], labels: &[u8]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Shape("one label per image required".into()));
    }
    let mut correct = 0usize;
    for (chunk, ys) in images.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let feats = backbone.features(chunk)?;
        let logits = classifier.pixel_logits(&feats)?;
        correct += logits.iter().zip(ys).filter(|(l, &y)| predict(image_logit(l)) == y).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Accuracy of a per-sample rule against the noisy labels.
pub fn oracle_accuracy(samples: &[ColoredSample], oracle: impl Fn(&ColoredSample) -> u8) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    let hits = samples.iter().filter(|s| oracle(s) == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

pub fn split_images(samples: &[ColoredSample]) -> (Vec<Image>, Vec<u8>) {
    (samples.iter().map(ColoredSample::image).collect(), samples.iter().map(|s| s.label).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub source_row: usize,
    pub source_col: usize,
    pub match_row: usize,
    pub match_col: usize,
    pub feature_distance: f64,
    /// Ground-truth target, when a valid correspondence is known.
    pub truth_row: Option<usize>,
    pub truth_col: Option<usize>,
    /// Euclidean pixel distance from the match to the ground truth.
    pub pixel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub records: Vec<MatchRecord>,
}

pub const REPORT_RADII: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 5.0, 8.0];

impl MatchReport {
    /// Fraction of records with ground truth whose error is at most `radius`.
    pub fn precision_at(&self, radius: f64) -> f64 {
        let errs: Vec<f64> = self.records.iter().filter_map(|r| r.pixel_error).collect();
        if errs.is_empty() {
            return 0.0;
        }
        errs.iter().filter(|&&e| e <= radius).count() as f64 / errs.len() as f64
    }

    pub fn precision_table(&self) -> Vec<(f64, f64)> {
        REPORT_RADII.iter().map(|&r| (r, self.precision_at(r))).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.records)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum()
}

/// Exhaustive ℓ2 nearest neighbor in `target` for each source pixel. Ties go
/// to the first target pixel in row-major order.
pub fn match_features(
    source: &FeatureMap,
    target: &FeatureMap,
    pixels: &[Pixel],
    corr: Option<&CorrespondenceMap>,
) -> Result<MatchReport> {
    if source.depth() != target.depth() {
        return Err(Error::Shape(format!("feature depths differ: {} vs {}", source.depth(), target.depth())));
    }
    let (h, w) = (target.height(), target.width());
    let mut records = Vec::with_capacity(pixels.len());
    for &(r, c) in pixels {
        if r >= source.height() || c >= source.width() {
            return Err(Error::Input(format!("source pixel ({r}, {c}) outside the map")));
        }
        let f = source.pixel(r, c);
        let mut best = (0, 0, f64::INFINITY);
        for tr in 0..h {
            for tc in 0..w {
                let d = sq_dist(f, target.pixel(tr, tc));
                if d < best.2 {
                    best = (tr, tc, d);
                }
            }
        }
        let truth = corr.and_then(|m| m.valid_target(r, c));
        let pixel_error = truth.map(|(gr, gc)| {
            let (dr, dc) = (best.0 as f64 - gr as f64, best.1 as f64 - gc as f64);
            (dr * dr + dc * dc).sqrt()
        });
        records.push(MatchRecord {
            source_row: r,
            source_col: c,
            match_row: best.0,
            match_col: best.1,
            feature_distance: best.2.sqrt(),
            truth_row: truth.map(|t| t.0),
            truth_col: truth.map(|t| t.1),
            pixel_error,
        });
    }
    Ok(MatchReport { records })
}

/// Band around each 2-means center counted as "sharp".
pub const SHARPNESS_BAND: f64 = 0.1;

/// Exact 1-D 2-means centers (the optimal split of the sorted values).
/// Returns `None` when all values coincide.
pub fn two_means(values: &[f64]) -> Option<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n < 2 || v[0] == v[n - 1] {
        return None;
    }
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + v[i];
        prefix_sq[i + 1] = prefix_sq[i] + v[i] * v[i];
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        prefix_sq[b] - prefix_sq[a] - s * s / m
    };
    let mut best = (f64::INFINITY, 1);
    for k in 1..n {
        if v[k] == v[k - 1] {
            continue;
        }
        let cost = sse(0, k) + sse(k, n);
        if cost < best.0 {
            best = (cost, k);
        }
    }
    let k = best.1;
    Some((prefix[k] / k as f64, (prefix[n] - prefix[k]) / (n - k) as f64))
}

/// Per channel, the fraction of pixels within [`SHARPNESS_BAND`] of one of
/// the channel's two 2-means centers. Constant channels score 1.
pub fn channel_sharpness(f: &FeatureMap) -> Vec<f64> {
    let d = f.depth();
    let n = f.height() * f.width();
    (0..d)
        .map(|ch| {
            let vals: Vec<f64> = f.as_slice().chunks_exact(d).map(|px| px[ch] as f64).collect();
            match two_means(&vals) {
                None => 1.0,
                Some((a, b)) => {
                    let near = vals
                        .iter()
                        .filter(|&&x| (x - a).abs() <= SHARPNESS_BAND || (x - b).abs() <= SHARPNESS_BAND)
                        .count();
                    near as f64 / n as f64
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub lambda: f64,
    pub norm: Norm,
    pub d: usize,
    pub seed: u64,
    pub id_accuracy: f64,
    pub ood_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub norm: Norm,
    pub d: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub lambda: f64,
    pub norm: Norm,
    pub d: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub norms: Vec<Norm>,
    pub dims: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambdas: LAMBDA_GRID.to_vec(),
            norms: vec![Norm::Inf],
            dims: vec![32],
            seeds: (0..10).collect(),
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &norm in &self.norms {
            for &lambda in &self.lambdas {
                for &d in &self.dims {
                    for &seed in &self.seeds {
                        out.push(SweepCell { lambda, norm, d, seed });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOutcome {
    pub results: Vec<SweepResult>,
    pub failures: Vec<SweepFailure>,
}

#[derive(Serialize)]
struct ViolinRow {
    lambda: f64,
    norm: Norm,
    d: usize,
    seed: u64,
    split: &'static str,
    accuracy: f64,
}

/// Runs every cell in order; a failing cell is recorded and skipped.
/// With `out_dir`, writes `sweep_results.csv`, `sweep_failures.csv` and the
/// long-format `violin_data.csv`.
pub fn run_sweep(
    grid: &SweepGrid,
    mut run_cell: impl FnMut(&SweepCell) -> Result<SweepResult>,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut outcome = SweepOutcome::default();
    for cell in &cells {
        match run_cell(cell) {
            Ok(r) => outcome.results.push(r),
            Err(e) => outcome.failures.push(SweepFailure {
                lambda: cell.lambda,
                norm: cell.norm,
                d: cell.d,
                seed: cell.seed,
                error: e.to_string(),
            }),
        }
    }
    if let Some(dir) = out_dir {
        write_csv(&dir.join("sweep_results.csv"), &outcome.results)?;
        write_csv(&dir.join("sweep_failures.csv"), &outcome.failures)?;
        let violins: Vec<ViolinRow> = outcome
            .results
            .iter()
            .flat_map(|r| {
                [("id", r.id_accuracy), ("ood", r.ood_accuracy)].map(|(split, accuracy)| ViolinRow {
                    lambda: r.lambda,
                    norm: r.norm,
                    d: r.d,
                    seed: r.seed,
                    split,
                    accuracy,
                })
            })
            .collect();
        write_csv(&dir.join("violin_data.csv"), &violins)?;
    }
    Ok(outcome)
}

/// Budgets and knobs for one ColoredMNIST backbone + classifier run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp1Plan {
    pub backbone: BackboneConfig,
    pub backbone_train: TrainConfig,
    pub classifier_train: TrainConfig,
    #[serde(default)]
    pub ranges: TransformRanges,
    pub loss: LossConfig,
    /// Cap on test images scored per split (`None` = all).
    #[serde(default)]
    pub eval_limit: Option<usize>,
}

/// Everything a finished ColoredMNIST run produces.
pub struct Exp1Run {
    pub result: SweepResult,
    pub backbone: Backbone,
    pub classifier: Classifier,
    pub backbone_losses: Vec<f32>,
}

/// Trains a backbone and a classifier for one `(λ, norm, seed)` and scores
/// both test splits against the noisy labels.
pub fn run_colored_mnist(data: &ColoredMnist, plan: &Exp1Plan, seed: u64, opts: &RunOptions) -> Result<Exp1Run> {
    let (train_images, train_labels) = split_images(&data.train);
    let source = PairSource::Homography {
        images: &train_images,
        ranges: &plan.ranges,
    };
    let bb = train_backbone(&source, &plan.loss, &plan.backbone, &plan.backbone_train.clone().with_seed(seed), opts)?;
    let mut backbone = bb.model;
    let cls_cfg = ClassifierConfig::new(plan.backbone.out_channels);
    let cls = train_classifier(
        &mut backbone,
        &train_images,
        &train_labels,
        &cls_cfg,
        &plan.classifier_train.clone().with_seed(seed),
        opts,
    )?;
    let mut classifier = cls.model;
    let limit = |s: &[ColoredSample]| s.len().min(plan.eval_limit.unwrap_or(usize::MAX));
    let (id_x, id_y) = split_images(&data.test_id[..limit(&data.test_id)]);
    let (ood_x, ood_y) = split_images(&data.test_ood[..limit(&data.test_ood)]);
    let id_accuracy = accuracy(&mut classifier, &mut backbone, &id_x, &id_y)?;
    let ood_accuracy = accuracy(&mut classifier, &mut backbone, &ood_x, &ood_y)?;
    let losses: Vec<f32> = bb.metrics.iter().map(|r| r.loss_total).collect();
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len() as f64;
    Ok(Exp1Run {
        result: SweepResult {
            lambda: plan.loss.lambda,
            norm: plan.loss.norm,
            d: plan.backbone.out_channels,
            seed,
            id_accuracy,
            ood_accuracy,
            final_loss,
        },
        backbone,
        classifier,
        backbone_losses: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut impl Rng, h: usize, w: usize, d: usize) -> FeatureMap {
        FeatureMap::from_vec(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn all_pixels(h: usize, w: usize) -> Vec<Pixel> {
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect()
    }

    #[test]
    fn self_match_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_map(&mut rng, 8, 8, 6);
        let id = CorrespondenceMap::identity(8, 8);
        let rep = match_features(&f, &f, &all_pixels(8, 8), Some(&id)).unwrap();
        assert_eq!(rep.precision_at(0.0), 1.0);
    }

    #[test]
    fn constant_maps_tie_to_origin() {
        let f = FeatureMap::from_vec(4, 5, 4, vec![0.3; 80]).unwrap();
        let rep = match_features(&f, &f, &all_pixels(4, 5), None).unwrap();
        assert!(rep.records.iter().all(|r| (r.match_row, r.match_col) == (0, 0)));
        assert!(rep.records.iter().all(|r| r.pixel_error.is_none()));
    }

    #[test]
    fn argmin_agrees_with_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(&mut rng, 16, 16, 8);
        let b = random_map(&mut rng, 16, 16, 8);
        let pixels: Vec<Pixel> = (0..64).map(|_| (rng.gen_range(0..16), rng.gen_range(0..16))).collect();
        let rep = match_features(&a, &b, &pixels, None).unwrap();
        for (rec, &(r, c)) in rep.records.iter().zip(&pixels) {
            let mut best = (usize::MAX, usize::MAX);
            let mut best_d = f64::INFINITY;
            for tr in 0..16 {
                for tc in 0..16 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        let diff = a.pixel(r, c)[k] as f64 - b.pixel(tr, tc)[k] as f64;
                        s += diff * diff;
                    }
                    let d = s.sqrt();
                    if d < best_d {
                        best_d = d;
                        best = (tr, tc);
                    }
                }
            }
            assert_eq!((rec.match_row, rec.match_col), best);
        }
    }

    #[test]
    fn sharpness_conventions() {
        let bits: Vec<f32> = (0..256).map(|i| if (i / 4) % 3 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(channel_sharpness(&FeatureMap::from_vec(8, 8, 4, bits).unwrap()), vec![1.0; 4]);
        let constant = FeatureMap::from_vec(4, 4, 4, vec![0.2; 64]).unwrap();
        assert_eq!(channel_sharpness(&constant), vec![1.0; 4]);
    }

    #[test]
    fn uniform_channel_sharpness_is_about_one_fifth() {
        // Monte Carlo on the definition: uniform[-1, 1] splits at 0 with
        // centers near ±0.5, so about 0.4 / 2 of the mass is within 0.1.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_map(&mut rng, 64, 64, 4);
        for s in channel_sharpness(&f) {
            assert!((s - 0.2).abs() < 0.05, "{s}");
        }
    }

    #[test]
    fn two_means_matches_brute_force_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(2..30);
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (a, b) = two_means(&vals).unwrap();
            let cost = |a: f64, b: f64| vals.iter().map(|&x| ((x - a).powi(2)).min((x - b).powi(2))).sum::<f64>();
            // Every threshold partition of the values is a candidate.
            let mut best = f64::INFINITY;
            for &t in &vals {
                let lo: Vec<f64> = vals.iter().copied().filter(|&x| x <= t).collect();
                let hi: Vec<f64> = vals.iter().copied().filter(|&x| x > t).collect();
                if lo.is_empty() || hi.is_empty() {
                    continue;
                }
                let ma = lo.iter().sum::<f64>() / lo.len() as f64;
                let mb = hi.iter().sum::<f64>() / hi.len() as f64;
                best = best.min(cost(ma, mb));
            }
            assert!((cost(a, b) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_accuracy_is_class_one_fraction() {
        use crate::nn::Module;
        let cfg = BackboneConfig {
            widths: vec![8, 8],
            blocks: vec![1, 1],
            out_channels: 4,
            ..BackboneConfig::exp1()
        };
        let mut backbone = Backbone::new(cfg, 0).unwrap();
        let mut cls = Classifier::new(ClassifierConfig::new(4), 0).unwrap();
        // Zero the last MLP layer: every logit is 0 -> predict 1.
        let mut last = String::new();
        cls.visit(&mut |p| last = p.name.rsplit_once('.').map(|(a, _)| a.to_string()).unwrap_or_default());
        cls.visit_mut(&mut |p| {
            if p.name.starts_with(&last) {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let images = vec![Image::filled(16, 16, [0.3, 0.1, 0.9]); 5];
        let labels = [1, 0, 1, 1, 0];
        let acc = accuracy(&mut cls, &mut backbone, &images, &labels).unwrap();
        assert!((acc - 0.6).abs() < 1e-12);
        assert!(matches!(accuracy(&mut cls, &mut backbone, &[], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn sweep_records_failures_without_aborting() {
        let grid = SweepGrid {
            lambdas: vec![0.5, 1.0],
            norms: vec![Norm::Inf],
            dims: vec![8],
            seeds: vec![0, 1],
        };
        let dir = tempfile::tempdir().unwrap();
        let out = run_sweep(
            &grid,
            |c| {
                if c.seed == 1 && c.lambda == 0.5 {
                    return Err(Error::Input("boom".into()));
                }
                Ok(SweepResult {
                    lambda: c.lambda,
                    norm: c.norm,
                    d: c.d,
                    seed: c.seed,
                    id_accuracy: 0.5,
                    ood_accuracy: 0.5,
                    final_loss: 0.0,
                })
            },
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(out.results.len() + out.failures.len(), 4);
        assert_eq!(out.failures.len(), 1);
        assert!(dir.path().join("violin_data.csv").is_file());
        assert_eq!(LAMBDA_GRID.len(), 7);
    }
}
