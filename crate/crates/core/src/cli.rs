//! The `oxel` command line: `data`, `train`, `eval`, `sweep`, `viz`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::Backbone;
use crate::checkpoint::{load_backbone, load_classifier, CODE_VERSION};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::coloredmnist::{load_or_generate, ColoredMnist, Split};
use crate::config::{self, ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::evaluate::{accuracy, channel_sharpness, match_features, run_colored_mnist, run_sweep, split_images, MatchReport};
use crate::raster::Image;
use crate::scene3d::{generate_scene_records, load_scene_records, scene_dataset_dir};
use crate::trainer::{
    read_csv, train_backbone, train_classifier, write_csv, ClassifierRow, MetricRow, PairSource, RunOptions, BACKBONE_CKPT,
    BACKBONE_METRICS, CLASSIFIER_CKPT, CLASSIFIER_METRICS,
};
use crate::viewgen::{make_view_pair, ViewPair};
use crate::visualize::{channel_grid, false_color, match_overlay, plot_losses, LossGroup};

#[derive(Debug, Parser)]
#[command(name = "oxel", version, about = "Pixel-level contrastive descriptors: data, training, evaluation, figures")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root for run directories (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Named preset: desk, paper-exp1, paper-exp2, desk-exp2.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Byte-identical metric files across repeated runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Dataset root.
    #[arg(long, global = true, env = "OXEL_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    /// Progress line every N training steps (0 = silent).
    #[arg(long, global = true, default_value_t = 100)]
    pub progress: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Backbone,
    Classifier,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ColoredMNIST archives or rendered scene pairs.
    Data {
        /// Number of scene pairs (scenes3d only; defaults to `scenes.count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a backbone and/or classifier into a run directory.
    Train {
        #[arg(long, value_enum, default_value_t = Stage::All)]
        stage: Stage,
        /// Run id; required for `--stage classifier`.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Accuracy, matching and sharpness reports for a run.
    Eval {
        #[arg(long)]
        run_id: String,
        /// Use a freshly initialized backbone instead of the checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// λ × norm × D × seed grid on ColoredMNIST.
    Sweep {
        #[arg(long)]
        sweep_id: Option<String>,
    },
    /// Feature images and loss curves for a run.
    Viz {
        #[arg(long)]
        run_id: String,
        /// Number of inputs to visualize.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Data { count } => cmd_data(&cli.global, &cfg, *count).map(|_| 0),
        Command::Train { stage, run_id } => cmd_train(&cli.global, &cfg, *stage, run_id.as_deref()).map(|_| 0),
        Command::Eval { run_id, untrained } => cmd_eval(&cli.global, &cfg, run_id, *untrained).map(|_| 0),
        Command::Sweep { sweep_id } => cmd_sweep(&cli.global, &cfg, sweep_id.as_deref()),
        Command::Viz { run_id, samples } => cmd_viz(&cli.global, &cfg, run_id, *samples).map(|_| 0),
    }
}

pub fn resolve_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => config::load(path, g.preset.as_deref())?,
        None => config::preset(g.preset.as_deref().unwrap_or("desk"))?,
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn timestamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string()
}

/// A directory name under `parent` that does not exist yet.
fn fresh_dir(parent: &Path, stem: &str) -> PathBuf {
    let mut dir = parent.join(stem);
    let mut k = 2;
    while dir.exists() {
        dir = parent.join(format!("{stem}-{k}"));
        k += 1;
    }
    dir
}

fn load_colored(g: &GlobalArgs, cfg: &ExperimentConfig) -> Result<ColoredMnist> {
    let mut cm = cfg.colored_mnist.clone();
    cm.seed = cfg.seed;
    Ok(load_or_generate(&g.data_dir, &cm)?.0)
}

fn load_scenes(g: &GlobalArgs, cfg: &ExperimentConfig) -> Result<Vec<ViewPair>> {
    let dir = scene_dataset_dir(&g.data_dir, &cfg.scenes.sampler, cfg.seed);
    load_scene_records(&dir, cfg.scenes.count)
}

pub fn cmd_data(g: &GlobalArgs, cfg: &ExperimentConfig, count: Option<usize>) -> Result<()> {
    match cfg.experiment {
        ExperimentKind::ColoredMnist => {
            let mut cm = cfg.colored_mnist.clone();
            cm.seed = cfg.seed;
            let (data, fresh) = load_or_generate(&g.data_dir, &cm)?;
            let all: Vec<_> = Split::ALL.iter().flat_map(|&s| data.split(s)).collect();
            let flips = all.iter().filter(|s| s.label != s.clean_label).count();
            println!(
                "colored-mnist {} ({}): train {} val {} test_id {} test_ood {}; flip rate {:.4}",
                hex::encode(&data.config_hash[..8]),
                if fresh { "generated" } else { "up to date" },
                data.train.len(),
                data.val.len(),
                data.test_id.len(),
                data.test_ood.len(),
                flips as f64 / all.len() as f64
            );
        }
        ExperimentKind::Scenes3d => {
            let n = count.unwrap_or(cfg.scenes.count);
            let (dir, written) = generate_scene_records(&g.data_dir, &cfg.scenes.sampler, cfg.seed, n)?;
            println!("scenes3d {}: {n} pairs, {written} written", dir.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunInfo<'a> {
    run_id: &'a str,
    experiment: &'a str,
    seed: u64,
    code_version: &'a str,
    preset: Option<&'a str>,
    deterministic: bool,
}

fn run_options(g: &GlobalArgs, dir: &Path) -> RunOptions {
    RunOptions {
        dir: Some(dir.to_path_buf()),
        deterministic: g.deterministic,
        progress_every: g.progress,
    }
}

/// Creates the run directory with its config snapshot and returns its path.
fn new_run(g: &GlobalArgs, cfg: &ExperimentConfig, run_id: Option<&str>) -> Result<(String, PathBuf)> {
    let id = match run_id {
        Some(id) => id.to_string(),
        None => {
            let stem = format!("{}-{}-{}", cfg.experiment.name(), cfg.seed, timestamp());
            fresh_dir(&cfg.out_dir, &stem).file_name().unwrap().to_string_lossy().into_owned()
        }
    };
    let dir = cfg.out_dir.join(&id);
    if dir.join(BACKBONE_CKPT).exists() {
        return Err(Error::Input(format!("run {} already has a backbone", dir.display())));
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let info = RunInfo {
        run_id: &id,
        experiment: cfg.experiment.name(),
        seed: cfg.seed,
        code_version: CODE_VERSION,
        preset: cfg.preset.as_deref(),
        deterministic: g.deterministic,
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok((id, dir))
}

fn run_dir(cfg: &ExperimentConfig, run_id: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(run_id);
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("run `{run_id}` (looked in {})", dir.display())));
    }
    Ok(dir)
}

/// The config a run was created with.
fn run_config(dir: &Path) -> Result<ExperimentConfig> {
    config::load(&dir.join("config.toml"), None)
}

pub fn cmd_train(g: &GlobalArgs, cfg: &ExperimentConfig, stage: Stage, run_id: Option<&str>) -> Result<PathBuf> {
    if stage == Stage::Classifier {
        let id = run_id.ok_or_else(|| Error::Dependency("`--stage classifier` needs `--run-id` of a run with a trained backbone".into()))?;
        let dir = cfg.out_dir.join(id);
        let ckpt = dir.join(BACKBONE_CKPT);
        if !ckpt.is_file() {
            return Err(Error::Dependency(format!(
                "no backbone checkpoint at {}; train `--stage backbone` first",
                ckpt.display()
            )));
        }
        let run_cfg = run_config(&dir)?;
        train_classifier_stage(g, &run_cfg, &dir)?;
        println!("{}", dir.display());
        return Ok(dir);
    }
    if stage == Stage::All && cfg.experiment == ExperimentKind::Scenes3d {
        return Err(Error::Config("scenes3d runs have no classifier; use `--stage backbone`".into()));
    }
    let (_, dir) = new_run(g, cfg, run_id)?;
    let opts = run_options(g, &dir);
    match cfg.experiment {
        ExperimentKind::ColoredMnist => {
            let data = load_colored(g, cfg)?;
            let (images, _) = split_images(&data.train);
            let source = PairSource::Homography { images: &images, ranges: &cfg.ranges };
            let train = cfg.backbone_train.clone().with_seed(cfg.seed);
            train_backbone(&source, &cfg.loss, &cfg.backbone, &train, &opts)?;
        }
        ExperimentKind::Scenes3d => {
            generate_scene_records(&g.data_dir, &cfg.scenes.sampler, cfg.seed, cfg.scenes.count)?;
            let pairs = load_scenes(g, cfg)?;
            let train = cfg.backbone_train.clone().with_seed(cfg.seed);
            train_backbone(&PairSource::Prebuilt(&pairs), &cfg.loss, &cfg.backbone, &train, &opts)?;
        }
    }
    if stage == Stage::All {
        train_classifier_stage(g, cfg, &dir)?;
    }
    println!("{}", dir.display());
    Ok(dir)
}

fn train_classifier_stage(g: &GlobalArgs, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    if cfg.experiment != ExperimentKind::ColoredMnist {
        return Err(Error::Config("the classifier stage needs a colored-mnist run".into()));
    }
    if dir.join(CLASSIFIER_CKPT).exists() {
        return Err(Error::Input(format!("run {} already has a classifier", dir.display())));
    }
    let (mut backbone, _) = load_backbone(&dir.join(BACKBONE_CKPT))?;
    let data = load_colored(g, cfg)?;
    let (images, labels) = split_images(&data.train);
    let cls_cfg = ClassifierConfig::new(backbone.out_channels());
    let train = cfg.classifier_train.clone().with_seed(cfg.seed);
    train_classifier(&mut backbone, &images, &labels, &cls_cfg, &train, &run_options(g, dir))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    run_id: String,
    untrained_backbone: bool,
    id_accuracy: Option<f64>,
    ood_accuracy: Option<f64>,
    match_precision: Vec<(f64, f64)>,
    mean_channel_sharpness: f64,
}

/// View pairs for matching: fresh homography pairs of test images, or the
/// first rendered scene pairs.
fn eval_pairs(g: &GlobalArgs, cfg: &ExperimentConfig, data: Option<&ColoredMnist>) -> Result<Vec<ViewPair>> {
    let n = cfg.eval.match_pairs;
    match data {
        Some(d) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(7);
            d.test_id
                .iter()
                .take(n)
                .map(|s| make_view_pair(&s.image(), &mut rng, &cfg.ranges))
                .collect()
        }
        None => {
            let mut pairs = load_scenes(g, cfg)?;
            pairs.truncate(n);
            Ok(pairs)
        }
    }
}

/// Nearest-neighbor matching of sampled valid view-1 pixels.
pub fn match_pairs(backbone: &mut Backbone, pairs: &[ViewPair], per_pair: usize, seed: u64) -> Result<Vec<MatchReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(8);
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let feats = backbone.features(&[p.view1.clone(), p.view2.clone()])?;
        let (h, w) = (p.corr.height(), p.corr.width());
        let valid: Vec<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).filter(|&(r, c)| p.corr.is_valid(r, c)).collect();
        let k = per_pair.min(valid.len());
        let mut picked: Vec<usize> = index::sample(&mut rng, valid.len(), k).into_vec();
        picked.sort_unstable();
        let pixels: Vec<_> = picked.iter().map(|&i| valid[i]).collect();
        out.push(match_features(&feats[0], &feats[1], &pixels, Some(&p.corr))?);
    }
    Ok(out)
}

pub fn merged_precision(reports: &[MatchReport]) -> MatchReport {
    MatchReport {
        records: reports.iter().flat_map(|r| r.records.iter().cloned()).collect(),
    }
}

pub fn cmd_eval(g: &GlobalArgs, cli_cfg: &ExperimentConfig, run_id: &str, untrained: bool) -> Result<PathBuf> {
    let dir = run_dir(cli_cfg, run_id)?;
    let cfg = run_config(&dir)?;
    let mut backbone = if untrained {
        Backbone::new(cfg.backbone.clone(), cfg.seed)?
    } else {
        load_backbone(&dir.join(BACKBONE_CKPT))?.0
    };
    let out = fresh_dir(&dir, &format!("eval-{}", timestamp()));
    std::fs::create_dir_all(&out)?;
    let data = match cfg.experiment {
        ExperimentKind::ColoredMnist => Some(load_colored(g, &cfg)?),
        ExperimentKind::Scenes3d => None,
    };
    let (mut id_accuracy, mut ood_accuracy) = (None, None);
    if let Some(d) = &data {
        let cls_path = dir.join(CLASSIFIER_CKPT);
        let mut cls = if cls_path.is_file() && !untrained {
            Some(load_classifier(&cls_path)?.0)
        } else if untrained {
            Some(Classifier::new(ClassifierConfig::new(backbone.out_channels()), cfg.seed)?)
        } else {
            None
        };
        if let Some(cls) = cls.as_mut() {
            let limit = cfg.eval.limit.unwrap_or(usize::MAX);
            let (x, y) = split_images(&d.test_id[..d.test_id.len().min(limit)]);
            id_accuracy = Some(accuracy(cls, &mut backbone, &x, &y)?);
            let (x, y) = split_images(&d.test_ood[..d.test_ood.len().min(limit)]);
            ood_accuracy = Some(accuracy(cls, &mut backbone, &x, &y)?);
        }
    }
    let pairs = eval_pairs(g, &cfg, data.as_ref())?;
    let reports = match_pairs(&mut backbone, &pairs, cfg.eval.match_pixels, cfg.seed)?;
    for (k, (p, r)) in pairs.iter().zip(&reports).enumerate() {
        match_overlay(&p.view1, &p.view2, r).save_png(out.join(format!("match{k:02}.png")))?;
    }
    let merged = merged_precision(&reports);
    merged.write_csv(&out.join("matches.csv"))?;
    let feats = backbone.features(&pairs.iter().map(|p| p.view1.clone()).collect::<Vec<_>>())?;
    let sharp: Vec<Vec<f64>> = feats.iter().map(channel_sharpness).collect();
    #[derive(Serialize)]
    struct SharpRow {
        channel: usize,
        sharpness: f64,
    }
    let d = backbone.out_channels();
    let rows: Vec<SharpRow> = (0..d)
        .map(|ch| SharpRow {
            channel: ch,
            sharpness: sharp.iter().map(|s| s[ch]).sum::<f64>() / sharp.len().max(1) as f64,
        })
        .collect();
    let mean_sharp = rows.iter().map(|r| r.sharpness).sum::<f64>() / d as f64;
    write_csv(&out.join("sharpness.csv"), &rows)?;
    let report = EvalReport {
        run_id: run_id.to_string(),
        untrained_backbone: untrained,
        id_accuracy,
        ood_accuracy,
        match_precision: merged.precision_table(),
        mean_channel_sharpness: mean_sharp,
    };
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(out)
}

pub fn cmd_sweep(g: &GlobalArgs, cfg: &ExperimentConfig, sweep_id: Option<&str>) -> Result<i32> {
    if cfg.experiment != ExperimentKind::ColoredMnist {
        return Err(Error::Config("sweeps run on colored-mnist".into()));
    }
    let id = sweep_id
        .map(str::to_string)
        .unwrap_or_else(|| format!("sweep-{}-{}", cfg.seed, timestamp()));
    let dir = cfg.out_dir.join(&id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let data = load_colored(g, cfg)?;
    let outcome = run_sweep(
        &cfg.sweep,
        |cell| {
            let mut plan = cfg.exp1_plan();
            plan.loss.lambda = cell.lambda;
            plan.loss.norm = cell.norm;
            plan.backbone.out_channels = cell.d;
            let cell_dir = dir.join(format!("lambda{}-{}-d{}-seed{}", cell.lambda, cell.norm, cell.d, cell.seed));
            if cell_dir.join(CLASSIFIER_CKPT).exists() {
                return Err(Error::Input(format!("{} is already complete", cell_dir.display())));
            }
            let opts = run_options(g, &cell_dir);
            let run = run_colored_mnist(&data, &plan, cell.seed, &opts)?;
            write_csv(&cell_dir.join("result.csv"), std::slice::from_ref(&run.result))?;
            Ok(run.result)
        },
        Some(&dir),
    )?;
    println!(
        "{}: {} runs, {} failed",
        dir.display(),
        outcome.results.len(),
        outcome.failures.len()
    );
    for f in &outcome.failures {
        eprintln!("failed: lambda {} {} d{} seed {}: {}", f.lambda, f.norm, f.d, f.seed, f.error);
    }
    Ok(if outcome.failures.is_empty() { 0 } else { 2 })
}

pub fn cmd_viz(g: &GlobalArgs, cli_cfg: &ExperimentConfig, run_id: &str, samples: usize) -> Result<PathBuf> {
    let dir = run_dir(cli_cfg, run_id)?;
    let cfg = run_config(&dir)?;
    let (mut backbone, _) = load_backbone(&dir.join(BACKBONE_CKPT))?;
    let out = fresh_dir(&dir.join("viz"), &timestamp());
    std::fs::create_dir_all(&out)?;
    let inputs: Vec<Image> = match cfg.experiment {
        ExperimentKind::ColoredMnist => load_colored(g, &cfg)?.test_id.iter().take(samples).map(|s| s.image()).collect(),
        ExperimentKind::Scenes3d => load_scenes(g, &cfg)?.into_iter().take(samples).map(|p| p.view1).collect(),
    };
    let feats = if inputs.is_empty() { Vec::new() } else { backbone.features(&inputs)? };
    for (k, (img, f)) in inputs.iter().zip(&feats).enumerate() {
        img.save_png(out.join(format!("sample{k:02}-input.png")))?;
        false_color(f, [0, 1, 2])?.save_png(out.join(format!("sample{k:02}-false-color.png")))?;
        channel_grid(f).save_png(out.join(format!("sample{k:02}-channels.png")))?;
    }
    let bb: Vec<MetricRow> = read_csv(&dir.join(BACKBONE_METRICS))?;
    let group = |label: &str, pts: Vec<(usize, f64)>| LossGroup {
        label: label.to_string(),
        runs: vec![pts],
    };
    if !bb.is_empty() {
        plot_losses(
            &[group("backbone", bb.iter().map(|r| (r.step, r.loss_total as f64)).collect())],
            &out,
            "loss-backbone",
        )?;
    }
    let cls_path = dir.join(CLASSIFIER_METRICS);
    if cls_path.is_file() {
        let rows: Vec<ClassifierRow> = read_csv(&cls_path)?;
        if !rows.is_empty() {
            plot_losses(
                &[group("classifier", rows.iter().map(|r| (r.step, r.loss_bce as f64)).collect())],
                &out,
                "loss-classifier",
            )?;
        }
    }
    println!("{}", out.display());
    Ok(out)
}
