//! Experiment configuration files (TOML) and named presets.
//!
//! A file may name a `preset`; keys present in the file override it
//! table by table. Unknown keys are rejected with their line and column.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::coloredmnist::ColoredMnistConfig;
use crate::error::{Error, Result};
use crate::evaluate::{Exp1Plan, SweepGrid};
use crate::loss::LossConfig;
use crate::scene3d::SceneSampler;
use crate::trainer::TrainConfig;
use crate::viewgen::TransformRanges;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    ColoredMnist,
    Scenes3d,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ColoredMnist => "colored-mnist",
            ExperimentKind::Scenes3d => "scenes3d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesConfig {
    /// Number of rendered view pairs.
    pub count: usize,
    pub sampler: SceneSampler,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            count: 200,
            sampler: SceneSampler::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cap on test images scored per split.
    pub limit: Option<usize>,
    /// View pairs used for the matching report.
    pub match_pairs: usize,
    /// Source pixels sampled per pair for matching.
    pub match_pixels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            limit: None,
            match_pairs: 8,
            match_pixels: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub backbone_train: TrainConfig,
    pub classifier_train: TrainConfig,
    pub ranges: TransformRanges,
    pub colored_mnist: ColoredMnistConfig,
    pub scenes: ScenesConfig,
    pub eval: EvalConfig,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            experiment: ExperimentKind::ColoredMnist,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            loss: LossConfig::default(),
            backbone: BackboneConfig::exp1(),
            backbone_train: TrainConfig::backbone_desk(),
            classifier_train: TrainConfig::classifier_desk(),
            ranges: TransformRanges::default(),
            colored_mnist: ColoredMnistConfig::default(),
            scenes: ScenesConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["desk", "paper-exp1", "paper-exp2", "desk-exp2"];

/// Named starting points.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig {
        preset: Some(name.to_string()),
        ..ExperimentConfig::default()
    };
    Ok(match name {
        "desk" => base,
        "paper-exp1" => ExperimentConfig {
            backbone_train: TrainConfig::backbone_exp1(),
            classifier_train: TrainConfig::classifier_exp1(),
            ..base
        },
        "paper-exp2" => ExperimentConfig {
            experiment: ExperimentKind::Scenes3d,
            backbone: BackboneConfig::exp2(),
            backbone_train: TrainConfig::backbone_exp2(),
            scenes: ScenesConfig {
                count: 4000,
                ..ScenesConfig::default()
            },
            ..base
        },
        "desk-exp2" => ExperimentConfig {
            experiment: ExperimentKind::Scenes3d,
            backbone: BackboneConfig::exp2(),
            backbone_train: TrainConfig {
                steps: 2000,
                final_lr: 4e-9,
                ..TrainConfig::backbone_desk()
            },
            ..base
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    })
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `text`, applies its preset (or `preset_override`), and validates.
pub fn parse(text: &str, preset_override: Option<&str>) -> Result<ExperimentConfig> {
    // First pass on the raw text so schema errors carry line and column.
    let file: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let raw: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let name = preset_override.map(str::to_string).or(file.preset.clone());
    let cfg = match name {
        None => file,
        Some(name) => {
            let mut base = toml::Value::try_from(preset(&name)?).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut base, raw);
            let mut cfg: ExperimentConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            cfg.preset = Some(name);
            cfg
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path, preset_override: Option<&str>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("config file {}", path.display())),
        _ => Error::Io(e),
    })?;
    parse(&text, preset_override).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.backbone.validate()?;
        self.backbone_train.validate()?;
        self.classifier_train.validate()?;
        self.ranges.validate()?;
        if self.loss.lambda < 1.0 && self.backbone_train.batch_size < 2 {
            return Err(Error::Config("the between-image term needs backbone_train.batch_size >= 2".into()));
        }
        if self.experiment == ExperimentKind::Scenes3d && self.scenes.count == 0 {
            return Err(Error::Config("scenes.count must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Stable short hash of the full config, used for caching.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        Ok(hex::encode(h.finalize())[..16].to_string())
    }

    pub fn exp1_plan(&self) -> Exp1Plan {
        Exp1Plan {
            backbone: self.backbone.clone(),
            backbone_train: self.backbone_train.clone(),
            classifier_train: self.classifier_train.clone(),
            ranges: self.ranges.clone(),
            loss: self.loss.clone(),
            eval_limit: self.eval.limit,
        }
    }
}
