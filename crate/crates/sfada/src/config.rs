//! JSON experiment configuration: one file fully determines a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sfada_core::adapt::AdaptationConfig;
use sfada_core::data::ShiftSpec;
use sfada_core::sampler::SamplerKind;
use sfada_core::train::TrainConfig;

use crate::checkpoint::hash_bytes;
use crate::error::{Error, Result};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "SFADA_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded seven-segment digits.
    Synthetic {
        samples: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
    },
    /// IDX image/label pair; relative paths resolve against the config file.
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_image_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub target: DataSource,
    /// Applied to every target image.
    #[serde(default = "ShiftSpec::identity")]
    pub target_shift: ShiftSpec,
    /// Classes dropped from the source data before pretraining.
    #[serde(default)]
    pub removed_classes: Vec<usize>,
    #[serde(default = "default_source_test_fraction")]
    pub source_test_fraction: f64,
    #[serde(default = "default_target_eval_fraction")]
    pub target_eval_fraction: f64,
}

fn default_source_test_fraction() -> f64 {
    0.2
}

fn default_target_eval_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    /// Initialization seed; derived from the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 4, seed: None }
    }
}

/// How the transfer loss participates in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatnMode {
    /// Transfer loss on labeled and unlabeled batches.
    Full,
    /// Transfer loss on labeled batches only.
    LabeledOnly,
    /// Both transfer-loss terms, modulation network bypassed.
    NoModulation,
    /// No transfer loss.
    Off,
}

impl GatnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::LabeledOnly => "labeled_only",
            Self::NoModulation => "no_modulation",
            Self::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub samplers: Vec<SamplerKind>,
    pub gatn_modes: Vec<GatnMode>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_pseudo_axis")]
    pub pseudo_labels: Vec<bool>,
}

fn default_pseudo_axis() -> Vec<bool> {
    vec![true]
}

/// Switches applied on top of the adaptation section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Overrides `adaptation.sampler` when set.
    pub sampler: Option<SamplerKind>,
    pub disable_gatn: bool,
    pub disable_modulation: bool,
    pub labeled_only_tr: bool,
    pub disable_pseudo_labels: bool,
    /// Source checkpoint for `ablate`; defaults to `<output_dir>/source.ckpt`.
    pub source_checkpoint: Option<PathBuf>,
    pub grid: Option<GridConfig>,
}

/// Applies a sampler, transfer-loss mode and pseudo-label switch to `base`.
pub fn apply_ablation(
    base: &AdaptationConfig,
    sampler: SamplerKind,
    mode: GatnMode,
    pseudo_labels: bool,
) -> AdaptationConfig {
    let mut c = base.clone();
    c.sampler = sampler;
    c.use_gatn = mode != GatnMode::Off;
    c.use_modulation = mode != GatnMode::NoModulation;
    if mode == GatnMode::LabeledOnly {
        c.lambda_tr_unlabeled = 0.0;
    }
    if !pseudo_labels {
        c.lambda_pseudo = 0.0;
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for source in [&mut self.data.source, &mut self.data.target] {
            if let DataSource::Idx { images, labels } = source {
                fix(images);
                fix(labels);
            }
        }
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.ablation.source_checkpoint {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for source in [&self.data.source, &self.data.target] {
            match source {
                DataSource::Synthetic { samples, image_size } => {
                    if *samples < 2 || *image_size < 8 {
                        return cfg("synthetic data needs at least 2 samples of size >= 8".into());
                    }
                }
                DataSource::Idx { images, labels } => {
                    for p in [images, labels] {
                        if !p.exists() {
                            return cfg(format!("data file {} does not exist", p.display()));
                        }
                    }
                }
            }
        }
        for (name, f) in [
            ("source_test_fraction", self.data.source_test_fraction),
            ("target_eval_fraction", self.data.target_eval_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return cfg(format!("{name} must lie in (0, 1), got {f}"));
            }
        }
        self.data.target_shift.validate(1)?;
        if self.model.width == 0 {
            return cfg("model.width must be positive".into());
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return cfg("pretrain.epochs and pretrain.batch_size must be positive".into());
        }
        self.pretrain.optimizer.validate()?;
        let a = &self.adaptation;
        for (name, v) in [
            ("lambda_tr_labeled", a.lambda_tr_labeled),
            ("lambda_tr_unlabeled", a.lambda_tr_unlabeled),
            ("lambda_pseudo", a.lambda_pseudo),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg(format!("adaptation.{name} must be a nonnegative number, got {v}"));
            }
        }
        if let Some(grid) = &self.ablation.grid {
            if grid.samplers.is_empty() || grid.gatn_modes.is_empty() || grid.budgets.is_empty() || grid.seeds.is_empty() {
                return cfg("every ablation grid axis needs at least one entry".into());
            }
            if grid.pseudo_labels.is_empty() {
                return cfg("ablation.grid.pseudo_labels must not be empty".into());
            }
        }
        Ok(())
    }

    /// Output directory after the environment override.
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    /// Adaptation settings with the single-run ablation switches applied.
    pub fn effective_adaptation(&self) -> AdaptationConfig {
        let a = &self.ablation;
        let mut c = self.adaptation.clone();
        c.sampler = a.sampler.unwrap_or(c.sampler);
        c.use_gatn &= !a.disable_gatn;
        c.use_modulation &= !a.disable_modulation;
        if a.labeled_only_tr {
            c.lambda_tr_unlabeled = 0.0;
        }
        if a.disable_pseudo_labels {
            c.lambda_pseudo = 0.0;
        }
        c.seed = self.seed;
        c
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        hash_bytes(&serde_json::to_vec(self).expect("config is always serializable"))
    }
}
