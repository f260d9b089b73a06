//! The four experiment commands as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sfada_core::adapt::{run_adaptation, AdaptationConfig, AdaptationReport};
use sfada_core::data::{apply_label_shift, make_shifted_domain, LabeledDataset, TargetPool};
use sfada_core::digits::synthetic_digits;
use sfada_core::model::{build_cnn, CnnShape, NetworkSplit};
use sfada_core::rng::SeedStream;
use sfada_core::sampler::SamplerKind;
use sfada_core::train::{evaluate, train_supervised, EvalMetrics, TrainConfig};

use crate::checkpoint::{hash_bytes, load_network, save_gatn, save_network};
use crate::config::{apply_ablation, DataSource, ExperimentConfig, GatnMode};
use crate::error::{Error, Result};
use crate::idx::load_idx_dataset;
use crate::report::{write_eval_csv, write_rounds_csv, write_scores_csv, ResultRow, ResultsTable};

pub const SOURCE_CKPT: &str = "source.ckpt";
pub const TARGET_CKPT: &str = "target.ckpt";
pub const GATN_CKPT: &str = "gatn.ckpt";
pub const ROUNDS_CSV: &str = "adapt_rounds.csv";
pub const SCORES_CSV: &str = "adapt_scores.csv";
pub const MANIFEST_JSON: &str = "pool_manifest.json";
pub const PRETRAIN_CSV: &str = "pretrain_eval.csv";
pub const ABLATION_CSV: &str = "ablation_rows.csv";
pub const ABLATION_SUMMARY_CSV: &str = "ablation_summary.csv";
pub const ABLATION_DELTA_CSV: &str = "ablation_delta.csv";

fn streams(config: &ExperimentConfig) -> SeedStream {
    SeedStream::new(config.seed)
}

fn load_source_data(source: &DataSource, stream: &SeedStream) -> Result<LabeledDataset> {
    match source {
        DataSource::Synthetic { samples, image_size } => Ok(synthetic_digits(*samples, *image_size, stream.seed())),
        DataSource::Idx { images, labels } => load_idx_dataset(images, labels),
    }
}

fn permutation(n: usize, stream: &SeedStream) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut stream.rng());
    p
}

/// Seeded split into `(rest, held_out)` with `held_out` taking `fraction`.
fn split(dataset: &LabeledDataset, fraction: f64, stream: &SeedStream) -> Result<(LabeledDataset, LabeledDataset)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Config("dataset needs at least two samples to split".into()));
    }
    let held = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let shuffled = dataset.subset(&permutation(n, stream));
    let (rest, held_out) = shuffled.split_at(n - held);
    Ok((rest, held_out))
}

/// Source train and test splits, after removing `data.removed_classes`.
pub fn source_splits(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let s = streams(config);
    let raw = load_source_data(&config.data.source, &s.child("source-data"))?;
    let shifted = apply_label_shift(&raw, &config.data.removed_classes)?;
    split(&shifted, config.data.source_test_fraction, &s.child("source-split"))
}

/// Target pool and held-out evaluation split, after the domain shift.
pub fn target_splits(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let s = streams(config);
    let raw = load_source_data(&config.data.target, &s.child("target-data"))?;
    let shifted = make_shifted_domain(&raw, &config.data.target_shift, s.child("target-shift").seed())?;
    split(&shifted, config.data.target_eval_fraction, &s.child("target-split"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub network: NetworkSplit,
    pub source_test: EvalMetrics,
    pub loss_history: Vec<f64>,
}

/// Trains the source network and saves it to `<output>/source.ckpt`.
pub fn pretrain(config: &ExperimentConfig) -> Result<PretrainOutcome> {
    let (train, test) = source_splits(config)?;
    let s = streams(config);
    let shape = CnnShape {
        in_channels: train.image_shape()[0],
        width: config.model.width,
        num_classes: train.num_classes(),
    };
    let mut net = build_cnn(shape, config.model.seed.unwrap_or_else(|| s.child("model").seed()))?;
    let train_config = TrainConfig { seed: s.child("pretrain").seed(), ..config.pretrain.clone() };
    let loss_history = train_supervised(&mut net, &train, &train_config)?;
    let source_test = evaluate(&net, &test)?;
    let dir = config.output_dir();
    create_dir(&dir)?;
    let checkpoint = dir.join(SOURCE_CKPT);
    save_network(&net, config.hash(), &checkpoint)?;
    write_eval_csv(&dir.join(PRETRAIN_CSV), &source_test)?;
    log::info!("source test accuracy {:.2}%", source_test.accuracy);
    Ok(PretrainOutcome { checkpoint, network: net, source_test, loss_history })
}

pub struct AdaptOutcome {
    pub rounds_csv: PathBuf,
    pub target_checkpoint: PathBuf,
    pub gatn_checkpoint: PathBuf,
    pub report: AdaptationReport,
}

fn adaptation_hash(config: &ExperimentConfig, adaptation: &AdaptationConfig) -> [u8; 32] {
    let mut bytes = serde_json::to_vec(config).expect("serializable");
    bytes.extend(serde_json::to_vec(adaptation).expect("serializable"));
    hash_bytes(&bytes)
}

/// Runs one adaptation from the source checkpoint and writes its artifacts.
pub fn adapt(config: &ExperimentConfig, source_checkpoint: &Path) -> Result<AdaptOutcome> {
    let source = load_network(source_checkpoint)?;
    let (pool_data, eval_data) = target_splits(config)?;
    let adaptation = config.effective_adaptation();
    let mut pool = TargetPool::new(pool_data, adaptation.budget)?;
    let report = run_adaptation(&source, &mut pool, &eval_data, &adaptation)?;

    let dir = config.output_dir();
    create_dir(&dir)?;
    let hash = adaptation_hash(config, &adaptation);
    let rounds_csv = dir.join(ROUNDS_CSV);
    write_rounds_csv(&rounds_csv, &report.rounds)?;
    if adaptation.record_scores {
        write_scores_csv(&dir.join(SCORES_CSV), &report.round_scores)?;
    }
    let target_checkpoint = dir.join(TARGET_CKPT);
    save_network(&report.target, hash, &target_checkpoint)?;
    let gatn_checkpoint = dir.join(GATN_CKPT);
    save_gatn(&report.gatn, hash, &gatn_checkpoint)?;
    let manifest = serde_json::to_string_pretty(&pool.manifest())?;
    fs::write(dir.join(MANIFEST_JSON), manifest).map_err(|e| Error::io(dir.join(MANIFEST_JSON), e))?;
    Ok(AdaptOutcome { rounds_csv, target_checkpoint, gatn_checkpoint, report })
}

pub fn sampler_name(kind: SamplerKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Grid cell key shared by every seed of the cell.
pub fn experiment_id(sampler: SamplerKind, mode: GatnMode, pseudo_labels: bool, budget: usize) -> String {
    format!("{}/{}/pl{}/b{budget}", sampler_name(sampler), mode.as_str(), u8::from(pseudo_labels))
}

pub struct AblateOutcome {
    pub rows_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub delta_csv: PathBuf,
    pub table: ResultsTable,
}

/// Runs the configured grid against one source network. A failing cell is
/// recorded in its row and the grid continues.
pub fn ablate(config: &ExperimentConfig) -> Result<AblateOutcome> {
    let grid = config
        .ablation
        .grid
        .clone()
        .ok_or_else(|| Error::Config("ablate needs an ablation.grid section".into()))?;
    let dir = config.output_dir();
    let ckpt = config.ablation.source_checkpoint.clone().unwrap_or_else(|| dir.join(SOURCE_CKPT));
    let source = load_network(&ckpt)?;
    let (pool_data, eval_data) = target_splits(config)?;

    let mut table = ResultsTable::default();
    for &sampler in &grid.samplers {
        for &mode in &grid.gatn_modes {
            for &pseudo in &grid.pseudo_labels {
                for &budget in &grid.budgets {
                    for &seed in &grid.seeds {
                        let mut row = ResultRow {
                            experiment_id: experiment_id(sampler, mode, pseudo, budget),
                            sampler: sampler_name(sampler),
                            gatn_mode: mode.as_str().into(),
                            pseudo_labels: pseudo,
                            budget,
                            seed,
                            status: "failed".into(),
                            accuracy: None,
                            per_class_accuracy: String::new(),
                            error: String::new(),
                        };
                        let mut cell = apply_ablation(&config.adaptation, sampler, mode, pseudo);
                        cell.budget = budget;
                        cell.seed = seed;
                        let outcome = TargetPool::new(pool_data.clone(), budget)
                            .and_then(|mut pool| run_adaptation(&source, &mut pool, &eval_data, &cell));
                        match outcome {
                            Ok(report) => row.set_metrics(report.final_eval()),
                            Err(e) => {
                                log::warn!("{} seed {seed} failed: {e}", row.experiment_id);
                                row.error = e.to_string();
                            }
                        }
                        table.rows.push(row);
                    }
                }
            }
        }
    }
    create_dir(&dir)?;
    let rows_csv = dir.join(ABLATION_CSV);
    let summary_csv = dir.join(ABLATION_SUMMARY_CSV);
    let delta_csv = dir.join(ABLATION_DELTA_CSV);
    table.write(&rows_csv, &summary_csv, &delta_csv)?;
    Ok(AblateOutcome { rows_csv, summary_csv, delta_csv, table })
}

/// Which split `eval` measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    /// Held-out target split.
    Target,
    /// Held-out source split.
    Source,
}

/// Evaluates a network checkpoint alone; no GATN or source network is read.
pub fn eval(config: &ExperimentConfig, checkpoint: &Path, split: EvalSplit) -> Result<(EvalMetrics, PathBuf)> {
    let net = load_network(checkpoint)?;
    let data = match split {
        EvalSplit::Target => target_splits(config)?.1,
        EvalSplit::Source => source_splits(config)?.1,
    };
    let metrics = evaluate(&net, &data)?;
    let dir = config.output_dir();
    create_dir(&dir)?;
    let name = match split {
        EvalSplit::Target => "eval_target.csv",
        EvalSplit::Source => "eval_source.csv",
    };
    let path = dir.join(name);
    write_eval_csv(&path, &metrics)?;
    Ok((metrics, path))
}
