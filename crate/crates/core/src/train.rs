//! Supervised source training and classification metrics.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{config_err, Result};
use crate::model::{NetworkSplit, ParamSubset};
use crate::optim::{OptimizerConfig, Sgd};
use crate::rng::SeedStream;
use crate::sampler::argmax;
use crate::tape::Tape;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            optimizer: OptimizerConfig { learning_rate: 0.05, ..OptimizerConfig::default() },
            seed: 0,
        }
    }
}

/// One cross-entropy update on a labeled batch; returns the batch loss.
pub fn supervised_step(net: &mut NetworkSplit, opt: &mut Sgd, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, ParamSubset::All);
    let x = tape.constant(images.clone());
    let f = net.encode(&mut tape, &bound, x)?;
    let logits = net.classify(&mut tape, &bound, f)?;
    let mask = vec![1.0; labels.len()];
    let loss = tape.cross_entropy(logits, labels, &mask)?;
    let grads = tape.backward(loss);
    let g: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
    opt.step_network(net, &g);
    Ok(tape.value(loss).item())
}

/// Mini-batch SGD over `data` for `config.epochs`; returns per-epoch mean loss.
pub fn train_supervised(net: &mut NetworkSplit, data: &LabeledDataset, config: &TrainConfig) -> Result<Vec<f64>> {
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(config_err!("epochs and batch_size must be positive"));
    }
    config.optimizer.validate()?;
    let mut opt = Sgd::new(&config.optimizer);
    let shuffle = SeedStream::new(config.seed).child("train-shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle.index(epoch as u64).rng());
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            total += supervised_step(net, &mut opt, &data.images().gather_rows(chunk), &labels)?;
            batches += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok(history)
}

/// Accuracy in percent, overall and per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation data.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub class_correct: Vec<usize>,
}

impl EvalMetrics {
    /// Accuracy over the samples of the given classes.
    pub fn accuracy_on(&self, classes: &[usize]) -> Option<f64> {
        let (c, n) = classes
            .iter()
            .filter(|&&k| k < self.class_counts.len())
            .fold((0, 0), |(c, n), &k| (c + self.class_correct[k], n + self.class_counts[k]));
        (n > 0).then(|| 100.0 * c as f64 / n as f64)
    }
}

pub fn predict(net: &NetworkSplit, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let logits = net.logits(&images.gather_rows(&idx))?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(|row| argmax(row).0));
    }
    Ok(out)
}

pub fn evaluate(net: &NetworkSplit, data: &LabeledDataset) -> Result<EvalMetrics> {
    let preds = predict(net, data.images())?;
    let k = data.num_classes().max(net.num_classes());
    let mut counts = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(data.labels()) {
        counts[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let hits: usize = correct.iter().sum();
    let per_class = counts.iter().zip(&correct).map(|(&n, &c)| (n > 0).then(|| 100.0 * c as f64 / n as f64)).collect();
    Ok(EvalMetrics {
        accuracy: if total > 0 { 100.0 * hits as f64 / total as f64 } else { 0.0 },
        per_class,
        class_counts: counts,
        class_correct: correct,
    })
}
