//! Acquisition scores and greedy budgeted selection.
//!
//! Each unlabeled sample gets a transferability score (gradient norm of the
//! frozen pretrained network under its own pseudo-label), an entropy score
//! from the target network and, optionally, a diversity score in feature
//! space. The combined objective is
//!
//! ```text
//! H = -lambda_g * ln A_G + lambda_e * ln A_E + lambda_k * ln A_D
//! ```
//!
//! with binary toggles, and the highest-scoring samples are annotated.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, input_err, Result};
use crate::model::{NetworkSplit, ParamSubset};
use crate::tape::{softmax_rows, Tape};
use crate::tensor::Tensor;

/// Floor applied inside the logarithms of the combined score.
pub const LOG_EPS: f64 = 1e-12;

/// Samples scored per encoder pass when scoring a whole pool.
const SCORE_CHUNK: usize = 256;

/// Per-sample acquisition record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    /// Gradient norm; `+inf` when no prediction clears the pseudo-label threshold.
    pub a_g: Option<f64>,
    pub a_e: Option<f64>,
    pub a_d: Option<f64>,
    pub h_al: f64,
}

impl SampleScore {
    pub fn new(index: usize) -> Self {
        Self { index, a_g: None, a_e: None, a_d: None, h_al: f64::NAN }
    }
}

/// Binary weights of the combined acquisition objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreToggles {
    pub lambda_g: bool,
    pub lambda_e: bool,
    pub lambda_k: bool,
}

impl ScoreToggles {
    pub fn new(lambda_g: bool, lambda_e: bool, lambda_k: bool) -> Result<Self> {
        if !(lambda_g || lambda_e || lambda_k) {
            return Err(config_err!("at least one acquisition toggle must be on"));
        }
        Ok(Self { lambda_g, lambda_e, lambda_k })
    }
}

/// Acquisition strategy used to pick samples each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Transferability first, then transferability + entropy (+ diversity).
    Hal,
    EntropyOnly,
    TransferabilityOnly,
    Random,
}

/// Toggles of the combined objective for a 1-based round index.
///
/// Round 1 uses transferability alone; later rounds add entropy and, when
/// enabled, diversity.
pub fn toggles_for_round(round_index: usize, diversity_enabled: bool) -> ScoreToggles {
    if round_index <= 1 {
        ScoreToggles { lambda_g: true, lambda_e: false, lambda_k: false }
    } else {
        ScoreToggles { lambda_g: true, lambda_e: true, lambda_k: diversity_enabled }
    }
}

/// Toggles a sampler uses in a given round; `None` for random sampling.
pub fn toggles_for_sampler(kind: SamplerKind, round_index: usize, diversity_enabled: bool) -> Option<ScoreToggles> {
    match kind {
        SamplerKind::Hal => Some(toggles_for_round(round_index, diversity_enabled)),
        SamplerKind::EntropyOnly => Some(ScoreToggles { lambda_g: false, lambda_e: true, lambda_k: false }),
        SamplerKind::TransferabilityOnly => Some(ScoreToggles { lambda_g: true, lambda_e: false, lambda_k: false }),
        SamplerKind::Random => None,
    }
}

fn as_single(sample: &Tensor) -> Result<Tensor> {
    match sample.ndim() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(sample.shape());
            sample.clone().reshape(&s)
        }
        4 if sample.shape()[0] == 1 => Ok(sample.clone()),
        _ => Err(input_err!("expected a single image (C, H, W) or (1, C, H, W), got {:?}", sample.shape())),
    }
}

/// Gradient norm of the pseudo-label loss of the frozen pretrained network.
///
/// The pseudo-label is the arg-max class when its probability reaches
/// `pl_threshold`; otherwise the sample is untransferable and scores `+inf`.
/// Gradients are computed but never applied.
pub fn transferability_score(pretrained: &NetworkSplit, sample: &Tensor, pl_threshold: f64, subset: ParamSubset) -> Result<f64> {
    scaled_transferability_score(pretrained, sample, pl_threshold, subset, 1.0)
}

/// [`transferability_score`] with the scoring loss multiplied by `loss_scale`.
pub fn scaled_transferability_score(
    pretrained: &NetworkSplit,
    sample: &Tensor,
    pl_threshold: f64,
    subset: ParamSubset,
    loss_scale: f64,
) -> Result<f64> {
    if !pretrained.is_frozen() {
        return Err(contract_err!("transferability is scored on the frozen pretrained network"));
    }
    let x = as_single(sample)?;
    let mut tape = Tape::new();
    let bound = pretrained.bind(&mut tape, subset);
    let xv = tape.constant(x);
    let f = pretrained.encode(&mut tape, &bound, xv)?;
    let logits = pretrained.classify(&mut tape, &bound, f)?;
    gradient_norm(&mut tape, logits, &bound_subset_vars(&bound, subset), pl_threshold, loss_scale)
}

fn bound_subset_vars(bound: &crate::model::BoundNetwork, subset: ParamSubset) -> Vec<crate::tape::Var> {
    match subset {
        ParamSubset::None => Vec::new(),
        ParamSubset::Head => bound.head_vars().to_vec(),
        ParamSubset::All => bound.vars(),
    }
}

fn gradient_norm(
    tape: &mut Tape,
    logits: crate::tape::Var,
    vars: &[crate::tape::Var],
    pl_threshold: f64,
    loss_scale: f64,
) -> Result<f64> {
    let probs = softmax_rows(tape.value(logits));
    let (label, confidence) = argmax(probs.data());
    if confidence < pl_threshold {
        return Ok(f64::INFINITY);
    }
    let loss = tape.cross_entropy(logits, &[label], &[1.0])?;
    let loss = tape.scale(loss, loss_scale);
    let grads = tape.backward(loss);
    let sq: f64 = vars.iter().filter_map(|&v| grads.get(v)).map(Tensor::sq_norm).sum();
    Ok(libm::sqrt(sq))
}

/// Index and value of the largest entry (first one on ties).
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Shannon entropy `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * libm::log(p)).sum();
    h.max(0.0)
}

/// Entropy of the target network's softmax for one sample.
pub fn entropy_score(target: &NetworkSplit, sample: &Tensor) -> Result<f64> {
    let probs = target.probabilities(&as_single(sample)?)?;
    Ok(entropy(probs.data()))
}

/// Mean Euclidean distance from `candidate` to each annotated feature;
/// `+inf` when nothing has been annotated yet.
pub fn diversity_score(candidate: &[f64], annotated: &[Vec<f64>]) -> Result<f64> {
    if annotated.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0;
    for a in annotated {
        if a.len() != candidate.len() {
            return Err(input_err!("feature dimension {} vs {}", a.len(), candidate.len()));
        }
        total += libm::sqrt(a.iter().zip(candidate).map(|(x, y)| (x - y) * (x - y)).sum());
    }
    Ok(total / annotated.len() as f64)
}

/// Globally average-pooled encoder features, one vector per sample.
pub fn pooled_features(net: &NetworkSplit, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(SCORE_CHUNK) {
        let idx: Vec<usize> = (start..(start + SCORE_CHUNK).min(n)).collect();
        let f = net.forward_features(&images.gather_rows(&idx))?;
        let s = f.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        for planes in f.data().data().chunks(c * hw) {
            out.push(planes.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect());
        }
    }
    Ok(out)
}

/// Combined objective for one sample under `toggles`.
pub fn hal_score(score: &SampleScore, toggles: ScoreToggles, eps: f64) -> Result<f64> {
    let need = |value: Option<f64>, name: &str| {
        value.ok_or_else(|| contract_err!("toggle for {name} is on but sample {} has no {name} score", score.index))
    };
    let mut h = 0.0;
    if toggles.lambda_g {
        let a_g = need(score.a_g, "A_G")?;
        if a_g == f64::INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        h -= libm::log(a_g.max(eps));
    }
    if toggles.lambda_e {
        h += libm::log(need(score.a_e, "A_E")?.max(eps));
    }
    if toggles.lambda_k {
        h += libm::log(need(score.a_d, "A_D")?.max(eps));
    }
    Ok(h)
}

fn rank_order(a: &SampleScore, b: &SampleScore) -> Ordering {
    let key = |s: &SampleScore| if s.h_al.is_nan() { f64::NEG_INFINITY } else { s.h_al };
    key(b).partial_cmp(&key(a)).unwrap_or(Ordering::Equal).then(a.index.cmp(&b.index))
}

/// Greedy top-`quota` selection by `h_al`, ties broken by ascending index.
pub fn select_batch(pool_scores: &[SampleScore], quota: usize) -> Result<Vec<usize>> {
    let mut seen: Vec<usize> = pool_scores.iter().map(|s| s.index).collect();
    seen.sort_unstable();
    if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
        return Err(contract_err!("duplicate pool index {} in scores", w[0]));
    }
    let mut ranked: Vec<&SampleScore> = pool_scores.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    Ok(ranked.into_iter().take(quota).map(|s| s.index).collect())
}

/// Per-round quotas: an equal split of `budget` with the remainder added to
/// the final round.
pub fn round_schedule(budget: usize, rounds: usize) -> Result<Vec<usize>> {
    if budget == 0 || rounds == 0 {
        return Err(config_err!("budget and rounds must be positive"));
    }
    if rounds > budget {
        return Err(config_err!("{rounds} rounds cannot each annotate at least one of {budget} samples"));
    }
    let base = budget / rounds;
    let mut quotas = vec![base; rounds];
    quotas[rounds - 1] += budget - base * rounds;
    Ok(quotas)
}

/// Validates an explicit per-round quota plan against the total budget.
pub fn explicit_schedule(quotas: &[usize], budget: usize) -> Result<Vec<usize>> {
    if quotas.is_empty() || quotas.contains(&0) {
        return Err(config_err!("explicit quotas must be non-empty and positive"));
    }
    let total: usize = quotas.iter().sum();
    if total != budget {
        return Err(config_err!("explicit quotas sum to {total}, budget is {budget}"));
    }
    Ok(quotas.to_vec())
}

/// Running totals of a quota plan.
pub fn cumulative_budgets(quotas: &[usize]) -> Vec<usize> {
    quotas
        .iter()
        .scan(0, |acc, &q| {
            *acc += q;
            Some(*acc)
        })
        .collect()
}

/// Transferability scores for every image in `images` (`(N, C, H, W)`).
///
/// With [`ParamSubset::Head`] the encoder runs once per chunk and only the
/// head is differentiated per sample; results equal [`transferability_score`].
pub fn transferability_scores(
    pretrained: &NetworkSplit,
    images: &Tensor,
    pl_threshold: f64,
    subset: ParamSubset,
) -> Result<Vec<f64>> {
    if !pretrained.is_frozen() {
        return Err(contract_err!("transferability is scored on the frozen pretrained network"));
    }
    let n = images.shape().first().copied().unwrap_or(0);
    if subset != ParamSubset::Head {
        return (0..n).map(|i| transferability_score(pretrained, &images.row(i), pl_threshold, subset)).collect();
    }
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(SCORE_CHUNK) {
        let idx: Vec<usize> = (start..(start + SCORE_CHUNK).min(n)).collect();
        let features = pretrained.forward_features(&images.gather_rows(&idx))?.into_tensor();
        for i in 0..idx.len() {
            let mut tape = Tape::new();
            let bound = pretrained.bind(&mut tape, ParamSubset::Head);
            let f = tape.constant(features.row(i));
            let logits = pretrained.classify(&mut tape, &bound, f)?;
            out.push(gradient_norm(&mut tape, logits, &bound.head_vars(), pl_threshold, 1.0)?);
        }
    }
    Ok(out)
}

/// Target-network entropy for every image in `images`.
pub fn entropy_scores(target: &NetworkSplit, images: &Tensor) -> Result<Vec<f64>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(SCORE_CHUNK) {
        let idx: Vec<usize> = (start..(start + SCORE_CHUNK).min(n)).collect();
        let probs = target.probabilities(&images.gather_rows(&idx))?;
        let k = probs.shape()[1];
        out.extend(probs.data().chunks(k).map(entropy));
    }
    Ok(out)
}
