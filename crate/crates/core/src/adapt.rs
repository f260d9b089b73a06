//! Round-based source-free active adaptation.
//!
//! Each round scores the unlabeled pool, annotates the round's quota, then
//! jointly trains the target network and the GATN on labeled and unlabeled
//! mini-batches:
//!
//! ```text
//! total = L_task(labeled) + lambda_pseudo * L_task(pseudo-labeled)
//!       + lambda_tr_l * L_tr(labeled) + lambda_tr_ul * L_tr(unlabeled)
//! ```
//!
//! The pretrained network stays frozen throughout and is only used for
//! transferability scores and as the source of `F_P`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TargetPool};
use crate::error::{config_err, contract_err, Result};
use crate::gatn::{Gatn, TauInit};
use crate::model::{freeze, init_target_from_source, NetworkSplit, ParamSubset};
use crate::optim::{OptimizerConfig, Sgd};
use crate::rng::SeedStream;
use crate::sampler::{
    diversity_score, entropy_scores, explicit_schedule, hal_score, pooled_features, round_schedule, select_batch,
    toggles_for_sampler, transferability_scores, SampleScore, SamplerKind, ScoreToggles, LOG_EPS,
};
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::Tensor;
use crate::train::{evaluate, EvalMetrics};

/// Every hyperparameter of an adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub budget: usize,
    pub rounds: usize,
    /// Per-round quotas overriding the equal split; must sum to `budget`.
    pub explicit_quotas: Option<Vec<usize>>,
    pub lambda_tr_labeled: f64,
    pub lambda_tr_unlabeled: f64,
    pub lambda_pseudo: f64,
    pub pl_threshold_score: f64,
    pub pl_threshold_selftrain: f64,
    pub epochs_per_round: usize,
    /// Optimizer steps per epoch; defaults to one pass over the labeled set.
    pub steps_per_epoch: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub diversity_enabled: bool,
    pub gradient_subset: ParamSubset,
    pub sampler: SamplerKind,
    /// `false` drops the transfer loss and the GATN entirely.
    pub use_gatn: bool,
    /// `false` bypasses the modulation network (`F_P-tr = F_P`).
    pub use_modulation: bool,
    pub tau_init: TauInit,
    /// Keep every round's per-sample scores in the report.
    pub record_scores: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            budget: 300,
            rounds: 5,
            explicit_quotas: None,
            lambda_tr_labeled: 0.01,
            lambda_tr_unlabeled: 0.01,
            lambda_pseudo: 1.0,
            pl_threshold_score: 0.5,
            pl_threshold_selftrain: 0.95,
            epochs_per_round: 10,
            steps_per_epoch: None,
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            seed: 0,
            diversity_enabled: false,
            gradient_subset: ParamSubset::Head,
            sampler: SamplerKind::Hal,
            use_gatn: true,
            use_modulation: true,
            tau_init: TauInit::NearIdentity,
            record_scores: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.budget == 0 || self.budget > pool_size {
            return Err(config_err!("budget {} must lie in [1, pool size {pool_size}]", self.budget));
        }
        self.quotas()?;
        for (name, v) in [
            ("lambda_tr_labeled", self.lambda_tr_labeled),
            ("lambda_tr_unlabeled", self.lambda_tr_unlabeled),
            ("lambda_pseudo", self.lambda_pseudo),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be a nonnegative number, got {v}"));
            }
        }
        for (name, v) in [("pl_threshold_score", self.pl_threshold_score), ("pl_threshold_selftrain", self.pl_threshold_selftrain)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.epochs_per_round == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(config_err!("epochs_per_round, batch_size and steps_per_epoch must be positive"));
        }
        if self.gradient_subset == ParamSubset::None {
            return Err(config_err!("gradient_subset must be head or all"));
        }
        self.optimizer.validate()
    }

    pub fn quotas(&self) -> Result<Vec<usize>> {
        match &self.explicit_quotas {
            Some(q) => explicit_schedule(q, self.budget),
            None => round_schedule(self.budget, self.rounds),
        }
    }

    /// Transfer-loss weights actually applied, after the GATN switch.
    pub fn effective_lambda_tr(&self) -> (f64, f64) {
        if self.use_gatn {
            (self.lambda_tr_labeled, self.lambda_tr_unlabeled)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Arg-max labels and a confidence mask (`1` where the top probability
/// reaches `threshold`).
pub fn pseudo_labels(net: &NetworkSplit, batch: &Tensor, threshold: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    Ok(pseudo_labels_from_probs(&net.probabilities(batch)?, threshold))
}

pub fn pseudo_labels_from_probs(probs: &Tensor, threshold: f64) -> (Vec<usize>, Vec<f64>) {
    let k = probs.shape()[1];
    probs
        .data()
        .chunks(k)
        .map(|row| {
            let (label, p) = crate::sampler::argmax(row);
            (label, if p >= threshold { 1.0 } else { 0.0 })
        })
        .unzip()
}

/// Masked mean cross-entropy of `(N, K)` logits.
pub fn task_loss(logits: &Tensor, labels: &[usize], mask: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels, mask)?;
    Ok(tape.value(loss).item())
}

/// Loss components of one optimization step. Components whose weight is
/// zero are not evaluated and read `0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_task_labeled: f64,
    pub l_task_pseudo: f64,
    pub l_tr_labeled: f64,
    pub l_tr_unlabeled: f64,
    pub total: f64,
    /// `true` when there was nothing to optimize and no update was applied.
    pub skipped: bool,
}

impl StepLosses {
    /// `total` recomputed from the components with the weights of `config`.
    pub fn recompose(&self, config: &AdaptationConfig) -> f64 {
        let (lam_l, lam_ul) = config.effective_lambda_tr();
        self.l_task_labeled + config.lambda_pseudo * self.l_task_pseudo + lam_l * self.l_tr_labeled + lam_ul * self.l_tr_unlabeled
    }
}

/// Optimizer state carried across steps.
pub struct AdaptationOptimizers {
    pub target: Sgd,
    pub gatn: Sgd,
}

impl AdaptationOptimizers {
    pub fn new(config: &OptimizerConfig) -> Self {
        Self { target: Sgd::new(config), gatn: Sgd::new(config) }
    }
}

/// A labeled mini-batch.
pub struct LabeledBatch<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
}

fn add_weighted(tape: &mut Tape, total: Option<Var>, term: Var, weight: f64) -> Result<Option<Var>> {
    let scaled = if weight == 1.0 { term } else { tape.scale(term, weight) };
    Ok(Some(match total {
        Some(t) => tape.add(t, scaled)?,
        None => scaled,
    }))
}

/// One joint update of the target network and the GATN.
///
/// The pretrained network must be frozen and is never modified.
pub fn adaptation_step(
    labeled: Option<LabeledBatch<'_>>,
    unlabeled: Option<&Tensor>,
    target: &mut NetworkSplit,
    pretrained: &NetworkSplit,
    gatn: &mut Gatn,
    config: &AdaptationConfig,
    optimizers: &mut AdaptationOptimizers,
) -> Result<StepLosses> {
    if !pretrained.is_frozen() {
        return Err(contract_err!("the pretrained network must be frozen"));
    }
    if target.is_frozen() {
        return Err(contract_err!("the target network must be trainable"));
    }
    let labeled = labeled.filter(|b| !b.labels.is_empty());
    let (lam_l, lam_ul) = config.effective_lambda_tr();
    if labeled.is_none() && lam_ul == 0.0 {
        log::warn!("adaptation step skipped: no labeled samples and no unlabeled transfer loss");
        return Ok(StepLosses { skipped: true, ..StepLosses::default() });
    }

    let mut tape = Tape::new();
    let bt = target.bind(&mut tape, ParamSubset::All);
    let bp = pretrained.bind(&mut tape, ParamSubset::None);
    let bg = config.use_gatn.then(|| gatn.bind(&mut tape, true));
    let mut out = StepLosses::default();
    let mut total: Option<Var> = None;
    let mut term_l_tr = None;
    let mut term_ul_pseudo = None;
    let mut term_ul_tr = None;

    if let Some(batch) = &labeled {
        let x = tape.constant(batch.images.clone());
        let f_t = target.encode(&mut tape, &bt, x)?;
        let logits = target.classify(&mut tape, &bt, f_t)?;
        let ce = tape.cross_entropy(logits, batch.labels, &vec![1.0; batch.labels.len()])?;
        out.l_task_labeled = tape.value(ce).item();
        total = add_weighted(&mut tape, total, ce, 1.0)?;
        if let (Some(bg), true) = (&bg, lam_l > 0.0) {
            let f_p = pretrained.encode(&mut tape, &bp, x)?;
            let g = gatn.forward_on(&mut tape, bg, f_p, f_t, config.use_modulation)?;
            out.l_tr_labeled = tape.value(g.loss).item();
            term_l_tr = Some(g.loss);
        }
    }
    if let Some(images) = unlabeled.filter(|u| u.shape()[0] > 0) {
        let x = tape.constant(images.clone());
        let f_t = target.encode(&mut tape, &bt, x)?;
        if config.lambda_pseudo > 0.0 {
            let logits = target.classify(&mut tape, &bt, f_t)?;
            let (labels, mask) = pseudo_labels_from_probs(&softmax_rows(tape.value(logits)), config.pl_threshold_selftrain);
            let ce = tape.cross_entropy(logits, &labels, &mask)?;
            out.l_task_pseudo = tape.value(ce).item();
            term_ul_pseudo = Some(ce);
        }
        if let (Some(bg), true) = (&bg, lam_ul > 0.0) {
            let f_p = pretrained.encode(&mut tape, &bp, x)?;
            let g = gatn.forward_on(&mut tape, bg, f_p, f_t, config.use_modulation)?;
            out.l_tr_unlabeled = tape.value(g.loss).item();
            term_ul_tr = Some(g.loss);
        }
    }
    // Summation order matches `StepLosses::recompose`.
    if let Some(t) = term_ul_pseudo {
        total = add_weighted(&mut tape, total, t, config.lambda_pseudo)?;
    }
    if let Some(t) = term_l_tr {
        total = add_weighted(&mut tape, total, t, lam_l)?;
    }
    if let Some(t) = term_ul_tr {
        total = add_weighted(&mut tape, total, t, lam_ul)?;
    }
    let Some(total) = total else {
        return Ok(StepLosses { skipped: true, ..out });
    };
    out.total = tape.value(total).item();

    let grads = tape.backward(total);
    let target_grads: Vec<Tensor> = bt.vars().iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
    optimizers.target.step_network(target, &target_grads);
    if let Some(bg) = &bg {
        let gatn_grads: Vec<Tensor> =
            Gatn::bound_vars(bg).iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
        optimizers.gatn.step(gatn.parameters_mut(), &gatn_grads);
    }
    Ok(out)
}

/// Per-sample scores of one round, with the selection outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundScores {
    pub round: usize,
    pub scores: Vec<SampleScore>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub cumulative_budget: usize,
    pub selected_indices: Vec<usize>,
    pub mean_l_tr: f64,
    pub mean_l_task: f64,
    pub mean_total: f64,
    pub steps: usize,
    pub eval: EvalMetrics,
}

/// Outcome of a full adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptationReport {
    pub rounds: Vec<RoundRecord>,
    pub target: NetworkSplit,
    /// Discardable after training; evaluation only needs `target`.
    pub gatn: Gatn,
    pub labeled_indices: Vec<usize>,
    pub round_scores: Vec<RoundScores>,
    /// Every step's loss components, in order.
    pub step_losses: Vec<StepLosses>,
}

impl AdaptationReport {
    pub fn final_eval(&self) -> &EvalMetrics {
        &self.rounds.last().expect("at least one round").eval
    }
}

/// Scores every unlabeled sample for one round.
fn score_pool(
    pool: &TargetPool,
    unlabeled: &[usize],
    toggles: ScoreToggles,
    transferability: &[f64],
    target: &NetworkSplit,
) -> Result<Vec<SampleScore>> {
    let images = pool.gather_images(unlabeled);
    let entropies = if toggles.lambda_e { Some(entropy_scores(target, &images)?) } else { None };
    let diversity = if toggles.lambda_k {
        let candidates = pooled_features(target, &images)?;
        let annotated = pooled_features(target, &pool.gather_images(pool.labeled_indices()))?;
        Some(candidates.iter().map(|c| diversity_score(c, &annotated)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    unlabeled
        .iter()
        .enumerate()
        .map(|(j, &index)| {
            let mut s = SampleScore::new(index);
            if toggles.lambda_g {
                s.a_g = Some(transferability[index]);
            }
            s.a_e = entropies.as_ref().map(|e| e[j]);
            s.a_d = diversity.as_ref().map(|d| d[j]);
            s.h_al = hal_score(&s, toggles, LOG_EPS)?;
            Ok(s)
        })
        .collect()
}

/// Cycles through a reshuffled permutation of `items`.
struct Cycler {
    items: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seeds: SeedStream,
}

impl Cycler {
    fn new(items: Vec<usize>, seeds: SeedStream) -> Self {
        let mut c = Self { items, cursor: 0, epoch: 0, seeds };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.items.shuffle(&mut self.seeds.index(self.epoch).rng());
        self.epoch += 1;
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.items.is_empty() {
            return out;
        }
        while out.len() < size.min(self.items.len()) {
            if self.cursor == self.items.len() {
                self.reshuffle();
            }
            out.push(self.items[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Runs the full round-based adaptation from a trained source network.
///
/// `pool` must be fully unannotated and its budget must equal
/// `config.budget`; `eval` is the held-out labeled target split.
pub fn run_adaptation(
    source: &NetworkSplit,
    pool: &mut TargetPool,
    eval: &LabeledDataset,
    config: &AdaptationConfig,
) -> Result<AdaptationReport> {
    config.validate(pool.len())?;
    if pool.budget() != config.budget {
        return Err(config_err!("pool budget {} differs from configured budget {}", pool.budget(), config.budget));
    }
    if pool.budget_used() != 0 {
        return Err(contract_err!("target pool must start fully unlabeled"));
    }
    let quotas = config.quotas()?;
    let seeds = SeedStream::new(config.seed);
    let pretrained = freeze(source);
    let mut target = init_target_from_source(&pretrained, pool.num_classes(), seeds.child("target-init").seed())?;
    let mut gatn = Gatn::new(target.feature_channels(), config.tau_init, seeds.child("gatn-init").seed())?;
    let mut optimizers = AdaptationOptimizers::new(&config.optimizer);

    let needs_transferability = (1..=quotas.len())
        .any(|r| toggles_for_sampler(config.sampler, r, config.diversity_enabled).is_some_and(|t| t.lambda_g));
    let transferability = if needs_transferability {
        transferability_scores(&pretrained, pool.images(), config.pl_threshold_score, config.gradient_subset)?
    } else {
        Vec::new()
    };

    let mut rounds = Vec::with_capacity(quotas.len());
    let mut round_scores = Vec::new();
    let mut step_losses = Vec::new();
    let mut unlabeled_cycler: Option<Cycler> = None;
    for (r, &quota) in quotas.iter().enumerate() {
        let round = r + 1;
        let unlabeled = pool.unlabeled_indices();
        let selected = match toggles_for_sampler(config.sampler, round, config.diversity_enabled) {
            Some(toggles) => {
                let scores = score_pool(pool, &unlabeled, toggles, &transferability, &target)?;
                let selected = select_batch(&scores, quota)?;
                if config.record_scores {
                    round_scores.push(RoundScores { round, scores, selected: selected.clone() });
                }
                selected
            }
            None => {
                let mut shuffled = unlabeled.clone();
                shuffled.shuffle(&mut seeds.child("random-sampler").index(round as u64).rng());
                shuffled.truncate(quota);
                shuffled
            }
        };
        pool.annotate(&selected)?;

        let labeled_idx = pool.labeled_indices().to_vec();
        let unlabeled_idx = pool.unlabeled_indices();
        let mut labeled_cycler = Cycler::new(labeled_idx.clone(), seeds.child("labeled-batches").index(round as u64));
        // The unlabeled stream continues across rounds over the shrinking pool.
        let mut ul = Cycler::new(unlabeled_idx, seeds.child("unlabeled-batches").index(round as u64));
        if let Some(prev) = unlabeled_cycler.take() {
            ul.epoch += prev.epoch;
        }
        let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| labeled_idx.len().div_ceil(config.batch_size));
        let (mut sum_tr, mut sum_task, mut sum_total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..config.epochs_per_round {
            for _ in 0..steps_per_epoch {
                let lb = labeled_cycler.next_batch(config.batch_size);
                let ub = ul.next_batch(config.batch_size);
                let l_images = pool.gather_images(&lb);
                let l_labels = pool.labels_of(&lb)?;
                let u_images = pool.gather_images(&ub);
                let losses = adaptation_step(
                    Some(LabeledBatch { images: &l_images, labels: &l_labels }),
                    Some(&u_images),
                    &mut target,
                    &pretrained,
                    &mut gatn,
                    config,
                    &mut optimizers,
                )?;
                if !losses.skipped {
                    sum_tr += losses.l_tr_labeled + losses.l_tr_unlabeled;
                    sum_task += losses.l_task_labeled + losses.l_task_pseudo;
                    sum_total += losses.total;
                    steps += 1;
                }
                step_losses.push(losses);
            }
        }
        unlabeled_cycler = Some(ul);
        let denom = steps.max(1) as f64;
        let eval_metrics = evaluate(&target, eval)?;
        log::info!(
            "round {round}: labeled {} / {}, accuracy {:.2}%",
            pool.budget_used(),
            config.budget,
            eval_metrics.accuracy
        );
        rounds.push(RoundRecord {
            round,
            cumulative_budget: pool.budget_used(),
            selected_indices: selected,
            mean_l_tr: sum_tr / denom,
            mean_l_task: sum_task / denom,
            mean_total: sum_total / denom,
            steps,
            eval: eval_metrics,
        });
    }
    Ok(AdaptationReport {
        rounds,
        target,
        gatn,
        labeled_indices: pool.labeled_indices().to_vec(),
        round_scores,
        step_losses,
    })
}
