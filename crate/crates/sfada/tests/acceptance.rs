//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! Positional arguments filter criteria by id prefix, e.g.
//! `cargo test -p sfada --test acceptance -- 4` runs only the trend group.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng as _;

use sfada::config::{apply_ablation, ExperimentConfig, GatnMode};
use sfada::core::adapt::{run_adaptation, AdaptationConfig};
use sfada::core::data::{LabeledDataset, PoolManifest, TargetPool};
use sfada::core::gatn::{
    attention_matrix, gatn_forward, guided_attention, transfer_loss, AttentionMode, AttentionRepresentation, Gatn,
    GuidedAttentionModule, TauInit,
};
use sfada::core::model::{build_small_cnn, freeze, FeatureMap, NetworkSplit, ParamSubset};
use sfada::core::rng::{Rng, SeedStream};
use sfada::core::sampler::{
    entropy, entropy_score, entropy_scores, hal_score, round_schedule, scaled_transferability_score, select_batch,
    toggles_for_round, transferability_scores, SampleScore, SamplerKind,
};
use sfada::core::tape::Tape;
use sfada::core::train::{evaluate, EvalMetrics};
use sfada::core::{Error as CoreError, Tensor};
use sfada::experiment::{self, EvalSplit};
use sfada::Error;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Suite {
    filters: Vec<String>,
    failures: usize,
    checked: usize,
}

impl Suite {
    fn wants(&self, group: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| group.starts_with(f.as_str()) || f.starts_with(group))
    }

    fn check(&mut self, id: &str, name: &str, ok: bool, detail: impl AsRef<str>) {
        if !self.filters.is_empty() && !self.filters.iter().any(|f| id.starts_with(f.as_str())) {
            return;
        }
        self.checked += 1;
        if !ok {
            self.failures += 1;
        }
        println!("{} [{id}] {name}: {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    }
}

fn rng(seed: u64) -> Rng {
    SeedStream::new(seed).rng()
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn fm(t: Tensor) -> FeatureMap {
    FeatureMap::new(t, "acceptance").unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn central_difference(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dense reference for one guided attention branch, written as plain loops.

fn project(layer: &sfada::core::model::Conv2d, x: &[f64], c_in: usize, t: usize) -> Vec<Vec<f64>> {
    let c_out = layer.weight.shape()[0];
    let (w, b) = (layer.weight.data(), layer.bias.data());
    (0..c_out)
        .map(|o| (0..t).map(|j| b[o] + (0..c_in).map(|c| w[o * c_in + c] * x[c * t + j]).sum::<f64>()).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Returns `(attention rows, sigmoid weights)` for every batch item.
fn dense_attention(module: &GuidedAttentionModule, f_p_tr: &Tensor, f_t: &Tensor) -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let s = f_p_tr.shape();
    let (n, c, t) = (s[0], s[1], s[2] * s[3]);
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for ni in 0..n {
        let xp = &f_p_tr.data()[ni * c * t..][..c * t];
        let xt = &f_t.data()[ni * c * t..][..c * t];
        let q = project(&module.query, xp, c, t);
        let k = project(&module.key, xt, c, t);
        let v = project(&module.value, xt, c, t);
        let qc = q.len();
        let mut out = vec![vec![0.0; t]; c];
        let attn: Vec<Vec<f64>> = match module.mode {
            AttentionMode::Spatial => {
                let a: Vec<Vec<f64>> = (0..t)
                    .map(|i| softmax(&(0..t).map(|j| (0..qc).map(|o| q[o][i] * k[o][j]).sum()).collect::<Vec<f64>>()))
                    .collect();
                for (ch, out_row) in out.iter_mut().enumerate() {
                    for (i, o) in out_row.iter_mut().enumerate() {
                        *o = (0..t).map(|j| v[ch][j] * a[i][j]).sum();
                    }
                }
                a
            }
            AttentionMode::Channel => {
                let a: Vec<Vec<f64>> = (0..c)
                    .map(|ci| softmax(&(0..c).map(|d| (0..t).map(|j| q[ci][j] * k[d][j]).sum()).collect::<Vec<f64>>()))
                    .collect();
                for (ch, out_row) in out.iter_mut().enumerate() {
                    for (i, o) in out_row.iter_mut().enumerate() {
                        *o = (0..c).map(|d| a[ch][d] * v[d][i]).sum();
                    }
                }
                a
            }
        };
        rows.push(attn);
        weights.extend(out.into_iter().flatten().map(|z| 1.0 / (1.0 + (-z).exp())));
    }
    (rows, weights)
}

fn random_attention_case(rng: &mut Rng, mode: AttentionMode) -> (GuidedAttentionModule, Tensor, Tensor) {
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=5), rng.gen_range(1..=5)];
    let reduction = if mode == AttentionMode::Spatial { 8 } else { 1 };
    let module = GuidedAttentionModule::new(mode, shape[1], reduction, rng).unwrap();
    let scale = rng.gen_range(0.5..3.0);
    let a = rand_tensor(&shape, rng).map(|v| v * scale);
    let b = rand_tensor(&shape, rng).map(|v| v * scale);
    (module, a, b)
}

fn math_core(suite: &mut Suite) {
    let start = Instant::now();
    let mut r = rng(11);
    let (mut row_err, mut oracle_err, mut oracle_rows_err) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..100 {
        let mode = if case % 2 == 0 { AttentionMode::Spatial } else { AttentionMode::Channel };
        let (module, fp, ft) = random_attention_case(&mut r, mode);
        let matrix = attention_matrix(&module, &fm(fp.clone()), &fm(ft.clone())).unwrap();
        let tokens = *matrix.shape().last().unwrap();
        for row in matrix.data().chunks(tokens) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let weights = guided_attention(&module, &fm(fp.clone()), &fm(ft.clone())).unwrap().weights;
        let (rows, dense) = dense_attention(&module, &fp, &ft);
        for (a, b) in weights.data().iter().zip(&dense) {
            oracle_err = oracle_err.max((a - b).abs());
        }
        for (a, b) in matrix.data().iter().zip(rows.iter().flatten().flatten()) {
            oracle_rows_err = oracle_rows_err.max((a - b).abs());
        }
    }
    suite.check("1.1", "attention rows sum to one", row_err <= 1e-6, format!("max |sum - 1| = {row_err:.2e} over 100 inputs (tol 1e-6)"));
    let worst = oracle_err.max(oracle_rows_err);
    suite.check("1.2", "guided attention matches dense oracle", worst <= 1e-6, format!("max abs error {worst:.2e} (tol 1e-6)"));

    let mut min_loss = f64::INFINITY;
    let mut equal_zero = true;
    for _ in 0..100 {
        let shape = [r.gen_range(1..=2), r.gen_range(1..=8), r.gen_range(1..=5), r.gen_range(1..=5)];
        let a = rand_tensor(&shape, &mut r);
        let b = rand_tensor(&shape, &mut r);
        let wa = AttentionRepresentation { weights: rand_tensor(&shape, &mut r).map(|v| 0.5 + 0.49 * v) };
        let wb = AttentionRepresentation { weights: rand_tensor(&shape, &mut r).map(|v| 0.5 + 0.49 * v) };
        min_loss = min_loss.min(transfer_loss(&fm(a.clone()), &fm(b), &wa, &wb).unwrap());
        equal_zero &= transfer_loss(&fm(a.clone()), &fm(a), &wa, &wb).unwrap() == 0.0;
    }
    let half = || AttentionRepresentation { weights: Tensor::new(&[1, 1, 1, 1], vec![0.5]).unwrap() };
    let scalar = transfer_loss(
        &fm(Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap()),
        &fm(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap()),
        &half(),
        &half(),
    )
    .unwrap();
    let ok = min_loss >= 0.0 && equal_zero && scalar == 4.0;
    suite.check(
        "1.3",
        "transfer loss sign, zero and scalar value",
        ok,
        format!("min over 100 inputs {min_loss:.3e}, zero on equal maps: {equal_zero}, scalar case {scalar}"),
    );

    let worst = transfer_loss_gradients(&mut r);
    suite.check(
        "1.4",
        "transfer loss gradients match finite differences",
        worst.iter().all(|(_, e)| *e < 1e-4),
        worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ") + " (tol 1e-4)",
    );

    let one_hot = entropy(&[0.0, 0.0, 1.0, 0.0]);
    let mut head_zero = build_small_cnn(10, 2, 3).unwrap();
    for p in head_zero.parameters_mut().unwrap().into_iter().skip(4) {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let sample = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 7) as f64 / 7.0);
    let uniform = entropy_score(&head_zero, &sample).unwrap();
    let ln10 = 10f64.ln();
    let mut bounded = true;
    let net = build_small_cnn(10, 2, 4).unwrap();
    for i in 0..50 {
        let x = rand_tensor(&[1, 1, 16, 16], &mut r).map(|v| v * (1 + i) as f64);
        let e = entropy_score(&net, &x).unwrap();
        bounded &= (0.0..=ln10 + 1e-12).contains(&e);
        let k = r.gen_range(1..=12);
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..1.0f64).powi(4)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        };
        bounded &= (0.0..=(k as f64).ln() + 1e-12).contains(&entropy(&probs));
    }
    suite.check(
        "1.5",
        "entropy score examples and bounds",
        one_hot == 0.0 && (uniform - ln10).abs() < 1e-9 && bounded,
        format!("one-hot {one_hot}, uniform |H - ln 10| = {:.1e} (tol 1e-9), bounded: {bounded}", (uniform - ln10).abs()),
    );
    let secs = start.elapsed().as_secs_f64();
    suite.check("1.6", "math core runtime", secs < 60.0, format!("{secs:.1}s (limit 60s)"));
}

/// Worst relative error per parameter group.
fn transfer_loss_gradients(r: &mut Rng) -> Vec<(&'static str, f64)> {
    let shape = [2, 8, 3, 3];
    let gatn = Gatn::new(8, TauInit::Random, r.gen()).unwrap();
    let fp = rand_tensor(&shape, r);
    let ft = rand_tensor(&shape, r);
    let loss = |g: &Gatn, fp: &Tensor, ft: &Tensor| {
        gatn_forward(&g.tau, &g.gsa, &g.gca, &fm(fp.clone()), &fm(ft.clone())).unwrap().transfer_loss
    };

    let mut tape = Tape::new();
    let vp = tape.leaf(fp.clone(), true);
    let vt = tape.leaf(ft.clone(), true);
    let bound = gatn.bind(&mut tape, true);
    let out = gatn.forward_on(&mut tape, &bound, vp, vt, true).unwrap();
    let grads = tape.backward(out.loss);
    let param_vars = Gatn::bound_vars(&bound);

    let mut worst = vec![
        ("F_P", rel_err(grads.get(vp).unwrap().data(), &central_difference(&fp, |x| loss(&gatn, x, &ft)))),
        ("F_T", rel_err(grads.get(vt).unwrap().data(), &central_difference(&ft, |x| loss(&gatn, &fp, x)))),
    ];
    let (mut tau, mut proj) = (0.0f64, 0.0f64);
    for (i, (p, var)) in gatn.parameters().into_iter().zip(&param_vars).enumerate() {
        let fd = central_difference(p, |x| {
            let mut g = gatn.clone();
            *g.parameters_mut()[i] = x.clone();
            loss(&g, &fp, &ft)
        });
        let e = rel_err(grads.get(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]).as_slice(), &fd);
        if i < 8 {
            tau = tau.max(e);
        } else {
            proj = proj.max(e);
        }
    }
    worst.push(("tau", tau));
    worst.push(("projections", proj));
    worst
}

// ---------------------------------------------------------------------------

fn sampler_suite(suite: &mut Suite) {
    let start = Instant::now();
    let mut r = rng(21);
    let mut mismatches = 0;
    let mut cases = 0;
    for size in 1..=12usize {
        for quota in 0..=size.min(6) {
            for _ in 0..5 {
                let scores: Vec<SampleScore> = (0..size)
                    .map(|i| SampleScore {
                        h_al: if r.gen_bool(0.1) { f64::NEG_INFINITY } else { r.gen_range(-5.0..5.0) },
                        ..SampleScore::new(i * 3 + 1)
                    })
                    .collect();
                let mut picked = select_batch(&scores, quota).unwrap();
                picked.sort_unstable();
                let total = |set: &[usize]| set.iter().map(|&i| scores.iter().find(|s| s.index == i).unwrap().h_al).sum::<f64>();
                let best = (0u32..1 << size)
                    .filter(|m| m.count_ones() as usize == quota)
                    .map(|m| total(&(0..size).filter(|b| m >> b & 1 == 1).map(|b| scores[b].index).collect::<Vec<_>>()))
                    .fold(f64::NEG_INFINITY, f64::max);
                let best = if quota == 0 { 0.0 } else { best };
                cases += 1;
                if picked.len() != quota || total(&picked) != best {
                    mismatches += 1;
                }
            }
        }
    }
    suite.check("2.1", "greedy selection equals exhaustive best subset", mismatches == 0, format!("{mismatches} mismatches in {cases} pools"));

    let source = freeze(&build_small_cnn(10, 4, 5).unwrap());
    let images = Tensor::from_fn(&[200, 1, 16, 16], |_| r.gen_range(0.0..1.0));
    let a_g = transferability_scores(&source, &images, 0.0, ParamSubset::Head).unwrap();
    let ranking = |target: &NetworkSplit| {
        let a_e = entropy_scores(target, &images).unwrap();
        let toggles = toggles_for_round(0, true);
        let scores: Vec<SampleScore> = (0..200)
            .map(|i| {
                let mut s = SampleScore { a_g: Some(a_g[i]), a_e: Some(a_e[i]), ..SampleScore::new(i) };
                s.h_al = hal_score(&s, toggles, 1e-12).unwrap();
                s
            })
            .collect();
        select_batch(&scores, 200).unwrap()
    };
    let reference = ranking(&build_small_cnn(10, 4, 100).unwrap());
    let invariant = (101..106).all(|seed| ranking(&build_small_cnn(10, 4, seed).unwrap()) == reference);
    suite.check("2.2", "round-one ranking ignores the target network", invariant, "5 random targets, identical 200-sample ranking");

    let mut worst = 0.0f64;
    for i in 0..10 {
        let x = images.row(i);
        let base = scaled_transferability_score(&source, &x, 0.0, ParamSubset::All, 1.0).unwrap();
        for s in [0.25, 2.0, 7.5, 100.0] {
            let scaled = scaled_transferability_score(&source, &x, 0.0, ParamSubset::All, s).unwrap();
            worst = worst.max((scaled - s * base).abs() / (s * base));
        }
    }
    suite.check("2.3", "gradient norm is linear in the loss scale", worst < 1e-9, format!("max relative error {worst:.1e} (tol 1e-9)"));

    let mut bad = 0usize;
    let mut checked = 0usize;
    for budget in 1..=10_000usize {
        for rounds in 1..=budget.min(50) {
            checked += 1;
            if round_schedule(budget, rounds).map(|q| q.iter().sum::<usize>()) != Ok(budget) {
                bad += 1;
            }
        }
    }
    suite.check("2.4", "round schedule sums to the budget", bad == 0, format!("{bad} failures in {checked} (B, rounds) pairs"));
    let secs = start.elapsed().as_secs_f64();
    suite.check("2.5", "sampler suite runtime", secs < 60.0, format!("{secs:.1}s (limit 60s)"));
}

// ---------------------------------------------------------------------------

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/shifted_digits.json")
}

fn load_config(out: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::load(&config_path()).expect("shipped config loads");
    config.output_dir = out.to_path_buf();
    config
}

fn pipeline_invariants(suite: &mut Suite) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut config = load_config(&dir.path().join("a"));
    if let sfada::config::DataSource::Synthetic { samples, .. } = &mut config.data.target {
        *samples = 2500;
    }
    config.adaptation.budget = 60;
    config.adaptation.rounds = 3;

    let pre = experiment::pretrain(&config).unwrap();
    let source_bytes = std::fs::read(&pre.checkpoint).unwrap();
    let source_params = pre.network.flat_parameters();
    let first = experiment::adapt(&config, &pre.checkpoint).unwrap();
    let report = &first.report;

    let (pool_data, _) = experiment::target_splits(&config).unwrap();
    let manifest: PoolManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a").join(experiment::MANIFEST_JSON)).unwrap()).unwrap();
    let pool = TargetPool::from_manifest(pool_data, &manifest).unwrap();

    let budgets_ok = report.rounds.iter().all(|r| r.cumulative_budget <= 60)
        && report.rounds.last().map(|r| r.cumulative_budget) == Some(60)
        && pool.budget_used() == 60
        && report.labeled_indices.len() == 60;
    suite.check(
        "3.1",
        "budget safety",
        budgets_ok,
        format!(
            "cumulative budgets {:?}, final labeled {}",
            report.rounds.iter().map(|r| r.cumulative_budget).collect::<Vec<_>>(),
            pool.budget_used()
        ),
    );

    let labeled = pool.labeled_indices().to_vec();
    let unlabeled = pool.unlabeled_indices();
    let mut all: Vec<usize> = labeled.iter().chain(&unlabeled).copied().collect();
    all.sort_unstable();
    let partition = all == (0..pool.len()).collect::<Vec<_>>() && labeled.iter().all(|i| pool.is_labeled(*i));
    let rounds_disjoint = {
        let mut picked: Vec<usize> = report.rounds.iter().flat_map(|r| r.selected_indices.clone()).collect();
        let n = picked.len();
        picked.sort_unstable();
        picked.dedup();
        picked.len() == n && n == 60
    };
    suite.check(
        "3.2",
        "partition invariant",
        partition && rounds_disjoint,
        format!("{} labeled + {} unlabeled = {} pool samples, rounds disjoint: {rounds_disjoint}", labeled.len(), unlabeled.len(), pool.len()),
    );

    let reloaded = sfada::checkpoint::load_network(&pre.checkpoint).unwrap();
    let frozen_ok = std::fs::read(&pre.checkpoint).unwrap() == source_bytes
        && reloaded.flat_parameters().iter().zip(&source_params).all(|(a, b)| a.to_bits() == b.to_bits());
    suite.check("3.3", "source parameters bitwise unchanged", frozen_ok, "checkpoint bytes and parameter bits compared");

    let adaptation = config.effective_adaptation();
    let worst = report
        .step_losses
        .iter()
        .filter(|s| !s.skipped)
        .map(|s| (s.total - s.recompose(&adaptation)).abs())
        .fold(0.0f64, f64::max);
    suite.check(
        "3.4",
        "loss decomposition identity",
        worst <= 1e-9 && !report.step_losses.is_empty(),
        format!("max |total - sum of weighted terms| = {worst:.1e} over {} steps (tol 1e-9)", report.step_losses.len()),
    );

    let hidden = unlabeled.iter().all(|&i| matches!(pool.label(i), Err(CoreError::AccessViolation(j)) if j == i));
    let visible = labeled.iter().all(|&i| pool.label(i).is_ok());
    suite.check(
        "3.5",
        "oracle opacity",
        hidden && visible,
        format!("{} unlabeled reads refused, {} labeled reads allowed", unlabeled.len(), labeled.len()),
    );

    std::fs::remove_file(&first.gatn_checkpoint).unwrap();
    std::fs::remove_file(&pre.checkpoint).unwrap();
    let (metrics, _) = experiment::eval(&config, &first.target_checkpoint, EvalSplit::Target).unwrap();
    let in_loop = report.final_eval();
    suite.check(
        "3.6",
        "checkpoint discardability",
        metrics == *in_loop,
        format!("standalone {:.2}% vs in-loop {:.2}% with source and GATN deleted", metrics.accuracy, in_loop.accuracy),
    );

    std::fs::write(&pre.checkpoint, &source_bytes).unwrap();
    let mut again = config.clone();
    again.output_dir = dir.path().join("b");
    let second = experiment::adapt(&again, &pre.checkpoint).unwrap().report;
    let same = second.rounds.iter().map(|r| &r.selected_indices).eq(report.rounds.iter().map(|r| &r.selected_indices))
        && second.final_eval().accuracy.to_bits() == in_loop.accuracy.to_bits();
    suite.check("3.7", "full determinism", same, format!("two runs: {:.2}% and {:.2}%", in_loop.accuracy, second.final_eval().accuracy));
    let secs = start.elapsed().as_secs_f64();
    suite.check("3.8", "pipeline invariants runtime", secs < 300.0, format!("{secs:.1}s (limit 300s)"));
}

// ---------------------------------------------------------------------------

struct Trend {
    source: NetworkSplit,
    pool: LabeledDataset,
    eval: LabeledDataset,
    base: AdaptationConfig,
}

impl Trend {
    fn run(&self, sampler: SamplerKind, mode: GatnMode, pseudo: bool, budget: usize, seed: u64) -> EvalMetrics {
        let mut cell = apply_ablation(&self.base, sampler, mode, pseudo);
        cell.budget = budget;
        cell.seed = seed;
        let mut pool = TargetPool::new(self.pool.clone(), budget).unwrap();
        run_adaptation(&self.source, &mut pool, &self.eval, &cell).unwrap().final_eval().clone()
    }

    /// Per-seed accuracies and their mean.
    fn accuracies(&self, sampler: SamplerKind, mode: GatnMode, pseudo: bool, budget: usize) -> (Vec<f64>, f64) {
        let accs: Vec<f64> = SEEDS.iter().map(|&s| self.run(sampler, mode, pseudo, budget, s).accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        (accs, mean)
    }
}

fn fmt_accs(accs: &[f64]) -> String {
    accs.iter().map(|a| format!("{a:.1}")).collect::<Vec<_>>().join("/")
}

fn trend(suite: &mut Suite) -> Result<(), Error> {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = load_config(&dir.path().join("trend"));
    let pre = experiment::pretrain(&config)?;
    let (pool, eval) = experiment::target_splits(&config)?;
    let source_on_target = evaluate(&pre.network, &eval)?.accuracy;
    println!(
        "       source test {:.2}%, source on target {source_on_target:.2}%, pool {}, eval {}",
        pre.source_test.accuracy,
        pool.len(),
        eval.len()
    );
    let t = Trend { source: pre.network, pool, eval, base: config.effective_adaptation() };
    let b = t.base.budget;

    let full = |budget| t.accuracies(SamplerKind::Hal, GatnMode::Full, true, budget);
    let (full_small, full_small_mean) = full(b / 3);
    let (full_mid, full_mid_mean) = full(b);
    let (full_large, full_large_mean) = full(b * 3);
    suite.check(
        "4.1",
        "accuracy grows with the budget",
        full_large_mean >= full_mid_mean && full_mid_mean >= full_small_mean,
        format!(
            "B={}: {full_large_mean:.2} [{}], B={b}: {full_mid_mean:.2} [{}], B={}: {full_small_mean:.2} [{}]",
            b * 3,
            fmt_accs(&full_large),
            fmt_accs(&full_mid),
            b / 3,
            fmt_accs(&full_small)
        ),
    );

    let (e2, e2_mean) = t.accuracies(SamplerKind::TransferabilityOnly, GatnMode::LabeledOnly, false, b);
    let (e1, e1_mean) = t.accuracies(SamplerKind::TransferabilityOnly, GatnMode::Off, false, b);
    let (base, base_mean) = t.accuracies(SamplerKind::Random, GatnMode::Off, false, b);
    suite.check(
        "4.2",
        "ablation ordering",
        full_mid_mean >= e2_mean && e2_mean >= e1_mean && full_mid_mean - base_mean >= 2.0,
        format!(
            "full {full_mid_mean:.2} >= labeled-only transfer {e2_mean:.2} [{}] >= transferability only {e1_mean:.2} [{}]; \
             full - random fine-tune {base_mean:.2} [{}] = {:.2} (need >= 2)",
            fmt_accs(&e2),
            fmt_accs(&e1),
            fmt_accs(&base),
            full_mid_mean - base_mean
        ),
    );

    let mut shifted = config.clone();
    shifted.data.removed_classes = vec![3, 9];
    shifted.output_dir = dir.path().join("label_shift");
    let shifted_pre = experiment::pretrain(&shifted)?;
    let before = evaluate(&shifted_pre.network, &t.eval)?;
    let removed_zero = shifted.data.removed_classes.iter().all(|&c| before.per_class[c] == Some(0.0));
    let ls_budget = (t.pool.len() as f64 * 0.005).round() as usize;
    let ls = Trend { source: shifted_pre.network, pool: t.pool.clone(), eval: t.eval.clone(), base: t.base.clone() };
    let runs: Vec<EvalMetrics> =
        SEEDS.iter().map(|&s| ls.run(SamplerKind::Hal, GatnMode::Full, true, ls_budget, s)).collect();
    let held: Vec<f64> = runs.iter().map(|m| m.accuracy_on(&shifted.data.removed_classes).unwrap_or(0.0)).collect();
    let overall: Vec<f64> = runs.iter().map(|m| m.accuracy).collect();
    let held_mean = held.iter().sum::<f64>() / 3.0;
    let overall_mean = overall.iter().sum::<f64>() / 3.0;
    let (reference, reference_mean) = if ls_budget == b / 3 {
        (full_small.clone(), full_small_mean)
    } else {
        ls.accuracies(SamplerKind::Hal, GatnMode::Full, true, ls_budget)
    };
    suite.check(
        "4.3",
        "label-shift restoration",
        removed_zero && held_mean > 50.0 && overall_mean >= 0.9 * reference_mean,
        format!(
            "removed classes before adaptation {:?}; B={ls_budget}: held-out {held_mean:.2} [{}] (need > 50), \
             overall {overall_mean:.2} [{}] vs 0.9 x no-shift {reference_mean:.2} [{}]",
            shifted.data.removed_classes.iter().map(|&c| before.per_class[c]).collect::<Vec<_>>(),
            fmt_accs(&held),
            fmt_accs(&overall),
            fmt_accs(&reference)
        ),
    );

    let (notau, notau_mean) = t.accuracies(SamplerKind::Hal, GatnMode::NoModulation, true, b);
    suite.check(
        "4.4",
        "modulation network helps",
        full_mid_mean >= notau_mean,
        format!("full {full_mid_mean:.2} [{}] vs without modulation {notau_mean:.2} [{}]", fmt_accs(&full_mid), fmt_accs(&notau)),
    );
    let secs = start.elapsed().as_secs_f64();
    suite.check("4.5", "trend reproduction runtime", secs < 900.0, format!("{secs:.1}s (limit 900s)"));
    Ok(())
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite { filters, failures: 0, checked: 0 };
    if suite.wants("1") {
        math_core(&mut suite);
    }
    if suite.wants("2") {
        sampler_suite(&mut suite);
    }
    if suite.wants("3") {
        pipeline_invariants(&mut suite);
    }
    if suite.wants("4") {
        if let Err(e) = trend(&mut suite) {
            suite.check("4", "trend reproduction", false, format!("run failed: {e}"));
        }
    }
    println!("{} of {} criteria passed", suite.checked - suite.failures, suite.checked);
    if suite.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
