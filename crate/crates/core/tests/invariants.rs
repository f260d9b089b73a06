use proptest::prelude::*;

use sfada_core::data::{LabeledDataset, TargetPool};
use sfada_core::gatn::{attention_matrix, guided_attention, transfer_loss, AttentionMode, AttentionRepresentation, GuidedAttentionModule};
use sfada_core::model::FeatureMap;
use sfada_core::rng::SeedStream;
use sfada_core::sampler::{entropy, round_schedule, select_batch, SampleScore};
use sfada_core::{Error, Tensor};

fn fm(t: Tensor) -> FeatureMap {
    FeatureMap::new(t, "prop").unwrap()
}

fn shape() -> impl Strategy<Value = [usize; 4]> {
    (1usize..=2, 1usize..=8, 1usize..=5, 1usize..=5).prop_map(|(n, c, h, w)| [n, c, h, w])
}

fn map_pair() -> impl Strategy<Value = ([usize; 4], Vec<f64>, Vec<f64>)> {
    shape().prop_flat_map(|s| {
        let n = s.iter().product::<usize>();
        (Just(s), prop::collection::vec(-4.0..4.0f64, n), prop::collection::vec(-4.0..4.0f64, n))
    })
}

fn mode() -> impl Strategy<Value = AttentionMode> {
    prop_oneof![Just(AttentionMode::Spatial), Just(AttentionMode::Channel)]
}

/// Moves channel `c` to position `perm[c]`.
fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let plane = s[2] * s[3];
    let mut out = t.clone();
    for n in 0..s[0] {
        for (c, &p) in perm.iter().enumerate() {
            let src = &t.data()[(n * s[1] + c) * plane..][..plane];
            out.data_mut()[(n * s[1] + p) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions((s, a, b) in map_pair(), mode in mode(), seed in any::<u64>()) {
        let reduction = if mode == AttentionMode::Spatial { 8 } else { 1 };
        let module = GuidedAttentionModule::new(mode, s[1], reduction, &mut SeedStream::new(seed).rng()).unwrap();
        let (fp, ft) = (fm(Tensor::new(&s, a).unwrap()), fm(Tensor::new(&s, b).unwrap()));
        let m = attention_matrix(&module, &fp, &ft).unwrap();
        let t = *m.shape().last().unwrap();
        for row in m.data().chunks(t) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let w = guided_attention(&module, &fp, &ft).unwrap().weights;
        prop_assert_eq!(w.shape(), &s[..]);
        prop_assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn transfer_loss_is_nonnegative_and_vanishes_on_equal_maps(
        (s, a, b) in map_pair(),
        wa in 0.0..=1.0f64,
        wb in 0.0..=1.0f64,
    ) {
        let (fa, fb) = (fm(Tensor::new(&s, a).unwrap()), fm(Tensor::new(&s, b).unwrap()));
        let weights = |v: f64| AttentionRepresentation { weights: Tensor::full(&s, v) };
        prop_assert!(transfer_loss(&fa, &fb, &weights(wa), &weights(wb)).unwrap() >= 0.0);
        prop_assert_eq!(transfer_loss(&fa, &fa, &weights(wa), &weights(wb)).unwrap(), 0.0);
    }

    #[test]
    fn channel_permutation_commutes_with_identity_channel_attention(
        (s, a, b) in map_pair(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..s[1]).collect();
        perm.shuffle(&mut SeedStream::new(seed).rng());
        let module = GuidedAttentionModule::identity(AttentionMode::Channel, s[1]);
        let (ta, tb) = (Tensor::new(&s, a).unwrap(), Tensor::new(&s, b).unwrap());
        let w = guided_attention(&module, &fm(ta.clone()), &fm(tb.clone())).unwrap().weights;
        let wp = guided_attention(&module, &fm(permute_channels(&ta, &perm)), &fm(permute_channels(&tb, &perm))).unwrap().weights;
        let expected = permute_channels(&w, &perm);
        for (x, y) in wp.data().iter().zip(expected.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let rep = |t: Tensor| AttentionRepresentation { weights: t };
        let loss = transfer_loss(&fm(ta.clone()), &fm(tb.clone()), &rep(w.clone()), &rep(w.clone())).unwrap();
        let loss_p = transfer_loss(
            &fm(permute_channels(&ta, &perm)),
            &fm(permute_channels(&tb, &perm)),
            &rep(expected.clone()),
            &rep(expected),
        )
        .unwrap();
        prop_assert!((loss - loss_p).abs() <= 1e-12 * loss.abs().max(1.0));
    }

    #[test]
    fn entropy_is_bounded(raw in prop::collection::vec(0.0..1.0f64, 1..16)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 0.0);
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn greedy_selection_is_optimal(
        h in prop::collection::vec(prop_oneof![9 => -10.0..10.0f64, 1 => Just(f64::NEG_INFINITY)], 1..=10),
        quota_frac in 0.0..=1.0f64,
    ) {
        let quota = ((h.len() as f64) * quota_frac).round() as usize;
        let scores: Vec<SampleScore> = h.iter().enumerate().map(|(i, &v)| SampleScore { h_al: v, ..SampleScore::new(i) }).collect();
        let mut picked = select_batch(&scores, quota).unwrap();
        prop_assert_eq!(picked.len(), quota);
        picked.sort_unstable();
        let total = |set: &[usize]| set.iter().map(|&i| h[i]).sum::<f64>();
        let best = (0u32..1 << h.len())
            .filter(|m| m.count_ones() as usize == quota)
            .map(|m| total(&(0..h.len()).filter(|b| m >> b & 1 == 1).collect::<Vec<_>>()))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(total(&picked), if quota == 0 { 0.0 } else { best });
    }

    #[test]
    fn schedule_sums_to_budget(budget in 1usize..=10_000, rounds_frac in 0.0..=1.0f64) {
        let rounds = 1 + ((budget.min(50) - 1) as f64 * rounds_frac) as usize;
        let q = round_schedule(budget, rounds).unwrap();
        prop_assert_eq!(q.len(), rounds);
        prop_assert!(q.iter().all(|&x| x >= 1));
        prop_assert_eq!(q.iter().sum::<usize>(), budget);
    }

    #[test]
    fn pool_partition_and_budget_hold(
        pool_size in 2usize..40,
        budget_frac in 0.0..=1.0f64,
        requests in prop::collection::vec(prop::collection::vec(0usize..40, 0..6), 0..8),
    ) {
        let budget = 1 + ((pool_size - 1) as f64 * budget_frac) as usize;
        let data = LabeledDataset::new(
            Tensor::zeros(&[pool_size, 1, 2, 2]),
            (0..pool_size).map(|i| i % 3).collect(),
            (0..3).map(|c| c.to_string()).collect(),
        )
        .unwrap();
        let mut pool = TargetPool::new(data, budget).unwrap();
        for req in requests {
            let before = pool.labeled_indices().to_vec();
            let result = pool.annotate(&req);
            if result.is_err() {
                prop_assert_eq!(pool.labeled_indices(), &before[..]);
            }
            if let Err(Error::Budget { .. }) = result {
                prop_assert!(before.len() + req.len() > budget);
            }
            prop_assert!(pool.budget_used() <= budget);
            let mut all: Vec<usize> = pool.labeled_indices().iter().copied().chain(pool.unlabeled_indices()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..pool_size).collect::<Vec<_>>());
            for i in pool.unlabeled_indices() {
                prop_assert_eq!(pool.label(i), Err(Error::AccessViolation(i)));
            }
        }
    }
}
