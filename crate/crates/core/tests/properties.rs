use dro_core::checkpoint::{denoiser_container, Container};
use dro_core::config::RunConfig;
use dro_core::demodata::{select_experts, PoolItem};
use dro_core::evaluation::{median_index, EvalReport};
use dro_core::losses::{mm_loss, trl_loss, LossBreakdown};
use dro_core::{Architecture, Cond, Denoiser32, Denoiser64};
use proptest::prelude::*;

fn norms() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0)
}

proptest! {
    #[test]
    fn breakdown_invariants(items in prop::collection::vec(norms(), 1..20), m in -1.0f64..1.0) {
        let batch: Vec<LossBreakdown<f64>> = items
            .iter()
            .map(|&(rl, sft, rr, push)| LossBreakdown::from_norms(rl, sft, rr, push, m, 3, Cond::Label(0)))
            .collect();
        for b in &batch {
            prop_assert_eq!(b.margin, b.l_right - b.l_left);
            prop_assert_eq!(b.clipped, b.margin <= m);
        }
        let trl = trl_loss(&batch, m).unwrap();
        let n = batch.len() as f64;
        let mean_margin = batch.iter().map(|b| b.margin).sum::<f64>() / n;
        prop_assert!(trl >= m - 1e-12);
        prop_assert!(trl >= mean_margin - 1e-12);
        if batch.iter().all(|b| !b.clipped) {
            prop_assert!((trl - mean_margin).abs() < 1e-9);
        }
        // The reference norms shift the margin by a constant only.
        let ref_part = batch.iter().map(|b| b.l_right + b.push - b.l_left - b.sft).sum::<f64>() / n;
        prop_assert!((mean_margin - ref_part - mm_loss(&batch).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn experts_are_the_top_order_statistics(
        scores in prop::collection::vec((0usize..3, -50.0f64..0.0), 0..60),
        k in 1usize..6,
    ) {
        let mut pool: Vec<PoolItem<f64>> =
            scores.iter().map(|&(c, s)| PoolItem { x: vec![s, -s], c, score: s }).collect();
        for c in 0..3 {
            for j in 0..k {
                pool.push(PoolItem { x: vec![0.0, 0.0], c, score: -100.0 - j as f64 });
            }
        }
        let demos = select_experts(&pool, k, 3).unwrap();
        for c in 0..3 {
            let kept = demos.demos(c);
            prop_assert_eq!(kept.len(), k);
            prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
            let floor = kept.last().unwrap().score;
            let mut all: Vec<f64> = pool.iter().filter(|p| p.c == c).map(|p| p.score).collect();
            all.sort_by(|a, b| b.total_cmp(a));
            prop_assert_eq!(floor, all[k - 1]);
            let kept_mean = kept.iter().map(|d| d.score).sum::<f64>() / k as f64;
            prop_assert!(kept_mean >= all.iter().sum::<f64>() / all.len() as f64);
        }
        prop_assert!(select_experts(&pool, pool.len() + 1, 3).is_err());
    }

    #[test]
    fn median_score_ignores_order(mut scores in prop::collection::vec(-5.0f64..5.0, 1..12), seed in any::<u64>()) {
        if scores.len() % 2 == 0 {
            scores.pop();
        }
        let pick = scores[median_index(&scores).unwrap()];
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(pick, sorted[sorted.len() / 2]);
        let n = scores.len();
        scores.rotate_left((seed as usize) % n);
        scores.reverse();
        prop_assert_eq!(scores[median_index(&scores).unwrap()], pick);
    }

    #[test]
    fn win_rates_are_complementary(pairs in prop::collection::vec((-3i32..3, -3i32..3), 1..40)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let ab = EvalReport::from_scores(&a, &b, &[0, 1], 2, 5, 1.0).unwrap();
        let ba = EvalReport::from_scores(&b, &a, &[0, 1], 2, 5, 1.0).unwrap();
        prop_assert!((ab.win_rate + ba.win_rate - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.win_rate));
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..9, 1..3), flip in any::<prop::sample::Index>()) {
        let arch = Architecture { hidden, n_conditions: 2, horizon: 7, ..Architecture::default() };
        let p64 = Denoiser64::init(&arch, seed).unwrap();
        let c = denoiser_container(&p64);
        let bytes = c.encode().unwrap();
        prop_assert_eq!(&Container::<f64>::decode(&bytes).unwrap(), &c);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x10;
        prop_assert!(Container::<f64>::decode(&bad).is_err());

        let p32 = Denoiser32::init(&arch, seed).unwrap();
        let bytes32 = denoiser_container(&p32).encode().unwrap();
        prop_assert!(Container::<f64>::decode(&bytes32).is_err());
        prop_assert_eq!(Container::<f32>::decode(&bytes32).unwrap(), denoiser_container(&p32));
    }

    #[test]
    fn configs_round_trip(seed in 0..=i64::MAX as u64, steps in 1usize..5000, m in -1.0f64..0.0, k in 1usize..64) {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(seed);
        cfg.train.n_steps = steps;
        cfg.train.clip_m = m;
        cfg.experts.k = k;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml().unwrap(), text);
        cfg.apply_seed(u64::MAX);
        prop_assert!(cfg.validate().is_err());
    }
}
