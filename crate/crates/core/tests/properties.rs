//! Property tests for the metrics, solvers, pooling, segmentation, splits and
//! the synthetic generator.

use mvx_core::evalx::{auc, pointing_game, top_k_indices};
use mvx_core::explainer::solvers::{
    coalition_from_bits, enumerate_proper_coalitions, exact_shapley_from_table, kernel_shap_fit, lime_fit,
};
use mvx_core::explainer::{segment, SegmentParams};
use mvx_core::mvarch::{view_pool, PoolMode};
use mvx_core::mvcore::{split_dataset, Image, MultiViewSchema};
use mvx_core::synthgen::{generate, Mask, SyntheticSpec};
use proptest::prelude::*;

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            den += 1.0;
            num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    num / den
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(|k| k as f64 / 8.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

fn game(s: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 1 << s)
}

fn bits(c: &[bool]) -> usize {
    c.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_matches_pairwise_count((scores, labels) in scored_labels()) {
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - brute_auc(&scores, &labels)).abs() <= 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, labels) in scored_labels()) {
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn kernel_shap_full_enumeration_is_exact((s, table) in (2usize..8).prop_flat_map(|s| (Just(s), game(s)))) {
        let exact = exact_shapley_from_table(s, &table).unwrap();
        let (cs, w) = enumerate_proper_coalitions(s).unwrap();
        let values: Vec<f64> = cs.iter().map(|c| table[bits(c)]).collect();
        let phi = kernel_shap_fit(&cs, &values, &w, table[0], table[(1 << s) - 1]).unwrap();
        for (a, b) in phi.iter().zip(&exact) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
        let total: f64 = exact.iter().sum();
        prop_assert!((total - (table[(1 << s) - 1] - table[0])).abs() <= 1e-9);
    }

    #[test]
    fn shapley_is_additive((s, a, b) in (2usize..7).prop_flat_map(|s| (Just(s), game(s), game(s)))) {
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = exact_shapley_from_table(s, &a).unwrap();
        let pb = exact_shapley_from_table(s, &b).unwrap();
        let ps = exact_shapley_from_table(s, &sum).unwrap();
        for i in 0..s {
            prop_assert!((pa[i] + pb[i] - ps[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn null_player_gets_zero((s, mut table, dummy) in (2usize..7).prop_flat_map(|s| (Just(s), game(s), 0..s))) {
        // make `dummy` irrelevant by copying the value without it
        for m in 0..table.len() {
            if m >> dummy & 1 == 1 {
                table[m] = table[m & !(1 << dummy)];
            }
        }
        let phi = exact_shapley_from_table(s, &table).unwrap();
        prop_assert!(phi[dummy].abs() <= 1e-12);
    }

    #[test]
    fn lime_recovers_planted_linear_models(coef in prop::collection::vec(-1.0f64..1.0, 6), b in -1.0f64..1.0) {
        let s = coef.len();
        let cs: Vec<Vec<bool>> = (0..1u64 << s).map(|m| coalition_from_bits(m, s)).collect();
        let y: Vec<f64> = cs.iter().map(|c| b + c.iter().zip(&coef).map(|(&z, w)| z as u8 as f64 * w).sum::<f64>()).collect();
        let est = lime_fit(&cs, &y, 0.25 * (s as f64).sqrt(), 0.0).unwrap();
        for (e, w) in est.iter().zip(&coef) {
            prop_assert!((e - w).abs() <= 1e-8);
        }
    }

    #[test]
    fn pooling_ignores_view_order(
        feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..6),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = feats.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        for mode in [PoolMode::Max, PoolMode::Mean] {
            let a = view_pool(&feats, mode).unwrap();
            let b = view_pool(&shuffled, mode).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
        let max = view_pool(&feats, PoolMode::Max).unwrap();
        let mean = view_pool(&feats, PoolMode::Mean).unwrap();
        prop_assert!(max.iter().zip(&mean).all(|(m, a)| m + 1e-12 >= *a));
    }

    #[test]
    fn segmentation_partitions_the_image(
        pixels in prop::collection::vec(0.0f64..1.0, 24 * 20),
        k in 1usize..30,
    ) {
        let img = Image::from_vec(24, 20, 1, pixels).unwrap();
        let params = SegmentParams { num_segments: k, ..Default::default() };
        let m = segment(&img, &params).unwrap();
        prop_assert_eq!(m.labels.len(), 24 * 20);
        prop_assert!(m.num_segments >= 1 && m.num_segments <= k);
        let sizes = m.sizes();
        prop_assert!(sizes.iter().all(|&n| n > 0));
        prop_assert_eq!(sizes.iter().sum::<usize>(), 24 * 20);
        prop_assert_eq!(&m, &segment(&img, &params).unwrap());
    }

    #[test]
    fn peak_inside_mask_always_hits(y in 0usize..16, x in 0usize..16, noise in prop::collection::vec(0.0f64..1.0, 256)) {
        let mut mask = Mask::empty(16, 16);
        mask.data[y * 16 + x] = true;
        let mut scores = noise;
        scores[y * 16 + x] = 2.0;
        prop_assert!(pointing_game(&scores, 16, 16, &mask).unwrap());
        prop_assert_eq!(top_k_indices(&scores, 1), vec![y * 16 + x]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generator_respects_balance_band_and_labels(seed in any::<u64>(), n in 4usize..14, gap in 0.0f64..1.0) {
        let spec = SyntheticSpec {
            schema: MultiViewSchema::foam_default(16, 16),
            n_samples: n,
            style_gap: gap,
            seed,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let defective = data.dataset.schema.positive_class();
        let n_def = data.dataset.samples.iter().filter(|s| s.label == defective).count();
        prop_assert_eq!(n_def, (n as f64 * spec.class_balance).round() as usize);
        prop_assert_eq!(data.masks.len(), n_def);
        for ((id, _), mask) in &data.masks {
            prop_assert_eq!(data.dataset.sample(id).unwrap().label, defective);
            let f = mask.area_fraction();
            prop_assert!(f >= spec.mask_area_band.0 && f <= spec.mask_area_band.1, "area {}", f);
        }
        for s in &data.dataset.samples {
            for v in &s.views {
                prop_assert!(v.data.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn split_is_a_stratified_partition(seed in any::<u64>(), n in 6usize..40, frac in 0.3f64..0.9) {
        let spec = SyntheticSpec {
            schema: MultiViewSchema::foam_default(16, 16),
            n_samples: n,
            seed: 3,
            ..Default::default()
        };
        let ds = generate(&spec).unwrap().dataset;
        let (train, test) = split_dataset(&ds, frac, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        let mut ids: Vec<&str> = train.samples.iter().chain(&test.samples).map(|s| s.sample_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        for class in 0..2 {
            prop_assert!(train.labels().contains(&class));
            prop_assert!(test.labels().contains(&class));
        }
    }
}
