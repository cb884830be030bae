mod common;

use common::{gp_oracle, grouped_gp_oracle, max_abs_diff, nw_oracle, random_instance};
use gpcache::approx::make_partition;
use gpcache::bundle::{FeatureMatrix, LabelVector};
use gpcache::cache::{
    build_cache, confidence_calibrated_logits, fused_logits, gp_cache_logits, nw_cache_logits, zero_shot_logits,
    CacheHyper, CacheMode,
};
use gpcache::testutil::rng;
use proptest::prelude::*;

fn hyper(beta: f64, sigma2: f64) -> CacheHyper {
    CacheHyper::new(1.0, beta, sigma2, 0.5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_readout_matches_dense_inverse(
        c in 1usize..=8, k in 1usize..=8, dim in 2usize..=16, m in 1usize..6,
        beta in 0.5f64..20.0, log_s2 in -2.0f64..1.0, seed in any::<u64>(),
    ) {
        let inst = random_instance(&mut rng(seed), c, k, dim, m);
        let h = hyper(beta, 10f64.powf(log_s2));
        let model = build_cache(&inst.keys, &inst.labels, h, None, None).unwrap();
        let (mean, var) = gp_cache_logits(&model, &inst.queries).unwrap();
        let (om, ov) = gp_oracle(inst.keys.as_matrix(), inst.labels.labels(), c, inst.queries.as_matrix(), beta, h.sigma2);
        prop_assert!(max_abs_diff(&mean, &om) < 1e-8);
        for q in 0..m {
            prop_assert!((var[(q, 0)] - ov[q]).abs() < 1e-8);
        }
    }

    #[test]
    fn variance_stays_in_unit_interval(
        c in 1usize..=6, k in 1usize..=6, dim in 2usize..=12,
        beta in 0.1f64..50.0, log_s2 in -6.0f64..3.0, seed in any::<u64>(),
    ) {
        let inst = random_instance(&mut rng(seed), c, k, dim, 8);
        // include the keys themselves, where the variance is smallest
        let mut rows = inst.queries.as_matrix().clone();
        rows = rows.insert_rows(0, 1, 0.0);
        rows.set_row(0, &inst.keys.as_matrix().row(0));
        let queries = FeatureMatrix::new(rows).unwrap();
        let model = build_cache(&inst.keys, &inst.labels, hyper(beta, 10f64.powf(log_s2)), None, None).unwrap();
        let (_, var) = gp_cache_logits(&model, &queries).unwrap();
        for v in var.iter() {
            prop_assert!(*v >= 0.0 && *v <= 1.0 + 1e-8, "variance {}", v);
        }
    }

    #[test]
    fn key_order_does_not_matter(
        c in 2usize..=5, k in 1usize..=4, dim in 3usize..=10, seed in any::<u64>(), shift in 1usize..7,
    ) {
        let inst = random_instance(&mut rng(seed), c, k, dim, 4);
        let n = c * k;
        let perm: Vec<usize> = (0..n).map(|i| (i * (2 * shift + 1) + shift) % n).collect();
        let mut sorted = perm.clone();
        sorted.sort();
        prop_assume!(sorted == (0..n).collect::<Vec<_>>());
        let keys = inst.keys.select_rows(&perm);
        let labels = inst.labels.select(&perm);
        let h = hyper(4.0, 0.3);
        let a = build_cache(&inst.keys, &inst.labels, h, None, None).unwrap();
        let b = build_cache(&keys, &labels, h, None, None).unwrap();
        let (la, lb) = (
            confidence_calibrated_logits(&a, &inst.queries).unwrap(),
            confidence_calibrated_logits(&b, &inst.queries).unwrap(),
        );
        prop_assert!(max_abs_diff(&la, &lb) < 1e-10);
    }

    #[test]
    fn class_relabeling_permutes_logit_columns(
        c in 2usize..=5, k in 1usize..=4, dim in 3usize..=10, seed in any::<u64>(),
    ) {
        let inst = random_instance(&mut rng(seed), c, k, dim, 3);
        // rotate class ids by one
        let rotated = LabelVector::new(inst.labels.labels().iter().map(|&l| (l + 1) % c).collect(), c).unwrap();
        let h = hyper(3.0, 0.2);
        let a = confidence_calibrated_logits(&build_cache(&inst.keys, &inst.labels, h, None, None).unwrap(), &inst.queries).unwrap();
        let b = confidence_calibrated_logits(&build_cache(&inst.keys, &rotated, h, None, None).unwrap(), &inst.queries).unwrap();
        for j in 0..c {
            for q in 0..3 {
                prop_assert!((a[(q, j)] - b[(q, (j + 1) % c)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn huge_noise_scales_to_nadaraya_watson(
        c in 2usize..=6, k in 1usize..=5, dim in 3usize..=12, beta in 0.5f64..10.0, seed in any::<u64>(),
    ) {
        let inst = random_instance(&mut rng(seed), c, k, dim, 5);
        let s2 = 1e8;
        let model = build_cache(&inst.keys, &inst.labels, hyper(beta, s2), None, None).unwrap();
        let (mean, _) = gp_cache_logits(&model, &inst.queries).unwrap();
        let nw = nw_cache_logits(&model, &inst.queries).unwrap();
        let oracle = nw_oracle(inst.keys.as_matrix(), inst.labels.labels(), c, inst.queries.as_matrix(), beta);
        prop_assert!(max_abs_diff(&nw, &oracle) < 1e-12);
        // s2 (K + s2 I)^-1 = I - K / s2 + O(s2^-2)
        let scaled = &mean * s2;
        let bound = (c * k) as f64 * (c * k) as f64 / s2 * 2.0;
        prop_assert!(max_abs_diff(&scaled, &nw) <= bound, "{} > {}", max_abs_diff(&scaled, &nw), bound);
    }

    #[test]
    fn groups_match_per_group_oracle(
        c in 2usize..=8, k in 1usize..=4, dim in 3usize..=10, g_raw in 1usize..8, pseed in any::<u64>(), seed in any::<u64>(),
    ) {
        let g = 1 + g_raw % c;
        let inst = random_instance(&mut rng(seed), c, k, dim, 4);
        let part = make_partition(c, g, pseed).unwrap();
        let h = hyper(5.5, 0.1);
        let model = build_cache(&inst.keys, &inst.labels, h, None, Some(&part)).unwrap();
        let (mean, var) = gp_cache_logits(&model, &inst.queries).unwrap();
        let (om, ov) = grouped_gp_oracle(
            inst.keys.as_matrix(), inst.labels.labels(), c, inst.queries.as_matrix(), 5.5, 0.1, part.groups(),
        );
        prop_assert!(max_abs_diff(&mean, &om) < 1e-8);
        prop_assert!(max_abs_diff(&var, &ov) < 1e-8);

        // every class sits in exactly one group
        let mut seen = vec![0; c];
        for grp in part.groups() {
            for &j in grp {
                seen[j] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn single_group_reproduces_exact_fused_logits(
        c in 2usize..=6, k in 1usize..=4, dim in 3usize..=10, seed in any::<u64>(), pseed in any::<u64>(),
    ) {
        let inst = random_instance(&mut rng(seed), c, k, dim, 5);
        let h = hyper(5.5, 0.1);
        let part = make_partition(c, 1, pseed).unwrap();
        let exact = build_cache(&inst.keys, &inst.labels, h, None, None).unwrap();
        let grouped = build_cache(&inst.keys, &inst.labels, h, None, Some(&part)).unwrap();
        let a = fused_logits(&exact, &inst.weights, &inst.queries, CacheMode::Gp).unwrap();
        let b = fused_logits(&grouped, &inst.weights, &inst.queries, CacheMode::Gp).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-10);
    }

    #[test]
    fn zero_alpha_is_zero_shot(c in 2usize..=5, k in 1usize..=3, dim in 3usize..=8, seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed), c, k, dim, 4);
        let h = CacheHyper::new(0.0, 5.5, 0.1, 0.5).unwrap();
        let model = build_cache(&inst.keys, &inst.labels, h, None, None).unwrap();
        let zs = zero_shot_logits(&inst.weights, &inst.queries).unwrap();
        for mode in [CacheMode::ZeroShot, CacheMode::Nw, CacheMode::Gp] {
            prop_assert_eq!(&fused_logits(&model, &inst.weights, &inst.queries, mode).unwrap(), &zs);
        }
    }
}
