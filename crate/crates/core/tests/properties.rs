//! Property tests over random layouts, stochastic matrices, and plans.

use std::collections::BTreeSet;

use proptest::prelude::*;

use saas_core::backbone::AttentionRecord;
use saas_core::layout::{build_attention_policy, build_layout, slice_cross_attention, TokenLayout};
use saas_core::saas::{
    apply_plan, extract_mask, gaussian_kernel, gaussian_smooth, minmax_normalize,
    otsu_from_histogram, otsu_threshold, renormalize_attention, OutsideMaskMode, SaasPlan,
};
use saas_core::spatial::{InstructionMask, MapSubject, SpatialActivationMap};
use saas_core::{Mat, SaasConfig};

fn stochastic_matrix(layout: &TokenLayout, seed: u64) -> Mat {
    let policy = build_attention_policy(layout);
    let n = layout.total_len();
    let raw = saas_core::rng::normal_vec(&mut saas_core::rng::seeded_rng(seed), n * n);
    let mut m = Mat::zeros(n, n);
    for q in 0..n {
        let mut sum = 0.0;
        for k in 0..n {
            if policy.allows(q, k) {
                let v = raw[q * n + k].exp();
                m.set(q, k, v);
                sum += v;
            }
        }
        for k in 0..n {
            m.set(q, k, m.get(q, k) / sum);
        }
    }
    m
}

prop_compose! {
    fn layout_strategy()(
        g in 1usize..=4,
        img in prop::option::of(1usize..=2),
        cuts in prop::collection::vec(any::<bool>(), 5),
        text_len in 1usize..=6,
    ) -> TokenLayout {
        // Partition the text segment at the sampled cut points.
        let mut spans = Vec::new();
        let mut start = 0;
        for i in 1..text_len {
            if cuts[(i - 1) % cuts.len()] {
                spans.push(start..i);
                start = i;
            }
        }
        spans.push(start..text_len);
        build_layout(g, img, text_len, &spans).expect("generated layout is valid")
    }
}

prop_compose! {
    fn map_strategy()(
        g in 1usize..=5,
    )(
        values in prop::collection::vec(0.0f64..10.0, g * g),
        g in Just(g),
    ) -> SpatialActivationMap {
        SpatialActivationMap::from_values(g, values, MapSubject::InputImage).unwrap()
    }
}

proptest! {
    #[test]
    fn slice_entries_stay_in_unit_interval(layout in layout_strategy(), seed in 0u64..1000) {
        let m = stochastic_matrix(&layout, seed);
        let slice = slice_cross_attention(&m, &layout).unwrap();
        for r in 0..slice.rows() {
            for c in 0..slice.cols() {
                let v = slice.get(r, c);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn policy_is_deterministic_and_idempotent(layout in layout_strategy()) {
        let a = build_attention_policy(&layout);
        let b = build_attention_policy(&layout);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn noise_queries_see_every_condition_key(layout in layout_strategy()) {
        let policy = build_attention_policy(&layout);
        for q in layout.noise_span() {
            for k in layout.image_span().chain(layout.text_span()) {
                prop_assert!(policy.allows(q, k));
            }
        }
    }

    #[test]
    fn reshape_round_trips_through_flattening(map in map_strategy()) {
        let flat = map.values().to_vec();
        let back = SpatialActivationMap::from_values(map.grid_side(), flat, map.subject()).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn mask_thresholds_are_monotone(map in map_strategy(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let normalized = minmax_normalize(&map).map;
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let coarse = extract_mask(&normalized, hi, 0, 0);
        let fine = extract_mask(&normalized, lo, 0, 0);
        prop_assert!(coarse.is_subset_of(&fine));
    }

    #[test]
    fn masks_are_invariant_under_affine_rescale(
        map in map_strategy(),
        c in 0.01f64..50.0,
        d in -5.0f64..5.0,
        tau in 0.0f64..1.0,
    ) {
        let base = extract_mask(&minmax_normalize(&map).map, tau, 0, 0);
        let rescaled_values: Vec<f64> = map.values().iter().map(|&v| c * v + d).collect();
        let rescaled =
            SpatialActivationMap::from_values(map.grid_side(), rescaled_values, map.subject())
                .unwrap();
        let transformed = extract_mask(&minmax_normalize(&rescaled).map, tau, 0, 0);
        prop_assert_eq!(base.cells(), transformed.cells());
    }

    #[test]
    fn minmax_lands_in_unit_interval(map in map_strategy()) {
        let n = minmax_normalize(&map);
        for &v in n.map.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if !n.degenerate {
            prop_assert_eq!(n.map.min(), 0.0);
            prop_assert_eq!(n.map.max(), 1.0);
        }
    }

    #[test]
    fn smoothing_respects_input_bounds(map in map_strategy(), size in prop::sample::select(vec![1usize, 3, 5]), sigma in 0.3f64..3.0) {
        let kernel = gaussian_kernel(size, sigma).unwrap();
        prop_assert!((kernel.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let smoothed = gaussian_smooth(&map, size, sigma).unwrap();
        prop_assert!(smoothed.min() >= map.min() - 1e-12);
        prop_assert!(smoothed.max() <= map.max() + 1e-12);
    }

    #[test]
    fn otsu_matches_exhaustive_maximizer(map in map_strategy()) {
        let normalized = minmax_normalize(&map).map;
        let got = otsu_threshold(&normalized, 64).unwrap();
        let mut hist = vec![0u64; 64];
        for &v in normalized.values() {
            hist[((v * 64.0) as usize).min(63)] += 1;
        }
        let oracle = otsu_from_histogram(&hist);
        prop_assert_eq!(got, oracle);
        // Exhaustive check of the histogram-level maximizer.
        let total: f64 = hist.iter().map(|&h| h as f64).sum();
        let mut best: Option<(usize, f64)> = None;
        for k in 1..hist.len() {
            let mut w0 = 0.0;
            let mut sum0 = 0.0;
            for (i, &h) in hist.iter().enumerate().take(k) {
                w0 += h as f64;
                sum0 += i as f64 * h as f64;
            }
            let w1 = total - w0;
            if w0 == 0.0 || w1 == 0.0 {
                continue;
            }
            let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
            let mu0 = sum0 / w0;
            let mu1 = (sum_all - sum0) / w1;
            let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
            if best.is_none_or(|(_, bv)| var > bv) {
                best = Some((k, var));
            }
        }
        match best {
            Some((k, _)) => prop_assert_eq!(got.tau, k as f64 / 64.0),
            None => prop_assert!(got.degenerate),
        }
    }

    #[test]
    fn renormalize_is_a_fixpoint_on_stochastic_input(layout in layout_strategy(), seed in 0u64..500) {
        let m = stochastic_matrix(&layout, seed);
        let policy = build_attention_policy(&layout);
        let renorm = renormalize_attention(&m, &policy).unwrap();
        prop_assert!(renorm.max_abs_diff(&m) <= 1e-12);
    }

    #[test]
    fn scaled_plans_preserve_stochasticity(
        layout in layout_strategy(),
        seed in 0u64..500,
        alpha in 0.05f64..20.0,
        xi in 0.25f64..2.0,
        zero_mode in any::<bool>(),
        mask_seed in 0u64..500,
    ) {
        let m = stochastic_matrix(&layout, seed);
        let policy = build_attention_policy(&layout);
        let g = layout.grid_side();
        let mut plan = SaasPlan::identity(&layout, 0);
        let mask_bits =
            saas_core::rng::normal_vec(&mut saas_core::rng::seeded_rng(mask_seed), g * g * plan.entries.len().max(1));
        for (i, entry) in plan.entries.iter_mut().enumerate() {
            let cells: Vec<bool> = (0..g * g).map(|c| mask_bits[i * g * g + c] > 0.0).collect();
            entry.mask = InstructionMask::from_cells(g, cells, i, 0).unwrap();
            entry.alpha = alpha;
        }
        let mode = if zero_mode { OutsideMaskMode::Zero } else { OutsideMaskMode::Keep };
        let applied = apply_plan(&m, &layout, &plan, xi, mode).unwrap();
        let out = if applied.modified {
            renormalize_attention(&applied.matrix, &policy).unwrap()
        } else {
            applied.matrix
        };
        for q in 0..out.rows() {
            let mut sum = 0.0;
            for k in 0..out.cols() {
                if policy.allows(q, k) {
                    sum += out.get(q, k);
                } else {
                    prop_assert_eq!(out.get(q, k), 0.0);
                }
            }
            prop_assert!((sum - 1.0).abs() <= 1e-9, "row {} sums to {}", q, sum);
        }
    }

    #[test]
    fn plans_rebuild_identically(layout in layout_strategy(), seed in 0u64..200) {
        // Plan recomputation is a pure function of the records.
        let records = vec![AttentionRecord {
            step: 0,
            layer: 0,
            head: 0,
            matrix: stochastic_matrix(&layout, seed),
        }];
        let config = SaasConfig {
            vital_layers: BTreeSet::from([0]),
            ..SaasConfig::defaults_for(2, 10)
        };
        let a = saas_core::build_plan(&records, 0, &layout, &config).unwrap();
        let b = saas_core::build_plan(&records, 0, &layout, &config).unwrap();
        prop_assert_eq!(a.entries.len(), b.entries.len());
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            prop_assert_eq!(&ea.mask, &eb.mask);
            prop_assert_eq!(ea.alpha.to_bits(), eb.alpha.to_bits());
            prop_assert_eq!(ea.skipped, eb.skipped);
        }
    }
}
