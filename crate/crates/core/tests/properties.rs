// SPDX-License-Identifier: MIT OR Apache-2.0

use factum::classify::{predict, train_logreg, LogRegConfig};
use factum::features::{aggregate_heads, layer_summaries, prune, rank_components};
use factum::ftrc::{decode, encode};
use factum::numeric::norm;
use factum::oracle::random_trace;
use factum::scores::{compute_bas, compute_cas, compute_pfs, score_citation, CitationKey, ScoreKind, ScoreSet};
use factum::stats::{auc, bh_correct, mann_whitney_u, mann_whitney_u_with, t_test_two_tailed, Alternative, MwuMethod};
use factum::trace::ModelGeometry;
use ndarray::Array2;
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = ModelGeometry> {
    (1usize..6, 1usize..5, 2usize..10).prop_map(|(l, h, d)| ModelGeometry::new(l, h, d, "prop"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_stay_in_range(g in geometry(), prompt in 1usize..16, seed in any::<u64>()) {
        let t = random_trace(&g, prompt, 4, seed);
        for c in &t.citations {
            let s = score_citation(c, &t).unwrap();
            prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
        }
    }

    #[test]
    fn uniform_attention_scaling(g in geometry(), prompt in 2usize..12, seed in any::<u64>(), c in 0.05f64..1.0) {
        let t = random_trace(&g, prompt, 2, seed);
        for rec in &t.citations {
            let mut scaled = rec.clone();
            scaled.attn_prompt.mapv_inplace(|v| v * c);
            scaled.attn_sink.mapv_inplace(|v| v * c);
            let (a, b) = (compute_cas(rec, &t).unwrap(), compute_cas(&scaled, &t).unwrap());
            for ((x, y), (l, h)) in a.values.iter().zip(b.values.iter()).zip(a.values.indexed_iter().map(|(i, _)| i)) {
                // guarded entries may flip when the weighted sum falls under the norm floor
                let guarded = a.flags.iter().chain(&b.flags).any(|f| f.layer == l && f.head == Some(h));
                prop_assert!(guarded || (x - y).abs() < 1e-9, "cas {x} vs {y}");
            }
            let (ba, bb) = (compute_bas(rec), compute_bas(&scaled));
            for (x, y) in ba.iter().zip(bb.iter()) {
                prop_assert!((x * c - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pfs_triangle_bound(g in geometry(), seed in any::<u64>()) {
        let t = random_trace(&g, 4, 3, seed);
        for rec in &t.citations {
            let pfs = compute_pfs(rec);
            for l in 0..g.num_layers {
                let bound = norm(rec.x_post_ffn.row(l)) + norm(rec.x_pre_ffn.row(l));
                prop_assert!(pfs[l] <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn slope_and_spectrum_under_affine_maps(values in prop::collection::vec(-5.0f64..5.0, 2..20), shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        let layers: Vec<usize> = (0..values.len()).collect();
        let base = layer_summaries(&layers, &values, 1);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        let s = layer_summaries(&layers, &shifted, 1);
        let k = layer_summaries(&layers, &scaled, 1);
        prop_assert!((s.slope - base.slope).abs() < 1e-9);
        prop_assert!((s.fft_mag - base.fft_mag).abs() < 1e-9);
        prop_assert!((k.slope - scale * base.slope).abs() < 1e-9 * scale.max(1.0) * (1.0 + base.slope.abs()));
        prop_assert!((k.fft_mag - scale * base.fft_mag).abs() < 1e-9 * scale.max(1.0) * (1.0 + base.fft_mag));
    }

    #[test]
    fn full_retention_is_identity(g in geometry(), seed in any::<u64>()) {
        let traces: Vec<_> = (0..2).map(|i| random_trace(&g, 5, 3, seed.wrapping_add(i))).collect();
        let mut sets: Vec<ScoreSet<f64>> = Vec::new();
        let mut keys = Vec::new();
        for t in &traces {
            for (i, c) in t.citations.iter().enumerate() {
                sets.push(score_citation(c, t).unwrap());
                keys.push(CitationKey { report_id: t.report_id.clone(), ordinal: i });
            }
        }
        let refs: Vec<&ScoreSet<f64>> = sets.iter().collect();
        let labels: Vec<bool> = (0..refs.len()).map(|i| i % 2 == 1).collect();
        let ranking = rank_components(&refs, &labels, &ScoreKind::ALL[..3], &keys).unwrap();
        let mask = prune(&ranking, 100.0).unwrap();
        for s in &sets {
            for kind in [ScoreKind::Cas, ScoreKind::Bas, ScoreKind::Ecs] {
                let m = s.head(kind).unwrap().view();
                prop_assert_eq!(aggregate_heads(m, Some(&mask.scores[&kind])), aggregate_heads(m, None));
            }
        }
    }

    #[test]
    fn bh_preserves_order_and_bounds(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let bh = bh_correct(&p, 0.05).unwrap();
        for i in 0..p.len() {
            prop_assert!(bh.adjusted[i] >= p[i] - 1e-15 && bh.adjusted[i] <= 1.0);
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(bh.adjusted[i] <= bh.adjusted[j]);
                }
            }
        }
    }

    #[test]
    fn p_values_are_probabilities(a in prop::collection::vec(-3.0f64..3.0, 1..30), b in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        for alt in [Alternative::Greater, Alternative::Less] {
            let r = mann_whitney_u(&a, &b, alt).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.p));
        }
        let n = a.len().min(b.len());
        if n >= 2 {
            let t = t_test_two_tailed(&a[..n], &b[..n]).unwrap();
            prop_assert!((0.0..=1.0).contains(&t.p));
        }
    }

    #[test]
    fn exact_and_normal_mwu_agree_at_fifteen(a in prop::collection::vec(0.0f64..1.0, 15), b in prop::collection::vec(0.0f64..1.0, 15)) {
        for alt in [Alternative::Greater, Alternative::Less] {
            let exact = mann_whitney_u_with(&a, &b, alt, MwuMethod::Exact).unwrap();
            let normal = mann_whitney_u_with(&a, &b, alt, MwuMethod::Normal).unwrap();
            prop_assert!((exact.p - normal.p).abs() <= 0.02, "exact {} normal {}", exact.p, normal.p);
        }
    }

    #[test]
    fn auc_reverses_with_sign(scores in prop::collection::vec(-1.0f64..1.0, 4..40), seed in any::<u64>()) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        prop_assume!(labels.iter().any(|&y| !y));
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let (a, b) = (auc(&scores, &labels).unwrap(), auc(&neg, &labels).unwrap());
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ftrc_round_trip(g in geometry(), prompt in 1usize..12, n in 0usize..5, seed in any::<u64>()) {
        let t = random_trace(&g, prompt, n, seed).cast::<f32>();
        let bytes = encode(&t).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Predictions do not depend on the units of a feature column.
    #[test]
    fn decisions_ignore_feature_units(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (40, 3);
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
        let y: Vec<bool> = (0..n).map(|i| x[[i, 0]] + 0.5 * rng.random_range(-1.0..1.0) > 0.0).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let mut moved = x.clone();
        moved.column_mut(1).mapv_inplace(|v| v * scale + shift);
        let cols: Vec<String> = (0..p).map(|j| format!("f{j}")).collect();
        let cfg = LogRegConfig::default();
        let a = train_logreg(x.view(), &cols, &y, &cfg, 1).unwrap();
        let b = train_logreg(moved.view(), &cols, &y, &cfg, 1).unwrap();
        let pa = predict(&a, x.view(), &cols).unwrap();
        let pb = predict(&b, moved.view(), &cols).unwrap();
        for (u, v) in pa.iter().zip(pb.iter()) {
            prop_assert!((u - v).abs() < 1e-6, "{u} vs {v}");
        }
    }
}
