//! Property tests for the numeric kernels and the selection machinery.

use proptest::prelude::*;

use selfres_core::model::{forward_range, init_weights, KVCache, ModelConfig, WorkCounters};
use selfres_core::numerics::{apply_rope, dot, rms_normalize, row_softmax, Matrix};
use selfres_core::oracle::brute_force_topk;
use selfres_core::pipeline::{saliency_scores, select_salient, SaliencyTable};
use selfres_core::vision::sample_frames_uniform;

fn finite_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-50.0f32..50.0, rows * cols)
        .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(m in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| finite_matrix(r, c))) {
        let s = row_softmax(&m);
        prop_assert!(s.is_finite());
        for r in 0..s.rows() {
            let sum: f32 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn rope_at_zero_is_identity(m in (1usize..5).prop_flat_map(|r| finite_matrix(r, 8))) {
        let out = apply_rope(&m, &vec![0; m.rows()], 10_000.0).unwrap();
        prop_assert_eq!(out, m);
    }

    #[test]
    fn rope_preserves_relative_dot(
        q in prop::collection::vec(-2.0f32..2.0, 8),
        k in prop::collection::vec(-2.0f32..2.0, 8),
        pos in 0usize..512,
    ) {
        let qm = Matrix::from_vec(1, 8, q).unwrap();
        let km = Matrix::from_vec(1, 8, k).unwrap();
        let base = dot(qm.row(0), km.row(0));
        let qr = apply_rope(&qm, &[pos], 10_000.0).unwrap();
        let kr = apply_rope(&km, &[pos], 10_000.0).unwrap();
        let rotated = dot(qr.row(0), kr.row(0));
        prop_assert!((rotated - base).abs() < 1e-3, "{rotated} vs {base} at {pos}");
    }

    #[test]
    fn rms_unit_norm_for_nonzero(x in prop::collection::vec(-10.0f32..10.0, 1..16)) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let gain = vec![1.0; x.len()];
        let out = rms_normalize(&x, &gain, 0.0);
        let rms = (out.iter().map(|v| v * v).sum::<f32>() / out.len() as f32).sqrt();
        prop_assert!((rms - 1.0).abs() < 1e-5, "rms {rms}");
    }

    #[test]
    fn selection_matches_brute_force(
        per_path in prop::collection::vec(
            prop::collection::vec((-8i32..8).prop_map(|v| v as f32 / 4.0), 1..10),
            1..5,
        ),
        keep_frac in 0.0f32..=1.0,
    ) {
        // Integer-derived scores force plenty of ties.
        let width = per_path.iter().map(|p| p.len()).min().unwrap();
        let trimmed: Vec<Vec<f32>> = per_path.iter().map(|p| p[..width].to_vec()).collect();
        let table = SaliencyTable::from_scores(&trimmed).unwrap();
        let keep = ((table.len() as f32) * keep_frac) as usize;
        let engine = select_salient(&table, keep).unwrap();
        let oracle = brute_force_topk(&table, keep);
        prop_assert_eq!(engine, oracle);
    }

    #[test]
    fn selection_result_is_sorted_strictly(
        scores in prop::collection::vec(-100.0f32..100.0, 1..40),
        keep_frac in 0.0f32..=1.0,
    ) {
        let table = SaliencyTable::from_scores(&[scores]).unwrap();
        let keep = ((table.len() as f32) * keep_frac) as usize;
        let selected = select_salient(&table, keep).unwrap();
        prop_assert_eq!(selected.len(), keep);
        prop_assert!(selected.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn saliency_scores_scale_equivariant(
        q in prop::collection::vec(-2.0f32..2.0, 8),
        keys in prop::collection::vec(-2.0f32..2.0, 4 * 8),
        exponent in -3i32..6,
    ) {
        // Power-of-two scaling is exact in f32, so scaled keys produce
        // exactly scaled scores and the selected set cannot move.
        let keys = Matrix::from_vec(4, 8, keys).unwrap();
        let c = (2.0f32).powi(exponent);
        let scaled_data: Vec<f32> = keys.data().iter().map(|v| v * c).collect();
        let scaled = Matrix::from_vec(4, 8, scaled_data).unwrap();
        let base = saliency_scores(&q, &keys, 2);
        let out = saliency_scores(&q, &scaled, 2);
        for (b, o) in base.iter().zip(&out) {
            prop_assert_eq!((b * c).to_bits(), o.to_bits());
        }
        let table_base = SaliencyTable::from_scores(&[base]).unwrap();
        let table_out = SaliencyTable::from_scores(&[out]).unwrap();
        prop_assert_eq!(
            select_salient(&table_base, 2).unwrap(),
            select_salient(&table_out, 2).unwrap()
        );
    }

    #[test]
    fn uniform_sampling_strictly_increasing(video_len in 1usize..2000, frac in 0.01f32..=1.0) {
        let count = ((video_len as f32 * frac) as usize).max(1);
        let sample = sample_frames_uniform(video_len, count).unwrap();
        prop_assert_eq!(sample.indices.len(), count);
        prop_assert!(sample.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sample.indices.iter().all(|&i| i < video_len));
        prop_assert_eq!(sample.indices[0], 0);
    }

    #[test]
    fn causality_holds_for_random_perturbations(seed in 0u64..500, perturbed in 1usize..5) {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            vocab_size: 16,
            vision_dim: 8,
            default_context: 64,
            reflection_layer: 1,
            rope_base: 10_000.0,
            weight_scale: 0.05,
            seed,
        };
        let w = init_weights(&cfg).unwrap();
        let base = w.embed_tokens(&[1, 2, 3, 4, 5]).unwrap();
        let mut bumped = base.clone();
        bumped.row_mut(perturbed)[0] += 0.5;
        let positions: Vec<usize> = (0..5).collect();
        let run = |h: Matrix| {
            let mut cache = KVCache::new(cfg.num_layers);
            let mut counters = WorkCounters::new();
            forward_range(&w, h, &positions, 1, cfg.num_layers, &mut cache, &mut counters).unwrap()
        };
        let a = run(base);
        let b = run(bumped);
        for i in 0..perturbed {
            prop_assert_eq!(a.row(i), b.row(i), "token {} changed", i);
        }
    }
}
