use super::*;
use crate::instances::{random_instance, InstanceDims};
use crate::memory::{BufferKind, MemoryTracker};
use crate::potentials::{
    cumulative_from_emissions, score_segmentation_with, BoundaryProjections, CenteringMode, CumulativeScores,
    EmissionBatch, SourceReduction,
};
use crate::reference::{dense_backward_marginals, dense_forward, dense_viterbi, DenseGuard};
use ndarray::{array, Array3};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn zero_instance(t: usize, k: usize, c: usize) -> (CumulativeScores, SemiCrfParams) {
    let s = CumulativeScores::new(Array3::zeros((1, t + 1, c)), vec![t]).unwrap();
    (s, SemiCrfParams::zeros(c, k))
}

#[test]
fn checkpoint_interval_examples() {
    assert_eq!(choose_checkpoint_interval(100, 25), 50);
    assert_eq!(num_checkpoints(100, 50), 2);
    assert_eq!(choose_checkpoint_interval(1, 1), 1);
    assert_eq!(choose_checkpoint_interval(1_000_000, 200), 14_142);
    assert_eq!(choose_checkpoint_interval(3, 100), 3);
}

#[test]
fn dispatch_table() {
    let k1 = SemiCrfParams::zeros(3, 1).with_scalar_boundaries(array![1.0, 0.0, 0.0], array![0.0, 0.0, 2.0]);
    assert_eq!(dispatch(&k1), BackendKind::LinearK1);
    assert_eq!(dispatch(&SemiCrfParams::zeros(3, 2)), BackendKind::NearLinearK2);
    let k2p = SemiCrfParams::zeros(3, 2).with_projections(BoundaryProjections::zeros(1, 4, 3));
    assert_eq!(dispatch(&k2p), BackendKind::Streaming);
    let k1p = SemiCrfParams::zeros(3, 1).with_projections(BoundaryProjections::zeros(1, 4, 3));
    assert_eq!(dispatch(&k1p), BackendKind::Streaming);
    assert_eq!(dispatch(&SemiCrfParams::zeros(3, 5)), BackendKind::Streaming);
}

#[test]
fn trivial_partitions() {
    let (s, p) = zero_instance(1, 1, 2);
    assert!((streaming_forward(&s, &p, None, None).unwrap().log_z[0] - 4f64.ln()).abs() < 1e-15);
    assert!((k1_forward(&s, &p).unwrap()[0] - 4f64.ln()).abs() < 1e-15);
    let (s, p) = zero_instance(2, 2, 1);
    assert!((k2_forward(&s, &p).unwrap()[0] - 2f64.ln()).abs() < 1e-15);
    assert!((streaming_forward(&s, &p, None, None).unwrap().log_z[0] - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn forward_matches_dense_for_any_interval() {
    for seed in 0..200 {
        let inst = random_instance(seed, InstanceDims::up_to(64, 8, 5));
        let dense = dense_forward(&inst.scores, &inst.params, DenseGuard::default()).unwrap();
        let t = inst.max_len();
        let k = inst.params.max_duration();
        for delta in [1, 3, choose_checkpoint_interval(t, k), t] {
            let fwd = streaming_forward(&inst.scores, &inst.params, Some(delta), None).unwrap();
            assert_eq!(fwd.hazards, 0);
            for b in 0..dense.log_z.len() {
                assert!(rel(fwd.log_z[b], dense.log_z[b]) <= 1e-9, "seed {seed} delta {delta}");
            }
        }
    }
}

#[test]
fn normalizers_nondecreasing_for_nonnegative_potentials() {
    for seed in 0..20 {
        let mut inst = random_instance(seed, InstanceDims::up_to(60, 6, 4));
        inst.params.transition.mapv_inplace(f64::abs);
        inst.params.duration_bias.mapv_inplace(f64::abs);
        let em = EmissionBatch::new(inst.emissions.scores.mapv(f64::abs), inst.emissions.lengths.clone()).unwrap();
        let s = cumulative_from_emissions(&em, CenteringMode::None).unwrap();
        let fwd = streaming_forward(&s, &inst.params, Some(4), None).unwrap();
        let n = fwd.checkpoints.normalizers();
        for row in n.rows() {
            for w in row.as_slice().unwrap().windows(2) {
                assert!(w[1] >= w[0]);
            }
        }
    }
}

#[test]
fn recompute_matches_dense_alpha() {
    for seed in 0..40 {
        let inst = random_instance(seed, InstanceDims::up_to(40, 6, 4));
        let dense = dense_forward(&inst.scores, &inst.params, DenseGuard::default()).unwrap();
        let fwd = streaming_forward(&inst.scores, &inst.params, Some(5), None).unwrap();
        let ck = &fwd.checkpoints;
        for b in 0..inst.scores.batch_size() {
            let len = inst.scores.lengths[b];
            for i in 0..ck.n_ckpt {
                let t0 = i * ck.interval;
                if t0 >= len {
                    break;
                }
                let t1 = (t0 + ck.interval).min(len);
                let block = recompute_alpha(&inst.scores, &inst.params, ck, b, t0, t1).unwrap();
                let n = ck.normalizer(b, i);
                for (row, t) in (t0 + 1..=t1).enumerate() {
                    for c in 0..inst.params.num_labels() {
                        let want = dense.alpha[[b, t, c]] - n;
                        assert!(
                            (block[[row, c]] - want).abs() <= 1e-9 * want.abs().max(1.0),
                            "seed {seed}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn recompute_empty_block() {
    let inst = random_instance(3, InstanceDims::exact(10, 3, 2, 1));
    let fwd = streaming_forward(&inst.scores, &inst.params, Some(5), None).unwrap();
    let block = recompute_alpha(&inst.scores, &inst.params, &fwd.checkpoints, 0, 10, 10).unwrap();
    assert_eq!(block.nrows(), 0);
    assert!(recompute_alpha(&inst.scores, &inst.params, &fwd.checkpoints, 0, 3, 5).is_err());
}

fn dense_grads(inst: &crate::instances::Instance) -> (Vec<f64>, GradientSet) {
    let up = vec![1.0; inst.scores.batch_size()];
    let msgs = dense_forward(&inst.scores, &inst.params, DenseGuard::default()).unwrap();
    let back = dense_backward_marginals(&inst.scores, &inst.params, &msgs, &up, DenseGuard::default()).unwrap();
    (msgs.log_z, back.grads)
}

#[test]
fn backward_matches_dense() {
    for seed in 0..200 {
        let dims = if seed % 4 == 0 {
            InstanceDims::up_to(64, 8, 5).with_projections()
        } else {
            InstanceDims::up_to(64, 8, 5)
        };
        let inst = random_instance(seed, dims);
        let (_, want) = dense_grads(&inst);
        let up = vec![1.0; inst.scores.batch_size()];
        let fwd = streaming_forward(&inst.scores, &inst.params, None, None).unwrap();
        let back = streaming_backward(&inst.scores, &inst.params, &fwd, &up, None).unwrap();
        assert_eq!(back.clamp_events, 0);
        assert_eq!(back.hazards, 0);
        let diff = back.grads.max_abs_diff(&want);
        assert!(diff <= 1e-8, "seed {seed}: {diff}");
    }
}

#[test]
fn gradients_independent_of_interval() {
    for seed in 0..30 {
        let inst = random_instance(seed, InstanceDims::up_to(50, 6, 4));
        let up = vec![1.0; inst.scores.batch_size()];
        let t = inst.max_len();
        let single = streaming_forward(&inst.scores, &inst.params, Some(t), None).unwrap();
        let reference = streaming_backward(&inst.scores, &inst.params, &single, &up, None).unwrap();
        for delta in [1, 3, 7] {
            let fwd = streaming_forward(&inst.scores, &inst.params, Some(delta), None).unwrap();
            let back = streaming_backward(&inst.scores, &inst.params, &fwd, &up, None).unwrap();
            assert!(back.grads.max_abs_diff(&reference.grads) <= 1e-8);
        }
    }
}

#[test]
fn gradient_set_invariants() {
    for seed in 0..30 {
        let inst = random_instance(seed, InstanceDims::up_to(40, 6, 4).with_ragged(false));
        for b in 0..inst.scores.batch_size() {
            let mut up = vec![0.0; inst.scores.batch_size()];
            up[b] = 1.0;
            let fwd = streaming_forward(&inst.scores, &inst.params, None, None).unwrap();
            let back = streaming_backward(&inst.scores, &inst.params, &fwd, &up, None).unwrap();
            let total: f64 = back.grads.cum_scores.index_axis(ndarray::Axis(0), b).sum();
            assert!(total.abs() < 1e-6);
            let segs: f64 = back.grads.duration_bias.sum();
            assert!((segs - back.marginals.expected_segments[b]).abs() < 1e-6);
        }
    }
}

#[test]
fn single_token_gradients() {
    let (s, p) = zero_instance(1, 1, 1);
    let fwd = streaming_forward(&s, &p, None, None).unwrap();
    let back = streaming_backward(&s, &p, &fwd, &[1.0], None).unwrap();
    assert_eq!(back.grads.duration_bias[[0, 0]], 1.0);
    assert_eq!(back.grads.transition[[0, 0]], 1.0);
}

#[test]
fn backward_is_bit_deterministic() {
    let inst = random_instance(11, InstanceDims::exact(120, 7, 4, 6).with_ragged(true));
    let up: Vec<f64> = (0..6).map(|b| 0.5 + b as f64).collect();
    let run = || {
        let fwd = streaming_forward(&inst.scores, &inst.params, None, None).unwrap();
        streaming_backward(&inst.scores, &inst.params, &fwd, &up, None)
            .unwrap()
            .grads
    };
    let a = run();
    for _ in 0..3 {
        assert_eq!(a, run());
    }
}

#[test]
fn hazard_free_at_4k_plus_3() {
    for k in 1..=6 {
        let inst = random_instance(k as u64, InstanceDims::exact(4 * k + 3, k, 3, 1));
        let fwd = streaming_forward(&inst.scores, &inst.params, Some(2), None).unwrap();
        let back = streaming_backward(&inst.scores, &inst.params, &fwd, &[1.0], None).unwrap();
        assert_eq!(fwd.hazards + back.hazards, 0, "K={k}");
    }
}

#[test]
fn missing_checkpoints_rejected() {
    let a = random_instance(1, InstanceDims::exact(10, 3, 2, 1));
    let b = random_instance(1, InstanceDims::exact(12, 3, 2, 1));
    let fwd = streaming_forward(&a.scores, &a.params, None, None).unwrap();
    let err = streaming_backward(&b.scores, &b.params, &fwd, &[1.0], None).unwrap_err();
    assert!(matches!(err, crate::error::Error::Contract(_)));
}

#[test]
fn ring_sizes_are_fixed() {
    for t in [50, 500] {
        let inst = random_instance(2, InstanceDims::exact(t, 8, 5, 1));
        let tracker = MemoryTracker::new();
        let fwd = streaming_forward(&inst.scores, &inst.params, None, Some(&tracker)).unwrap();
        streaming_backward(&inst.scores, &inst.params, &fwd, &[1.0], Some(&tracker)).unwrap();
        let r = tracker.report();
        assert_eq!(r.get(BufferKind::ForwardRing), 8 * 5 * 8);
        assert_eq!(r.get(BufferKind::BackwardRing), 2 * 8 * 5 * 8);
        assert_eq!(r.get(BufferKind::EdgeTensor), 0);
    }
}

#[test]
fn viterbi_matches_dense() {
    for seed in 0..200 {
        let inst = random_instance(seed, InstanceDims::up_to(12, 4, 3));
        let got = streaming_viterbi(&inst.scores, &inst.params).unwrap();
        let log_z = streaming_forward(&inst.scores, &inst.params, None, None).unwrap().log_z;
        for (b, (seg, score)) in got.iter().enumerate() {
            let (want_seg, want_score) = dense_viterbi(&inst.scores, &inst.params, b, DenseGuard::default()).unwrap();
            assert_eq!(seg, &want_seg, "seed {seed}");
            assert_eq!(*score, want_score);
            assert!(*score <= log_z[b] + 1e-9 * log_z[b].abs().max(1.0));
        }
    }
}

#[test]
fn viterbi_invariant_under_shared_max_centering() {
    for seed in 0..30 {
        let inst = random_instance(seed, InstanceDims::up_to(30, 5, 4));
        let shifted = cumulative_from_emissions(&inst.emissions, CenteringMode::SharedMax).unwrap();
        let a = streaming_viterbi(&inst.scores, &inst.params).unwrap();
        let b = streaming_viterbi(&shifted, &inst.params).unwrap();
        // paths may differ only between exactly tied optima
        for (i, ((sa, _), (sb, score_b))) in a.iter().zip(&b).enumerate() {
            let rescored = score_segmentation_with(&shifted, &inst.params, sa, i, SourceReduction::Max).unwrap();
            assert!(
                (rescored - score_b).abs() < 1e-9,
                "seed {seed}: {rescored} vs {score_b}"
            );
            let shift =
                score_segmentation_with(&inst.scores, &inst.params, sb, i, SourceReduction::Max).unwrap() - score_b;
            let shift_a = a[i].1 - rescored;
            assert!((shift - shift_a).abs() < 1e-9);
        }
    }
}

#[test]
fn fast_paths_match_streaming() {
    for seed in 0..200 {
        for k in [1, 2] {
            let mut inst = random_instance(seed, InstanceDims::up_to(30, 1, 4));
            let c = inst.params.num_labels();
            inst.params.duration_bias =
                ndarray::Array2::from_shape_fn((k, c), |(i, j)| 0.1 * (i as f64) - 0.05 * j as f64);
            let general = streaming_forward(&inst.scores, &inst.params, None, None).unwrap().log_z;
            let fast = if k == 1 {
                k1_forward(&inst.scores, &inst.params).unwrap()
            } else {
                k2_forward(&inst.scores, &inst.params).unwrap()
            };
            for (a, b) in fast.iter().zip(&general) {
                assert!(rel(*a, *b) <= 1e-10, "seed {seed} K={k}");
            }
            let vg = streaming_viterbi(&inst.scores, &inst.params).unwrap();
            let vf = if k == 1 {
                k1_viterbi(&inst.scores, &inst.params).unwrap()
            } else {
                k2_viterbi(&inst.scores, &inst.params).unwrap()
            };
            assert_eq!(vg, vf);
        }
    }
}

#[test]
fn fast_path_rejects_projections() {
    let inst = random_instance(0, InstanceDims::exact(5, 1, 2, 1).with_projections());
    assert!(matches!(
        k1_forward(&inst.scores, &inst.params),
        Err(crate::error::Error::Contract(_))
    ));
}

#[test]
fn fast_path_gradients_match_dense() {
    for seed in 0..50 {
        for k in [1, 2] {
            let mut inst = random_instance(seed, InstanceDims::up_to(20, 1, 4));
            let c = inst.params.num_labels();
            inst.params.duration_bias = ndarray::Array2::from_elem((k, c), 0.2);
            let (lz, want) = dense_grads(&inst);
            let up = vec![1.0; inst.scores.batch_size()];
            let (log_z, back) = fastpath::fast_forward_backward(&inst.scores, &inst.params, &up, None).unwrap();
            for (a, b) in log_z.iter().zip(&lz) {
                assert!(rel(*a, *b) <= 1e-10);
            }
            assert!(back.grads.max_abs_diff(&want) <= 1e-8);
        }
    }
}

#[test]
fn k1_boundary_posterior_is_one() {
    for seed in 0..20 {
        let inst = random_instance(seed, InstanceDims::up_to(40, 1, 5));
        let up = vec![1.0; inst.scores.batch_size()];
        let (_, back) = fastpath::fast_forward_backward(&inst.scores, &inst.params, &up, None).unwrap();
        for (b, &len) in inst.scores.lengths.iter().enumerate() {
            for t in 0..len {
                assert!((back.marginals.boundary[[b, t]] - 1.0).abs() < 1e-12);
            }
            assert!((back.marginals.expected_segments[b] - len as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn non_finite_log_z_names_position() {
    let mut s = CumulativeScores::new(Array3::zeros((1, 5, 2)), vec![4]).unwrap();
    let p = SemiCrfParams::zeros(2, 2);
    // Every segment ending at boundary 3 or later is impossible.
    for t in 3..5 {
        for c in 0..2 {
            s.values[[0, t, c]] = -2e9;
        }
    }
    let err = streaming_forward(&s, &p, None, None).unwrap_err();
    match err {
        crate::error::Error::NonFiniteLogZ { b, position } => assert_eq!((b, position), (0, 3)),
        other => panic!("unexpected {other}"),
    }
}
