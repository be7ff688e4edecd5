use ndarray::{Array2, Array3};
use proptest::prelude::*;
use streamcrf::potentials::{center_emissions, score_segmentation_with, SourceReduction};
use streamcrf::reference::{enumerate_log_z, enumerate_max};
use streamcrf::{
    build_cumulative, cumulative_from_emissions, decode, edge_potential, forward_backward, log_partition,
    score_segmentation, Backend, CenteringMode, CumulativeScores, EmissionBatch, InferenceOptions, Segment,
    Segmentation, SemiCrfParams,
};

#[derive(Debug, Clone)]
struct Case {
    emissions: EmissionBatch,
    params: SemiCrfParams,
}

impl Case {
    fn scores(&self, mode: CenteringMode) -> CumulativeScores {
        cumulative_from_emissions(&self.emissions, mode).unwrap()
    }
}

/// Small instances with explicit arrays, so shrinking acts on the values.
fn case(t_max: usize, k_max: usize, c_max: usize) -> impl Strategy<Value = Case> {
    (1..=t_max, 1..=k_max, 1..=c_max, 1..=2usize)
        .prop_flat_map(move |(t, k, c, batch)| {
            (
                prop::collection::vec(-3.0..3.0f64, batch * t * c),
                prop::collection::vec(-1.0..1.0f64, c * c),
                prop::collection::vec(-1.0..1.0f64, k * c),
                prop::collection::vec(1..=t, batch),
                Just((t, k, c, batch)),
            )
        })
        .prop_map(|(e, tr, du, mut lengths, (t, k, c, batch))| {
            lengths[0] = t;
            let emissions = EmissionBatch::new(Array3::from_shape_vec((batch, t, c), e).unwrap(), lengths).unwrap();
            let params = SemiCrfParams::new(
                Array2::from_shape_vec((c, c), tr).unwrap(),
                Array2::from_shape_vec((k, c), du).unwrap(),
            )
            .unwrap();
            Case { emissions, params }
        })
}

/// A segmentation of `len` positions from a stream of (duration, label) draws.
fn tiling(len: usize, k: usize, c: usize, draws: &[(usize, usize)]) -> Segmentation {
    let mut segments = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while start < len {
        let (d, label) = draws[i % draws.len()];
        let duration = (d % k + 1).min(len - start);
        segments.push(Segment {
            start,
            duration,
            label: label % c,
        });
        start += duration;
        i += 1;
    }
    Segmentation::new(segments)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_backend_matches_enumeration(case in case(6, 3, 3)) {
        let s = case.scores(CenteringMode::Mean);
        for backend in [Backend::Dense, Backend::Streaming, Backend::Auto] {
            let log_z = log_partition(&s, &case.params, &InferenceOptions::with_backend(backend)).unwrap();
            for (b, z) in log_z.iter().enumerate() {
                let exact = enumerate_log_z(&s, &case.params, b).unwrap();
                prop_assert!(rel(*z, exact) <= 1e-10, "{backend}: {z} vs {exact}");
            }
        }
    }

    #[test]
    fn viterbi_is_the_enumerated_maximum(case in case(6, 3, 3)) {
        let s = case.scores(CenteringMode::None);
        let opts = InferenceOptions::with_backend(Backend::Streaming);
        let log_z = log_partition(&s, &case.params, &opts).unwrap();
        for (b, (path, score)) in decode(&s, &case.params, &opts).unwrap().into_iter().enumerate() {
            let (_, best) = enumerate_max(&s, &case.params, b).unwrap();
            prop_assert!(rel(score, best) <= 1e-12);
            let rescored = score_segmentation_with(&s, &case.params, &path, b, SourceReduction::Max).unwrap();
            prop_assert!(rel(score, rescored) <= 1e-12);
            prop_assert!(score <= log_z[b] + 1e-9 * log_z[b].abs().max(1.0));
        }
    }

    #[test]
    fn edge_potential_telescopes_to_the_emission_sum(
        case in case(12, 4, 3),
        picks in prop::collection::vec((0usize..100, 0usize..100, 0usize..100, 0usize..100), 8),
    ) {
        let s = case.scores(CenteringMode::None);
        let (c, k_max, len) = (case.params.num_labels(), case.params.max_duration(), case.emissions.lengths[0]);
        for (pt, pk, pc, psrc) in picks {
            let t = pt % len + 1;
            let k = pk % k_max.min(t) + 1;
            let (label, src) = (pc % c, psrc % c);
            let direct: f64 = (t - k..t).map(|p| case.emissions.scores[[0, p, label]]).sum::<f64>()
                + case.params.duration_bias[[k - 1, label]]
                + case.params.transition[[src, label]];
            let edge = edge_potential(&s, &case.params, 0, t, k, label, src).unwrap();
            prop_assert!((edge - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn mean_centering_is_a_duration_prior(
        case in case(16, 5, 4),
        draws in prop::collection::vec((0usize..8, 0usize..8), 1..12),
    ) {
        let none = case.scores(CenteringMode::None);
        let mean = case.scores(CenteringMode::Mean);
        let baseline = center_emissions(&case.emissions, CenteringMode::Mean).unwrap().baseline;
        let (c, k) = (case.params.num_labels(), case.params.max_duration());
        for (b, &len) in case.emissions.lengths.iter().enumerate() {
            let seg = tiling(len, k, c, &draws);
            let prior: f64 = seg.segments.iter().map(|g| baseline[[b, g.label]] * g.duration as f64).sum();
            let a = score_segmentation(&mean, &case.params, &seg, b).unwrap();
            let z = score_segmentation(&none, &case.params, &seg, b).unwrap();
            prop_assert!((a - (z - prior)).abs() <= 1e-9 * z.abs().max(1.0));
        }
    }

    #[test]
    fn shared_max_centering_shifts_log_z_by_a_constant(case in case(20, 5, 4)) {
        let opts = InferenceOptions::default();
        let centered = center_emissions(&case.emissions, CenteringMode::SharedMax).unwrap();
        let shifted = log_partition(&build_cumulative(&centered), &case.params, &opts).unwrap();
        let plain = log_partition(&case.scores(CenteringMode::None), &case.params, &opts).unwrap();
        for (b, &len) in case.emissions.lengths.iter().enumerate() {
            let shift: f64 = (0..len).map(|t| centered.shift[[b, t]]).sum();
            prop_assert!((plain[b] - shifted[b] - shift).abs() <= 1e-9 * plain[b].abs().max(1.0));
        }
    }

    #[test]
    fn log_z_is_monotone_in_duration_bias(case in case(10, 4, 3), pick in 0usize..64, delta in 0.0..2.0f64) {
        let s = case.scores(CenteringMode::Mean);
        let opts = InferenceOptions::with_backend(Backend::Streaming);
        let before = log_partition(&s, &case.params, &opts).unwrap();
        let mut bumped = case.params.clone();
        let n = bumped.duration_bias.len();
        bumped.duration_bias.as_slice_mut().unwrap()[pick % n] += delta;
        let after = log_partition(&s, &bumped, &opts).unwrap();
        for (a, b) in after.iter().zip(&before) {
            prop_assert!(*a >= *b - 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gradients_count_segments_and_positions(case in case(24, 6, 4)) {
        let s = case.scores(CenteringMode::Mean);
        let inf = forward_backward(&s, &case.params, None, &InferenceOptions::with_backend(Backend::Streaming), None)
            .unwrap();
        let segments: f64 = inf.marginals.expected_segments.iter().sum();
        let g_b = &inf.grads.duration_bias;
        prop_assert!((g_b.sum() - segments).abs() <= 1e-9 * segments.max(1.0));
        prop_assert!((inf.grads.transition.sum() - segments).abs() <= 1e-9 * segments.max(1.0));
        let covered: f64 = g_b.indexed_iter().map(|((k, _), g)| (k + 1) as f64 * g).sum();
        let total: usize = case.emissions.lengths.iter().sum();
        prop_assert!((covered - total as f64).abs() <= 1e-9 * total as f64);
        for (b, &n) in inf.marginals.expected_segments.iter().enumerate() {
            prop_assert!(n >= 1.0 - 1e-9 && n <= case.emissions.lengths[b] as f64 + 1e-9);
        }
    }

    #[test]
    fn any_path_scores_below_log_z(case in case(30, 6, 4), draws in prop::collection::vec((0usize..9, 0usize..9), 1..10)) {
        let s = case.scores(CenteringMode::Mean);
        let log_z = log_partition(&s, &case.params, &InferenceOptions::default()).unwrap();
        let (c, k) = (case.params.num_labels(), case.params.max_duration());
        for (b, &len) in case.emissions.lengths.iter().enumerate() {
            let score = score_segmentation(&s, &case.params, &tiling(len, k, c, &draws), b).unwrap();
            prop_assert!(score <= log_z[b] + 1e-9 * log_z[b].abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_interval_never_changes_the_answer(case in case(40, 6, 4), delta in 1usize..50) {
        let s = case.scores(CenteringMode::Mean);
        let auto = log_partition(&s, &case.params, &InferenceOptions::with_backend(Backend::Streaming)).unwrap();
        let opts = InferenceOptions { delta: Some(delta), ..InferenceOptions::with_backend(Backend::Streaming) };
        let forced = log_partition(&s, &case.params, &opts).unwrap();
        for (a, b) in auto.iter().zip(&forced) {
            prop_assert!(rel(*a, *b) <= 1e-12);
        }
    }
}
