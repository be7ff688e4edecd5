//! Dense textbook semi-CRF forward-backward and Viterbi, plus exhaustive
//! enumeration. This is the correctness oracle for the streaming backend: it
//! materializes the `(T, K, C, C)` edge tensor and full message tables.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::logspace::{logsumexp, logsumexp_iter, lse2, NEG_INF};
use crate::memory::{BufferKind, MemoryTracker, TrackedBuf};
use crate::potentials::{CumulativeScores, Segment, Segmentation, SemiCrfParams, SequenceView};
use crate::streaming::GradientSet;

/// Default refusal threshold for the materialized edge tensor.
pub const DEFAULT_GUARD_BYTES: u128 = 2 << 30;

/// Environment variable overriding [`DEFAULT_GUARD_BYTES`].
pub const GUARD_ENV: &str = "STREAMCRF_GUARD_BYTES";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseGuard {
    pub bytes: u128,
}

impl Default for DenseGuard {
    fn default() -> Self {
        Self {
            bytes: DEFAULT_GUARD_BYTES,
        }
    }
}

impl DenseGuard {
    pub fn from_env() -> Self {
        std::env::var(GUARD_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<u128>().ok())
            .map(|bytes| Self { bytes })
            .unwrap_or_default()
    }

    pub fn unlimited() -> Self {
        Self { bytes: u128::MAX }
    }

    /// Bytes the dense backend would materialize for these dimensions.
    pub fn required(batch: usize, t_max: usize, k: usize, c: usize) -> u128 {
        // Edge tensor plus the joint marginal tensor of the same shape.
        2 * (batch as u128) * (t_max as u128) * (k as u128) * (c as u128).pow(2) * 8
    }

    pub fn check(&self, batch: usize, t_max: usize, k: usize, c: usize) -> Result<()> {
        let required = Self::required(batch, t_max, k, c);
        if required > self.bytes {
            return Err(Error::DenseGuard {
                required,
                guard: self.bytes,
            });
        }
        Ok(())
    }
}

/// Largest instance [`enumerate_log_z`] accepts.
pub const ENUM_MAX_LEN: usize = 12;
pub const ENUM_MAX_K: usize = 4;
pub const ENUM_MAX_C: usize = 4;

fn check_enumeration(len: usize, k: usize, c: usize) -> Result<()> {
    if len > ENUM_MAX_LEN || k > ENUM_MAX_K || c > ENUM_MAX_C {
        return Err(Error::EnumerationGuard(format!(
            "L={len}, K={k}, C={c} exceeds L<={ENUM_MAX_LEN}, K<={ENUM_MAX_K}, C<={ENUM_MAX_C}"
        )));
    }
    Ok(())
}

/// Visits every (virtual source, labeled segmentation) of sequence `b` with
/// its path score. Scores are accumulated term by term from the raw tensors.
pub fn enumerate_paths<F>(s: &CumulativeScores, params: &SemiCrfParams, b: usize, mut visit: F) -> Result<()>
where
    F: FnMut(usize, &[Segment], f64),
{
    params.validate_for(s)?;
    let len = s.lengths[b];
    let k_max = params.max_duration();
    let c = params.num_labels();
    check_enumeration(len, k_max, c)?;

    fn recurse<F: FnMut(usize, &[Segment], f64)>(
        s: &CumulativeScores,
        params: &SemiCrfParams,
        b: usize,
        source: usize,
        path: &mut Vec<Segment>,
        score: f64,
        visit: &mut F,
    ) {
        let len = s.lengths[b];
        let start = path.last().map_or(0, Segment::end);
        if start == len {
            visit(source, path, score);
            return;
        }
        let prev = path.last().map_or(source, |sg| sg.label);
        for k in 1..=params.max_duration().min(len - start) {
            for label in 0..params.num_labels() {
                let end = start + k;
                let mut term = s.values[[b, end, label]] - s.values[[b, start, label]];
                term += params.duration_bias[[k - 1, label]];
                term += params.transition[[prev, label]];
                if let Some(p) = &params.projections {
                    term += p.start[[b, start, label]] + p.end[[b, end - 1, label]];
                }
                path.push(Segment {
                    start,
                    duration: k,
                    label,
                });
                recurse(s, params, b, source, path, score + term, visit);
                path.pop();
            }
        }
    }

    let mut path = Vec::with_capacity(len);
    for source in 0..c {
        recurse(s, params, b, source, &mut path, 0.0, &mut visit);
    }
    Ok(())
}

/// Exhaustive log-partition of sequence `b`.
pub fn enumerate_log_z(s: &CumulativeScores, params: &SemiCrfParams, b: usize) -> Result<f64> {
    let mut scores = Vec::new();
    enumerate_paths(s, params, b, |_, _, score| scores.push(score))?;
    Ok(logsumexp(&scores))
}

/// Exhaustive maximum path score and the segmentation attaining it.
pub fn enumerate_max(s: &CumulativeScores, params: &SemiCrfParams, b: usize) -> Result<(Segmentation, f64)> {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    enumerate_paths(s, params, b, |_, path, score| {
        if score > best.1 {
            best = (path.to_vec(), score);
        }
    })?;
    Ok((Segmentation::new(best.0), best.1))
}

/// Full forward and backward message tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMessages {
    /// `(B, T + 1, C)`; `alpha[b, t, c]` sums paths over `[0, t)` whose last
    /// segment has label `c` (at `t = 0`, the virtual source).
    pub alpha: Array3<f64>,
    /// `(B, T + 1, C)`; `beta[b, t, c]` sums continuations over `[t, L_b)`
    /// given the label `c` of the segment ending at `t`.
    pub beta: Array3<f64>,
    pub log_z: Vec<f64>,
}

/// Joint segment marginals `mu(t, k, c, c')` per sequence, each stored as
/// `(T + 1, K, C, C)` indexed `[t, k - 1, c, src]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMarginals {
    pub values: Vec<Array4<f64>>,
}

impl JointMarginals {
    pub fn get(&self, b: usize, t: usize, k: usize, c: usize, src: usize) -> f64 {
        self.values[b][[t, k - 1, c, src]]
    }

    /// `sum_{t,k,c,c'} mu` for sequence `b`.
    pub fn expected_segments(&self, b: usize) -> f64 {
        self.values[b].sum()
    }
}

#[derive(Debug, Clone)]
pub struct DenseBackward {
    pub marginals: JointMarginals,
    pub grads: GradientSet,
}

/// Materialized edge tensor of one sequence, `[t][k-1][c][src]` flattened.
struct EdgeTensor<'a> {
    data: TrackedBuf<'a>,
    k_max: usize,
    c: usize,
}

impl<'a> EdgeTensor<'a> {
    fn build(view: &SequenceView<'_>, t_rows: usize, tracker: Option<&'a MemoryTracker>) -> Self {
        let (k_max, c) = (view.max_duration, view.num_labels);
        let mut data = TrackedBuf::filled(t_rows * k_max * c * c, NEG_INF, BufferKind::EdgeTensor, tracker);
        for t in 1..=view.len {
            for k in 1..=view.max_k_ending_at(t) {
                for label in 0..c {
                    let h = view.segment_score(t, k, label);
                    for src in 0..c {
                        data[((t * k_max + k - 1) * c + label) * c + src] = h + view.trans(src, label);
                    }
                }
            }
        }
        Self { data, k_max, c }
    }

    #[inline]
    fn at(&self, t: usize, k: usize, c: usize, src: usize) -> f64 {
        self.data[((t * self.k_max + k - 1) * self.c + c) * self.c + src]
    }
}

fn check_dense(s: &CumulativeScores, params: &SemiCrfParams, guard: DenseGuard) -> Result<()> {
    params.validate_for(s)?;
    if params.has_scalar_boundaries() {
        return Err(Error::Contract(
            "scalar boundaries must be applied (apply_scalar_boundaries) before inference".into(),
        ));
    }
    guard.check(s.batch_size(), s.max_len(), params.max_duration(), params.num_labels())
}

pub fn dense_forward(s: &CumulativeScores, params: &SemiCrfParams, guard: DenseGuard) -> Result<DenseMessages> {
    dense_forward_tracked(s, params, guard, None)
}

pub fn dense_forward_tracked(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    guard: DenseGuard,
    tracker: Option<&MemoryTracker>,
) -> Result<DenseMessages> {
    check_dense(s, params, guard)?;
    let (batch, rows, c) = s.values.dim();
    let mut alpha = Array3::from_elem((batch, rows, c), NEG_INF);
    let mut beta = Array3::from_elem((batch, rows, c), NEG_INF);
    let mut log_z = vec![0.0; batch];
    let _messages = TrackedBuf::zeros(2 * batch * rows * c, BufferKind::Messages, tracker);

    for b in 0..batch {
        let view = SequenceView::new(s, params, b);
        let len = view.len;
        let edges = EdgeTensor::build(&view, rows, tracker);

        for label in 0..c {
            alpha[[b, 0, label]] = 0.0;
        }
        for t in 1..=len {
            for label in 0..c {
                let mut acc = NEG_INF;
                for k in 1..=view.max_k_ending_at(t) {
                    for src in 0..c {
                        acc = lse2(acc, alpha[[b, t - k, src]] + edges.at(t, k, label, src));
                    }
                }
                alpha[[b, t, label]] = acc;
            }
        }

        for label in 0..c {
            beta[[b, len, label]] = 0.0;
        }
        for t in (0..len).rev() {
            for src in 0..c {
                let mut acc = NEG_INF;
                for k in 1..=params.max_duration().min(len - t) {
                    for label in 0..c {
                        acc = lse2(acc, edges.at(t + k, k, label, src) + beta[[b, t + k, label]]);
                    }
                }
                beta[[b, t, src]] = acc;
            }
        }

        log_z[b] = logsumexp_iter((0..c).map(|label| alpha[[b, len, label]]));
        if !log_z[b].is_finite() || log_z[b] <= NEG_INF + 1.0 {
            let position = (1..=len)
                .find(|&t| (0..c).all(|label| alpha[[b, t, label]] <= NEG_INF + 1.0))
                .unwrap_or(len);
            return Err(Error::NonFiniteLogZ { b, position });
        }
    }
    Ok(DenseMessages { alpha, beta, log_z })
}

/// Joint marginals and `d(sum_b upstream[b] * logZ_b)` gradients.
pub fn dense_backward_marginals(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    msgs: &DenseMessages,
    upstream: &[f64],
    guard: DenseGuard,
) -> Result<DenseBackward> {
    check_dense(s, params, guard)?;
    let (batch, rows, c) = s.values.dim();
    if upstream.len() != batch {
        return Err(Error::Shape(format!(
            "{} upstream values for batch {batch}",
            upstream.len()
        )));
    }
    let k_max = params.max_duration();
    let mut grads = GradientSet::zeros(batch, rows - 1, c, k_max, params.has_projections());
    let mut values = Vec::with_capacity(batch);

    for b in 0..batch {
        let view = SequenceView::new(s, params, b);
        let len = view.len;
        let edges = EdgeTensor::build(&view, rows, None);
        let mut mu = Array4::<f64>::zeros((rows, k_max, c, c));
        let lz = msgs.log_z[b];
        let w = upstream[b];
        for t in 1..=len {
            for k in 1..=view.max_k_ending_at(t) {
                for label in 0..c {
                    for src in 0..c {
                        let m = (msgs.alpha[[b, t - k, src]] + edges.at(t, k, label, src) + msgs.beta[[b, t, label]]
                            - lz)
                            .exp();
                        mu[[t, k - 1, label, src]] = m;
                        let g = w * m;
                        grads.cum_scores[[b, t, label]] += g;
                        grads.cum_scores[[b, t - k, label]] -= g;
                        grads.transition[[src, label]] += g;
                        grads.duration_bias[[k - 1, label]] += g;
                        if let (Some(ps), Some(pe)) = (grads.proj_start.as_mut(), grads.proj_end.as_mut()) {
                            ps[[b, t - k, label]] += g;
                            pe[[b, t - 1, label]] += g;
                        }
                    }
                }
            }
        }
        values.push(mu);
    }
    Ok(DenseBackward {
        marginals: JointMarginals { values },
        grads,
    })
}

/// Log-probability that a segment boundary sits at `t`, from the messages.
/// Equals the log-partition at `t = 0` and `t = L_b` (and everywhere when
/// `K = 1`); elsewhere it is `logZ + log P(boundary at t)`.
pub fn boundary_flow(msgs: &DenseMessages, b: usize, t: usize) -> f64 {
    let c = msgs.alpha.dim().2;
    logsumexp_iter((0..c).map(|label| msgs.alpha[[b, t, label]] + msgs.beta[[b, t, label]]))
}

/// MAP segmentation of sequence `b` and its score (virtual source maxed).
///
/// Ties prefer the longer duration, then the smaller source label; the final
/// label tie prefers the smaller label.
pub fn dense_viterbi(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    b: usize,
    guard: DenseGuard,
) -> Result<(Segmentation, f64)> {
    check_dense(s, params, guard)?;
    let (_, rows, c) = s.values.dim();
    let view = SequenceView::new(s, params, b);
    let len = view.len;
    let edges = EdgeTensor::build(&view, rows, None);
    let mut delta = vec![NEG_INF; (len + 1) * c];
    let mut back = vec![(0usize, 0usize); (len + 1) * c];
    delta[..c].fill(0.0);
    for t in 1..=len {
        for label in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut arg = (0, 0);
            for k in (1..=view.max_k_ending_at(t)).rev() {
                for src in 0..c {
                    let v = delta[(t - k) * c + src] + edges.at(t, k, label, src);
                    if v > best {
                        best = v;
                        arg = (k, src);
                    }
                }
            }
            delta[t * c + label] = best;
            back[t * c + label] = arg;
        }
    }
    let mut label = 0;
    for cand in 1..c {
        if delta[len * c + cand] > delta[len * c + label] {
            label = cand;
        }
    }
    let score = delta[len * c + label];
    let mut segments = Vec::new();
    let mut t = len;
    while t > 0 {
        let (k, src) = back[t * c + label];
        segments.push(Segment {
            start: t - k,
            duration: k,
            label,
        });
        t -= k;
        label = src;
    }
    segments.reverse();
    Ok((Segmentation::new(segments), score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_instance, InstanceDims};
    use crate::potentials::{score_segmentation_with, SourceReduction};
    use ndarray::Array3 as A3;

    fn zero_instance(t: usize, k: usize, c: usize) -> (CumulativeScores, SemiCrfParams) {
        let s = CumulativeScores::new(A3::zeros((1, t + 1, c)), vec![t]).unwrap();
        (s, SemiCrfParams::zeros(c, k))
    }

    #[test]
    fn enumeration_trivial_counts() {
        let (s, p) = zero_instance(1, 1, 1);
        assert_eq!(enumerate_log_z(&s, &p, 0).unwrap(), 0.0);
        let (s, p) = zero_instance(1, 1, 2);
        assert!((enumerate_log_z(&s, &p, 0).unwrap() - 4f64.ln()).abs() < 1e-15);
        // Compositions of 4 into parts <= 2: 1111, 112, 121, 211, 22 give
        // 16 + 3 * 8 + 4 = 44 labeled paths, times 2 virtual sources.
        let (s, p) = zero_instance(4, 2, 2);
        let mut count = 0;
        enumerate_paths(&s, &p, 0, |_, _, _| count += 1).unwrap();
        assert_eq!(count, 88);
        assert!((enumerate_log_z(&s, &p, 0).unwrap() - 88f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn enumeration_guard_refuses() {
        let (s, p) = zero_instance(13, 2, 2);
        assert!(matches!(enumerate_log_z(&s, &p, 0), Err(Error::EnumerationGuard(_))));
        let (s, p) = zero_instance(3, 5, 2);
        assert!(matches!(enumerate_log_z(&s, &p, 0), Err(Error::EnumerationGuard(_))));
    }

    #[test]
    fn dense_matches_enumeration() {
        for seed in 0..200 {
            let inst = random_instance(seed, InstanceDims::up_to(6, 3, 3));
            let msgs = dense_forward(&inst.scores, &inst.params, DenseGuard::default()).unwrap();
            for b in 0..inst.scores.batch_size() {
                let exact = enumerate_log_z(&inst.scores, &inst.params, b).unwrap();
                let rel = (msgs.log_z[b] - exact).abs() / exact.abs().max(1.0);
                assert!(rel <= 1e-10, "seed {seed} b {b}: {} vs {exact}", msgs.log_z[b]);
            }
        }
    }

    #[test]
    fn zero_params_single_token() {
        let (s, p) = zero_instance(1, 1, 2);
        let msgs = dense_forward(&s, &p, DenseGuard::default()).unwrap();
        assert!((msgs.log_z[0] - 4f64.ln()).abs() < 1e-15);
        let (s, p) = zero_instance(1, 1, 1);
        let msgs = dense_forward(&s, &p, DenseGuard::default()).unwrap();
        let back = dense_backward_marginals(&s, &p, &msgs, &[1.0], DenseGuard::default()).unwrap();
        assert_eq!(back.marginals.get(0, 1, 1, 0, 0), 1.0);
    }

    #[test]
    fn log_z_monotone_in_duration_bias() {
        for seed in 0..20 {
            let inst = random_instance(seed, InstanceDims::up_to(8, 4, 3));
            let base = dense_forward(&inst.scores, &inst.params, DenseGuard::default()).unwrap();
            let mut bumped = inst.params.clone();
            bumped.duration_bias[[0, 0]] += 0.3;
            let up = dense_forward(&inst.scores, &bumped, DenseGuard::default()).unwrap();
            for b in 0..base.log_z.len() {
                assert!(up.log_z[b] >= base.log_z[b]);
            }
        }
    }

    #[test]
    fn boundary_flow_at_ends_equals_log_z() {
        for seed in 0..30 {
            let inst = random_instance(seed, InstanceDims::up_to(10, 4, 3));
            let msgs = dense_forward(&inst.scores, &inst.params, DenseGuard::default()).unwrap();
            let back = dense_backward_marginals(
                &inst.scores,
                &inst.params,
                &msgs,
                &vec![1.0; inst.scores.batch_size()],
                DenseGuard::default(),
            )
            .unwrap();
            for b in 0..msgs.log_z.len() {
                let len = inst.scores.lengths[b];
                assert!((boundary_flow(&msgs, b, 0) - msgs.log_z[b]).abs() < 1e-8);
                assert!((boundary_flow(&msgs, b, len) - msgs.log_z[b]).abs() < 1e-8);
                for t in 1..len {
                    // Interior flow is logZ + log P(boundary at t).
                    let p_bdy: f64 = (1..=inst.params.max_duration().min(len - t))
                        .map(|k| {
                            let mut acc = 0.0;
                            for c in 0..inst.params.num_labels() {
                                for src in 0..inst.params.num_labels() {
                                    acc += back.marginals.get(b, t + k, k, c, src);
                                }
                            }
                            acc
                        })
                        .sum();
                    let flow = boundary_flow(&msgs, b, t);
                    assert!(flow <= msgs.log_z[b] + 1e-9);
                    assert!((flow - msgs.log_z[b] - p_bdy.ln()).abs() < 1e-8, "seed {seed} t {t}");
                }
            }
        }
    }

    #[test]
    fn expected_segments_within_bounds() {
        for seed in 0..30 {
            let inst = random_instance(seed, InstanceDims::up_to(12, 4, 3));
            let msgs = dense_forward(&inst.scores, &inst.params, DenseGuard::default()).unwrap();
            let up = vec![1.0; msgs.log_z.len()];
            let back = dense_backward_marginals(&inst.scores, &inst.params, &msgs, &up, DenseGuard::default()).unwrap();
            for b in 0..msgs.log_z.len() {
                let n = back.marginals.expected_segments(b);
                let len = inst.scores.lengths[b] as f64;
                assert!(n >= 1.0 - 1e-9 && n <= len + 1e-9);
                assert!(back.marginals.values[b]
                    .iter()
                    .all(|&m| (0.0..=1.0 + 1e-12).contains(&m)));
            }
        }
    }

    #[test]
    fn viterbi_matches_enumeration() {
        for seed in 0..200 {
            let inst = random_instance(seed, InstanceDims::up_to(6, 3, 3));
            for b in 0..inst.scores.batch_size() {
                let (seg, score) = dense_viterbi(&inst.scores, &inst.params, b, DenseGuard::default()).unwrap();
                let (_, best) = enumerate_max(&inst.scores, &inst.params, b).unwrap();
                assert!((score - best).abs() < 1e-10, "seed {seed}");
                let rescored =
                    score_segmentation_with(&inst.scores, &inst.params, &seg, b, SourceReduction::Max).unwrap();
                assert!((rescored - score).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn viterbi_zero_params_tie_break() {
        let (s, p) = zero_instance(5, 3, 2);
        let (seg, score) = dense_viterbi(&s, &p, 0, DenseGuard::default()).unwrap();
        assert_eq!(score, 0.0);
        // Longest duration wins from the end backwards: [0,2) then [2,5).
        assert_eq!(
            seg.segments,
            vec![
                Segment {
                    start: 0,
                    duration: 2,
                    label: 0
                },
                Segment {
                    start: 2,
                    duration: 3,
                    label: 0
                }
            ]
        );
    }

    #[test]
    fn viterbi_finds_constructed_boundary() {
        // Label 1 favored on [0, 3), label 0 on [3, 5); sticky transitions.
        let t = 5;
        let mut em = A3::<f64>::zeros((1, t, 2));
        for pos in 0..t {
            let fav = if pos < 3 { 1 } else { 0 };
            em[[0, pos, fav]] = 2.0;
        }
        let s = crate::potentials::cumulative_from_emissions(
            &crate::potentials::EmissionBatch::full(em).unwrap(),
            crate::potentials::CenteringMode::None,
        )
        .unwrap();
        let mut p = SemiCrfParams::zeros(2, 4);
        p.transition[[0, 0]] = 1.0;
        p.transition[[1, 1]] = 1.0;
        p.transition[[0, 1]] = -1.0;
        p.transition[[1, 0]] = -1.0;
        let (seg, score) = dense_viterbi(&s, &p, 0, DenseGuard::default()).unwrap();
        let labels = seg.position_labels();
        assert_eq!(labels, vec![1, 1, 1, 0, 0]);
        assert!(seg.segments.iter().any(|sg| sg.start == 3));
        let (_, best) = enumerate_max(&s, &p, 0).unwrap();
        assert!((best - score).abs() < 1e-12);
    }

    #[test]
    fn dense_guard_refuses_large_instances() {
        let s = CumulativeScores::new(A3::zeros((1, 101, 4)), vec![100]).unwrap();
        let p = SemiCrfParams::zeros(4, 10);
        let err = dense_forward(&s, &p, DenseGuard { bytes: 1000 }).unwrap_err();
        assert!(err.to_string().contains("streaming"), "{err}");
    }
}
