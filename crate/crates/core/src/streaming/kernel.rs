//! Inner loops shared by the streaming backend, its recompute pass and the
//! fast paths.

use crate::logspace::{is_neg_inf, INTERMEDIATE_CLAMP, LOG_MARGINAL_CLAMP, NEG_INF};
use crate::memory::{BufferKind, MemoryTracker, TrackedBuf};
use crate::potentials::SequenceView;

use super::ring::RingBuffer;

/// Per-step scratch, sized `K * C`.
pub(crate) struct Scratch {
    pub h: Vec<f64>,
    pub max: Vec<f64>,
    pub out: Vec<f64>,
}

impl Scratch {
    pub fn new(k: usize, c: usize) -> Self {
        Self {
            h: vec![0.0; k * c],
            max: vec![0.0; c],
            out: vec![0.0; c],
        }
    }
}

/// Fills `scratch.h[(k-1)*C..k*C]` with segment scores ending at `t`.
#[inline]
fn load_segment_scores(view: &SequenceView<'_>, t: usize, k_hi: usize, h: &mut [f64]) {
    let c = view.num_labels;
    for k in 1..=k_hi {
        view.segment_scores(t, k, &mut h[(k - 1) * c..k * c]);
    }
}

/// `out[c] = LSE_{k, c'} alpha_{t-k}(c') + psi(t, k, c, c')`, reading
/// `alpha_{t-k}` from `ring`. Result left in `scratch.out`.
pub(crate) fn alpha_step(view: &SequenceView<'_>, ring: &RingBuffer<'_>, t: usize, scratch: &mut Scratch) {
    let c = view.num_labels;
    let k_hi = view.max_k_ending_at(t);
    load_segment_scores(view, t, k_hi, &mut scratch.h);
    scratch.max.fill(NEG_INF);
    for k in 1..=k_hi {
        let row = ring.read(t - k);
        let h = &scratch.h[(k - 1) * c..k * c];
        for (src, &a) in row.iter().enumerate() {
            let trans = &view.transition[src * c..(src + 1) * c];
            for dst in 0..c {
                let v = a + (h[dst] + trans[dst]);
                if v > scratch.max[dst] {
                    scratch.max[dst] = v;
                }
            }
        }
    }
    scratch.out.fill(0.0);
    for k in 1..=k_hi {
        let row = ring.read(t - k);
        let h = &scratch.h[(k - 1) * c..k * c];
        for (src, &a) in row.iter().enumerate() {
            if is_neg_inf(a) {
                continue;
            }
            let trans = &view.transition[src * c..(src + 1) * c];
            for dst in 0..c {
                scratch.out[dst] += (a + (h[dst] + trans[dst]) - scratch.max[dst]).exp();
            }
        }
    }
    for dst in 0..c {
        let m = scratch.max[dst];
        scratch.out[dst] = if is_neg_inf(m) {
            NEG_INF
        } else {
            m + scratch.out[dst].ln()
        };
    }
}

/// Max-semiring step. `back[c] = (k, c')` of the winner, preferring larger
/// `k`, then smaller `c'`.
pub(crate) fn viterbi_step(
    view: &SequenceView<'_>,
    ring: &RingBuffer<'_>,
    t: usize,
    scratch: &mut Scratch,
    back: &mut [(u32, u32)],
) {
    let c = view.num_labels;
    let k_hi = view.max_k_ending_at(t);
    load_segment_scores(view, t, k_hi, &mut scratch.h);
    scratch.out.fill(f64::NEG_INFINITY);
    for k in (1..=k_hi).rev() {
        let row = ring.read(t - k);
        let h = &scratch.h[(k - 1) * c..k * c];
        for (src, &d) in row.iter().enumerate() {
            let trans = &view.transition[src * c..(src + 1) * c];
            for dst in 0..c {
                let v = d + (h[dst] + trans[dst]);
                if v > scratch.out[dst] {
                    scratch.out[dst] = v;
                    back[dst] = (k as u32, src as u32);
                }
            }
        }
    }
}

/// Traces a backpointer table `(T + 1) * C` back from `(len, label)`.
pub(crate) fn traceback(
    back: &[(u32, u32)],
    c: usize,
    len: usize,
    mut label: usize,
) -> Vec<crate::potentials::Segment> {
    let mut segments = Vec::new();
    let mut t = len;
    while t > 0 {
        let (k, src) = back[t * c + label];
        let k = k as usize;
        segments.push(crate::potentials::Segment {
            start: t - k,
            duration: k,
            label,
        });
        t -= k;
        label = src as usize;
    }
    segments.reverse();
    segments
}

/// Lowest label attaining the maximum.
pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Source of normalized forward messages, one block of positions at a time.
pub(crate) trait AlphaBlocks {
    /// Rows `alpha_t` for `t in t_lo..t_hi`, flattened `(t_hi - t_lo) * C`,
    /// and the normalizer to add back to them.
    fn load(&mut self, block: usize, t_lo: usize, t_hi: usize) -> (&[f64], f64);
}

/// Everything one sequence's backward pass produces.
pub(crate) struct SequenceBackward<'a> {
    /// `(T + 1) * C`, already scaled by the upstream weight.
    pub grad_s: Vec<f64>,
    /// `T * C` each, scaled by the upstream weight.
    pub grad_ps: Option<Vec<f64>>,
    pub grad_pe: Option<Vec<f64>>,
    /// Unscaled per-block transition workspaces, `n_blocks * C * C`.
    pub ws_transition: TrackedBuf<'a>,
    /// Unscaled per-block duration workspaces, `n_blocks * K * C`.
    pub ws_duration: TrackedBuf<'a>,
    /// `T * C` position marginals.
    pub position: Vec<f64>,
    /// `T` segment-start probabilities.
    pub boundary: Vec<f64>,
    pub expected_segments: f64,
    pub clamp_events: usize,
    pub hazards: usize,
}

pub(crate) struct BackwardPlan {
    pub t_max: usize,
    /// Block width; position `t` belongs to block `t / width`.
    pub width: usize,
    pub n_blocks: usize,
    pub log_z: f64,
    pub upstream: f64,
}

#[inline]
fn clamp_counted(x: f64, events: &mut usize) -> f64 {
    if x.abs() > INTERMEDIATE_CLAMP {
        *events += 1;
        x.clamp(-INTERMEDIATE_CLAMP, INTERMEDIATE_CLAMP)
    } else {
        x
    }
}

/// Backward recursion over a 2K-slot ring, accumulating marginals and
/// gradients. Blocks are visited last to first; `beta` is renormalized at
/// every block start and the shift carried in the marginal offset.
pub(crate) fn backward_sequence<'a, A: AlphaBlocks>(
    view: &SequenceView<'_>,
    plan: &BackwardPlan,
    alpha: &mut A,
    tracker: Option<&'a MemoryTracker>,
) -> SequenceBackward<'a> {
    let c = view.num_labels;
    let k_max = view.max_duration;
    let len = view.len;
    let t_max = plan.t_max;
    let w = plan.upstream;
    let mut grad_s = vec![0.0; (t_max + 1) * c];
    let mut grad_ps = view.proj_start.map(|_| vec![0.0; t_max * c]);
    let mut grad_pe = view.proj_end.map(|_| vec![0.0; t_max * c]);
    let mut ws_transition = TrackedBuf::zeros(plan.n_blocks * c * c, BufferKind::Workspace, tracker);
    let mut ws_duration = TrackedBuf::zeros(plan.n_blocks * k_max * c, BufferKind::Workspace, tracker);
    let mut diff = vec![0.0; (t_max + 1) * c];
    let mut boundary = vec![0.0; t_max];
    let mut expected = 0.0;
    let mut clamp_events = 0;

    let mut beta = RingBuffer::new(2 * k_max, c, BufferKind::BackwardRing, tracker);
    beta.fill(len, 0.0);
    let mut beta_shift = 0.0;
    let mut h = vec![0.0; c];
    let mut max = vec![0.0; c];
    let mut acc = vec![0.0; c];

    let last_block = (len - 1) / plan.width;
    for block in (0..=last_block).rev() {
        let t_lo = block * plan.width;
        let t_hi = ((block + 1) * plan.width).min(len);
        let (rows, norm) = alpha.load(block, t_lo, t_hi);
        let ws_t = &mut ws_transition[block * c * c..(block + 1) * c * c];
        let ws_b = &mut ws_duration[block * k_max * c..(block + 1) * k_max * c];

        for t in (t_lo..t_hi).rev() {
            let a_row = &rows[(t - t_lo) * c..(t - t_lo + 1) * c];
            let offset = norm + beta_shift - plan.log_z;
            let k_hi = k_max.min(len - t);

            max.fill(NEG_INF);
            for k in 1..=k_hi {
                view.segment_scores(t + k, k, &mut h);
                let b_row = beta.read(t + k);
                for (src, mx) in max.iter_mut().enumerate().take(c) {
                    let trans = &view.transition[src * c..(src + 1) * c];
                    for dst in 0..c {
                        let v = (h[dst] + trans[dst]) + b_row[dst];
                        if v > *mx {
                            *mx = v;
                        }
                    }
                }
            }

            acc.fill(0.0);
            for k in 1..=k_hi {
                view.segment_scores(t + k, k, &mut h);
                let b_row = beta.read(t + k);
                let end = t + k;
                for src in 0..c {
                    let trans = &view.transition[src * c..(src + 1) * c];
                    let a = clamp_counted(a_row[src], &mut clamp_events);
                    for dst in 0..c {
                        let psi = h[dst] + trans[dst];
                        let bv = b_row[dst];
                        acc[src] += (psi + bv - max[src]).exp();

                        let log_mu =
                            a + clamp_counted(psi, &mut clamp_events) + clamp_counted(bv, &mut clamp_events) + offset;
                        let mu = log_mu.clamp(-LOG_MARGINAL_CLAMP, LOG_MARGINAL_CLAMP).exp();
                        let g = w * mu;
                        grad_s[end * c + dst] += g;
                        grad_s[t * c + dst] -= g;
                        ws_t[src * c + dst] += mu;
                        ws_b[(k - 1) * c + dst] += mu;
                        if let Some(ps) = grad_ps.as_mut() {
                            ps[t * c + dst] += g;
                        }
                        if let Some(pe) = grad_pe.as_mut() {
                            pe[(end - 1) * c + dst] += g;
                        }
                        diff[t * c + dst] += mu;
                        diff[end * c + dst] -= mu;
                        boundary[t] += mu;
                        expected += mu;
                    }
                }
            }
            for src in 0..c {
                acc[src] = if is_neg_inf(max[src]) {
                    NEG_INF
                } else {
                    max[src] + acc[src].ln()
                };
            }
            beta.write(t, &acc);

            if t % plan.width == 0 && t > 0 {
                let shift = beta.max_at(t);
                beta.shift_all(shift);
                beta_shift += shift;
            }
        }
    }

    let mut position = vec![0.0; t_max * c];
    for label in 0..c {
        let mut run = 0.0;
        for t in 0..len {
            run += diff[t * c + label];
            position[t * c + label] = run;
        }
    }

    SequenceBackward {
        grad_s,
        grad_ps,
        grad_pe,
        ws_transition,
        ws_duration,
        position,
        boundary,
        expected_segments: expected,
        clamp_events,
        hazards: beta.hazards(),
    }
}
