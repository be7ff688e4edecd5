use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::diagnostics::MarginalSet;
use crate::error::{Error, Result};
use crate::memory::MemoryTracker;
use crate::potentials::{CumulativeScores, SemiCrfParams, SequenceView};

use super::check_streaming_inputs;
use super::forward::{ForwardOutput, Recompute};
use super::kernel::{backward_sequence, BackwardPlan, SequenceBackward};
use super::GradientSet;

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: GradientSet,
    pub marginals: MarginalSet,
    /// Summands of `alpha + psi + beta` that hit the intermediate clamp.
    pub clamp_events: usize,
    /// Ring reads (backward and recompute) that found an overwritten slot.
    pub hazards: usize,
}

/// Gradients of `sum_b upstream[b] * logZ_b` and posterior marginals.
pub fn streaming_backward(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    fwd: &ForwardOutput<'_>,
    upstream: &[f64],
    tracker: Option<&MemoryTracker>,
) -> Result<BackwardOutput> {
    check_streaming_inputs(s, params)?;
    let ck = &fwd.checkpoints;
    let batch = s.batch_size();
    if ck.batch != batch
        || ck.t_max != s.max_len()
        || ck.max_duration != params.max_duration()
        || ck.num_labels != params.num_labels()
        || ck.n_ckpt != super::num_checkpoints(ck.t_max, ck.interval)
        || fwd.log_z.len() != batch
    {
        return Err(Error::Contract(
            "checkpoint set is missing or was produced for different inputs".into(),
        ));
    }
    if upstream.len() != batch {
        return Err(Error::Shape(format!(
            "{} upstream values for batch {batch}",
            upstream.len()
        )));
    }

    let parts: Vec<(SequenceBackward<'_>, usize)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let view = SequenceView::new(s, params, b);
            let plan = BackwardPlan {
                t_max: ck.t_max,
                width: ck.interval,
                n_blocks: ck.n_ckpt,
                log_z: fwd.log_z[b],
                upstream: upstream[b],
            };
            let mut rec = Recompute::new(view, ck, b, tracker);
            let out = backward_sequence(&view, &plan, &mut rec, tracker);
            let hz = rec.hazards();
            (out, hz)
        })
        .collect();

    Ok(assemble(parts, s, params, upstream))
}

/// Stacks per-sequence results and reduces the parameter workspaces in a
/// fixed order: block-major, then batch.
pub(crate) fn assemble(
    parts: Vec<(SequenceBackward<'_>, usize)>,
    s: &CumulativeScores,
    params: &SemiCrfParams,
    upstream: &[f64],
) -> BackwardOutput {
    let batch = s.batch_size();
    let t_max = s.max_len();
    let c = params.num_labels();
    let k = params.max_duration();
    let mut grads = GradientSet::zeros(batch, t_max, c, k, params.has_projections());
    let mut position = Array3::<f64>::zeros((batch, t_max, c));
    let mut boundary = Array2::<f64>::zeros((batch, t_max));
    let mut expected = Vec::with_capacity(batch);
    let mut clamp_events = 0;
    let mut hazards = 0;

    let n_blocks = parts.first().map_or(0, |(p, _)| p.ws_transition.len() / (c * c));
    for i in 0..n_blocks {
        for (b, (p, _)) in parts.iter().enumerate() {
            let w = upstream[b];
            let ws_t = &p.ws_transition[i * c * c..(i + 1) * c * c];
            for (g, &v) in grads.transition.iter_mut().zip(ws_t) {
                *g += w * v;
            }
            let ws_b = &p.ws_duration[i * k * c..(i + 1) * k * c];
            for (g, &v) in grads.duration_bias.iter_mut().zip(ws_b) {
                *g += w * v;
            }
        }
    }

    for (b, (p, hz)) in parts.into_iter().enumerate() {
        for (dst, &v) in grads
            .cum_scores
            .index_axis_mut(ndarray::Axis(0), b)
            .iter_mut()
            .zip(&p.grad_s)
        {
            *dst = v;
        }
        if let (Some(g), Some(v)) = (grads.proj_start.as_mut(), p.grad_ps.as_ref()) {
            for (dst, &x) in g.index_axis_mut(ndarray::Axis(0), b).iter_mut().zip(v) {
                *dst = x;
            }
        }
        if let (Some(g), Some(v)) = (grads.proj_end.as_mut(), p.grad_pe.as_ref()) {
            for (dst, &x) in g.index_axis_mut(ndarray::Axis(0), b).iter_mut().zip(v) {
                *dst = x;
            }
        }
        for (dst, &x) in position.index_axis_mut(ndarray::Axis(0), b).iter_mut().zip(&p.position) {
            *dst = x;
        }
        for (dst, &x) in boundary.index_axis_mut(ndarray::Axis(0), b).iter_mut().zip(&p.boundary) {
            *dst = x;
        }
        expected.push(p.expected_segments);
        clamp_events += p.clamp_events;
        hazards += p.hazards + hz;
    }

    BackwardOutput {
        grads,
        marginals: MarginalSet {
            position,
            boundary,
            expected_segments: expected,
            lengths: s.lengths.clone(),
        },
        clamp_events,
        hazards,
    }
}
