//! Explicit recurrences for `K = 1` (linear-chain CRF) and `K = 2`.
//!
//! Both keep the full forward history, `(L + 1) * C` per sequence, and reuse
//! the streaming backward kernel over a single block.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::logspace::{is_neg_inf, logsumexp, NEG_INF};
use crate::memory::{BufferKind, MemoryTracker, TrackedBuf};
use crate::potentials::{CumulativeScores, Segmentation, SemiCrfParams, SequenceView};

use super::backward::{assemble, BackwardOutput};
use super::check_streaming_inputs;
use super::kernel::{argmax_lowest, backward_sequence, traceback, AlphaBlocks, BackwardPlan};

fn check_fast(s: &CumulativeScores, params: &SemiCrfParams, k: usize) -> Result<()> {
    check_streaming_inputs(s, params)?;
    if params.max_duration() != k {
        return Err(Error::Contract(format!(
            "K={k} fast path called with K={}",
            params.max_duration()
        )));
    }
    if params.has_projections() {
        return Err(Error::Contract(
            "fast paths do not support boundary projections; dispatch to the streaming backend".into(),
        ));
    }
    Ok(())
}

/// `LSE_{c'} prev[c'] + T[c', c]` for every `c`.
fn transit(view: &SequenceView<'_>, prev: &[f64], out: &mut [f64]) {
    let c = view.num_labels;
    for (dst, o) in out.iter_mut().enumerate().take(c) {
        let mut m = NEG_INF;
        for (src, &p) in prev.iter().enumerate() {
            m = m.max(p + view.trans(src, dst));
        }
        if is_neg_inf(m) {
            *o = NEG_INF;
            continue;
        }
        let mut acc = 0.0;
        for (src, &p) in prev.iter().enumerate() {
            acc += (p + view.trans(src, dst) - m).exp();
        }
        *o = m + acc.ln();
    }
}

/// Linear-chain recurrence `alpha_t(c) = e_t(c) + LSE_{c'} alpha_{t-1}(c') + T[c', c]`.
fn k1_history(view: &SequenceView<'_>, alpha: &mut [f64]) {
    let c = view.num_labels;
    alpha[..c].fill(0.0);
    let mut tr = vec![0.0; c];
    for t in 1..=view.len {
        let (done, rest) = alpha.split_at_mut(t * c);
        transit(view, &done[(t - 1) * c..], &mut tr);
        for label in 0..c {
            let emit = view.cum_at(t, label) - view.cum_at(t - 1, label) + view.duration_bias[label];
            rest[label] = emit + tr[label];
        }
    }
}

/// Two-step recurrence over `alpha_{t-1}` and `alpha_{t-2}`; the duration-2
/// branch is invalid at `t = 1`.
fn k2_history(view: &SequenceView<'_>, alpha: &mut [f64]) {
    let c = view.num_labels;
    alpha[..c].fill(0.0);
    let mut one = vec![0.0; c];
    let mut two = vec![NEG_INF; c];
    for t in 1..=view.len {
        let (done, rest) = alpha.split_at_mut(t * c);
        transit(view, &done[(t - 1) * c..t * c], &mut one);
        if t >= 2 {
            transit(view, &done[(t - 2) * c..(t - 1) * c], &mut two);
        }
        for label in 0..c {
            let e1 = view.cum_at(t, label) - view.cum_at(t - 1, label) + view.duration_bias[label];
            let a1 = e1 + one[label];
            rest[label] = if t >= 2 {
                let e2 = view.cum_at(t, label) - view.cum_at(t - 2, label) + view.duration_bias[c + label];
                crate::logspace::lse2(a1, e2 + two[label])
            } else {
                a1
            };
        }
    }
}

fn history(view: &SequenceView<'_>, k: usize, alpha: &mut [f64]) {
    if k == 1 {
        k1_history(view, alpha)
    } else {
        k2_history(view, alpha)
    }
}

fn fast_forward(s: &CumulativeScores, params: &SemiCrfParams, k: usize) -> Result<Vec<f64>> {
    check_fast(s, params, k)?;
    let c = params.num_labels();
    (0..s.batch_size())
        .into_par_iter()
        .map(|b| {
            let view = SequenceView::new(s, params, b);
            let mut alpha = vec![NEG_INF; (view.len + 1) * c];
            history(&view, k, &mut alpha);
            finish(&alpha, b, view.len, c)
        })
        .collect()
}

fn finish(alpha: &[f64], b: usize, len: usize, c: usize) -> Result<f64> {
    let lz = logsumexp(&alpha[len * c..(len + 1) * c]);
    if is_neg_inf(lz) || !lz.is_finite() {
        let position = (1..=len)
            .find(|&t| alpha[t * c..(t + 1) * c].iter().all(|&v| is_neg_inf(v)))
            .unwrap_or(len);
        return Err(Error::NonFiniteLogZ { b, position });
    }
    Ok(lz)
}

pub fn k1_forward(s: &CumulativeScores, params: &SemiCrfParams) -> Result<Vec<f64>> {
    fast_forward(s, params, 1)
}

pub fn k2_forward(s: &CumulativeScores, params: &SemiCrfParams) -> Result<Vec<f64>> {
    fast_forward(s, params, 2)
}

fn fast_viterbi(s: &CumulativeScores, params: &SemiCrfParams, k_max: usize) -> Result<Vec<(Segmentation, f64)>> {
    check_fast(s, params, k_max)?;
    let c = params.num_labels();
    Ok((0..s.batch_size())
        .into_par_iter()
        .map(|b| {
            let view = SequenceView::new(s, params, b);
            let len = view.len;
            let mut delta = vec![NEG_INF; (len + 1) * c];
            let mut back = vec![(0u32, 0u32); (len + 1) * c];
            delta[..c].fill(0.0);
            for t in 1..=len {
                for label in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = (0, 0);
                    for k in (1..=k_max.min(t)).rev() {
                        let h = view.segment_score(t, k, label);
                        for src in 0..c {
                            let v = delta[(t - k) * c + src] + (h + view.trans(src, label));
                            if v > best {
                                best = v;
                                arg = (k as u32, src as u32);
                            }
                        }
                    }
                    delta[t * c + label] = best;
                    back[t * c + label] = arg;
                }
            }
            let last = &delta[len * c..];
            let label = argmax_lowest(last);
            (Segmentation::new(traceback(&back, c, len, label)), last[label])
        })
        .collect())
}

pub fn k1_viterbi(s: &CumulativeScores, params: &SemiCrfParams) -> Result<Vec<(Segmentation, f64)>> {
    fast_viterbi(s, params, 1)
}

pub fn k2_viterbi(s: &CumulativeScores, params: &SemiCrfParams) -> Result<Vec<(Segmentation, f64)>> {
    fast_viterbi(s, params, 2)
}

struct History<'a> {
    alpha: TrackedBuf<'a>,
    c: usize,
}

impl AlphaBlocks for History<'_> {
    fn load(&mut self, _block: usize, t_lo: usize, t_hi: usize) -> (&[f64], f64) {
        (&self.alpha[t_lo * self.c..t_hi * self.c], 0.0)
    }
}

/// Log-partition, gradients and marginals through the `K = 1` or `K = 2`
/// recurrence.
pub fn fast_forward_backward(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    upstream: &[f64],
    tracker: Option<&MemoryTracker>,
) -> Result<(Vec<f64>, BackwardOutput)> {
    let k = params.max_duration();
    if k > 2 {
        return Err(Error::Contract(format!("no fast path for K={k}")));
    }
    check_fast(s, params, k)?;
    let batch = s.batch_size();
    if upstream.len() != batch {
        return Err(Error::Shape(format!(
            "{} upstream values for batch {batch}",
            upstream.len()
        )));
    }
    let c = params.num_labels();
    let t_max = s.max_len();
    let results: Vec<Result<_>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let view = SequenceView::new(s, params, b);
            let mut alpha = TrackedBuf::filled((view.len + 1) * c, NEG_INF, BufferKind::Messages, tracker);
            history(&view, k, &mut alpha);
            let log_z = finish(&alpha, b, view.len, c)?;
            let plan = BackwardPlan {
                t_max,
                width: t_max,
                n_blocks: 1,
                log_z,
                upstream: upstream[b],
            };
            let mut src = History { alpha, c };
            let out = backward_sequence(&view, &plan, &mut src, tracker);
            Ok((log_z, out))
        })
        .collect();
    let mut log_z = Vec::with_capacity(batch);
    let mut parts = Vec::with_capacity(batch);
    for r in results {
        let (lz, part) = r?;
        log_z.push(lz);
        parts.push((part, 0));
    }
    Ok((log_z, assemble(parts, s, params, upstream)))
}
