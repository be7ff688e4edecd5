//! Streaming checkpointed forward-backward.
//!
//! The forward scan keeps only a `K`-slot ring of messages, renormalizes it
//! every `delta` positions and snapshots it as a checkpoint. The backward scan
//! walks checkpoint blocks in reverse, recomputes the forward messages of one
//! block from its snapshot, and keeps a `2K`-slot ring of backward messages.
//! Working memory is `O(KC)` per sequence plus `O(T / delta)` checkpoints.

mod backward;
pub mod fastpath;
mod forward;
pub(crate) mod kernel;
mod ring;
mod viterbi;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::potentials::SemiCrfParams;

pub use backward::{streaming_backward, BackwardOutput};
pub use fastpath::{k1_forward, k1_viterbi, k2_forward, k2_viterbi};
pub use forward::{recompute_alpha, streaming_forward, CheckpointSet, ForwardOutput};
pub use ring::RingBuffer;
pub use viterbi::streaming_viterbi;

/// Gradients of `sum_b upstream[b] * logZ_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// `(B, T + 1, C)`.
    pub cum_scores: Array3<f64>,
    /// `(C, C)`.
    pub transition: Array2<f64>,
    /// `(K, C)`.
    pub duration_bias: Array2<f64>,
    /// `(B, T, C)` when projections are present.
    pub proj_start: Option<Array3<f64>>,
    pub proj_end: Option<Array3<f64>>,
    /// `(C)` when scalar boundaries are present.
    pub pi_start: Option<Array1<f64>>,
    pub pi_end: Option<Array1<f64>>,
}

impl GradientSet {
    pub fn zeros(batch: usize, t_max: usize, c: usize, k: usize, projections: bool) -> Self {
        Self {
            cum_scores: Array3::zeros((batch, t_max + 1, c)),
            transition: Array2::zeros((c, c)),
            duration_bias: Array2::zeros((k, c)),
            proj_start: projections.then(|| Array3::zeros((batch, t_max, c))),
            proj_end: projections.then(|| Array3::zeros((batch, t_max, c))),
            pi_start: None,
            pi_end: None,
        }
    }

    /// Named flat views of every tensor present.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![
            ("cum_scores", self.cum_scores.as_slice().expect("standard layout")),
            ("transition", self.transition.as_slice().expect("standard layout")),
            ("duration_bias", self.duration_bias.as_slice().expect("standard layout")),
        ];
        if let Some(p) = &self.proj_start {
            out.push(("proj_start", p.as_slice().expect("standard layout")));
        }
        if let Some(p) = &self.proj_end {
            out.push(("proj_end", p.as_slice().expect("standard layout")));
        }
        if let Some(p) = &self.pi_start {
            out.push(("pi_start", p.as_slice().expect("standard layout")));
        }
        if let Some(p) = &self.pi_end {
            out.push(("pi_end", p.as_slice().expect("standard layout")));
        }
        out
    }

    /// Largest absolute elementwise difference over tensors present in both.
    pub fn max_abs_diff(&self, other: &GradientSet) -> f64 {
        let theirs = other.tensors();
        let mut worst = 0.0f64;
        for (name, mine) in self.tensors() {
            if let Some((_, t)) = theirs.iter().find(|(n, _)| *n == name) {
                if t.len() != mine.len() {
                    return f64::INFINITY;
                }
                for (a, b) in mine.iter().zip(t.iter()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }

    /// `self -= other`, tensor by tensor.
    pub fn subtract(&mut self, other: &GradientSet) {
        self.cum_scores -= &other.cum_scores;
        self.transition -= &other.transition;
        self.duration_bias -= &other.duration_bias;
        for (a, b) in [
            (&mut self.proj_start, &other.proj_start),
            (&mut self.proj_end, &other.proj_end),
        ] {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                *a -= b;
            }
        }
        for (a, b) in [(&mut self.pi_start, &other.pi_start), (&mut self.pi_end, &other.pi_end)] {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                *a -= b;
            }
        }
    }
}

/// Which recurrence evaluates a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    LinearK1,
    NearLinearK2,
    Streaming,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearK1 => "linear_k1",
            Self::NearLinearK2 => "near_linear_k2",
            Self::Streaming => "streaming",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_k1" | "k1" => Ok(Self::LinearK1),
            "near_linear_k2" | "k2" => Ok(Self::NearLinearK2),
            "streaming" => Ok(Self::Streaming),
            other => Err(Error::Parse(format!("unknown backend kind {other:?}"))),
        }
    }
}

/// Fast paths for `K <= 2` unless position-dependent projections are present.
/// Scalar boundaries are folded beforehand and never affect the choice.
pub fn dispatch(params: &SemiCrfParams) -> BackendKind {
    match (params.max_duration(), params.has_projections()) {
        (1, false) => BackendKind::LinearK1,
        (2, false) => BackendKind::NearLinearK2,
        _ => BackendKind::Streaming,
    }
}

/// `max(1, round(sqrt(T * K)))`, at most `T`.
pub fn choose_checkpoint_interval(t_max: usize, k: usize) -> usize {
    let delta = ((t_max as f64) * (k as f64)).sqrt().round() as usize;
    delta.max(1).min(t_max.max(1))
}

/// `ceil(T / delta)`.
pub fn num_checkpoints(t_max: usize, delta: usize) -> usize {
    t_max.div_ceil(delta)
}

fn check_streaming_inputs(s: &crate::potentials::CumulativeScores, params: &SemiCrfParams) -> Result<()> {
    params.validate_for(s)?;
    if params.has_scalar_boundaries() {
        return Err(Error::Contract(
            "scalar boundaries must be applied (apply_scalar_boundaries) before inference".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
