//! Backend selection and the user-facing entry points.
//!
//! Every entry point applies scalar boundaries first (see
//! [`apply_scalar_boundaries`]), so backends never see them.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{position_marginals, MarginalSet};
use crate::error::{Error, Result};
use crate::memory::MemoryTracker;
use crate::potentials::{apply_scalar_boundaries, CumulativeScores, Segmentation, SemiCrfParams};
use crate::reference::{dense_backward_marginals, dense_forward_tracked, dense_viterbi, DenseGuard};
use crate::streaming::fastpath::fast_forward_backward;
use crate::streaming::{
    dispatch, k1_forward, k1_viterbi, k2_forward, k2_viterbi, streaming_backward, streaming_forward, streaming_viterbi,
    BackendKind, GradientSet,
};

/// Backend requested by a caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Dense,
    Streaming,
    /// Fast path for `K <= 2` without projections, streaming otherwise.
    #[default]
    Auto,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Streaming => "streaming",
            Self::Auto => "auto",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(Self::Dense),
            "streaming" => Ok(Self::Streaming),
            "auto" => Ok(Self::Auto),
            other => Err(Error::Parse(format!("unknown backend {other:?}"))),
        }
    }
}

/// Recurrence that actually ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Dense,
    LinearK1,
    NearLinearK2,
    Streaming,
}

impl From<BackendKind> for Engine {
    fn from(k: BackendKind) -> Self {
        match k {
            BackendKind::LinearK1 => Self::LinearK1,
            BackendKind::NearLinearK2 => Self::NearLinearK2,
            BackendKind::Streaming => Self::Streaming,
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::LinearK1 => "linear_k1",
            Self::NearLinearK2 => "near_linear_k2",
            Self::Streaming => "streaming",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferenceOptions {
    pub backend: Backend,
    /// Checkpoint interval override for the streaming backend.
    pub delta: Option<usize>,
    pub guard: DenseGuard,
}

impl InferenceOptions {
    pub fn with_backend(backend: Backend) -> Self {
        Self {
            backend,
            ..Self::default()
        }
    }

    pub fn resolve(&self, params: &SemiCrfParams) -> Engine {
        match self.backend {
            Backend::Dense => Engine::Dense,
            Backend::Streaming => Engine::Streaming,
            Backend::Auto => dispatch(params).into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub log_z: Vec<f64>,
    pub grads: GradientSet,
    pub marginals: MarginalSet,
    pub engine: Engine,
    pub clamp_events: usize,
    pub hazards: usize,
}

/// Log-partition per sequence, forward pass only.
pub fn log_partition(s: &CumulativeScores, params: &SemiCrfParams, opts: &InferenceOptions) -> Result<Vec<f64>> {
    let (s, params) = apply_scalar_boundaries(s, params)?;
    log_partition_engine(&s, &params, opts.resolve(&params), opts)
}

/// Forward pass on an explicit engine; inputs must already be folded.
pub fn log_partition_engine(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    engine: Engine,
    opts: &InferenceOptions,
) -> Result<Vec<f64>> {
    match engine {
        Engine::Dense => Ok(dense_forward_tracked(s, params, opts.guard, None)?.log_z),
        Engine::LinearK1 => k1_forward(s, params),
        Engine::NearLinearK2 => k2_forward(s, params),
        Engine::Streaming => Ok(streaming_forward(s, params, opts.delta, None)?.log_z),
    }
}

/// Log-partition, gradients of `sum_b upstream[b] * logZ_b` (unit weights
/// when `upstream` is `None`) and posterior marginals.
pub fn forward_backward(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    upstream: Option<&[f64]>,
    opts: &InferenceOptions,
    tracker: Option<&MemoryTracker>,
) -> Result<Inference> {
    let (folded_s, folded) = apply_scalar_boundaries(s, params)?;
    let ones = vec![1.0; s.batch_size()];
    let upstream = upstream.unwrap_or(&ones);
    let engine = opts.resolve(&folded);
    let mut out = forward_backward_engine(&folded_s, &folded, upstream, engine, opts, tracker)?;
    add_scalar_boundary_grads(&mut out.grads, s, params);
    Ok(out)
}

/// [`forward_backward`] on an explicit engine; inputs must already be folded.
pub fn forward_backward_engine(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    upstream: &[f64],
    engine: Engine,
    opts: &InferenceOptions,
    tracker: Option<&MemoryTracker>,
) -> Result<Inference> {
    match engine {
        Engine::Dense => {
            let msgs = dense_forward_tracked(s, params, opts.guard, tracker)?;
            let back = dense_backward_marginals(s, params, &msgs, upstream, opts.guard)?;
            let marginals = position_marginals(&back.marginals, &s.lengths, s.max_len());
            Ok(Inference {
                log_z: msgs.log_z,
                grads: back.grads,
                marginals,
                engine,
                clamp_events: 0,
                hazards: 0,
            })
        }
        Engine::LinearK1 | Engine::NearLinearK2 => {
            let (log_z, back) = fast_forward_backward(s, params, upstream, tracker)?;
            Ok(Inference {
                log_z,
                grads: back.grads,
                marginals: back.marginals,
                engine,
                clamp_events: back.clamp_events,
                hazards: back.hazards,
            })
        }
        Engine::Streaming => {
            let fwd = streaming_forward(s, params, opts.delta, tracker)?;
            let back = streaming_backward(s, params, &fwd, upstream, tracker)?;
            Ok(Inference {
                log_z: fwd.log_z.clone(),
                grads: back.grads,
                marginals: back.marginals,
                engine,
                clamp_events: back.clamp_events,
                hazards: back.hazards + fwd.hazards,
            })
        }
    }
}

/// MAP segmentation and score per sequence.
pub fn decode(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    opts: &InferenceOptions,
) -> Result<Vec<(Segmentation, f64)>> {
    let (s, params) = apply_scalar_boundaries(s, params)?;
    decode_engine(&s, &params, opts.resolve(&params), opts)
}

pub fn decode_engine(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    engine: Engine,
    opts: &InferenceOptions,
) -> Result<Vec<(Segmentation, f64)>> {
    match engine {
        Engine::Dense => (0..s.batch_size())
            .map(|b| dense_viterbi(s, params, b, opts.guard))
            .collect(),
        Engine::LinearK1 => k1_viterbi(s, params),
        Engine::NearLinearK2 => k2_viterbi(s, params),
        Engine::Streaming => streaming_viterbi(s, params),
    }
}

/// Chain rule through the boundary folding: without projections `pi_start`
/// enters as `-S[b, 0]` and `pi_end` as `+S[b, L_b]`; with projections as
/// `P_start[b, 0]` and `P_end[b, L_b - 1]`.
fn add_scalar_boundary_grads(grads: &mut GradientSet, s: &CumulativeScores, params: &SemiCrfParams) {
    if !params.has_scalar_boundaries() {
        return;
    }
    let c = params.num_labels();
    let mut g_start = Array1::<f64>::zeros(c);
    let mut g_end = Array1::<f64>::zeros(c);
    for (b, &len) in s.lengths.iter().enumerate() {
        for label in 0..c {
            match (&grads.proj_start, &grads.proj_end) {
                (Some(ps), Some(pe)) => {
                    g_start[label] += ps[[b, 0, label]];
                    g_end[label] += pe[[b, len - 1, label]];
                }
                _ => {
                    g_start[label] -= grads.cum_scores[[b, 0, label]];
                    g_end[label] += grads.cum_scores[[b, len, label]];
                }
            }
        }
    }
    grads.pi_start = params.pi_start.as_ref().map(|_| g_start);
    grads.pi_end = params.pi_end.as_ref().map(|_| g_end);
}
