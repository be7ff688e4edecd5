//! Semi-Markov CRF inference with prefix-sum edge potentials and a streaming,
//! checkpointed forward-backward whose working memory does not grow with
//! sequence length.
//!
//! The crate provides exact log-partition, segment marginals, parameter
//! gradients and Viterbi decoding; a dense reference backend and exhaustive
//! enumeration for validation; posterior diagnostics; a banded-structure
//! analyzer; and seeded synthetic data.

pub mod banded;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod instances;
pub mod io;
pub mod logspace;
pub mod memory;
pub mod potentials;
pub mod reference;
pub mod streaming;
pub mod validation;

pub use diagnostics::{
    boundary_entropy, nll, nll_with_gradient, position_marginals, self_consistency_report, BoundaryEntropy,
    ConsistencyReport, InvariantCheck, MarginalSet, Tolerances,
};
pub use error::{Error, Result};
pub use inference::{decode, forward_backward, log_partition, Backend, Engine, Inference, InferenceOptions};
pub use memory::{BufferKind, MemoryReport, MemoryTracker};
pub use potentials::{
    apply_scalar_boundaries, build_cumulative, center_emissions, cumulative_from_emissions, edge_potential,
    fold_scalar_boundaries, score_segmentation, segmentation_statistics, BoundaryProjections, CenteredEmissions,
    CenteringMode, CumulativeScores, EmissionBatch, Segment, Segmentation, SemiCrfParams,
};
pub use reference::{DenseGuard, DenseMessages, JointMarginals};
pub use streaming::{
    choose_checkpoint_interval, dispatch, streaming_backward, streaming_forward, streaming_viterbi, BackendKind,
    CheckpointSet, GradientSet,
};
