//! Shared fixtures for the criterion benchmarks.

use streamcrf::instances::{random_instance, Instance, InstanceDims};
use streamcrf::reference::DenseGuard;
use streamcrf::{Backend, InferenceOptions};

/// Seeded full-length instance of `batch` sequences.
pub fn fixture(t: usize, k: usize, c: usize, batch: usize) -> Instance {
    random_instance(0x5eed, InstanceDims::exact(t, k, c, batch))
}

/// Options for `backend` with the dense guard lifted, so sweeps measure time
/// rather than refusal.
pub fn unguarded(backend: Backend) -> InferenceOptions {
    InferenceOptions {
        guard: DenseGuard::unlimited(),
        ..InferenceOptions::with_backend(backend)
    }
}
