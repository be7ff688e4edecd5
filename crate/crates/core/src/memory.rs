//! Accounting of DP working buffers.
//!
//! Backends allocate their rings, checkpoints, recompute blocks, gradient
//! workspaces and (for the dense backend) edge tensors through
//! [`TrackedBuf`], which reports live and peak bytes per [`BufferKind`] to an
//! optional [`MemoryTracker`]. Process RSS is deliberately not used.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    ForwardRing,
    BackwardRing,
    Checkpoint,
    Recompute,
    Workspace,
    EdgeTensor,
    Messages,
}

impl BufferKind {
    pub const ALL: [BufferKind; 7] = [
        Self::ForwardRing,
        Self::BackwardRing,
        Self::Checkpoint,
        Self::Recompute,
        Self::Workspace,
        Self::EdgeTensor,
        Self::Messages,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

const KINDS: usize = BufferKind::ALL.len();

#[derive(Debug, Default)]
pub struct MemoryTracker {
    live: [AtomicUsize; KINDS],
    peak: [AtomicUsize; KINDS],
    total_live: AtomicUsize,
    total_peak: AtomicUsize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub forward_ring: usize,
    pub backward_ring: usize,
    pub checkpoint: usize,
    pub recompute: usize,
    pub workspace: usize,
    pub edge_tensor: usize,
    pub messages: usize,
    /// Peak of the sum over all kinds (not the sum of per-kind peaks).
    pub total: usize,
}

impl MemoryReport {
    pub fn get(&self, kind: BufferKind) -> usize {
        match kind {
            BufferKind::ForwardRing => self.forward_ring,
            BufferKind::BackwardRing => self.backward_ring,
            BufferKind::Checkpoint => self.checkpoint,
            BufferKind::Recompute => self.recompute,
            BufferKind::Workspace => self.workspace,
            BufferKind::EdgeTensor => self.edge_tensor,
            BufferKind::Messages => self.messages,
        }
    }
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&self, kind: BufferKind, bytes: usize) {
        let i = kind.index();
        let now = self.live[i].fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak[i].fetch_max(now, Ordering::SeqCst);
        let total = self.total_live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.total_peak.fetch_max(total, Ordering::SeqCst);
    }

    fn free(&self, kind: BufferKind, bytes: usize) {
        self.live[kind.index()].fetch_sub(bytes, Ordering::SeqCst);
        self.total_live.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn live(&self, kind: BufferKind) -> usize {
        self.live[kind.index()].load(Ordering::SeqCst)
    }

    pub fn peak(&self, kind: BufferKind) -> usize {
        self.peak[kind.index()].load(Ordering::SeqCst)
    }

    /// Peak bytes per kind.
    pub fn report(&self) -> MemoryReport {
        MemoryReport {
            forward_ring: self.peak(BufferKind::ForwardRing),
            backward_ring: self.peak(BufferKind::BackwardRing),
            checkpoint: self.peak(BufferKind::Checkpoint),
            recompute: self.peak(BufferKind::Recompute),
            workspace: self.peak(BufferKind::Workspace),
            edge_tensor: self.peak(BufferKind::EdgeTensor),
            messages: self.peak(BufferKind::Messages),
            total: self.total_peak.load(Ordering::SeqCst),
        }
    }
}

/// An `f64` buffer whose lifetime is reported to a tracker.
#[derive(Debug)]
pub struct TrackedBuf<'a> {
    data: Vec<f64>,
    kind: BufferKind,
    tracker: Option<&'a MemoryTracker>,
}

impl<'a> TrackedBuf<'a> {
    pub fn filled(len: usize, value: f64, kind: BufferKind, tracker: Option<&'a MemoryTracker>) -> Self {
        let data = vec![value; len];
        if let Some(t) = tracker {
            t.alloc(kind, bytes_of(&data));
        }
        Self { data, kind, tracker }
    }

    pub fn zeros(len: usize, kind: BufferKind, tracker: Option<&'a MemoryTracker>) -> Self {
        Self::filled(len, 0.0, kind, tracker)
    }

    pub fn bytes(&self) -> usize {
        bytes_of(&self.data)
    }

    /// Releases the accounting and hands back the storage.
    pub fn into_inner(mut self) -> Vec<f64> {
        if let Some(t) = self.tracker.take() {
            t.free(self.kind, bytes_of(&self.data));
        }
        std::mem::take(&mut self.data)
    }
}

fn bytes_of(v: &[f64]) -> usize {
    std::mem::size_of_val(v)
}

impl Deref for TrackedBuf<'_> {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for TrackedBuf<'_> {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Drop for TrackedBuf<'_> {
    fn drop(&mut self) {
        if let Some(t) = self.tracker {
            t.free(self.kind, bytes_of(&self.data));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_live_and_peak() {
        let tracker = MemoryTracker::new();
        {
            let _a = TrackedBuf::zeros(10, BufferKind::ForwardRing, Some(&tracker));
            let b = TrackedBuf::zeros(5, BufferKind::Checkpoint, Some(&tracker));
            assert_eq!(tracker.live(BufferKind::ForwardRing), 80);
            drop(b);
            let _c = TrackedBuf::zeros(2, BufferKind::Checkpoint, Some(&tracker));
        }
        assert_eq!(tracker.live(BufferKind::ForwardRing), 0);
        let r = tracker.report();
        assert_eq!(r.forward_ring, 80);
        assert_eq!(r.checkpoint, 40);
        assert_eq!(r.total, 120);
    }

    #[test]
    fn untracked_buffers_work() {
        let mut b = TrackedBuf::filled(3, 1.5, BufferKind::Messages, None);
        b[1] = 2.0;
        assert_eq!(&*b, &[1.5, 2.0, 1.5]);
        assert_eq!(b.into_inner(), vec![1.5, 2.0, 1.5]);
    }
}
