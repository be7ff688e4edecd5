use std::cell::Cell;

use crate::logspace::{is_neg_inf, NEG_INF};
use crate::memory::{BufferKind, MemoryTracker, TrackedBuf};

const EMPTY: usize = usize::MAX;

/// Fixed-slot circular store of per-label message vectors.
///
/// Position `p` lives in slot `p % slots`. Every slot remembers which
/// position it currently holds; a read that finds a different position
/// counts as a hazard (the value it wanted was overwritten or never written).
#[derive(Debug)]
pub struct RingBuffer<'a> {
    data: TrackedBuf<'a>,
    tags: Vec<usize>,
    slots: usize,
    width: usize,
    hazards: Cell<usize>,
}

impl<'a> RingBuffer<'a> {
    pub fn new(slots: usize, width: usize, kind: BufferKind, tracker: Option<&'a MemoryTracker>) -> Self {
        Self {
            data: TrackedBuf::filled(slots * width, NEG_INF, kind, tracker),
            tags: vec![EMPTY; slots],
            slots,
            width,
            hazards: Cell::new(0),
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn bytes(&self) -> usize {
        self.data.bytes()
    }

    /// Reads that targeted a position no longer (or not yet) held.
    pub fn hazards(&self) -> usize {
        self.hazards.get()
    }

    #[inline]
    pub fn read(&self, pos: usize) -> &[f64] {
        let slot = pos % self.slots;
        if self.tags[slot] != pos {
            self.hazards.set(self.hazards.get() + 1);
        }
        &self.data[slot * self.width..(slot + 1) * self.width]
    }

    #[inline]
    pub fn write(&mut self, pos: usize, values: &[f64]) {
        let slot = pos % self.slots;
        self.tags[slot] = pos;
        self.data[slot * self.width..(slot + 1) * self.width].copy_from_slice(values);
    }

    pub fn fill(&mut self, pos: usize, value: f64) {
        let slot = pos % self.slots;
        self.tags[slot] = pos;
        self.data[slot * self.width..(slot + 1) * self.width].fill(value);
    }

    /// Subtracts `shift` from every stored value; sentinels stay sentinels.
    pub fn shift_all(&mut self, shift: f64) {
        for v in self.data.iter_mut() {
            if !is_neg_inf(*v) {
                *v -= shift;
            }
        }
    }

    pub fn max_at(&self, pos: usize) -> f64 {
        self.read(pos).iter().copied().fold(NEG_INF, f64::max)
    }

    /// Copies the raw slot contents, slot-major.
    pub fn snapshot(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.data);
    }

    /// Restores a snapshot taken when `newest` was the last position written.
    pub fn restore(&mut self, snapshot: &[f64], newest: usize) {
        self.data.copy_from_slice(snapshot);
        self.tags.fill(EMPTY);
        let oldest = (newest + 1).saturating_sub(self.slots);
        for pos in oldest..=newest {
            self.tags[pos % self.slots] = pos;
        }
    }
}
