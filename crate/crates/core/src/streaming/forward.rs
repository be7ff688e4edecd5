use ndarray::{Array2, Array4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::logspace::{is_neg_inf, logsumexp};
use crate::memory::{BufferKind, MemoryTracker, TrackedBuf};
use crate::potentials::{CumulativeScores, SemiCrfParams, SequenceView};

use super::kernel::{alpha_step, AlphaBlocks, Scratch};
use super::ring::RingBuffer;
use super::{check_streaming_inputs, choose_checkpoint_interval, num_checkpoints};

/// Ring snapshots and cumulative normalizers saved by the forward scan.
///
/// Snapshot `i` is the ring right after position `i * interval` was written
/// and renormalized; `normalizer(b, i)` is the total shift removed so far.
#[derive(Debug)]
pub struct CheckpointSet<'a> {
    ring: TrackedBuf<'a>,
    norm: TrackedBuf<'a>,
    pub interval: usize,
    pub n_ckpt: usize,
    pub batch: usize,
    pub t_max: usize,
    pub max_duration: usize,
    pub num_labels: usize,
}

impl CheckpointSet<'_> {
    fn stride(&self) -> usize {
        self.max_duration * self.num_labels
    }

    /// Raw ring snapshot `(K * C)`, slot-major.
    pub fn omega(&self, b: usize, i: usize) -> &[f64] {
        let base = (b * self.n_ckpt + i) * self.stride();
        &self.ring[base..base + self.stride()]
    }

    pub fn normalizer(&self, b: usize, i: usize) -> f64 {
        self.norm[b * self.n_ckpt + i]
    }

    /// `(B, N_ckpt, K, C)`.
    pub fn omega_array(&self) -> Array4<f64> {
        Array4::from_shape_vec(
            (self.batch, self.n_ckpt, self.max_duration, self.num_labels),
            self.ring.to_vec(),
        )
        .expect("shape matches storage")
    }

    /// `(B, N_ckpt)`.
    pub fn normalizers(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.batch, self.n_ckpt), self.norm.to_vec()).expect("shape matches storage")
    }

    pub fn bytes(&self) -> usize {
        self.ring.bytes() + self.norm.bytes()
    }
}

#[derive(Debug)]
pub struct ForwardOutput<'a> {
    pub log_z: Vec<f64>,
    pub checkpoints: CheckpointSet<'a>,
    /// Ring reads that found an overwritten slot; zero on a correct scan.
    pub hazards: usize,
}

/// Forward scan with a `K`-slot ring and checkpoint normalization every
/// `delta` positions (default `choose_checkpoint_interval(T, K)`).
pub fn streaming_forward<'a>(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    delta: Option<usize>,
    tracker: Option<&'a MemoryTracker>,
) -> Result<ForwardOutput<'a>> {
    check_streaming_inputs(s, params)?;
    let batch = s.batch_size();
    let t_max = s.max_len();
    let k = params.max_duration();
    let c = params.num_labels();
    let interval = match delta {
        Some(0) => return Err(Error::Contract("checkpoint interval must be >= 1".into())),
        Some(d) => d.min(t_max),
        None => choose_checkpoint_interval(t_max, k),
    };
    let n_ckpt = num_checkpoints(t_max, interval);
    let mut ring = TrackedBuf::filled(batch * n_ckpt * k * c, 0.0, BufferKind::Checkpoint, tracker);
    let mut norm = TrackedBuf::zeros(batch * n_ckpt, BufferKind::Checkpoint, tracker);

    let per_seq: Vec<Result<(f64, usize)>> = ring
        .par_chunks_mut(n_ckpt * k * c)
        .zip(norm.par_chunks_mut(n_ckpt))
        .enumerate()
        .map(|(b, (omega, nrm))| {
            let view = SequenceView::new(s, params, b);
            forward_sequence(&view, b, t_max, interval, omega, nrm, tracker)
        })
        .collect();

    let mut log_z = Vec::with_capacity(batch);
    let mut hazards = 0;
    for r in per_seq {
        let (lz, hz) = r?;
        log_z.push(lz);
        hazards += hz;
    }
    Ok(ForwardOutput {
        log_z,
        checkpoints: CheckpointSet {
            ring,
            norm,
            interval,
            n_ckpt,
            batch,
            t_max,
            max_duration: k,
            num_labels: c,
        },
        hazards,
    })
}

fn forward_sequence(
    view: &SequenceView<'_>,
    b: usize,
    t_max: usize,
    interval: usize,
    omega: &mut [f64],
    norm: &mut [f64],
    tracker: Option<&MemoryTracker>,
) -> Result<(f64, usize)> {
    let c = view.num_labels;
    let k = view.max_duration;
    let len = view.len;
    let n_ckpt = norm.len();
    let mut ring = RingBuffer::new(k, c, BufferKind::ForwardRing, tracker);
    let mut scratch = Scratch::new(k, c);
    ring.fill(0, 0.0);
    ring.snapshot(&mut omega[..k * c]);
    norm[0] = 0.0;

    let mut accumulated = 0.0;
    let mut first_dead = None;
    for t in 1..=t_max {
        if t <= len {
            alpha_step(view, &ring, t, &mut scratch);
            ring.write(t, &scratch.out);
            if first_dead.is_none() && scratch.out.iter().all(|&v| is_neg_inf(v)) {
                first_dead = Some(t);
            }
        }
        if t % interval == 0 {
            let shift = if t <= len {
                let m = ring.max_at(t);
                if is_neg_inf(m) {
                    0.0
                } else {
                    m
                }
            } else {
                0.0
            };
            ring.shift_all(shift);
            accumulated += shift;
            let i = t / interval;
            if i < n_ckpt {
                ring.snapshot(&mut omega[i * k * c..(i + 1) * k * c]);
                norm[i] = accumulated;
            }
        }
    }
    let tail = logsumexp(ring.read(len));
    if is_neg_inf(tail) || !tail.is_finite() {
        return Err(Error::NonFiniteLogZ {
            b,
            position: first_dead.unwrap_or(len),
        });
    }
    Ok((tail + accumulated, ring.hazards()))
}

/// Replays the forward recurrence from a checkpoint snapshot.
pub(crate) struct Recompute<'v, 'c, 'a> {
    view: SequenceView<'v>,
    ckpts: &'c CheckpointSet<'c>,
    b: usize,
    ring: RingBuffer<'a>,
    block: TrackedBuf<'a>,
    scratch: Scratch,
}

impl<'v, 'c, 'a> Recompute<'v, 'c, 'a> {
    pub fn new(
        view: SequenceView<'v>,
        ckpts: &'c CheckpointSet<'c>,
        b: usize,
        tracker: Option<&'a MemoryTracker>,
    ) -> Self {
        let (k, c) = (view.max_duration, view.num_labels);
        Self {
            view,
            ckpts,
            b,
            ring: RingBuffer::new(k, c, BufferKind::Recompute, tracker),
            block: TrackedBuf::zeros(ckpts.interval * c, BufferKind::Recompute, tracker),
            scratch: Scratch::new(k, c),
        }
    }

    pub fn hazards(&self) -> usize {
        self.ring.hazards()
    }
}

impl AlphaBlocks for Recompute<'_, '_, '_> {
    fn load(&mut self, block: usize, t_lo: usize, t_hi: usize) -> (&[f64], f64) {
        let c = self.view.num_labels;
        self.ring.restore(self.ckpts.omega(self.b, block), t_lo);
        self.block[..c].copy_from_slice(self.ring.read(t_lo));
        for t in t_lo + 1..t_hi {
            alpha_step(&self.view, &self.ring, t, &mut self.scratch);
            self.ring.write(t, &self.scratch.out);
            let row = t - t_lo;
            self.block[row * c..(row + 1) * c].copy_from_slice(&self.scratch.out);
        }
        (&self.block[..(t_hi - t_lo) * c], self.ckpts.normalizer(self.b, block))
    }
}

/// Normalized forward messages `alpha_t - N_i` for `t` in `(t_start, t_end]`,
/// recomputed from the snapshot at `t_start`, as a `(t_end - t_start, C)` block.
pub fn recompute_alpha(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    ckpts: &CheckpointSet<'_>,
    b: usize,
    t_start: usize,
    t_end: usize,
) -> Result<Array2<f64>> {
    check_streaming_inputs(s, params)?;
    if b >= ckpts.batch || ckpts.t_max != s.max_len() || ckpts.num_labels != params.num_labels() {
        return Err(Error::Contract("checkpoint set does not match the inputs".into()));
    }
    let len = s.lengths[b];
    if t_start % ckpts.interval != 0 || t_end < t_start || t_end - t_start > ckpts.interval || t_end > len {
        return Err(Error::Contract(format!(
            "recompute range ({t_start}, {t_end}] must start at a checkpoint, span at most {} and end by L={len}",
            ckpts.interval
        )));
    }
    let c = params.num_labels();
    let view = SequenceView::new(s, params, b);
    let mut rec = Recompute::new(view, ckpts, b, None);
    let block = t_start / ckpts.interval;
    let mut out = Array2::zeros((t_end - t_start, c));
    if t_end > t_start {
        // `load` covers [t_start, t_end); the last row needs one more step.
        let (rows, _) = rec.load(block, t_start, t_end);
        for (i, v) in rows[c..].iter().enumerate() {
            out[[i / c, i % c]] = *v;
        }
        alpha_step(&rec.view, &rec.ring, t_end, &mut rec.scratch);
        for label in 0..c {
            out[[t_end - t_start - 1, label]] = rec.scratch.out[label];
        }
    }
    Ok(out)
}
