use rayon::prelude::*;

use crate::error::Result;
use crate::memory::BufferKind;
use crate::potentials::{CumulativeScores, Segmentation, SemiCrfParams, SequenceView};

use super::check_streaming_inputs;
use super::kernel::{argmax_lowest, traceback, viterbi_step, Scratch};
use super::ring::RingBuffer;

/// MAP segmentation per sequence with a `K`-slot ring of max-messages and a
/// `(T + 1, C)` table of `(duration, source)` backpointers.
pub fn streaming_viterbi(s: &CumulativeScores, params: &SemiCrfParams) -> Result<Vec<(Segmentation, f64)>> {
    check_streaming_inputs(s, params)?;
    Ok((0..s.batch_size())
        .into_par_iter()
        .map(|b| viterbi_sequence(&SequenceView::new(s, params, b)))
        .collect())
}

fn viterbi_sequence(view: &SequenceView<'_>) -> (Segmentation, f64) {
    let c = view.num_labels;
    let k = view.max_duration;
    let len = view.len;
    let mut ring = RingBuffer::new(k, c, BufferKind::ForwardRing, None);
    let mut scratch = Scratch::new(k, c);
    let mut back = vec![(0u32, 0u32); (len + 1) * c];
    ring.fill(0, 0.0);
    for t in 1..=len {
        viterbi_step(view, &ring, t, &mut scratch, &mut back[t * c..(t + 1) * c]);
        ring.write(t, &scratch.out);
    }
    let last = ring.read(len);
    let label = argmax_lowest(last);
    let score = last[label];
    (Segmentation::new(traceback(&back, c, len, label)), score)
}
