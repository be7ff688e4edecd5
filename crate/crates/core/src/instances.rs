//! Seeded random model instances for validation, tests and benchmarks.
//!
//! Emissions are drawn from `U[-2, 2]`, transitions from `U[-1, 1]` and
//! duration biases from `U[-0.5, 0.5]`. A `(seed, dims)` pair reproduces an
//! instance bit for bit.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::potentials::{
    cumulative_from_emissions, BoundaryProjections, CenteringMode, CumulativeScores, EmissionBatch, Segment,
    Segmentation, SemiCrfParams,
};

/// Size bounds for [`random_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDims {
    pub t_max: usize,
    pub k: usize,
    pub c: usize,
    pub batch: usize,
    /// Use the bounds as exact sizes instead of sampling below them.
    pub exact: bool,
    /// Draw shorter lengths for sequences after the first.
    pub ragged: bool,
    pub projections: bool,
}

impl InstanceDims {
    /// Sizes drawn uniformly from `1..=bound`, batch of 1 or 2, ragged lengths.
    pub fn up_to(t_max: usize, k: usize, c: usize) -> Self {
        Self {
            t_max,
            k,
            c,
            batch: 2,
            exact: false,
            ragged: true,
            projections: false,
        }
    }

    pub fn exact(t_max: usize, k: usize, c: usize, batch: usize) -> Self {
        Self {
            t_max,
            k,
            c,
            batch,
            exact: true,
            ragged: false,
            projections: false,
        }
    }

    pub fn with_projections(mut self) -> Self {
        self.projections = true;
        self
    }

    pub fn with_ragged(mut self, ragged: bool) -> Self {
        self.ragged = ragged;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub emissions: EmissionBatch,
    pub scores: CumulativeScores,
    pub params: SemiCrfParams,
}

impl Instance {
    /// Uniformly random labeled segmentations, one per sequence.
    pub fn random_golds(&self, seed: u64) -> Vec<Segmentation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let k = self.params.max_duration();
        let c = self.params.num_labels();
        self.scores
            .lengths
            .iter()
            .map(|&len| {
                let mut segments = Vec::new();
                let mut start = 0;
                while start < len {
                    let duration = rng.random_range(1..=k.min(len - start));
                    segments.push(Segment {
                        start,
                        duration,
                        label: rng.random_range(0..c),
                    });
                    start += duration;
                }
                Segmentation::new(segments)
            })
            .collect()
    }

    pub fn max_len(&self) -> usize {
        self.scores.max_len()
    }
}

pub fn random_instance(seed: u64, dims: InstanceDims) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, bound: usize| if dims.exact { bound } else { rng.random_range(1..=bound) };
    let t_max = pick(&mut rng, dims.t_max);
    let k = pick(&mut rng, dims.k);
    let c = pick(&mut rng, dims.c);
    let batch = pick(&mut rng, dims.batch);
    let lengths: Vec<usize> = (0..batch)
        .map(|b| {
            if b == 0 || !dims.ragged {
                t_max
            } else {
                rng.random_range(1..=t_max)
            }
        })
        .collect();
    let scores = Array3::from_shape_fn((batch, t_max, c), |_| rng.random_range(-2.0..=2.0));
    let transition = Array2::from_shape_fn((c, c), |_| rng.random_range(-1.0..=1.0));
    let duration_bias = Array2::from_shape_fn((k, c), |_| rng.random_range(-0.5..=0.5));
    let mut params = SemiCrfParams::new(transition, duration_bias).expect("finite by construction");
    if dims.projections {
        let start = Array3::from_shape_fn((batch, t_max, c), |_| rng.random_range(-0.5..=0.5));
        let end = Array3::from_shape_fn((batch, t_max, c), |_| rng.random_range(-0.5..=0.5));
        params = params.with_projections(BoundaryProjections { start, end });
    }
    let emissions = EmissionBatch::new(scores, lengths).expect("valid by construction");
    let scores = cumulative_from_emissions(&emissions, CenteringMode::None).expect("valid by construction");
    Instance {
        seed,
        emissions,
        scores,
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible() {
        let a = random_instance(7, InstanceDims::up_to(10, 4, 3));
        let b = random_instance(7, InstanceDims::up_to(10, 4, 3));
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.params, b.params);
        let c = random_instance(8, InstanceDims::up_to(10, 4, 3));
        assert_ne!(a.scores, c.scores);
    }

    #[test]
    fn golds_are_valid() {
        for seed in 0..20 {
            let inst = random_instance(seed, InstanceDims::up_to(15, 5, 4));
            for (b, g) in inst.random_golds(seed).iter().enumerate() {
                g.validate(
                    inst.scores.lengths[b],
                    inst.params.max_duration(),
                    inst.params.num_labels(),
                )
                .unwrap();
            }
        }
    }
}
