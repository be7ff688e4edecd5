//! Seeded synthetic data: label-imbalanced sequences for the centering
//! ablation and cumulative-score growth measurements.
//!
//! Random model instances for validation and benchmarks live in
//! [`crate::instances`].

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{decode, InferenceOptions};
use crate::potentials::{
    center_emissions, cumulative_from_emissions, CenteringMode, EmissionBatch, Segment, Segmentation, SemiCrfParams,
};

pub use crate::instances::{random_instance, Instance, InstanceDims};

/// Label-imbalanced single-sequence generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalancedConfig {
    pub length: usize,
    /// Target fraction of positions per label; sums to 1.
    pub proportions: Vec<f64>,
    /// Emission at the gold label before noise; other labels get 0.
    pub active_gain: f64,
    pub max_duration: usize,
    pub mean_duration: f64,
    /// Half-width of the additive uniform noise.
    pub noise: f64,
    pub seed: u64,
}

impl ImbalancedConfig {
    pub fn new(length: usize, proportions: Vec<f64>, active_gain: f64, seed: u64) -> Self {
        Self {
            length,
            proportions,
            active_gain,
            max_duration: 20,
            mean_duration: 20.0,
            noise: 0.5,
            seed,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.proportions.is_empty() {
            return Err(Error::Proportions("at least one label is required".into()));
        }
        if let Some(p) = self.proportions.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Proportions(format!(
                "proportion {p} is not a nonnegative number"
            )));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Proportions(format!("proportions sum to {total}, expected 1")));
        }
        if self.length == 0 || self.max_duration == 0 {
            return Err(Error::Contract("length and max duration must be at least 1".into()));
        }
        let below = |x: f64, lo: f64| x.is_nan() || x < lo;
        if below(self.mean_duration, 1.0) || !self.active_gain.is_finite() || below(self.noise, 0.0) {
            return Err(Error::Contract(
                "mean duration must be >= 1, gain finite and noise nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One imbalanced sequence and its gold segmentation.
///
/// Durations are `1 + Geometric(1 / mean)`, clamped to `[1, K]` and to the
/// remaining length. Each segment's label is drawn proportionally to the
/// label's remaining quota `p_c * T - realized_c` (clipped at 0), which keeps
/// realized label mass close to the targets.
pub fn generate_imbalanced(cfg: &ImbalancedConfig) -> Result<(EmissionBatch, Segmentation)> {
    cfg.validate()?;
    let c = cfg.num_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geometric = Geometric::new(1.0 / cfg.mean_duration).map_err(|e| Error::Contract(e.to_string()))?;

    let mut realized = vec![0usize; c];
    let mut segments = Vec::new();
    let mut start = 0;
    while start < cfg.length {
        let remaining = cfg.length - start;
        let draw = 1 + geometric.sample(&mut rng) as usize;
        let duration = draw.min(cfg.max_duration).min(remaining);
        let quota: Vec<f64> = (0..c)
            .map(|l| (cfg.proportions[l] * cfg.length as f64 - realized[l] as f64).max(0.0))
            .collect();
        let total: f64 = quota.iter().sum();
        let label = if total <= 0.0 {
            // every quota met: fall back to the targets themselves
            sample_weighted(&mut rng, &cfg.proportions)
        } else {
            sample_weighted(&mut rng, &quota)
        };
        realized[label] += duration;
        segments.push(Segment { start, duration, label });
        start += duration;
    }
    let gold = Segmentation::new(segments);

    let labels = gold.position_labels();
    let scores = Array3::from_shape_fn((1, cfg.length, c), |(_, t, l)| {
        let base = if labels[t] == l { cfg.active_gain } else { 0.0 };
        base + rng.random_range(-cfg.noise..=cfg.noise)
    });
    Ok((EmissionBatch::new(scores, vec![cfg.length])?, gold))
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Fraction of positions carrying each label.
pub fn label_mass(seg: &Segmentation, num_labels: usize) -> Vec<f64> {
    let mut mass = vec![0.0; num_labels];
    for s in &seg.segments {
        mass[s.label] += s.duration as f64;
    }
    let total = seg.covered() as f64;
    mass.iter_mut().for_each(|m| *m /= total);
    mass
}

/// Decoder used by the ablation: zero duration bias and a constant
/// per-segment penalty on every transition. The penalty breaks ties between
/// equal-label splits and suppresses single-position flips.
pub fn ablation_decoder(num_labels: usize, max_duration: usize) -> SemiCrfParams {
    let transition = Array2::from_elem((num_labels, num_labels), ABLATION_SEGMENT_PENALTY);
    SemiCrfParams::new(transition, Array2::zeros((max_duration, num_labels))).expect("finite")
}

pub const ABLATION_SEGMENT_PENALTY: f64 = -1.0;
pub const PENALTY_DURATIONS: [usize; 3] = [10, 25, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCounts {
    pub mode: CenteringMode,
    /// Decoded segments per label.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    pub label: usize,
    pub nu: f64,
    /// `(k, -nu * k)`
    pub penalty: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ImbalancedConfig,
    pub gold_counts: Vec<usize>,
    pub modes: Vec<ModeCounts>,
    pub priors: Vec<LabelPrior>,
}

impl AblationReport {
    pub fn counts(&self, mode: CenteringMode) -> Option<&[usize]> {
        self.modes.iter().find(|m| m.mode == mode).map(|m| m.counts.as_slice())
    }
}

/// Viterbi segment counts per label under each centering mode, plus the
/// per-label baseline and its implied duration penalty.
pub fn centering_ablation(cfg: &ImbalancedConfig, modes: &[CenteringMode]) -> Result<AblationReport> {
    centering_ablation_with(cfg, modes, &ablation_decoder(cfg.num_labels(), cfg.max_duration))
}

/// [`centering_ablation`] with an explicit decoder.
pub fn centering_ablation_with(
    cfg: &ImbalancedConfig,
    modes: &[CenteringMode],
    params: &SemiCrfParams,
) -> Result<AblationReport> {
    let (emissions, gold) = generate_imbalanced(cfg)?;
    let c = cfg.num_labels();
    let opts = InferenceOptions::default();
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let s = cumulative_from_emissions(&emissions, mode)?;
        let (seg, _) = decode(&s, params, &opts)?.remove(0);
        out.push(ModeCounts {
            mode,
            counts: seg.label_counts(c),
        });
    }
    let centered = center_emissions(&emissions, CenteringMode::Mean)?;
    let priors = (0..c)
        .map(|label| {
            let nu = centered.baseline[[0, label]];
            LabelPrior {
                label,
                nu,
                penalty: PENALTY_DURATIONS.iter().map(|&k| (k, -nu * k as f64)).collect(),
            }
        })
        .collect();
    Ok(AblationReport {
        config: cfg.clone(),
        gold_counts: gold.label_counts(c),
        modes: out,
        priors,
    })
}

/// Peak `|S|` relative to `sqrt(T)` for one centering mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub mode: CenteringMode,
    pub length: usize,
    pub peak: f64,
    pub peak_over_sqrt_t: f64,
}

/// I.i.d. `N(mean, 1)` emissions of one sequence.
pub fn gaussian_emissions(length: usize, c: usize, mean: f64, seed: u64) -> EmissionBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mean, 1.0).expect("unit variance");
    let scores = Array3::from_shape_fn((1, length, c), |_| normal.sample(&mut rng));
    EmissionBatch::new(scores, vec![length]).expect("valid by construction")
}

/// Cumulative-score growth under each mode for the same emissions.
pub fn cumulative_growth(
    length: usize,
    c: usize,
    mean: f64,
    modes: &[CenteringMode],
    seed: u64,
) -> Result<Vec<GrowthPoint>> {
    let emissions = gaussian_emissions(length, c, mean, seed);
    modes
        .iter()
        .map(|&mode| {
            let s = cumulative_from_emissions(&emissions, mode)?;
            let peak = s.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Ok(GrowthPoint {
                mode,
                length,
                peak,
                peak_over_sqrt_t: peak / (length as f64).sqrt(),
            })
        })
        .collect()
}
