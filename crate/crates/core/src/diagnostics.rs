//! Posterior summaries, the self-consistency suite and the training loss.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{forward_backward, log_partition, InferenceOptions};
use crate::potentials::{score_segmentation, segmentation_statistics, CumulativeScores, Segmentation, SemiCrfParams};
use crate::reference::JointMarginals;
use crate::streaming::GradientSet;

/// Per-position label posteriors and segment-start probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSet {
    /// `P(c | t)`, `(B, T, C)`; zero at padded positions.
    pub position: Array3<f64>,
    /// `P(a segment starts at t)`, `(B, T)`; position 0 is always 1.
    pub boundary: Array2<f64>,
    pub expected_segments: Vec<f64>,
    pub lengths: Vec<usize>,
}

/// Spreads each joint segment marginal over the positions it covers.
pub fn position_marginals(joint: &JointMarginals, lengths: &[usize], t_max: usize) -> MarginalSet {
    let batch = joint.values.len();
    let (_, k_max, c, _) = joint.values.first().map_or((0, 0, 0, 0), |v| v.dim());
    let mut position = Array3::<f64>::zeros((batch, t_max, c));
    let mut boundary = Array2::<f64>::zeros((batch, t_max));
    let mut expected = Vec::with_capacity(batch);
    for (b, mu) in joint.values.iter().enumerate() {
        let len = lengths[b];
        let mut diff = vec![0.0; (t_max + 1) * c];
        let mut total = 0.0;
        for end in 1..=len {
            for k in 1..=k_max.min(end) {
                let start = end - k;
                for label in 0..c {
                    let m: f64 = (0..c).map(|src| mu[[end, k - 1, label, src]]).sum();
                    diff[start * c + label] += m;
                    diff[end * c + label] -= m;
                    boundary[[b, start]] += m;
                    total += m;
                }
            }
        }
        for label in 0..c {
            let mut run = 0.0;
            for t in 0..len {
                run += diff[t * c + label];
                position[[b, t, label]] = run;
            }
        }
        expected.push(total);
    }
    MarginalSet {
        position,
        boundary,
        expected_segments: expected,
        lengths: lengths.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryEntropy {
    /// Shannon entropy (nats) of the boundary posterior normalized over the
    /// sequence's valid positions.
    pub nats: f64,
    /// `exp(nats)`.
    pub effective_boundaries: f64,
}

pub fn boundary_entropy(boundary: &Array2<f64>, lengths: &[usize]) -> Result<Vec<BoundaryEntropy>> {
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let row = &boundary.row(b);
            let total: f64 = (0..len).map(|t| row[t].max(0.0)).sum();
            if total.is_nan() || total <= 0.0 {
                return Err(Error::ZeroBoundaryMass(b));
            }
            let nats = -(0..len)
                .map(|t| row[t].max(0.0) / total)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            Ok(BoundaryEntropy {
                nats,
                effective_boundaries: nats.exp(),
            })
        })
        .collect()
}

/// Pass thresholds for [`self_consistency_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Allowed excursion outside `[0, 1]`.
    pub range: f64,
    /// `max |sum_c P(c | t) - 1|`.
    pub normalization: f64,
    /// `max |sum_{t,c} P(c | t) - L_b| / L_b`.
    pub mass: f64,
    /// Largest magnitude allowed at padded positions.
    pub padding: f64,
    /// Allowed excursion of the expected segment count outside `[1, L_b]`.
    pub segments: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            range: 1e-9,
            normalization: 1e-6,
            mass: 1e-4,
            padding: 0.0,
            segments: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub invariant: String,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub checks: Vec<InvariantCheck>,
    /// Smallest and largest boundary posterior over valid positions.
    pub boundary_min: f64,
    pub boundary_max: f64,
}

impl ConsistencyReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, invariant: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.invariant == invariant)
    }
}

fn check(invariant: &str, tolerance: f64, max_deviation: f64) -> InvariantCheck {
    InvariantCheck {
        invariant: invariant.to_string(),
        tolerance,
        max_deviation,
        pass: max_deviation <= tolerance,
    }
}

pub fn self_consistency_report(m: &MarginalSet, tol: &Tolerances) -> ConsistencyReport {
    let (batch, t_max, c) = m.position.dim();
    let outside = |x: f64| (-x).max(x - 1.0).max(0.0);
    let mut range = 0.0f64;
    let mut norm = 0.0f64;
    let mut mass = 0.0f64;
    let mut padding = 0.0f64;
    let mut segments = 0.0f64;
    let mut bmin = f64::INFINITY;
    let mut bmax = f64::NEG_INFINITY;
    for b in 0..batch {
        let len = m.lengths[b];
        let mut total = 0.0;
        for t in 0..t_max {
            let bv = m.boundary[[b, t]];
            if t < len {
                range = range.max(outside(bv));
                bmin = bmin.min(bv);
                bmax = bmax.max(bv);
                let mut row = 0.0;
                for label in 0..c {
                    let p = m.position[[b, t, label]];
                    range = range.max(outside(p));
                    row += p;
                }
                norm = norm.max((row - 1.0).abs());
                total += row;
            } else {
                padding = padding.max(bv.abs());
                for label in 0..c {
                    padding = padding.max(m.position[[b, t, label]].abs());
                }
            }
        }
        mass = mass.max((total - len as f64).abs() / len as f64);
        let n = m.expected_segments[b];
        segments = segments.max((1.0 - n).max(n - len as f64).max(0.0));
    }
    ConsistencyReport {
        checks: vec![
            check("range", tol.range, range),
            check("normalization", tol.normalization, norm),
            check("mass_conservation", tol.mass, mass),
            check("padding", tol.padding, padding),
            check("expected_segments", tol.segments, segments),
        ],
        boundary_min: bmin,
        boundary_max: bmax,
    }
}

fn check_golds(s: &CumulativeScores, golds: &[Segmentation]) -> Result<()> {
    if golds.len() != s.batch_size() {
        return Err(Error::Shape(format!(
            "{} gold segmentations for batch {}",
            golds.len(),
            s.batch_size()
        )));
    }
    Ok(())
}

/// `logZ_b - score(gold_b)` per sequence; the gold score reduces the virtual
/// source by log-sum-exp, matching the partition function.
pub fn nll(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    golds: &[Segmentation],
    opts: &InferenceOptions,
) -> Result<Vec<f64>> {
    check_golds(s, golds)?;
    let scores = gold_scores(s, params, golds)?;
    let log_z = log_partition(s, params, opts)?;
    Ok(log_z.iter().zip(&scores).map(|(z, g)| z - g).collect())
}

fn gold_scores(s: &CumulativeScores, params: &SemiCrfParams, golds: &[Segmentation]) -> Result<Vec<f64>> {
    let (fs, fp) = crate::potentials::apply_scalar_boundaries(s, params)?;
    golds
        .iter()
        .enumerate()
        .map(|(b, g)| score_segmentation(&fs, &fp, g, b))
        .collect()
}

/// Per-sequence NLL and the gradient of `sum_b weights[b] * nll_b`:
/// expected statistics minus gold statistics.
pub fn nll_with_gradient(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    golds: &[Segmentation],
    weights: &[f64],
    opts: &InferenceOptions,
) -> Result<(Vec<f64>, GradientSet)> {
    check_golds(s, golds)?;
    let scores = gold_scores(s, params, golds)?;
    let inf = forward_backward(s, params, Some(weights), opts, None)?;
    let mut grads = inf.grads;
    let (fs, fp) = crate::potentials::apply_scalar_boundaries(s, params)?;
    for (b, g) in golds.iter().enumerate() {
        let mut stats = segmentation_statistics(&fs, &fp, g, b)?;
        scale(&mut stats, weights[b]);
        fold_stats_boundaries(&mut stats, s, params);
        grads.subtract(&stats);
    }
    let losses = inf.log_z.iter().zip(&scores).map(|(z, g)| z - g).collect();
    Ok((losses, grads))
}

fn scale(g: &mut GradientSet, w: f64) {
    g.cum_scores *= w;
    g.transition *= w;
    g.duration_bias *= w;
    if let Some(p) = g.proj_start.as_mut() {
        *p *= w;
    }
    if let Some(p) = g.proj_end.as_mut() {
        *p *= w;
    }
}

/// Gold statistics for scalar boundaries, routed like the partition gradient.
fn fold_stats_boundaries(g: &mut GradientSet, s: &CumulativeScores, params: &SemiCrfParams) {
    if !params.has_scalar_boundaries() {
        return;
    }
    let c = params.num_labels();
    let mut gs = ndarray::Array1::<f64>::zeros(c);
    let mut ge = ndarray::Array1::<f64>::zeros(c);
    for (b, &len) in s.lengths.iter().enumerate() {
        for label in 0..c {
            match (&g.proj_start, &g.proj_end) {
                (Some(ps), Some(pe)) => {
                    gs[label] += ps[[b, 0, label]];
                    ge[label] += pe[[b, len - 1, label]];
                }
                _ => {
                    gs[label] -= g.cum_scores[[b, 0, label]];
                    ge[label] += g.cum_scores[[b, len, label]];
                }
            }
        }
    }
    g.pi_start = params.pi_start.as_ref().map(|_| gs);
    g.pi_end = params.pi_end.as_ref().map(|_| ge);
}
