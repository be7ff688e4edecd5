//! Model parameters, emission centering, cumulative scores and the O(1)
//! edge-potential evaluation shared by every backend.
//!
//! Positions index *boundaries* between tokens: a sequence of `L` tokens has
//! boundaries `0..=L`, and a segment `[s, s + k)` with label `c` scores its
//! content as `S[s + k, c] - S[s, c]`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{logsumexp_iter, NEG_INF};

/// Raw per-position label scores for a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionBatch {
    /// `(B, T, C)`; entries at `t >= lengths[b]` are never read.
    pub scores: Array3<f64>,
    pub lengths: Vec<usize>,
}

impl EmissionBatch {
    pub fn new(scores: Array3<f64>, lengths: Vec<usize>) -> Result<Self> {
        let batch = Self {
            scores: scores.as_standard_layout().into_owned(),
            lengths,
        };
        batch.validate()?;
        Ok(batch)
    }

    /// A batch where every sequence spans the full padded length.
    pub fn full(scores: Array3<f64>) -> Result<Self> {
        let (b, t, _) = scores.dim();
        Self::new(scores, vec![t; b])
    }

    pub fn validate(&self) -> Result<()> {
        let (batch, t_max, c) = self.scores.dim();
        if c == 0 {
            return Err(Error::Shape("emissions need at least one label".into()));
        }
        check_lengths(&self.lengths, batch, t_max)?;
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                for label in 0..c {
                    let v = self.scores[[b, t, label]];
                    if !v.is_finite() {
                        return Err(Error::NonFiniteEmission {
                            b,
                            t,
                            c: label,
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.scores.dim().0
    }

    pub fn max_len(&self) -> usize {
        self.scores.dim().1
    }

    pub fn num_labels(&self) -> usize {
        self.scores.dim().2
    }
}

fn check_lengths(lengths: &[usize], batch: usize, t_max: usize) -> Result<()> {
    if lengths.len() != batch {
        return Err(Error::Shape(format!(
            "{} lengths for a batch of {batch}",
            lengths.len()
        )));
    }
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 || len > t_max {
            return Err(Error::InvalidLength {
                b,
                length: len,
                max: t_max,
            });
        }
    }
    Ok(())
}

/// How emissions are shifted before prefix summation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenteringMode {
    /// Subtract the per-sequence, per-label masked mean. Not path-invariant:
    /// induces a `-nu_c * k` duration prior.
    Mean,
    /// Leave emissions untouched.
    None,
    /// Subtract `max_c f(t, c)` at every position. Path-invariant.
    SharedMax,
}

impl CenteringMode {
    pub const ALL: [CenteringMode; 3] = [Self::Mean, Self::None, Self::SharedMax];
}

impl fmt::Display for CenteringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::None => "none",
            Self::SharedMax => "shared_max",
        })
    }
}

impl FromStr for CenteringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "none" => Ok(Self::None),
            "shared_max" | "sharedmax" | "shared-max" | "max" => Ok(Self::SharedMax),
            other => Err(Error::Parse(format!("unknown centering mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenteredEmissions {
    /// `(B, T, C)`; zero at padded positions.
    pub centered: Array3<f64>,
    /// Per-sequence label baseline `nu`, `(B, C)`; zero unless `Mean`.
    pub baseline: Array2<f64>,
    /// Per-position shared shift, `(B, T)`; zero unless `SharedMax`.
    pub shift: Array2<f64>,
    pub lengths: Vec<usize>,
    pub mode: CenteringMode,
}

pub fn center_emissions(emissions: &EmissionBatch, mode: CenteringMode) -> Result<CenteredEmissions> {
    emissions.validate()?;
    let (batch, t_max, c) = emissions.scores.dim();
    let mut centered = Array3::<f64>::zeros((batch, t_max, c));
    let mut baseline = Array2::<f64>::zeros((batch, c));
    let mut shift = Array2::<f64>::zeros((batch, t_max));

    for (b, &len) in emissions.lengths.iter().enumerate() {
        let raw = emissions.scores.index_axis(Axis(0), b);
        match mode {
            CenteringMode::None => {
                for t in 0..len {
                    for label in 0..c {
                        centered[[b, t, label]] = raw[[t, label]];
                    }
                }
            }
            CenteringMode::Mean => {
                for label in 0..c {
                    let nu = (0..len).map(|t| raw[[t, label]]).sum::<f64>() / len as f64;
                    baseline[[b, label]] = nu;
                    for t in 0..len {
                        centered[[b, t, label]] = raw[[t, label]] - nu;
                    }
                }
            }
            CenteringMode::SharedMax => {
                for t in 0..len {
                    let m = (0..c).map(|label| raw[[t, label]]).fold(f64::NEG_INFINITY, f64::max);
                    shift[[b, t]] = m;
                    for label in 0..c {
                        centered[[b, t, label]] = raw[[t, label]] - m;
                    }
                }
            }
        }
    }

    Ok(CenteredEmissions {
        centered,
        baseline,
        shift,
        lengths: emissions.lengths.clone(),
        mode,
    })
}

/// Boundary-indexed prefix sums of centered emissions, `(B, T + 1, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeScores {
    pub values: Array3<f64>,
    pub lengths: Vec<usize>,
}

impl CumulativeScores {
    pub fn new(values: Array3<f64>, lengths: Vec<usize>) -> Result<Self> {
        let s = Self {
            values: values.as_standard_layout().into_owned(),
            lengths,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (batch, rows, c) = self.values.dim();
        if rows < 2 || c == 0 {
            return Err(Error::Shape(format!(
                "cumulative scores need shape (B, T+1 >= 2, C >= 1), got ({batch}, {rows}, {c})"
            )));
        }
        check_lengths(&self.lengths, batch, rows - 1)?;
        if !self.values.is_standard_layout() {
            return Err(Error::Shape("cumulative scores must be row-major".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.values.dim().0
    }

    /// Padded length `T` (the tensor holds `T + 1` boundaries).
    pub fn max_len(&self) -> usize {
        self.values.dim().1 - 1
    }

    pub fn num_labels(&self) -> usize {
        self.values.dim().2
    }

    pub fn sequence(&self, b: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), b)
    }
}

pub fn build_cumulative(centered: &CenteredEmissions) -> CumulativeScores {
    let (batch, t_max, c) = centered.centered.dim();
    let mut values = Array3::<f64>::zeros((batch, t_max + 1, c));
    for (b, &len) in centered.lengths.iter().enumerate() {
        for label in 0..c {
            let mut acc = 0.0;
            for t in 1..=t_max {
                if t <= len {
                    acc += centered.centered[[b, t - 1, label]];
                }
                values[[b, t, label]] = acc;
            }
        }
    }
    CumulativeScores {
        values,
        lengths: centered.lengths.clone(),
    }
}

/// Centers `emissions` and builds the prefix sums in one step.
pub fn cumulative_from_emissions(emissions: &EmissionBatch, mode: CenteringMode) -> Result<CumulativeScores> {
    Ok(build_cumulative(&center_emissions(emissions, mode)?))
}

/// Folds label-dependent sequence start/end scores into `S`: every segment
/// starting at 0 gains `pi_start[c]`, every segment ending at `L_b` gains
/// `pi_end[c]`.
pub fn fold_scalar_boundaries(s: &CumulativeScores, pi_start: &[f64], pi_end: &[f64]) -> Result<CumulativeScores> {
    let c = s.num_labels();
    if pi_start.len() != c || pi_end.len() != c {
        return Err(Error::Shape(format!(
            "boundary vectors must have {c} entries, got {} and {}",
            pi_start.len(),
            pi_end.len()
        )));
    }
    let mut out = s.clone();
    for (b, &len) in s.lengths.iter().enumerate() {
        for label in 0..c {
            out.values[[b, 0, label]] -= pi_start[label];
            out.values[[b, len, label]] += pi_end[label];
        }
    }
    Ok(out)
}

/// Position- and label-dependent boundary scores, each `(B, T, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProjections {
    pub start: Array3<f64>,
    pub end: Array3<f64>,
}

impl BoundaryProjections {
    pub fn zeros(batch: usize, t_max: usize, c: usize) -> Self {
        Self {
            start: Array3::zeros((batch, t_max, c)),
            end: Array3::zeros((batch, t_max, c)),
        }
    }
}

/// Transition, duration and boundary parameters of a semi-CRF.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiCrfParams {
    /// `(C, C)`, source row, destination column.
    pub transition: Array2<f64>,
    /// `(K, C)`; duration `k` lives at row `k - 1`.
    pub duration_bias: Array2<f64>,
    pub pi_start: Option<Array1<f64>>,
    pub pi_end: Option<Array1<f64>>,
    pub projections: Option<BoundaryProjections>,
}

impl SemiCrfParams {
    pub fn new(transition: Array2<f64>, duration_bias: Array2<f64>) -> Result<Self> {
        let p = Self {
            transition: transition.as_standard_layout().into_owned(),
            duration_bias: duration_bias.as_standard_layout().into_owned(),
            pi_start: None,
            pi_end: None,
            projections: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(num_labels: usize, max_duration: usize) -> Self {
        Self {
            transition: Array2::zeros((num_labels, num_labels)),
            duration_bias: Array2::zeros((max_duration, num_labels)),
            pi_start: None,
            pi_end: None,
            projections: None,
        }
    }

    pub fn with_scalar_boundaries(mut self, start: Array1<f64>, end: Array1<f64>) -> Self {
        self.pi_start = Some(start);
        self.pi_end = Some(end);
        self
    }

    pub fn with_projections(mut self, projections: BoundaryProjections) -> Self {
        self.projections = Some(projections);
        self
    }

    pub fn num_labels(&self) -> usize {
        self.transition.nrows()
    }

    pub fn max_duration(&self) -> usize {
        self.duration_bias.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.transition.nrows();
        if c == 0 || self.transition.ncols() != c {
            return Err(Error::Shape(format!(
                "transition must be square with C >= 1, got {:?}",
                self.transition.dim()
            )));
        }
        let (k, cc) = self.duration_bias.dim();
        if k == 0 || cc != c {
            return Err(Error::Shape(format!(
                "duration bias must be (K >= 1, {c}), got ({k}, {cc})"
            )));
        }
        check_finite("transition", self.transition.iter())?;
        check_finite("duration_bias", self.duration_bias.iter())?;
        for (name, v) in [("pi_start", &self.pi_start), ("pi_end", &self.pi_end)] {
            if let Some(v) = v {
                if v.len() != c {
                    return Err(Error::Shape(format!("{name} must have {c} entries")));
                }
                check_finite(name, v.iter())?;
            }
        }
        if let Some(p) = &self.projections {
            if p.start.dim() != p.end.dim() || p.start.dim().2 != c {
                return Err(Error::Shape(format!(
                    "projections must both be (B, T, {c}), got {:?} and {:?}",
                    p.start.dim(),
                    p.end.dim()
                )));
            }
            check_finite("proj_start", p.start.iter())?;
            check_finite("proj_end", p.end.iter())?;
        }
        Ok(())
    }

    /// Validates parameters against a score tensor they will be used with.
    pub fn validate_for(&self, s: &CumulativeScores) -> Result<()> {
        self.validate()?;
        s.validate()?;
        if s.num_labels() != self.num_labels() {
            return Err(Error::Shape(format!(
                "scores have {} labels, parameters have {}",
                s.num_labels(),
                self.num_labels()
            )));
        }
        if let Some(p) = &self.projections {
            let (b, t, _) = p.start.dim();
            if b != s.batch_size() || t != s.max_len() {
                return Err(Error::Shape(format!(
                    "projections are ({b}, {t}, _) but scores are ({}, {}, _)",
                    s.batch_size(),
                    s.max_len()
                )));
            }
        }
        Ok(())
    }

    pub fn has_projections(&self) -> bool {
        self.projections.is_some()
    }

    pub fn has_scalar_boundaries(&self) -> bool {
        self.pi_start.is_some() || self.pi_end.is_some()
    }
}

fn check_finite<'a>(tensor: &'static str, it: impl Iterator<Item = &'a f64>) -> Result<()> {
    for (index, v) in it.enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteParameter { tensor, index });
        }
    }
    Ok(())
}

/// Routes scalar boundaries to where the backends expect them.
///
/// Without projections the vectors are folded into `S`; with projections they
/// are added to `P_start[b, 0]` and `P_end[b, L_b - 1]`. The returned
/// parameters carry no scalar boundaries, so every backend can ignore them.
pub fn apply_scalar_boundaries(
    s: &CumulativeScores,
    params: &SemiCrfParams,
) -> Result<(CumulativeScores, SemiCrfParams)> {
    params.validate_for(s)?;
    let c = params.num_labels();
    let zeros = Array1::<f64>::zeros(c);
    let pi_start = params.pi_start.as_ref().unwrap_or(&zeros);
    let pi_end = params.pi_end.as_ref().unwrap_or(&zeros);
    let mut out_params = params.clone();
    out_params.pi_start = None;
    out_params.pi_end = None;

    if !params.has_scalar_boundaries() {
        return Ok((s.clone(), out_params));
    }
    match out_params.projections.as_mut() {
        Some(proj) => {
            for (b, &len) in s.lengths.iter().enumerate() {
                for label in 0..c {
                    proj.start[[b, 0, label]] += pi_start[label];
                    proj.end[[b, len - 1, label]] += pi_end[label];
                }
            }
            Ok((s.clone(), out_params))
        }
        None => Ok((
            fold_scalar_boundaries(
                s,
                pi_start.as_slice().expect("contiguous"),
                pi_end.as_slice().expect("contiguous"),
            )?,
            out_params,
        )),
    }
}

/// Flat, borrowed view of one sequence's inputs, used by the DP inner loops.
#[derive(Debug, Clone, Copy)]
pub struct SequenceView<'a> {
    /// `(T + 1) * C`, row-major.
    pub cum: &'a [f64],
    /// `C * C`, source-major.
    pub transition: &'a [f64],
    /// `K * C`.
    pub duration_bias: &'a [f64],
    pub proj_start: Option<&'a [f64]>,
    pub proj_end: Option<&'a [f64]>,
    pub len: usize,
    pub num_labels: usize,
    pub max_duration: usize,
}

impl<'a> SequenceView<'a> {
    pub fn new(s: &'a CumulativeScores, params: &'a SemiCrfParams, b: usize) -> Self {
        let t_max = s.max_len();
        let c = s.num_labels();
        let cum_all = s.values.as_slice().expect("standard layout");
        let stride = (t_max + 1) * c;
        let proj = |a: &'a Array3<f64>| {
            let flat = a.as_slice().expect("standard layout");
            &flat[b * t_max * c..(b + 1) * t_max * c]
        };
        Self {
            cum: &cum_all[b * stride..(b + 1) * stride],
            transition: params.transition.as_slice().expect("standard layout"),
            duration_bias: params.duration_bias.as_slice().expect("standard layout"),
            proj_start: params.projections.as_ref().map(|p| proj(&p.start)),
            proj_end: params.projections.as_ref().map(|p| proj(&p.end)),
            len: s.lengths[b],
            num_labels: c,
            max_duration: params.max_duration(),
        }
    }

    #[inline]
    pub fn cum_at(&self, t: usize, c: usize) -> f64 {
        self.cum[t * self.num_labels + c]
    }

    #[inline]
    pub fn trans(&self, src: usize, dst: usize) -> f64 {
        self.transition[src * self.num_labels + dst]
    }

    /// Label-dependent part of the edge potential for the segment
    /// `[t - k, t)`: content, duration bias and boundary projections.
    #[inline]
    pub fn segment_score(&self, t: usize, k: usize, c: usize) -> f64 {
        let n = self.num_labels;
        let mut h = self.cum[t * n + c] - self.cum[(t - k) * n + c] + self.duration_bias[(k - 1) * n + c];
        if let Some(ps) = self.proj_start {
            h += ps[(t - k) * n + c];
        }
        if let Some(pe) = self.proj_end {
            h += pe[(t - 1) * n + c];
        }
        h
    }

    /// Fills `out[c] = segment_score(t, k, c)` for every label.
    #[inline]
    pub fn segment_scores(&self, t: usize, k: usize, out: &mut [f64]) {
        let n = self.num_labels;
        let hi = &self.cum[t * n..(t + 1) * n];
        let lo = &self.cum[(t - k) * n..(t - k + 1) * n];
        let bias = &self.duration_bias[(k - 1) * n..k * n];
        for c in 0..n {
            out[c] = hi[c] - lo[c] + bias[c];
        }
        if let Some(ps) = self.proj_start {
            let row = &ps[(t - k) * n..(t - k + 1) * n];
            for c in 0..n {
                out[c] += row[c];
            }
        }
        if let Some(pe) = self.proj_end {
            let row = &pe[(t - 1) * n..t * n];
            for c in 0..n {
                out[c] += row[c];
            }
        }
    }

    #[inline]
    pub fn edge(&self, t: usize, k: usize, c: usize, src: usize) -> f64 {
        self.segment_score(t, k, c) + self.trans(src, c)
    }

    /// Largest duration usable for a segment ending at `t`.
    #[inline]
    pub fn max_k_ending_at(&self, t: usize) -> usize {
        self.max_duration.min(t)
    }
}

/// Edge potential of a segment `[t - k, t)` with label `c` entered from `src`.
pub fn edge_potential(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    b: usize,
    t: usize,
    k: usize,
    c: usize,
    src: usize,
) -> Result<f64> {
    if b >= s.batch_size() {
        return Err(Error::Contract(format!("batch index {b} out of range")));
    }
    let len = s.lengths[b];
    if k == 0 || k > params.max_duration() || k > t || t > len {
        return Err(Error::Contract(format!(
            "edge (t={t}, k={k}) outside 1 <= k <= min(K={}, t), t <= L={len}",
            params.max_duration()
        )));
    }
    if c >= params.num_labels() || src >= params.num_labels() {
        return Err(Error::Contract(format!("label ({src} -> {c}) out of range")));
    }
    Ok(SequenceView::new(s, params, b).edge(t, k, c, src))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub duration: usize,
    pub label: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.duration
    }
}

/// An ordered list of labeled segments tiling `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
}

impl Segmentation {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Total number of tokens covered.
    pub fn covered(&self) -> usize {
        self.segments.last().map_or(0, Segment::end)
    }

    /// Checks the tiling constraints, reporting the first one violated.
    pub fn validate(&self, length: usize, max_duration: usize, num_labels: usize) -> Result<()> {
        let Some(first) = self.segments.first() else {
            return Err(Error::Segmentation("no segments".into()));
        };
        if first.start != 0 {
            return Err(Error::Segmentation(format!(
                "first segment starts at {}, not 0",
                first.start
            )));
        }
        let mut expected = 0;
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.start != expected {
                return Err(Error::Segmentation(format!(
                    "segment {i} starts at {} but previous ends at {expected}",
                    seg.start
                )));
            }
            if seg.duration == 0 || seg.duration > max_duration {
                return Err(Error::Segmentation(format!(
                    "segment {i} has duration {} outside [1, {max_duration}]",
                    seg.duration
                )));
            }
            if seg.label >= num_labels {
                return Err(Error::Segmentation(format!(
                    "segment {i} has label {} >= C = {num_labels}",
                    seg.label
                )));
            }
            expected = seg.end();
        }
        if expected != length {
            return Err(Error::Segmentation(format!(
                "segments cover [0, {expected}) but sequence length is {length}"
            )));
        }
        Ok(())
    }

    /// Per-token labels.
    pub fn position_labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.covered());
        for seg in &self.segments {
            out.extend(std::iter::repeat(seg.label).take(seg.duration));
        }
        out
    }

    /// Splits runs of equal per-token labels into segments of at most
    /// `max_duration` tokens.
    pub fn from_position_labels(labels: &[usize], max_duration: usize) -> Self {
        let mut segments = Vec::new();
        let mut start = 0;
        while start < labels.len() {
            let label = labels[start];
            let mut end = start + 1;
            while end < labels.len() && labels[end] == label && end - start < max_duration {
                end += 1;
            }
            segments.push(Segment {
                start,
                duration: end - start,
                label,
            });
            start = end;
        }
        Self { segments }
    }

    /// Number of segments carrying each label.
    pub fn label_counts(&self, num_labels: usize) -> Vec<usize> {
        let mut counts = vec![0; num_labels];
        for seg in &self.segments {
            counts[seg.label] += 1;
        }
        counts
    }
}

/// How the unnamed pre-sequence label is reduced in a path score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceReduction {
    /// Log-sum-exp, matching the partition function's path measure.
    LogSumExp,
    /// Maximum, matching Viterbi.
    Max,
}

/// Log-score of a labeled segmentation, with the first segment's transition
/// reduced over a virtual source label.
pub fn score_segmentation(s: &CumulativeScores, params: &SemiCrfParams, seg: &Segmentation, b: usize) -> Result<f64> {
    score_segmentation_with(s, params, seg, b, SourceReduction::LogSumExp)
}

pub fn score_segmentation_with(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    seg: &Segmentation,
    b: usize,
    source: SourceReduction,
) -> Result<f64> {
    params.validate_for(s)?;
    if b >= s.batch_size() {
        return Err(Error::Contract(format!("batch index {b} out of range")));
    }
    seg.validate(s.lengths[b], params.max_duration(), params.num_labels())?;
    let view = SequenceView::new(s, params, b);
    Ok(path_score(&view, &seg.segments, source))
}

pub(crate) fn path_score(view: &SequenceView<'_>, segments: &[Segment], source: SourceReduction) -> f64 {
    let c = view.num_labels;
    let first = segments[0];
    let entry = match source {
        SourceReduction::LogSumExp => logsumexp_iter((0..c).map(|src| view.trans(src, first.label))),
        SourceReduction::Max => (0..c).map(|src| view.trans(src, first.label)).fold(NEG_INF, f64::max),
    };
    let mut total = entry;
    let mut prev: Option<usize> = None;
    for sg in segments {
        total += view.segment_score(sg.end(), sg.duration, sg.label);
        if let Some(p) = prev {
            total += view.trans(p, sg.label);
        }
        prev = Some(sg.label);
    }
    total
}

/// Gradient of [`score_segmentation`] with respect to `S`, `T`, `B` and the
/// projections of sequence `b`: the gold-path sufficient statistics.
pub fn segmentation_statistics(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    seg: &Segmentation,
    b: usize,
) -> Result<crate::streaming::GradientSet> {
    params.validate_for(s)?;
    seg.validate(s.lengths[b], params.max_duration(), params.num_labels())?;
    let c = params.num_labels();
    let mut grads = crate::streaming::GradientSet::zeros(
        s.batch_size(),
        s.max_len(),
        c,
        params.max_duration(),
        params.has_projections(),
    );
    let first = seg.segments[0].label;
    let lse = logsumexp_iter((0..c).map(|src| params.transition[[src, first]]));
    for src in 0..c {
        grads.transition[[src, first]] += (params.transition[[src, first]] - lse).exp();
    }
    let mut prev: Option<usize> = None;
    for sg in &seg.segments {
        grads.cum_scores[[b, sg.end(), sg.label]] += 1.0;
        grads.cum_scores[[b, sg.start, sg.label]] -= 1.0;
        grads.duration_bias[[sg.duration - 1, sg.label]] += 1.0;
        if let Some(p) = prev {
            grads.transition[[p, sg.label]] += 1.0;
        }
        if let (Some(ps), Some(pe)) = (grads.proj_start.as_mut(), grads.proj_end.as_mut()) {
            ps[[b, sg.start, sg.label]] += 1.0;
            pe[[b, sg.end() - 1, sg.label]] += 1.0;
        }
        prev = Some(sg.label);
    }
    Ok(grads)
}

/// Chain rule from `dL/dS` back to raw emissions `dL/df`, `(B, T, C)`.
///
/// `S[t] = sum_{u < t} centered[u]`, so `dL/dcentered[u] = sum_{t > u} dL/dS[t]`;
/// centering then contributes the mean (or shared-max) correction.
pub fn emission_gradient(grad_cum: &Array3<f64>, centered: &CenteredEmissions, raw: &EmissionBatch) -> Array3<f64> {
    let (batch, t_max, c) = centered.centered.dim();
    let mut out = Array3::<f64>::zeros((batch, t_max, c));
    for (b, &len) in centered.lengths.iter().enumerate() {
        for label in 0..c {
            let mut acc = 0.0;
            for u in (0..len).rev() {
                acc += grad_cum[[b, u + 1, label]];
                out[[b, u, label]] = acc;
            }
        }
        match centered.mode {
            CenteringMode::None => {}
            CenteringMode::Mean => {
                for label in 0..c {
                    let mean = (0..len).map(|u| out[[b, u, label]]).sum::<f64>() / len as f64;
                    for u in 0..len {
                        out[[b, u, label]] -= mean;
                    }
                }
            }
            CenteringMode::SharedMax => {
                for u in 0..len {
                    let total: f64 = (0..c).map(|label| out[[b, u, label]]).sum();
                    let argmax = (0..c)
                        .max_by(|&x, &y| {
                            raw.scores[[b, u, x]]
                                .partial_cmp(&raw.scores[[b, u, y]])
                                .unwrap()
                                .then(y.cmp(&x))
                        })
                        .unwrap();
                    out[[b, u, argmax]] -= total;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn batch(values: Vec<Vec<f64>>) -> EmissionBatch {
        let t = values.len();
        let c = values[0].len();
        let flat: Vec<f64> = values.into_iter().flatten().collect();
        EmissionBatch::full(Array::from_shape_vec((1, t, c), flat).unwrap()).unwrap()
    }

    #[test]
    fn table1_baselines() {
        // 100 positions; label active on the stated fraction, inactive elsewhere.
        let rows: Vec<(f64, f64, usize, f64)> =
            vec![(4.0, -1.0, 85, 3.25), (5.0, -0.5, 14, 0.27), (8.0, -0.2, 1, -0.118)];
        let t = 100;
        let mut scores = Array3::<f64>::zeros((1, t, 3));
        for (label, &(active, inactive, count, _)) in rows.iter().enumerate() {
            for pos in 0..t {
                scores[[0, pos, label]] = if pos < count { active } else { inactive };
            }
        }
        let e = EmissionBatch::full(scores).unwrap();
        let centered = center_emissions(&e, CenteringMode::Mean).unwrap();
        for (label, &(_, _, _, nu)) in rows.iter().enumerate() {
            assert!((centered.baseline[[0, label]] - nu).abs() < 1e-12, "label {label}");
        }
        // Content over 100 positions of the dominant label shrinks by nu * 100.
        let s = build_cumulative(&centered);
        let raw_sum: f64 = (0..t).map(|u| e.scores[[0, u, 0]]).sum();
        let content = s.values[[0, 100, 0]] - s.values[[0, 0, 0]];
        assert!((content - (raw_sum - 325.0)).abs() < 1e-9);
    }

    #[test]
    fn zero_emissions_center_to_zero() {
        let e = batch(vec![vec![0.0, 0.0]; 5]);
        let ce = center_emissions(&e, CenteringMode::Mean).unwrap();
        assert!(ce.centered.iter().all(|&v| v == 0.0));
        assert!(ce.baseline.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_emissions_cancel() {
        let e = batch(vec![vec![5.0, 5.0, 5.0]; 7]);
        let ce = center_emissions(&e, CenteringMode::Mean).unwrap();
        assert!(ce.baseline.iter().all(|&v| v == 5.0));
        assert!(ce.centered.iter().all(|&v| v == 0.0));
        let s = build_cumulative(&ce);
        assert_eq!(s.values.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
    }

    #[test]
    fn masked_mean_ignores_padding() {
        let mut scores = Array3::<f64>::zeros((1, 4, 1));
        scores[[0, 0, 0]] = 1.0;
        scores[[0, 1, 0]] = 3.0;
        scores[[0, 2, 0]] = f64::NAN; // padding, never read
        scores[[0, 3, 0]] = 100.0;
        let e = EmissionBatch::new(scores, vec![2]).unwrap();
        let ce = center_emissions(&e, CenteringMode::Mean).unwrap();
        assert_eq!(ce.baseline[[0, 0]], 2.0);
        assert_eq!(ce.centered[[0, 2, 0]], 0.0);
        let s = build_cumulative(&ce);
        // Frozen past the length.
        assert_eq!(s.values[[0, 3, 0]], s.values[[0, 2, 0]]);
        assert_eq!(s.values[[0, 4, 0]], s.values[[0, 2, 0]]);
    }

    #[test]
    fn non_finite_emission_is_reported_with_position() {
        let mut scores = Array3::<f64>::zeros((2, 3, 2));
        scores[[1, 2, 1]] = f64::INFINITY;
        let err = EmissionBatch::full(scores).unwrap_err();
        match err {
            Error::NonFiniteEmission { b, t, c, .. } => assert_eq!((b, t, c), (1, 2, 1)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn shared_max_zeroes_row_max() {
        let e = batch(vec![vec![1.0, 4.0, -2.0], vec![0.5, 0.25, 0.75]]);
        let ce = center_emissions(&e, CenteringMode::SharedMax).unwrap();
        for t in 0..2 {
            let m = (0..3).map(|c| ce.centered[[0, t, c]]).fold(f64::MIN, f64::max);
            assert!(m.abs() < 1e-12);
        }
        assert_eq!(ce.shift[[0, 0]], 4.0);
        assert!(ce.baseline.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cumulative_direct_summation() {
        let ce = CenteredEmissions {
            centered: Array::from_shape_vec((1, 2, 2), vec![1.0, -1.0, 2.0, 0.0]).unwrap(),
            baseline: Array2::zeros((1, 2)),
            shift: Array2::zeros((1, 2)),
            lengths: vec![2],
            mode: CenteringMode::None,
        };
        let s = build_cumulative(&ce);
        assert_eq!(
            s.values.index_axis(Axis(0), 0),
            array![[0.0, 0.0], [1.0, -1.0], [3.0, -1.0]]
        );
    }

    fn toy_scores() -> CumulativeScores {
        let e = batch(vec![
            vec![0.3, -0.2],
            vec![1.1, 0.4],
            vec![-0.7, 0.9],
            vec![0.2, 0.2],
            vec![0.5, -1.0],
        ]);
        cumulative_from_emissions(&e, CenteringMode::None).unwrap()
    }

    #[test]
    fn folding_zero_boundaries_is_identity() {
        let s = toy_scores();
        let f = fold_scalar_boundaries(&s, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(f, s);
    }

    #[test]
    fn folding_touches_only_sequence_ends() {
        let s = toy_scores();
        let f = fold_scalar_boundaries(&s, &[0.5, -1.5], &[2.0, 0.25]).unwrap();
        let params = SemiCrfParams::zeros(2, 5);
        for c in 0..2 {
            // Whole-sequence segment gains both boundary terms.
            let raw = edge_potential(&s, &params, 0, 5, 5, c, 0).unwrap();
            let folded = edge_potential(&f, &params, 0, 5, 5, c, 0).unwrap();
            let expected = raw + [0.5, -1.5][c] + [2.0, 0.25][c];
            assert!((folded - expected).abs() < 1e-12);
            // Interior segment [1, 3) unchanged.
            let raw = edge_potential(&s, &params, 0, 3, 2, c, 1).unwrap();
            let folded = edge_potential(&f, &params, 0, 3, 2, c, 1).unwrap();
            assert_eq!(raw, folded);
        }
    }

    fn two_token_instance() -> (CumulativeScores, SemiCrfParams) {
        let e = batch(vec![vec![1.0], vec![2.0]]);
        let s = cumulative_from_emissions(&e, CenteringMode::None).unwrap();
        let mut params = SemiCrfParams::zeros(1, 2);
        params.duration_bias[[1, 0]] = 0.5;
        params.transition[[0, 0]] = -0.25;
        (s, params)
    }

    #[test]
    fn edge_potential_hand_summed() {
        let (s, params) = two_token_instance();
        let v = edge_potential(&s, &params, 0, 2, 2, 0, 0).unwrap();
        assert!((v - 3.25).abs() < 1e-12);

        let mut proj = BoundaryProjections::zeros(1, 2, 1);
        proj.start[[0, 0, 0]] = 1.0;
        proj.end[[0, 1, 0]] = 2.0;
        let params = params.with_projections(proj);
        let v = edge_potential(&s, &params, 0, 2, 2, 0, 0).unwrap();
        assert!((v - 6.25).abs() < 1e-12);
    }

    #[test]
    fn edge_potential_rejects_out_of_range() {
        let (s, params) = two_token_instance();
        assert!(matches!(
            edge_potential(&s, &params, 0, 1, 2, 0, 0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            edge_potential(&s, &params, 0, 3, 1, 0, 0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            edge_potential(&s, &params, 0, 2, 0, 0, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_everything_edge_is_zero() {
        let e = EmissionBatch::full(Array3::zeros((1, 4, 3))).unwrap();
        let s = cumulative_from_emissions(&e, CenteringMode::Mean).unwrap();
        let params = SemiCrfParams::zeros(3, 3);
        for t in 1..=4 {
            for k in 1..=t.min(3) {
                for c in 0..3 {
                    for src in 0..3 {
                        assert_eq!(edge_potential(&s, &params, 0, t, k, c, src).unwrap(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_segment_score_matches_edge() {
        let (s, params) = two_token_instance();
        let seg = Segmentation::new(vec![Segment {
            start: 0,
            duration: 2,
            label: 0,
        }]);
        let v = score_segmentation(&s, &params, &seg, 0).unwrap();
        assert!((v - 3.25).abs() < 1e-12);
    }

    #[test]
    fn zero_params_score_is_ln_c() {
        let e = EmissionBatch::full(Array3::zeros((1, 6, 2))).unwrap();
        let s = cumulative_from_emissions(&e, CenteringMode::None).unwrap();
        let params = SemiCrfParams::zeros(2, 3);
        let seg = Segmentation::from_position_labels(&[0, 0, 1, 1, 1, 0], 3);
        let v = score_segmentation(&s, &params, &seg, 0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-14);
        let v = score_segmentation_with(&s, &params, &seg, 0, SourceReduction::Max).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn malformed_segmentations_name_the_violation() {
        let (s, params) = two_token_instance();
        let cases = [
            (
                vec![Segment {
                    start: 1,
                    duration: 1,
                    label: 0,
                }],
                "starts at 1",
            ),
            (
                vec![
                    Segment {
                        start: 0,
                        duration: 1,
                        label: 0,
                    },
                    Segment {
                        start: 2,
                        duration: 1,
                        label: 0,
                    },
                ],
                "previous ends",
            ),
            (
                vec![Segment {
                    start: 0,
                    duration: 1,
                    label: 0,
                }],
                "cover",
            ),
            (
                vec![Segment {
                    start: 0,
                    duration: 2,
                    label: 3,
                }],
                "label",
            ),
        ];
        for (segs, needle) in cases {
            let err = score_segmentation(&s, &params, &Segmentation::new(segs), 0).unwrap_err();
            assert!(err.to_string().contains(needle), "{err}");
        }
        let mut short = params.clone();
        short.duration_bias = Array2::zeros((1, 1));
        let seg = Segmentation::new(vec![Segment {
            start: 0,
            duration: 2,
            label: 0,
        }]);
        let err = score_segmentation(&s, &short, &seg, 0).unwrap_err();
        assert!(err.to_string().contains("duration"), "{err}");
    }

    #[test]
    fn from_position_labels_respects_max_duration() {
        let seg = Segmentation::from_position_labels(&[1, 1, 1, 1, 1, 0, 0], 2);
        seg.validate(7, 2, 2).unwrap();
        assert_eq!(seg.label_counts(2), vec![1, 3]);
        assert_eq!(seg.position_labels(), vec![1, 1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn scalar_boundaries_route_to_projections_when_present() {
        let s = toy_scores();
        let params = SemiCrfParams::zeros(2, 3)
            .with_scalar_boundaries(array![1.0, 2.0], array![3.0, 4.0])
            .with_projections(BoundaryProjections::zeros(1, 5, 2));
        let (s2, p2) = apply_scalar_boundaries(&s, &params).unwrap();
        assert_eq!(s2, s);
        assert!(!p2.has_scalar_boundaries());
        let proj = p2.projections.unwrap();
        assert_eq!(proj.start[[0, 0, 1]], 2.0);
        assert_eq!(proj.end[[0, 4, 0]], 3.0);
    }

    #[test]
    fn centering_mode_parses() {
        for m in CenteringMode::ALL {
            assert_eq!(m.to_string().parse::<CenteringMode>().unwrap(), m);
        }
        assert!("median".parse::<CenteringMode>().is_err());
    }
}
