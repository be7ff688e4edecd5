//! Correctness campaign: finite-difference gradient checks, cross-backend
//! equivalence over seeded random instances, and a training-convergence
//! comparison between backends.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_imbalanced, ImbalancedConfig};
use crate::diagnostics::nll_with_gradient;
use crate::error::{Error, Result};
use crate::inference::{
    decode_engine, forward_backward, forward_backward_engine, log_partition, log_partition_engine, Backend, Engine,
    InferenceOptions,
};
use crate::instances::{random_instance, InstanceDims};
use crate::potentials::{
    build_cumulative, center_emissions, emission_gradient, CenteringMode, CumulativeScores, EmissionBatch,
    Segmentation, SemiCrfParams,
};
use crate::reference::{enumerate_log_z, enumerate_max, ENUM_MAX_C, ENUM_MAX_K, ENUM_MAX_LEN};
use crate::streaming::{choose_checkpoint_interval, dispatch, BackendKind};

/// Default ceiling on `T * K * C^2` for [`finite_diff_gradcheck`].
pub const GRADCHECK_GUARD: u128 = 1_000_000;
pub const GRADCHECK_COSINE: f64 = 0.9999;
pub const GRADCHECK_NORM_MAX_ERR: f64 = 5e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub cosine: f64,
    /// `max |analytic - numeric| / max |analytic|`.
    pub norm_max_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.tensors.iter().all(|t| t.pass)
    }

    pub fn get(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub guard: u128,
    pub inference: InferenceOptions,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            guard: GRADCHECK_GUARD,
            inference: InferenceOptions::default(),
        }
    }
}

/// Which tensor a perturbation targets.
#[derive(Debug, Clone, Copy)]
enum Target {
    Cum,
    Transition,
    Duration,
    ProjStart,
    ProjEnd,
    PiStart,
    PiEnd,
}

impl Target {
    fn name(self) -> &'static str {
        match self {
            Self::Cum => "cum_scores",
            Self::Transition => "transition",
            Self::Duration => "duration_bias",
            Self::ProjStart => "proj_start",
            Self::ProjEnd => "proj_end",
            Self::PiStart => "pi_start",
            Self::PiEnd => "pi_end",
        }
    }

    fn slot<'a>(self, s: &'a mut CumulativeScores, p: &'a mut SemiCrfParams) -> &'a mut [f64] {
        let slice = match self {
            Self::Cum => s.values.as_slice_mut(),
            Self::Transition => p.transition.as_slice_mut(),
            Self::Duration => p.duration_bias.as_slice_mut(),
            Self::ProjStart => p.projections.as_mut().and_then(|x| x.start.as_slice_mut()),
            Self::ProjEnd => p.projections.as_mut().and_then(|x| x.end.as_slice_mut()),
            Self::PiStart => p.pi_start.as_mut().and_then(|x| x.as_slice_mut()),
            Self::PiEnd => p.pi_end.as_mut().and_then(|x| x.as_slice_mut()),
        };
        slice.expect("standard layout")
    }
}

/// Central differences of `sum_b logZ_b` against the analytic gradient, per
/// parameter tensor. Uses forward passes only for the numeric side.
pub fn finite_diff_gradcheck(
    s: &CumulativeScores,
    params: &SemiCrfParams,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    params.validate_for(s)?;
    let (t, k, c) = (
        s.max_len() as u128,
        params.max_duration() as u128,
        params.num_labels() as u128,
    );
    let work = t * k * c * c;
    if work > opts.guard {
        return Err(Error::GradcheckGuard {
            work,
            guard: opts.guard,
        });
    }
    let analytic = forward_backward(s, params, None, &opts.inference, None)?.grads;
    let total = |s: &CumulativeScores, p: &SemiCrfParams| -> Result<f64> {
        Ok(log_partition(s, p, &opts.inference)?.iter().sum())
    };

    let mut targets = vec![Target::Cum, Target::Transition, Target::Duration];
    if params.projections.is_some() {
        targets.extend([Target::ProjStart, Target::ProjEnd]);
    }
    if params.pi_start.is_some() {
        targets.push(Target::PiStart);
    }
    if params.pi_end.is_some() {
        targets.push(Target::PiEnd);
    }

    let mut tensors = Vec::with_capacity(targets.len());
    for target in targets {
        let reference = analytic
            .tensors()
            .into_iter()
            .find(|(n, _)| *n == target.name())
            .map(|(_, v)| v.to_vec())
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {}", target.name())))?;
        let numeric: Vec<f64> = (0..reference.len())
            .into_par_iter()
            .map(|i| {
                let eval = |delta: f64| {
                    let (mut s2, mut p2) = (s.clone(), params.clone());
                    target.slot(&mut s2, &mut p2)[i] += delta;
                    total(&s2, &p2)
                };
                Ok((eval(opts.eps)? - eval(-opts.eps)?) / (2.0 * opts.eps))
            })
            .collect::<Result<_>>()?;
        tensors.push(compare(target.name(), &reference, &numeric));
    }
    Ok(GradcheckReport { eps: opts.eps, tensors })
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let dot: f64 = analytic.iter().zip(numeric).map(|(a, b)| a * b).sum();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = if na == 0.0 && nn == 0.0 {
        1.0
    } else {
        dot / (na * nn).max(f64::MIN_POSITIVE)
    };
    let max_abs_err = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
    let norm_max_err = if scale == 0.0 { max_abs_err } else { max_abs_err / scale };
    TensorCheck {
        name: name.to_string(),
        elements: analytic.len(),
        cosine,
        norm_max_err,
        max_abs_err,
        pass: cosine >= GRADCHECK_COSINE && norm_max_err < GRADCHECK_NORM_MAX_ERR,
    }
}

/// Cross-backend equivalence campaign settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub trials: usize,
    pub dims: InstanceDims,
    pub seed: u64,
    /// Relative tolerance on `logZ` between any two backends.
    pub logz_rel_tol: f64,
    /// Absolute tolerance on gradients, dense vs streaming.
    pub grad_tol: f64,
    /// Compare gradients (dense vs streaming and fast paths).
    pub gradients: bool,
}

impl EquivalenceConfig {
    pub fn new(trials: usize, dims: InstanceDims, seed: u64) -> Self {
        Self {
            trials,
            dims,
            seed,
            logz_rel_tol: 1e-9,
            grad_tol: 1e-8,
            gradients: true,
        }
    }
}

/// Everything needed to rebuild a failing instance with [`random_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub trial: usize,
    pub seed: u64,
    pub dims: InstanceDims,
    pub check: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    /// Trials small enough for exhaustive enumeration.
    pub enumerated: usize,
    /// Trials that also ran a `K <= 2` fast path.
    pub fast_path: usize,
    pub max_rel_logz_enum: f64,
    pub max_rel_logz_dense: f64,
    pub max_rel_logz_fast: f64,
    pub max_rel_logz_delta: f64,
    pub max_grad_diff: f64,
    pub viterbi_mismatches: usize,
    pub failures: Vec<FailureRow>,
}

impl EquivalenceReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Seed of trial `i`; the failure rows carry it directly.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64)
}

#[derive(Default)]
struct TrialOutcome {
    enumerated: bool,
    fast: bool,
    rel_enum: f64,
    rel_dense: f64,
    rel_fast: f64,
    rel_delta: f64,
    grad: f64,
    viterbi_mismatch: bool,
    failures: Vec<FailureRow>,
}

/// Enumeration (when small enough), dense, streaming over a checkpoint
/// sweep and the applicable fast path must agree on `logZ`; dense and
/// streaming on gradients; every backend on the Viterbi path.
pub fn backend_equivalence(cfg: &EquivalenceConfig) -> EquivalenceReport {
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials).into_par_iter().map(|i| run_trial(cfg, i)).collect();
    let mut report = EquivalenceReport {
        trials: cfg.trials,
        ..Default::default()
    };
    for o in outcomes {
        report.enumerated += o.enumerated as usize;
        report.fast_path += o.fast as usize;
        report.max_rel_logz_enum = report.max_rel_logz_enum.max(o.rel_enum);
        report.max_rel_logz_dense = report.max_rel_logz_dense.max(o.rel_dense);
        report.max_rel_logz_fast = report.max_rel_logz_fast.max(o.rel_fast);
        report.max_rel_logz_delta = report.max_rel_logz_delta.max(o.rel_delta);
        report.max_grad_diff = report.max_grad_diff.max(o.grad);
        report.viterbi_mismatches += o.viterbi_mismatch as usize;
        report.failures.extend(o.failures);
    }
    report
}

fn run_trial(cfg: &EquivalenceConfig, trial: usize) -> TrialOutcome {
    let seed = trial_seed(cfg.seed, trial);
    let inst = random_instance(seed, cfg.dims);
    let mut out = TrialOutcome::default();
    if let Err(e) = check_trial(cfg, &inst.scores, &inst.params, &mut out) {
        out.failures.push(FailureRow {
            trial,
            seed,
            dims: cfg.dims,
            check: "error".into(),
            detail: e.to_string(),
        });
    }
    for row in &mut out.failures {
        row.trial = trial;
        row.seed = seed;
    }
    out
}

fn check_trial(
    cfg: &EquivalenceConfig,
    s: &CumulativeScores,
    params: &SemiCrfParams,
    m: &mut TrialOutcome,
) -> Result<()> {
    // trial and seed are filled in by the caller
    let dims = cfg.dims;
    let mut failures = Vec::new();
    let mut fail = |check: &str, detail: String| {
        failures.push(FailureRow {
            trial: 0,
            seed: 0,
            dims,
            check: check.to_string(),
            detail,
        })
    };
    let result = compare_backends(cfg, s, params, m, &mut fail);
    m.failures.extend(failures);
    result
}

fn compare_backends(
    cfg: &EquivalenceConfig,
    s: &CumulativeScores,
    params: &SemiCrfParams,
    m: &mut TrialOutcome,
    fail: &mut dyn FnMut(&str, String),
) -> Result<()> {
    let opts = InferenceOptions::default();
    let dense = log_partition_engine(s, params, Engine::Dense, &opts)?;
    let streaming = log_partition_engine(s, params, Engine::Streaming, &opts)?;
    let batch = s.batch_size();
    let (k, c) = (params.max_duration(), params.num_labels());

    for b in 0..batch {
        let d = rel_diff(streaming[b], dense[b]);
        m.rel_dense = m.rel_dense.max(d);
        if d > cfg.logz_rel_tol {
            fail(
                "logz_dense_streaming",
                format!("b={b}: dense {} streaming {}", dense[b], streaming[b]),
            );
        }
    }

    let enumerable = s.lengths.iter().all(|&l| l <= ENUM_MAX_LEN) && k <= ENUM_MAX_K && c <= ENUM_MAX_C;
    if enumerable {
        m.enumerated = true;
        for b in 0..batch {
            let e = enumerate_log_z(s, params, b)?;
            for (name, v) in [("dense", dense[b]), ("streaming", streaming[b])] {
                let d = rel_diff(v, e);
                m.rel_enum = m.rel_enum.max(d);
                if d > cfg.logz_rel_tol {
                    fail("logz_enumeration", format!("b={b}: enumeration {e} {name} {v}"));
                }
            }
        }
    }

    let fast_engine = match dispatch(params) {
        BackendKind::Streaming => None,
        kind => Some(Engine::from(kind)),
    };
    if let Some(engine) = fast_engine {
        m.fast = true;
        let fast = log_partition_engine(s, params, engine, &opts)?;
        for b in 0..batch {
            let d = rel_diff(fast[b], streaming[b]);
            m.rel_fast = m.rel_fast.max(d);
            if d > cfg.logz_rel_tol {
                fail(
                    "logz_fast_path",
                    format!("b={b}: {engine} {} streaming {}", fast[b], streaming[b]),
                );
            }
        }
    }

    let t_max = s.max_len();
    let mut deltas = vec![1, 3.min(t_max), choose_checkpoint_interval(t_max, k), t_max];
    deltas.dedup();
    for delta in deltas {
        let o = InferenceOptions {
            delta: Some(delta),
            ..opts
        };
        let z = log_partition_engine(s, params, Engine::Streaming, &o)?;
        for b in 0..batch {
            let d = rel_diff(z[b], streaming[b]);
            m.rel_delta = m.rel_delta.max(d);
            if d > cfg.logz_rel_tol {
                fail(
                    "logz_delta_sweep",
                    format!("b={b}: delta={delta} {} vs {}", z[b], streaming[b]),
                );
            }
        }
    }

    let viterbi_dense = decode_engine(s, params, Engine::Dense, &opts)?;
    let mut others = vec![("streaming", decode_engine(s, params, Engine::Streaming, &opts)?)];
    if let Some(engine) = fast_engine {
        others.push(("fast_path", decode_engine(s, params, engine, &opts)?));
    }
    for (name, paths) in &others {
        for b in 0..batch {
            if paths[b] != viterbi_dense[b] {
                m.viterbi_mismatch = true;
                fail(
                    "viterbi",
                    format!("b={b}: {name} {:?} vs dense {:?}", paths[b], viterbi_dense[b]),
                );
            }
        }
    }
    if enumerable {
        for (b, (dseg, dscore)) in viterbi_dense.iter().enumerate().take(batch) {
            let (seg, score) = enumerate_max(s, params, b)?;
            if &seg != dseg || rel_diff(score, *dscore) > cfg.logz_rel_tol {
                m.viterbi_mismatch = true;
                fail(
                    "viterbi_enumeration",
                    format!("b={b}: enumeration {seg:?} {score} vs dense {dseg:?} {dscore}"),
                );
            }
        }
    }

    if cfg.gradients {
        let ones = vec![1.0; batch];
        let gd = forward_backward_engine(s, params, &ones, Engine::Dense, &opts, None)?.grads;
        let mut engines = vec![Engine::Streaming];
        engines.extend(fast_engine);
        for engine in engines {
            let g = forward_backward_engine(s, params, &ones, engine, &opts, None)?.grads;
            let d = g.max_abs_diff(&gd);
            m.grad = m.grad.max(d);
            if d > cfg.grad_tol {
                fail("gradients", format!("{engine} vs dense: max abs diff {d:e}"));
            }
        }
    }
    Ok(())
}

/// Synthetic training comparison settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch: usize,
    pub length: usize,
    pub num_labels: usize,
    pub max_duration: usize,
    /// Token vocabulary of the emission table.
    pub vocab: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train the emission table; otherwise only transitions and duration bias.
    pub train_emissions: bool,
    pub centering: CenteringMode,
}

impl TrainingConfig {
    /// Desk-sized default: `B=4, T=200, C=8, K=20`, 100 epochs.
    pub fn desk() -> Self {
        Self {
            batch: 4,
            length: 200,
            num_labels: 8,
            max_duration: 20,
            vocab: 32,
            epochs: 100,
            learning_rate: 0.05,
            seed: 0,
            train_emissions: true,
            centering: CenteringMode::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub backend: Backend,
    /// Mean NLL before training and after every epoch.
    pub losses: Vec<f64>,
    /// Epochs ending a run of 5 consecutive increases.
    pub divergences: Vec<usize>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainingConfig,
    pub curves: Vec<LossCurve>,
    /// Relative difference of each curve's final loss to the first curve's.
    pub final_rel_diff: Vec<f64>,
    /// Cosine similarity of each curve to the first curve.
    pub curve_cosine: Vec<f64>,
}

/// Token ids and gold segmentations for the training task. Tokens agree
/// with the gold label's vocabulary band 80% of the time.
pub fn training_data(cfg: &TrainingConfig) -> Result<(Array2<usize>, Vec<Segmentation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_labels;
    let band = (cfg.vocab / c).max(1);
    let mut tokens = Array2::<usize>::zeros((cfg.batch, cfg.length));
    let mut golds = Vec::with_capacity(cfg.batch);
    for b in 0..cfg.batch {
        let mut gen = ImbalancedConfig::new(cfg.length, vec![1.0 / c as f64; c], 1.0, rng.random());
        gen.max_duration = cfg.max_duration;
        gen.mean_duration = (cfg.max_duration as f64 / 2.0).max(1.0);
        let (_, gold) = generate_imbalanced(&gen)?;
        for (t, &label) in gold.position_labels().iter().enumerate() {
            tokens[[b, t]] = if rng.random_bool(0.8) {
                (label * band + rng.random_range(0..band)).min(cfg.vocab - 1)
            } else {
                rng.random_range(0..cfg.vocab)
            };
        }
        golds.push(gold);
    }
    Ok((tokens, golds))
}

struct Model {
    table: Array2<f64>,
    params: SemiCrfParams,
}

fn init_model(cfg: &TrainingConfig) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let c = cfg.num_labels;
    let table = Array2::from_shape_fn((cfg.vocab, c), |_| rng.random_range(-0.1..=0.1));
    let transition = Array2::from_shape_fn((c, c), |_| rng.random_range(-0.1..=0.1));
    let duration = Array2::from_shape_fn((cfg.max_duration, c), |_| rng.random_range(-0.1..=0.1));
    Model {
        table,
        params: SemiCrfParams::new(transition, duration).expect("finite"),
    }
}

fn emissions_of(table: &Array2<f64>, tokens: &Array2<usize>) -> Result<EmissionBatch> {
    let (batch, len) = tokens.dim();
    let c = table.dim().1;
    let scores = Array3::from_shape_fn((batch, len, c), |(b, t, l)| table[[tokens[[b, t]], l]]);
    EmissionBatch::new(scores, vec![len; batch])
}

/// Plain gradient descent on the mean NLL, once per backend, from the same
/// initialization.
pub fn training_convergence_demo(cfg: &TrainingConfig, backends: &[Backend]) -> Result<TrainingReport> {
    if cfg.vocab == 0 || cfg.num_labels == 0 || cfg.batch == 0 {
        return Err(Error::Contract("vocab, labels and batch must be positive".into()));
    }
    let (tokens, golds) = training_data(cfg)?;
    let weights = vec![1.0 / cfg.batch as f64; cfg.batch];
    let mut curves = Vec::with_capacity(backends.len());
    for &backend in backends {
        let opts = InferenceOptions::with_backend(backend);
        let mut model = init_model(cfg);
        let mut losses = Vec::with_capacity(cfg.epochs + 1);
        let mut divergences = Vec::new();
        let mut rising = 0;
        let started = std::time::Instant::now();
        for epoch in 0..=cfg.epochs {
            let raw = emissions_of(&model.table, &tokens)?;
            let centered = center_emissions(&raw, cfg.centering)?;
            let s = build_cumulative(&centered);
            let (nll, grads) = nll_with_gradient(&s, &model.params, &golds, &weights, &opts)?;
            let loss = nll.iter().sum::<f64>() / cfg.batch as f64;
            if let Some(&prev) = losses.last() {
                rising = if loss > prev { rising + 1 } else { 0 };
                if rising == 5 {
                    divergences.push(epoch);
                    rising = 0;
                }
            }
            losses.push(loss);
            if epoch == cfg.epochs {
                break;
            }
            let lr = cfg.learning_rate;
            if cfg.train_emissions {
                let d_emit = emission_gradient(&grads.cum_scores, &centered, &raw);
                for ((b, t, l), g) in d_emit.indexed_iter() {
                    model.table[[tokens[[b, t]], l]] -= lr * g;
                }
            }
            model.params.transition.scaled_add(-lr, &grads.transition);
            model.params.duration_bias.scaled_add(-lr, &grads.duration_bias);
        }
        curves.push(LossCurve {
            backend,
            losses,
            divergences,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    let (final_rel_diff, curve_cosine) = match curves.first() {
        Some(first) => curves
            .iter()
            .map(|c| {
                let (a, b) = (*c.losses.last().unwrap(), *first.losses.last().unwrap());
                (
                    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE),
                    cosine(&c.losses, &first.losses),
                )
            })
            .unzip(),
        None => (Vec::new(), Vec::new()),
    };
    Ok(TrainingReport {
        config: cfg.clone(),
        curves,
        final_rel_diff,
        curve_cosine,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else {
        dot / (na * nb).max(f64::MIN_POSITIVE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::cumulative_from_emissions;

    /// `E[#segments]` under zero parameters: compositions of `len` into parts
    /// of size `<= k`, each part weighted by `c`.
    fn expected_segments_uniform(len: usize, k: usize, c: usize) -> f64 {
        // count[n] = weighted number of compositions, segs[n] = weighted segment total
        let (mut count, mut segs) = (vec![0.0f64; len + 1], vec![0.0f64; len + 1]);
        count[0] = 1.0;
        for n in 1..=len {
            for d in 1..=k.min(n) {
                count[n] += c as f64 * count[n - d];
                segs[n] += c as f64 * (segs[n - d] + count[n - d]);
            }
        }
        segs[len] / count[len]
    }

    #[test]
    fn zero_parameters_match_uniform_closed_form() {
        let (len, k, c) = (7, 3, 2);
        let emissions = EmissionBatch::new(Array3::zeros((1, len, c)), vec![len]).unwrap();
        let s = cumulative_from_emissions(&emissions, CenteringMode::None).unwrap();
        let params = SemiCrfParams::zeros(c, k);
        let report = finite_diff_gradcheck(&s, &params, &GradcheckOptions::default()).unwrap();
        assert!(report.pass(), "{report:?}");
        let g = forward_backward(&s, &params, None, &InferenceOptions::default(), None)
            .unwrap()
            .grads;
        let per_pair = expected_segments_uniform(len, k, c) / (c * c) as f64;
        for v in g.transition.iter() {
            assert!((v - per_pair).abs() < 1e-12, "{v} vs {per_pair}");
        }
    }

    #[test]
    fn gradcheck_small_random_with_extras() {
        let inst = random_instance(3, InstanceDims::exact(9, 3, 3, 2).with_projections());
        let params = inst
            .params
            .clone()
            .with_scalar_boundaries(ndarray::array![0.3, -0.2, 0.1], ndarray::array![-0.4, 0.0, 0.25]);
        let report = finite_diff_gradcheck(&inst.scores, &params, &GradcheckOptions::default()).unwrap();
        assert_eq!(report.tensors.len(), 7);
        assert!(report.pass(), "{report:?}");
    }

    #[test]
    fn gradcheck_guard_refuses() {
        let inst = random_instance(1, InstanceDims::exact(200, 25, 16, 1));
        let err = finite_diff_gradcheck(&inst.scores, &inst.params, &GradcheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::GradcheckGuard { .. }));
    }

    #[test]
    fn equivalence_small_campaign() {
        let report = backend_equivalence(&EquivalenceConfig::new(40, InstanceDims::up_to(6, 3, 3), 7));
        assert!(report.pass(), "{:?}", report.failures);
        assert!(report.enumerated == 40);
        assert!(report.fast_path > 0);
    }

    #[test]
    fn failure_rows_replay() {
        // an impossible tolerance forces failures; each row rebuilds its instance
        let mut cfg = EquivalenceConfig::new(5, InstanceDims::up_to(8, 4, 3), 11);
        cfg.logz_rel_tol = -1.0;
        let report = backend_equivalence(&cfg);
        assert!(!report.failures.is_empty());
        for row in &report.failures {
            assert_eq!(row.seed, trial_seed(11, row.trial));
            let a = random_instance(row.seed, row.dims);
            let b = random_instance(trial_seed(cfg.seed, row.trial), cfg.dims);
            assert_eq!(a.scores, b.scores);
        }
    }

    #[test]
    fn zero_epochs_identical_initial_loss() {
        let cfg = TrainingConfig {
            epochs: 0,
            length: 40,
            num_labels: 3,
            max_duration: 5,
            vocab: 9,
            ..TrainingConfig::desk()
        };
        let report = training_convergence_demo(&cfg, &[Backend::Dense, Backend::Streaming]).unwrap();
        assert_eq!(report.curves[0].losses.len(), 1);
        let (a, b) = (report.curves[0].losses[0], report.curves[1].losses[0]);
        assert!(rel_diff(a, b) < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn convex_training_is_monotone() {
        let cfg = TrainingConfig {
            epochs: 15,
            length: 30,
            num_labels: 3,
            max_duration: 4,
            vocab: 6,
            batch: 2,
            learning_rate: 0.01,
            train_emissions: false,
            ..TrainingConfig::desk()
        };
        let report = training_convergence_demo(&cfg, &[Backend::Streaming]).unwrap();
        let losses = &report.curves[0].losses;
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{losses:?}");
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }
}
