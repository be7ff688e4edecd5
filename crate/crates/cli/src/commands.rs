use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use serde_json::json;
use streamcrf::banded::{best_ratio_by_class, clique_lower_bound, rcm_bandwidth_report, BandwidthRow};
use streamcrf::datagen::{centering_ablation, cumulative_growth, ImbalancedConfig};
use streamcrf::instances::{random_instance, InstanceDims};
use streamcrf::io::{decoded_sequences, read_emissions, read_params, write_json, MarginalsFile};
use streamcrf::reference::DenseGuard;
use streamcrf::validation::{
    backend_equivalence, finite_diff_gradcheck, training_convergence_demo, EquivalenceConfig, GradcheckOptions,
    TrainingConfig,
};
use streamcrf::{
    cumulative_from_emissions, decode as viterbi, forward_backward, log_partition, self_consistency_report, Backend,
    CenteringMode, Engine, Error, InferenceOptions, MemoryTracker, Tolerances,
};

use crate::args::{
    AblateArgs, BandwidthArgs, BenchArgs, DecodeArgs, GradcheckArgs, OracleArgs, SelfcheckArgs, TrainArgs,
};
use crate::output::Report;

/// Inference options honouring the dense-guard environment override.
fn options(backend: Backend, delta: Option<usize>) -> InferenceOptions {
    InferenceOptions {
        backend,
        delta,
        guard: DenseGuard::from_env(),
    }
}

/// Rejects zero sizes before they reach the instance generators.
fn positive(dims: &[(&str, usize)]) -> anyhow::Result<()> {
    match dims.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => anyhow::bail!("--{name} must be at least 1"),
        None => Ok(()),
    }
}

/// Median wall time in milliseconds of `repeats` runs after one warmup.
fn median_ms(repeats: usize, mut run: impl FnMut() -> streamcrf::Result<()>) -> streamcrf::Result<f64> {
    run()?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let started = Instant::now();
        run()?;
        times.push(started.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

#[derive(Debug, Serialize)]
struct BenchRow {
    backend: String,
    status: &'static str,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "B")]
    b: usize,
    wall_ms_forward: Option<f64>,
    wall_ms_backward: Option<f64>,
    peak_working_bytes: Option<usize>,
    positions_per_sec: Option<f64>,
}

fn bench_one(a: &BenchArgs, backend: Backend, t: usize, k: usize, c: usize) -> anyhow::Result<BenchRow> {
    let mut row = BenchRow {
        backend: backend.to_string(),
        status: "ok",
        t,
        k,
        c,
        b: a.b,
        wall_ms_forward: None,
        wall_ms_backward: None,
        peak_working_bytes: None,
        positions_per_sec: None,
    };
    let opts = options(backend, a.delta);
    if backend == Backend::Dense && opts.guard.check(a.b, t, k, c).is_err() {
        row.status = "OOM-GUARD";
        return Ok(row);
    }
    let inst = random_instance(a.seed, InstanceDims::exact(t, k, c, a.b));
    row.backend = opts.resolve(&inst.params).to_string();

    let tracker = MemoryTracker::new();
    forward_backward(&inst.scores, &inst.params, None, &opts, Some(&tracker))?;
    let forward = median_ms(a.repeats, || log_partition(&inst.scores, &inst.params, &opts).map(drop))?;
    let both = median_ms(a.repeats, || {
        forward_backward(&inst.scores, &inst.params, None, &opts, None).map(drop)
    })?;
    let backward = (both - forward).max(0.0);
    row.wall_ms_forward = Some(forward);
    row.wall_ms_backward = Some(backward);
    row.peak_working_bytes = Some(tracker.report().total);
    row.positions_per_sec = Some((a.b * t) as f64 / ((forward + backward) / 1e3).max(f64::MIN_POSITIVE));
    Ok(row)
}

pub fn bench(a: &BenchArgs) -> anyhow::Result<Report> {
    positive(&[("B", a.b)])?;
    for (name, list) in [("T", &a.t), ("K", &a.k), ("C", &a.c)] {
        anyhow::ensure!(!list.is_empty(), "--{name} needs at least one value");
        list.iter().try_for_each(|&v| positive(&[(name, v)]))?;
    }
    let mut rows = Vec::new();
    for &backend in &a.backend {
        for &k in &a.k {
            for &c in &a.c {
                for &t in &a.t {
                    rows.push(bench_one(a, backend, t, k, c).with_context(|| format!("{backend} T={t} K={k} C={c}"))?);
                }
            }
        }
    }
    Report::new(&json!({ "rows": rows }), &rows)
}

pub fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<Report> {
    positive(&[("T", a.t), ("K", a.k), ("C", a.c), ("B", a.b)])?;
    let mut dims = InstanceDims::exact(a.t, a.k, a.c, a.b);
    if a.projections {
        dims = dims.with_projections();
    }
    let inst = random_instance(a.seed, dims);
    let opts = GradcheckOptions {
        eps: a.eps,
        inference: options(a.backend, None),
        ..GradcheckOptions::default()
    };
    let started = Instant::now();
    let report = finite_diff_gradcheck(&inst.scores, &inst.params, &opts)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut out = Report::new(
        &json!({ "dims": dims, "seed": a.seed, "wall_ms": wall_ms, "report": report }),
        &report.tensors,
    )?;
    for t in &report.tensors {
        out.check(t.pass, format!("gradcheck:{}", t.name));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct OracleFailureRow<'a> {
    trial: usize,
    seed: u64,
    t_max: usize,
    k: usize,
    c: usize,
    batch: usize,
    check: &'a str,
    detail: &'a str,
}

pub fn oracle(a: &OracleArgs) -> anyhow::Result<Report> {
    positive(&[("T", a.t), ("K", a.k), ("C", a.c)])?;
    let mut cfg = EquivalenceConfig::new(a.trials, InstanceDims::up_to(a.t, a.k, a.c), a.seed);
    cfg.logz_rel_tol = a.logz_tol;
    cfg.grad_tol = a.grad_tol;
    cfg.gradients = !a.no_gradients;
    let started = Instant::now();
    let report = backend_equivalence(&cfg);
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let rows: Vec<OracleFailureRow> = report
        .failures
        .iter()
        .map(|f| OracleFailureRow {
            trial: f.trial,
            seed: f.seed,
            t_max: f.dims.t_max,
            k: f.dims.k,
            c: f.dims.c,
            batch: f.dims.batch,
            check: &f.check,
            detail: &f.detail,
        })
        .collect();
    let mut out = Report::new(&json!({ "config": cfg, "wall_ms": wall_ms, "report": report }), &rows)?;
    for f in &report.failures {
        out.check(false, format!("trial {} (seed {}): {}", f.trial, f.seed, f.check));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct LossRow {
    backend: Backend,
    epoch: usize,
    loss: f64,
}

pub fn train_demo(a: &TrainArgs) -> anyhow::Result<Report> {
    positive(&[("T", a.t), ("K", a.k), ("C", a.c), ("B", a.b), ("vocab", a.vocab)])?;
    anyhow::ensure!(!a.backend.is_empty(), "--backend needs at least one value");
    let cfg = TrainingConfig {
        batch: a.b,
        length: a.t,
        num_labels: a.c,
        max_duration: a.k,
        vocab: a.vocab,
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        train_emissions: true,
        centering: a.centering,
    };
    let report = training_convergence_demo(&cfg, &a.backend)?;
    let rows: Vec<LossRow> = report
        .curves
        .iter()
        .flat_map(|curve| {
            curve.losses.iter().enumerate().map(|(epoch, &loss)| LossRow {
                backend: curve.backend,
                epoch,
                loss,
            })
        })
        .collect();
    let mut out = Report::new(&json!({ "report": report }), &rows)?;
    for (i, curve) in report.curves.iter().enumerate().skip(1) {
        out.check(
            report.final_rel_diff[i] < a.final_tol,
            format!(
                "final loss of {} differs from {}",
                curve.backend, report.curves[0].backend
            ),
        );
        out.check(
            report.curve_cosine[i] >= a.min_cosine,
            format!(
                "loss curve of {} diverges from {}",
                curve.backend, report.curves[0].backend
            ),
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct CountRow {
    mode: CenteringMode,
    label: usize,
    count: usize,
    gold: usize,
}

pub fn ablate_centering(a: &AblateArgs) -> anyhow::Result<Report> {
    let cfg = ImbalancedConfig::new(a.t, a.proportions.clone(), a.gain, a.seed);
    let report = centering_ablation(&cfg, &CenteringMode::ALL)?;
    let growth = if a.growth_t > 0 {
        cumulative_growth(a.growth_t, cfg.num_labels(), a.growth_mean, &CenteringMode::ALL, a.seed)?
    } else {
        Vec::new()
    };
    let rows: Vec<CountRow> = report
        .modes
        .iter()
        .flat_map(|m| {
            m.counts.iter().enumerate().map(|(label, &count)| CountRow {
                mode: m.mode,
                label,
                count,
                gold: report.gold_counts[label],
            })
        })
        .collect();
    Report::new(&json!({ "report": report, "growth": growth }), &rows)
}

pub fn bandwidth(a: &BandwidthArgs) -> anyhow::Result<Report> {
    a.k.iter().try_for_each(|&k| positive(&[("K", k)]))?;
    a.c.iter().try_for_each(|&c| positive(&[("C", c)]))?;
    let mut rows: Vec<BandwidthRow> = Vec::new();
    for &k in &a.k {
        for &c in &a.c {
            let spans: Vec<usize> = (1..=a.max_span.unwrap_or(2 * k + 2)).collect();
            rows.extend(rcm_bandwidth_report(&spans, k, c));
        }
    }
    let classes: Vec<_> = best_ratio_by_class(&rows)
        .into_iter()
        .map(|(class, lo, hi)| json!({ "span_class": class, "best_ratio_min": lo, "best_ratio_max": hi }))
        .collect();
    let mut out = Report::new(&json!({ "rows": rows, "by_class": classes }), &rows)?;
    // The clique bound is only meaningful while the compatible pairs form a clique.
    for r in rows.iter().filter(|r| r.span <= 2 * r.k) {
        out.check(
            r.bw as i64 >= clique_lower_bound(r.span, r.c),
            format!(
                "{} ordering beats the clique bound at S={} K={} C={}",
                r.ordering, r.span, r.k, r.c
            ),
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SegmentRow {
    b: usize,
    start: usize,
    duration: usize,
    label: usize,
    score: f64,
}

pub fn decode(a: &DecodeArgs) -> anyhow::Result<Report> {
    let params = read_params(&a.params).with_context(|| format!("reading {}", a.params.display()))?;
    let emissions = read_emissions(&a.emissions).with_context(|| format!("reading {}", a.emissions.display()))?;
    let scores = cumulative_from_emissions(&emissions, a.centering)?;
    let opts = options(a.backend, a.delta);
    let paths = viterbi(&scores, &params, &opts)?;
    let sequences = decoded_sequences(&paths);
    let mut doc = json!({ "centering": a.centering, "sequences": sequences });
    if let Some(path) = &a.marginals {
        let inf = forward_backward(&scores, &params, None, &opts, None)?;
        write_json(path, &MarginalsFile::from_set(&inf.marginals))?;
        doc["log_z"] = json!(inf.log_z);
        doc["engine"] = json!(inf.engine);
    }
    let rows: Vec<SegmentRow> = sequences
        .iter()
        .flat_map(|s| {
            s.segments.iter().map(|seg| SegmentRow {
                b: s.b,
                start: seg.start,
                duration: seg.duration,
                label: seg.label,
                score: s.score,
            })
        })
        .collect();
    Report::new(&doc, &rows)
}

pub fn selfcheck(a: &SelfcheckArgs) -> anyhow::Result<Report> {
    positive(&[("T", a.t), ("K", a.k), ("C", a.c), ("B", a.b)])?;
    let dims = InstanceDims::exact(a.t, a.k, a.c, a.b).with_ragged(a.ragged);
    let inst = random_instance(a.seed, dims);
    let opts = options(a.backend, a.delta);
    let inf = forward_backward(&inst.scores, &inst.params, None, &opts, None)?;
    if inf.log_z.iter().any(|z| !z.is_finite()) {
        return Err(Error::Contract("non-finite log-partition".into()).into());
    }
    let tol = Tolerances {
        normalization: a.normalization_tol,
        mass: a.mass_tol,
        ..Tolerances::default()
    };
    let report = self_consistency_report(&inf.marginals, &tol);
    let engine: Engine = inf.engine;
    let mut out = Report::new(
        &json!({
            "dims": dims,
            "seed": a.seed,
            "engine": engine,
            "lengths": inst.scores.lengths,
            "log_z": inf.log_z,
            "expected_segments": inf.marginals.expected_segments,
            "clamp_events": inf.clamp_events,
            "report": report,
        }),
        &report.checks,
    )?;
    for c in &report.checks {
        out.check(
            c.pass,
            format!(
                "{}: deviation {:e} above {:e}",
                c.invariant, c.max_deviation, c.tolerance
            ),
        );
    }
    Ok(out)
}
