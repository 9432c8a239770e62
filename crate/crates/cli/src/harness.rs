//! Runs, metrics and CSV output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use plp_core::pattern::{monte_carlo_oracle, PatternCollection, PatternProblem};
use plp_core::plp::{format_events, ControlLog, LoggedController, PlpEvent};
use plp_core::sls::{synthesize, validate_achievability, validate_closed_loop};
use plp_core::system::{simulate, Controller, DisturbanceModel, Trajectory};
use plp_core::{DVector, Error};

use crate::config::{ConfigError, ControllerKind, ExperimentConfig};
use crate::scenario::{Realization, Scenario};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{controller} diverged or failed on seed {seed}: {error}")]
    Runtime {
        controller: &'static str,
        seed: u64,
        error: Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime { .. } => 3,
            _ => 1,
        }
    }
}

/// Summary metrics of one controller on one realisation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub controller: &'static str,
    pub seed: u64,
    pub steps: usize,
    pub switches: usize,
    /// `sum_t |u[t]|^2`
    pub effort: f64,
    pub peak_state: f64,
    /// Peak of `|x|` over the windows following each true switch.
    pub peak_post_switch: f64,
    pub rms_post_switch: f64,
    pub synth_count: usize,
    pub model_syntheses: usize,
    pub data_syntheses: usize,
    pub synth_ms: f64,
    /// Fraction of steps whose estimate equals the true mode.
    pub mode_id_accuracy: f64,
    /// Fraction of scored predictions whose pattern occurred first; empty when
    /// nothing was predicted.
    pub prediction_hit_rate: Option<f64>,
    pub realization_hash: String,
}

pub struct RunOutput {
    pub kind: ControllerKind,
    pub seed: u64,
    pub trajectory: Trajectory,
    pub log: ControlLog,
    pub metrics: RunMetrics,
    pub error: Option<Error>,
}

/// Wraps a controller and fails once the state leaves the divergence ball.
struct Guard<'a> {
    inner: &'a mut dyn LoggedController,
    threshold: f64,
}

impl Controller for Guard<'_> {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> plp_core::Result<DVector<f64>> {
        if !(x.amax() <= self.threshold) {
            return Err(Error::Divergence { step: t });
        }
        self.inner.control(t, x)
    }
}

/// Epoch index of every step for a realised mode sequence.
fn epoch_of_step(modes: &[usize], dwell_switches: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(modes.len());
    let mut e = 0;
    let mut next = dwell_switches.iter().peekable();
    for t in 0..modes.len() {
        while next.peek().is_some_and(|&&s| s <= t) {
            next.next();
            e += 1;
        }
        out.push(e);
    }
    out
}

/// Prediction accuracy: for each refreshed prediction, whether the predicted
/// pattern is the first to complete in the realised sequence of later mode
/// epochs. Predictions with no completion before the run ends are not scored.
pub fn prediction_hit_rate(log: &ControlLog, realization: &Realization, patterns: &PatternCollection) -> Option<f64> {
    let seq = &realization.modes;
    // Distinct-mode epochs with their start steps.
    let mut starts = vec![0];
    starts.extend(seq.switch_times.iter().copied());
    let epoch_modes: Vec<usize> = starts.iter().map(|&s| seq.modes[s]).collect();
    let epoch_idx = epoch_of_step(&seq.modes, &seq.switch_times);
    let l = patterns.pattern_len();
    let mut scored = 0usize;
    let mut hits = 0usize;
    for rec in &log.records {
        for ev in &rec.events {
            let PlpEvent::PredictionRefreshed { k, .. } = ev else { continue };
            let Some(&e) = epoch_idx.get(rec.step) else { continue };
            let future = &epoch_modes[e + 1..];
            let first = (l..=future.len()).find_map(|end| patterns.find(&future[end - l..end]));
            if let Some(first) = first {
                scored += 1;
                if first == *k {
                    hits += 1;
                }
            }
        }
    }
    (scored > 0).then(|| hits as f64 / scored as f64)
}

pub fn compute_metrics(
    kind: ControllerKind,
    traj: &Trajectory,
    log: &ControlLog,
    realization: &Realization,
    window: usize,
    patterns: Option<&PatternCollection>,
) -> RunMetrics {
    let effort: f64 = traj.inputs.iter().map(|u| u.norm_squared()).sum();
    let peak_state = traj.states.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let mut peak = 0.0_f64;
    let mut sq = 0.0;
    let mut count = 0usize;
    for &s in &traj.switch_times {
        for x in traj.states.iter().skip(s + 1).take(window) {
            let n = x.norm();
            peak = peak.max(n);
            sq += n * n;
            count += 1;
        }
    }
    let correct = log
        .records
        .iter()
        .zip(&traj.true_modes)
        .filter(|(r, &m)| r.est_mode == m)
        .count();
    let steps = traj.inputs.len();
    RunMetrics {
        controller: kind.name(),
        seed: realization.seed,
        steps,
        switches: traj.switch_times.len(),
        effort,
        peak_state,
        peak_post_switch: peak,
        rms_post_switch: if count > 0 { (sq / count as f64).sqrt() } else { 0.0 },
        synth_count: log.synth_count(),
        model_syntheses: log.model_syntheses,
        data_syntheses: log.data_syntheses,
        synth_ms: log.synth_ms,
        mode_id_accuracy: if steps > 0 { correct as f64 / steps as f64 } else { 1.0 },
        prediction_hit_rate: match (kind, patterns) {
            (ControllerKind::Plp, Some(p)) => prediction_hit_rate(log, realization, p),
            _ => None,
        },
        realization_hash: realization.hash.clone(),
    }
}

/// Runs one controller on one realisation. Failures keep the partial
/// trajectory and the log up to the failure.
pub fn run_single(scenario: &Scenario, realization: &Realization, kind: ControllerKind, true_modes: bool) -> Result<RunOutput, HarnessError> {
    let modes = &realization.modes.modes;
    let mut ctrl = scenario.controller(kind, true_modes.then_some(modes.as_slice()))?;
    let mut guard = Guard {
        inner: ctrl.as_mut(),
        threshold: scenario.config.divergence_threshold,
    };
    let dist = DisturbanceModel::Sequence(realization.disturbances.clone());
    let x0 = scenario.initial_state();
    let (trajectory, error) = match simulate(&scenario.system, modes, &mut guard, &dist, &x0, scenario.config.steps, 0) {
        Ok(t) => (t, None),
        Err(f) => (*f.partial, Some(f.error)),
    };
    let log = ctrl.log().clone();
    let metrics = compute_metrics(kind, &trajectory, &log, realization, scenario.post_switch_window(), scenario.patterns.as_ref());
    Ok(RunOutput {
        kind,
        seed: realization.seed,
        trajectory,
        log,
        metrics,
        error,
    })
}

/// Formats a float so that equal values always print identically.
fn num(v: f64) -> String {
    format!("{v:.12e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Writes through a temporary file and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
}

pub const STEP_HEADER: [&str; 9] = [
    "t",
    "true_mode",
    "est_mode",
    "state_norm",
    "input_norm",
    "cum_effort",
    "synth_count",
    "cum_synth_ms",
    "event",
];

pub fn step_csv(run: &RunOutput) -> Result<Vec<u8>, HarnessError> {
    let tr = &run.trajectory;
    let mut cum_effort = 0.0;
    let mut cum_count = 0usize;
    let mut cum_ms = 0.0;
    let rows = (0..tr.inputs.len()).map(|t| {
        let u = &tr.inputs[t];
        cum_effort += u.norm_squared();
        let rec = run.log.records.get(t);
        if let Some(r) = rec {
            cum_count += r.syntheses;
            cum_ms += r.synth_ms;
        }
        vec![
            t.to_string(),
            tr.true_modes[t].to_string(),
            rec.map(|r| r.est_mode.to_string()).unwrap_or_default(),
            num(tr.states[t].norm()),
            num(u.norm()),
            num(cum_effort),
            cum_count.to_string(),
            num(cum_ms),
            rec.map(|r| format_events(&r.events)).unwrap_or_default(),
        ]
    });
    csv_bytes(&STEP_HEADER, rows)
}

pub const PROVENANCE_HEADER: [&str; 8] = [
    "step",
    "event",
    "mode_estimate",
    "true_mode",
    "cache_hit",
    "synth_ms",
    "predictor_k",
    "predicted_Etau",
];

/// One line per step that produced events.
pub fn provenance_csv(run: &RunOutput) -> Result<Vec<u8>, HarnessError> {
    let rows = run.log.records.iter().filter(|r| !r.events.is_empty()).map(|r| {
        vec![
            r.step.to_string(),
            format_events(&r.events),
            r.est_mode.to_string(),
            run.trajectory.true_modes.get(r.step).map(|m| m.to_string()).unwrap_or_default(),
            r.cache_hit.map(|h| h.to_string()).unwrap_or_default(),
            num(r.synth_ms),
            r.predictor_k.map(|k| k.to_string()).unwrap_or_default(),
            opt_num(r.predicted_tau),
        ]
    });
    csv_bytes(&PROVENANCE_HEADER, rows)
}

const METRIC_HEADER: [&str; 16] = [
    "controller",
    "seed",
    "steps",
    "switches",
    "effort",
    "peak_state",
    "peak_post_switch",
    "rms_post_switch",
    "synth_count",
    "model_syntheses",
    "data_syntheses",
    "synth_ms",
    "mode_id_accuracy",
    "prediction_hit_rate",
    "realization_hash",
    "status",
];

fn metric_row(run: &RunOutput) -> Vec<String> {
    let m = &run.metrics;
    vec![
        m.controller.to_string(),
        m.seed.to_string(),
        m.steps.to_string(),
        m.switches.to_string(),
        num(m.effort),
        num(m.peak_state),
        num(m.peak_post_switch),
        num(m.rms_post_switch),
        m.synth_count.to_string(),
        m.model_syntheses.to_string(),
        m.data_syntheses.to_string(),
        num(m.synth_ms),
        num(m.mode_id_accuracy),
        opt_num(m.prediction_hit_rate),
        m.realization_hash.clone(),
        match &run.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {e}"),
        },
    ]
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

type Extract = fn(&RunMetrics) -> Option<f64>;

const SUMMARY_METRICS: [(&str, Extract); 10] = [
    ("effort", |m| Some(m.effort)),
    ("peak_state", |m| Some(m.peak_state)),
    ("peak_post_switch", |m| Some(m.peak_post_switch)),
    ("rms_post_switch", |m| Some(m.rms_post_switch)),
    ("synth_count", |m| Some(m.synth_count as f64)),
    ("synth_ms", |m| Some(m.synth_ms)),
    ("mode_id_accuracy", |m| Some(m.mode_id_accuracy)),
    ("prediction_hit_rate", |m| m.prediction_hit_rate),
    ("switches", |m| Some(m.switches as f64)),
    ("steps", |m| Some(m.steps as f64)),
];

/// One row per controller: `mean` and `sd` columns for each metric.
pub fn summary_csv(runs: &[RunOutput], kinds: &[ControllerKind]) -> Result<Vec<u8>, HarnessError> {
    let mut header = vec!["controller".to_string(), "runs".to_string()];
    for (name, _) in SUMMARY_METRICS {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_sd"));
    }
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = kinds.iter().map(|&k| {
        let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.kind == k).map(|r| &r.metrics).collect();
        let mut row = vec![k.name().to_string(), mine.len().to_string()];
        for (_, f) in SUMMARY_METRICS {
            let vals: Vec<f64> = mine.iter().filter_map(|m| f(m)).collect();
            if vals.is_empty() {
                row.extend([String::new(), String::new()]);
            } else {
                let (mu, sd) = mean_sd(&vals);
                row.extend([num(mu), num(sd)]);
            }
        }
        row
    });
    csv_bytes(&header_ref, rows)
}

/// Everything a comparison produced.
pub struct CompareOutput {
    pub runs: Vec<RunOutput>,
    pub realizations: Vec<Realization>,
}

impl CompareOutput {
    pub fn metrics(&self, kind: ControllerKind) -> Vec<&RunMetrics> {
        self.runs.iter().filter(|r| r.kind == kind).map(|r| &r.metrics).collect()
    }

    pub fn first_failure(&self) -> Option<&RunOutput> {
        self.runs.iter().find(|r| r.error.is_some())
    }
}

/// Runs every configured controller on every seed's shared realisation.
/// Seeds run in parallel; results come back in (seed, controller) order.
pub fn run_compare(scenario: &Scenario, seeds: &[u64], kinds: &[ControllerKind], true_modes: bool) -> Result<CompareOutput, HarnessError> {
    let per_seed: Vec<Result<(Realization, Vec<RunOutput>), HarnessError>> = seeds
        .par_iter()
        .map(|&seed| {
            let real = scenario.realize(seed)?;
            let runs = kinds
                .iter()
                .map(|&k| run_single(scenario, &real, k, true_modes))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((real, runs))
        })
        .collect();
    let mut runs = Vec::new();
    let mut realizations = Vec::new();
    for r in per_seed {
        let (real, rs) = r?;
        realizations.push(real);
        runs.extend(rs);
    }
    Ok(CompareOutput { runs, realizations })
}

/// Writes per-run step and provenance CSVs, `runs.csv`, `summary.csv` and
/// `realizations.csv` into `dir`.
pub fn write_compare(out: &CompareOutput, kinds: &[ControllerKind], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<(), HarnessError> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    for run in &out.runs {
        put(format!("{}_seed{}.csv", run.kind.name(), run.seed), step_csv(run)?)?;
        put(format!("{}_seed{}_provenance.csv", run.kind.name(), run.seed), provenance_csv(run)?)?;
    }
    put("runs.csv".into(), csv_bytes(&METRIC_HEADER, out.runs.iter().map(metric_row))?)?;
    put("summary.csv".into(), summary_csv(&out.runs, kinds)?)?;
    let reals = out.realizations.iter().map(|r| vec![r.seed.to_string(), r.modes.switch_times.len().to_string(), r.hash.clone()]);
    put("realizations.csv".into(), csv_bytes(&["seed", "switches", "hash"], reals)?)?;
    Ok(written)
}

/// Compare and write; runtime failures are reported after all outputs are flushed.
pub fn compare_to_dir(config: &ExperimentConfig, seeds: &[u64], dir: &Path, true_modes: bool) -> Result<CompareOutput, HarnessError> {
    let scenario = Scenario::build(config)?;
    let out = run_compare(&scenario, seeds, &config.controllers, true_modes)?;
    write_compare(&out, &config.controllers, dir)?;
    if let Some(f) = out.first_failure() {
        return Err(HarnessError::Runtime {
            controller: f.kind.name(),
            seed: f.seed,
            error: f.error.clone().expect("failure"),
        });
    }
    Ok(out)
}

pub const PATTERN_HEADER: [&str; 6] = ["quantity", "index", "closed_form", "oracle_mean", "oracle_se", "pass"];

#[derive(Debug, Clone, PartialEq)]
pub struct PatternStatRow {
    pub quantity: &'static str,
    pub index: Option<usize>,
    pub closed_form: f64,
    pub oracle_mean: Option<f64>,
    pub oracle_se: Option<f64>,
    pub pass: Option<bool>,
}

/// Within three standard errors; a zero standard error demands agreement to 1e-9.
pub fn within_3se(closed: f64, mean: f64, se: f64) -> bool {
    (closed - mean).abs() <= (3.0 * se).max(1e-9)
}

/// Closed-form `E[tau]` and `q` against the Monte Carlo oracle (skipped when
/// `trials == 0`). The chain's initial mode is the conditioning mode.
pub fn pattern_stats(config: &ExperimentConfig, trials: usize, seed: u64) -> Result<Vec<PatternStatRow>, HarnessError> {
    let tpm = config.tpm()?;
    let Some(spec) = &config.patterns else {
        return Err(ConfigError::Invalid("`patterns` is required".into()).into());
    };
    let psi = PatternCollection::new(spec.patterns.clone(), tpm.nrows()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let phi0 = config.chain.initial_mode;
    let stats = PatternProblem::new(&tpm, psi.clone(), phi0)?.solve()?;
    let oracle = if trials > 0 { Some(monte_carlo_oracle(&tpm, &psi, phi0, trials, seed)?) } else { None };
    let mut rows = vec![PatternStatRow {
        quantity: "expected_tau",
        index: None,
        closed_form: stats.expected_tau,
        oracle_mean: oracle.as_ref().map(|o| o.mean_tau),
        oracle_se: oracle.as_ref().and_then(|o| o.se_tau),
        pass: oracle.as_ref().map(|o| within_3se(stats.expected_tau, o.mean_tau, o.se_tau.unwrap_or(0.0))),
    }];
    for (k, &q) in stats.q.iter().enumerate() {
        rows.push(PatternStatRow {
            quantity: "q",
            index: Some(k),
            closed_form: q,
            oracle_mean: oracle.as_ref().map(|o| o.q[k]),
            oracle_se: oracle.as_ref().and_then(|o| o.q_se[k]),
            pass: oracle.as_ref().map(|o| within_3se(q, o.q[k], o.q_se[k].unwrap_or(0.0))),
        });
    }
    Ok(rows)
}

pub fn pattern_stats_csv(rows: &[PatternStatRow]) -> Result<Vec<u8>, HarnessError> {
    csv_bytes(
        &PATTERN_HEADER,
        rows.iter().map(|r| {
            vec![
                r.quantity.to_string(),
                r.index.map(|k| k.to_string()).unwrap_or_default(),
                num(r.closed_form),
                opt_num(r.oracle_mean),
                opt_num(r.oracle_se),
                r.pass.map(|p| p.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlsCheckRow {
    pub design: String,
    pub plant: usize,
    pub residual: f64,
    pub impulse_deviation: f64,
    pub post_horizon_peak: f64,
    pub support_violation: f64,
    pub pass: bool,
}

/// Synthesises every mode's response (and the robust one) and checks
/// achievability and the closed-loop impulse behaviour against each plant.
pub fn sls_check(config: &ExperimentConfig, tol: f64) -> Result<Vec<SlsCheckRow>, HarnessError> {
    let scenario = Scenario::build(config)?;
    let mut rows = Vec::new();
    for (m, p) in scenario.problems.iter().enumerate() {
        let resp = synthesize(p)?;
        let residual = validate_achievability(&resp, &p.a, &p.b)?;
        let cl = validate_closed_loop(&resp, &p.a, &p.b, 4, m as u64)?;
        let support_violation = resp.support_violation();
        rows.push(SlsCheckRow {
            design: format!("mode{m}"),
            plant: m,
            residual,
            impulse_deviation: cl.impulse_deviation,
            post_horizon_peak: cl.post_horizon_peak,
            support_violation,
            pass: residual <= tol && cl.impulse_deviation <= tol && cl.post_horizon_peak <= tol && support_violation == 0.0,
        });
    }
    let robust = plp_core::sls::synthesize_robust(&scenario.robust_problems)?;
    for (m, p) in scenario.robust_problems.iter().enumerate() {
        let cl = validate_closed_loop(&robust.response, &p.a, &p.b, 4, m as u64)?;
        rows.push(SlsCheckRow {
            design: "robust".into(),
            plant: m,
            residual: robust.residuals[m],
            impulse_deviation: cl.impulse_deviation,
            post_horizon_peak: cl.post_horizon_peak,
            support_violation: robust.response.support_violation(),
            // A shared response is not exact for every plant; report stability only.
            pass: cl.stabilized,
        });
    }
    Ok(rows)
}

pub fn sls_check_csv(rows: &[SlsCheckRow]) -> Result<Vec<u8>, HarnessError> {
    csv_bytes(
        &["design", "plant", "residual", "impulse_deviation", "post_horizon_peak", "support_violation", "pass"],
        rows.iter().map(|r| {
            vec![
                r.design.clone(),
                r.plant.to_string(),
                num(r.residual),
                num(r.impulse_deviation),
                num(r.post_horizon_peak),
                num(r.support_violation),
                r.pass.to_string(),
            ]
        }),
    )
}

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(path, bytes)?;
    Ok(())
}
