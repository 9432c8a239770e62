//! The pattern-learning predictive controller and its comparison baselines.
//!
//! [`PlpArchitecture`] owns a mode identifier, the memory table and the
//! scheduler. At every control step it identifies the active mode, files the
//! observed transition into the memory table and looks up (or synthesises) the
//! response for the estimated mode. At every detected switch it predicts the
//! most likely next pattern and pre-synthesises the responses of its modes.

mod baseline;
mod memory;

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;

pub use baseline::{BaselineSlsController, RobustSlsController};
pub use memory::{CachedResponse, MemoryEntry, MemoryTable, ResponseSource};

use crate::mode_id::{IdUpdate, ModeIdentifier};
use crate::pattern::{most_likely_pattern, PatternCollection, PatternProblem};
use crate::sls::{data_driven_synthesize, synthesize, ControllerState, Segment, SlsProblem, SystemResponse};
use crate::system::{Controller, JumpLinearSystem};
use crate::{Error, Result};

/// Default tolerance for accepting a data-driven response against the model.
pub const DATA_ACCEPT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum PlpEvent {
    SwitchDetected { from: usize, to: usize },
    EstimateChanged { from: usize, to: usize },
    SegmentOpened { mode: usize },
    SegmentClosed { mode: usize, len: usize },
    Quarantined,
    PredictionRefreshed { k: usize, expected_tau: f64 },
    PredictionUnavailable,
    Synthesized { mode: usize, source: ResponseSource },
    DataRejected { mode: usize, deviation: f64 },
}

impl fmt::Display for PlpEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlpEvent::SwitchDetected { from, to } => write!(f, "switch:{from}>{to}"),
            PlpEvent::EstimateChanged { from, to } => write!(f, "estimate:{from}>{to}"),
            PlpEvent::SegmentOpened { mode } => write!(f, "segment_open:{mode}"),
            PlpEvent::SegmentClosed { mode, len } => write!(f, "segment_close:{mode}/{len}"),
            PlpEvent::Quarantined => write!(f, "quarantine"),
            PlpEvent::PredictionRefreshed { k, .. } => write!(f, "predict:{k}"),
            PlpEvent::PredictionUnavailable => write!(f, "no_prediction"),
            PlpEvent::Synthesized { mode, source } => write!(f, "synth:{mode}/{}", source.as_str()),
            PlpEvent::DataRejected { mode, .. } => write!(f, "data_reject:{mode}"),
        }
    }
}

/// Joins events into one CSV-safe field.
pub fn format_events(events: &[PlpEvent]) -> String {
    events.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

/// Everything a controller did at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub est_mode: usize,
    pub events: Vec<PlpEvent>,
    /// `None` when no lookup happened (baselines).
    pub cache_hit: Option<bool>,
    pub syntheses: usize,
    pub synth_ms: f64,
    pub predictor_k: Option<usize>,
    pub predicted_tau: Option<f64>,
}

/// Per-run provenance shared by all controllers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlLog {
    pub records: Vec<StepRecord>,
    pub model_syntheses: usize,
    pub data_syntheses: usize,
    pub synth_ms: f64,
}

impl ControlLog {
    pub fn synth_count(&self) -> usize {
        self.model_syntheses + self.data_syntheses
    }
}

/// A controller that also reports what it did.
pub trait LoggedController: Controller {
    fn log(&self) -> &ControlLog;
}

/// Runs `f`, returning its value and elapsed milliseconds (zero when timing is off).
pub(crate) fn timed<T>(wall_clock: bool, f: impl FnOnce() -> T) -> (T, f64) {
    if wall_clock {
        let start = Instant::now();
        let v = f();
        (v, start.elapsed().as_secs_f64() * 1e3)
    } else {
        (f(), 0.0)
    }
}

/// Synthesis inputs for one mode.
#[derive(Debug, Clone)]
pub struct ModeDesign {
    /// Dynamics, weights, horizon and support; the dynamics are only used when
    /// `model_available` is set.
    pub problem: SlsProblem,
    pub model_available: bool,
}

#[derive(Debug, Clone)]
pub struct PlpSettings {
    pub designs: Vec<ModeDesign>,
    /// `None` disables prediction.
    pub patterns: Option<PatternCollection>,
    pub prior_weight: f64,
    pub data_driven: bool,
    pub data_accept_tol: f64,
    pub refresh_on_new_data: bool,
    pub wall_clock: bool,
    /// Mode assumed before the first observation.
    pub initial_mode: usize,
}

impl PlpSettings {
    pub fn new(designs: Vec<ModeDesign>) -> Self {
        Self {
            designs,
            patterns: None,
            prior_weight: 1.0,
            data_driven: true,
            data_accept_tol: DATA_ACCEPT_TOL,
            refresh_on_new_data: false,
            wall_clock: true,
            initial_mode: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub current: usize,
    pub k_star: usize,
    pub expected_tau: f64,
    pub queue: Vec<usize>,
}

/// Result of a memory lookup.
#[derive(Debug, Clone)]
pub struct Lookup {
    pub response: Arc<SystemResponse>,
    pub cache_hit: bool,
    pub syntheses: usize,
    pub synth_ms: f64,
    pub events: Vec<PlpEvent>,
}

pub struct PlpArchitecture {
    sys: Arc<JumpLinearSystem>,
    settings: PlpSettings,
    identifier: ModeIdentifier,
    memory: MemoryTable,
    scheduler: Option<SchedulerState>,
    open_segment: Option<(usize, Segment)>,
    log: ControlLog,
    /// Syntheses and milliseconds since the last [`PlpArchitecture::take_step_cost`].
    step_cost: (usize, f64),
}

impl PlpArchitecture {
    pub fn new(sys: Arc<JumpLinearSystem>, settings: PlpSettings) -> Result<Self> {
        let m = sys.num_modes();
        if settings.designs.len() != m {
            return Err(Error::DimensionMismatch {
                context: "mode designs",
                expected: m,
                got: settings.designs.len(),
            });
        }
        if settings.initial_mode >= m {
            return Err(Error::InvalidArgument(format!("initial mode {} out of range", settings.initial_mode)));
        }
        let horizon = settings.designs[0].problem.horizon;
        for d in &settings.designs {
            if d.problem.horizon != horizon || d.problem.state_dim() != sys.state_dim() || d.problem.input_dim() != sys.input_dim() {
                return Err(Error::InvalidArgument("mode designs must share horizon and dimensions with the plant".into()));
            }
        }
        if let Some(p) = &settings.patterns {
            if p.patterns().iter().flatten().any(|&s| s >= m) {
                return Err(Error::InvalidArgument("pattern symbol out of range".into()));
            }
        }
        Ok(Self {
            identifier: ModeIdentifier::new(m, settings.prior_weight)?,
            memory: MemoryTable::new(m),
            sys,
            settings,
            scheduler: None,
            open_segment: None,
            log: ControlLog::default(),
            step_cost: (0, 0.0),
        })
    }

    pub fn horizon(&self) -> usize {
        self.settings.designs[0].problem.horizon
    }

    pub fn identifier(&self) -> &ModeIdentifier {
        &self.identifier
    }

    pub fn memory(&self) -> &MemoryTable {
        &self.memory
    }

    pub fn scheduler(&self) -> Option<&SchedulerState> {
        self.scheduler.as_ref()
    }

    pub fn log(&self) -> &ControlLog {
        &self.log
    }

    pub fn estimate(&self) -> usize {
        self.identifier.estimate().unwrap_or(self.settings.initial_mode)
    }

    fn close_segment(&mut self, events: &mut Vec<PlpEvent>) {
        if let Some((mode, seg)) = self.open_segment.take() {
            events.push(PlpEvent::SegmentClosed { mode, len: seg.len() });
            if !seg.is_empty() {
                self.memory.append_segment(mode, seg, self.settings.refresh_on_new_data);
            }
        }
    }

    fn file_transition(&mut self, mode: Option<usize>, x: &DVector<f64>, u: &DVector<f64>, x_next: &DVector<f64>, events: &mut Vec<PlpEvent>) {
        match mode {
            Some(m) => {
                if self.open_segment.as_ref().is_some_and(|(om, _)| *om != m) {
                    self.close_segment(events);
                }
                if self.open_segment.is_none() {
                    events.push(PlpEvent::SegmentOpened { mode: m });
                    self.open_segment = Some((m, Segment::start(x.clone())));
                }
                let seg = &mut self.open_segment.as_mut().expect("segment open").1;
                seg.push(u.clone(), x_next.clone());
            }
            None => {
                if self.open_segment.is_some() {
                    self.close_segment(events);
                    events.push(PlpEvent::Quarantined);
                }
            }
        }
    }

    fn handle_update(&mut self, prev_est: usize, upd: &IdUpdate, events: &mut Vec<PlpEvent>) {
        if upd.switched {
            events.push(PlpEvent::SwitchDetected { from: prev_est, to: upd.estimate });
        } else if upd.estimate != prev_est {
            events.push(PlpEvent::EstimateChanged { from: prev_est, to: upd.estimate });
        }
    }

    /// Processes the transition `x_prev -> x` under `u_prev`, observed at
    /// `step` (the step of `x`).
    ///
    /// Transitions are filed into the memory table only while the consistent
    /// set is a singleton; ambiguous stretches are dropped.
    pub fn on_state_update(&mut self, x_prev: &DVector<f64>, u_prev: &DVector<f64>, x: &DVector<f64>, step: usize) -> Result<Vec<PlpEvent>> {
        let mut events = Vec::new();
        let prev_est = self.estimate();
        let upd = self.identifier.observe(&self.sys, x_prev, u_prev, x, step - 1)?;
        if upd.switched {
            self.close_segment(&mut events);
        }
        let attributed = self.identifier.consistent_set().singleton();
        self.file_transition(attributed, x_prev, u_prev, x, &mut events);
        self.handle_update(prev_est, &upd, &mut events);
        if upd.switched {
            self.on_switch(step, &mut events)?;
        }
        Ok(events)
    }

    /// Ground-truth variant: `transition_mode` produced `x_prev -> x` and
    /// `active_mode` drives the next transition.
    pub fn on_true_mode(
        &mut self,
        x_prev: Option<(&DVector<f64>, &DVector<f64>)>,
        x: &DVector<f64>,
        transition_mode: Option<usize>,
        active_mode: usize,
        step: usize,
    ) -> Result<Vec<PlpEvent>> {
        let mut events = Vec::new();
        let prev_est = self.estimate();
        if let (Some((xp, up)), Some(tm)) = (x_prev, transition_mode) {
            self.file_transition(Some(tm), xp, up, x, &mut events);
        }
        let had_estimate = self.identifier.estimate().is_some();
        let upd = self.identifier.observe_true(active_mode)?;
        if upd.switched {
            self.close_segment(&mut events);
        }
        if had_estimate {
            self.handle_update(prev_est, &upd, &mut events);
        }
        if upd.switched {
            self.on_switch(step, &mut events)?;
        }
        Ok(events)
    }

    fn on_switch(&mut self, step: usize, events: &mut Vec<PlpEvent>) -> Result<()> {
        match self.schedule_prediction() {
            Some(s) => {
                events.push(PlpEvent::PredictionRefreshed {
                    k: s.k_star,
                    expected_tau: s.expected_tau,
                });
                for m in s.queue.clone() {
                    let l = self.memory_lookup_or_synthesize(m, step)?;
                    events.extend(l.events);
                }
            }
            None if self.settings.patterns.is_some() => events.push(PlpEvent::PredictionUnavailable),
            None => {}
        }
        Ok(())
    }

    /// Predicts the most likely next pattern from the current estimate and the
    /// smoothed TPM estimate. Degenerate or unreachable pattern problems yield
    /// no prediction.
    pub fn schedule_prediction(&mut self) -> Option<SchedulerState> {
        let psi = self.settings.patterns.clone()?;
        let current = self.estimate();
        let tpm = self.identifier.tpm().point_estimate();
        let stats = PatternProblem::new(&tpm, psi.clone(), current).and_then(|p| p.solve());
        let state = match stats {
            Ok(stats) => {
                let k_star = most_likely_pattern(&stats.q)?;
                let mut queue: Vec<usize> = Vec::new();
                for &m in psi.get(k_star) {
                    if !queue.contains(&m) {
                        queue.push(m);
                    }
                }
                Some(SchedulerState {
                    current,
                    k_star,
                    expected_tau: stats.expected_tau,
                    queue,
                })
            }
            Err(e) => {
                log::warn!("pattern prediction unavailable from mode {current}: {e}");
                None
            }
        };
        self.scheduler = state.clone();
        state
    }

    /// Syntheses and synthesis milliseconds accumulated since the last call.
    pub fn take_step_cost(&mut self) -> (usize, f64) {
        std::mem::take(&mut self.step_cost)
    }

    fn record_synthesis(&mut self, source: ResponseSource, ms: f64) {
        match source {
            ResponseSource::ModelBased => self.log.model_syntheses += 1,
            ResponseSource::DataDriven => self.log.data_syntheses += 1,
        }
        self.log.synth_ms += ms;
        self.step_cost.0 += 1;
        self.step_cost.1 += ms;
    }

    fn model_response(&mut self, mode: usize, step: usize, out: &mut Lookup) -> Result<Arc<SystemResponse>> {
        if let Some(c) = &self.memory.entry(mode).cached {
            if c.source == ResponseSource::ModelBased {
                return Ok(c.response.clone());
            }
        }
        if !self.settings.designs[mode].model_available {
            return Err(Error::UncontrollableMode { mode });
        }
        let problem = &self.settings.designs[mode].problem;
        let (resp, ms) = timed(self.settings.wall_clock, || synthesize(problem));
        self.record_synthesis(ResponseSource::ModelBased, ms);
        out.syntheses += 1;
        out.synth_ms += ms;
        let resp = Arc::new(resp?);
        out.events.push(PlpEvent::Synthesized {
            mode,
            source: ResponseSource::ModelBased,
        });
        self.memory.entry_mut(mode).cached = Some(CachedResponse {
            response: resp.clone(),
            source: ResponseSource::ModelBased,
            synthesized_at: step,
        });
        Ok(resp)
    }

    /// Tries a data-driven response from the stored segments of `mode`.
    ///
    /// Attempted at most once per segment set. When a model is available the
    /// data-driven response must agree with the model-based one within
    /// `data_accept_tol`; otherwise the model-based response is kept.
    fn try_data_driven(&mut self, mode: usize, step: usize, out: &mut Lookup) -> Result<Option<Arc<SystemResponse>>> {
        let h = self.horizon();
        let nx = self.sys.state_dim();
        let nu = self.sys.input_dim();
        let entry = self.memory.entry(mode);
        if !self.settings.data_driven || entry.data_attempted || entry.windows(h) < nx + h * nu {
            return Ok(None);
        }
        if entry.data_checked_segments == entry.segments.len() && !entry.stale {
            return Ok(None);
        }
        let n_segments = entry.segments.len();
        let problem = &self.settings.designs[mode].problem;
        let (res, ms) = timed(self.settings.wall_clock, || {
            data_driven_synthesize(&entry.segments, h, &problem.q, &problem.r, problem.support.as_ref())
        });
        self.memory.entry_mut(mode).data_checked_segments = n_segments;
        let dd = match res {
            // Not enough excitation yet: no synthesis happened, retry on new data.
            Err(Error::NotPersistentlyExciting { .. }) => return Ok(None),
            other => other,
        };
        self.record_synthesis(ResponseSource::DataDriven, ms);
        out.syntheses += 1;
        out.synth_ms += ms;
        self.memory.entry_mut(mode).data_attempted = true;
        let dd = match dd {
            Ok(d) => d,
            Err(e) => {
                log::debug!("data-driven synthesis for mode {mode} failed: {e}");
                out.events.push(PlpEvent::DataRejected {
                    mode,
                    deviation: f64::INFINITY,
                });
                return Ok(None);
            }
        };
        if self.settings.designs[mode].model_available {
            let model = self.model_response(mode, step, out)?;
            let dev = response_deviation(&dd.response, &model);
            if dev > self.settings.data_accept_tol {
                out.events.push(PlpEvent::DataRejected { mode, deviation: dev });
                return Ok(None);
            }
        }
        let resp = Arc::new(dd.response);
        out.events.push(PlpEvent::Synthesized {
            mode,
            source: ResponseSource::DataDriven,
        });
        let e = self.memory.entry_mut(mode);
        e.stale = false;
        e.cached = Some(CachedResponse {
            response: resp.clone(),
            source: ResponseSource::DataDriven,
            synthesized_at: step,
        });
        Ok(Some(resp))
    }

    /// Returns the response for `mode`, synthesising and caching it when the
    /// cache is empty or stale, or when newly stored data allow a data-driven
    /// upgrade.
    pub fn memory_lookup_or_synthesize(&mut self, mode: usize, step: usize) -> Result<Lookup> {
        if mode >= self.memory.num_modes() {
            return Err(Error::InvalidArgument(format!("mode {mode} out of range")));
        }
        let mut out = Lookup {
            response: Arc::new(SystemResponse {
                phi_x: Vec::new(),
                phi_u: Vec::new(),
                support: None,
            }),
            cache_hit: false,
            syntheses: 0,
            synth_ms: 0.0,
            events: Vec::new(),
        };
        if let Some(resp) = self.try_data_driven(mode, step, &mut out)? {
            out.response = resp;
            return Ok(out);
        }
        let entry = self.memory.entry(mode);
        if let Some(c) = &entry.cached {
            if !entry.stale {
                out.response = c.response.clone();
                out.cache_hit = out.syntheses == 0;
                return Ok(out);
            }
        }
        self.memory.entry_mut(mode).cached = None;
        out.response = self.model_response(mode, step, &mut out)?;
        Ok(out)
    }
}

/// Largest entrywise difference between two responses of equal shape.
pub fn response_deviation(a: &SystemResponse, b: &SystemResponse) -> f64 {
    if a.horizon() != b.horizon() {
        return f64::INFINITY;
    }
    a.phi_x
        .iter()
        .zip(&b.phi_x)
        .chain(a.phi_u.iter().zip(&b.phi_u))
        .map(|(p, q)| if p.shape() == q.shape() { (p - q).amax() } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

/// The PLP controller: identification, memory lookup and the response-based
/// control law.
pub struct PlpController {
    arch: PlpArchitecture,
    state: ControllerState,
    current: Option<Arc<SystemResponse>>,
    last: Option<(DVector<f64>, DVector<f64>)>,
    true_modes: Option<Vec<usize>>,
}

impl PlpController {
    pub fn new(sys: Arc<JumpLinearSystem>, settings: PlpSettings) -> Result<Self> {
        let nx = sys.state_dim();
        let arch = PlpArchitecture::new(sys, settings)?;
        let h = arch.horizon();
        Ok(Self {
            arch,
            state: ControllerState::new(nx, h),
            current: None,
            last: None,
            true_modes: None,
        })
    }

    /// Replaces identification by the given mode sequence (`modes[t]` drives
    /// the transition out of step `t`).
    pub fn with_true_modes(mut self, modes: Vec<usize>) -> Self {
        self.true_modes = Some(modes);
        self
    }

    pub fn architecture(&self) -> &PlpArchitecture {
        &self.arch
    }

    /// Response currently applied.
    pub fn current_response(&self) -> Option<&Arc<SystemResponse>> {
        self.current.as_ref()
    }
}

impl Controller for PlpController {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut events = match &self.true_modes {
            Some(modes) => {
                let active = *modes
                    .get(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("no true mode for step {t}")))?;
                let prev = if t > 0 { modes.get(t - 1).copied() } else { None };
                let last = self.last.as_ref().map(|(a, b)| (a, b));
                self.arch.on_true_mode(last, x, prev, active, t)?
            }
            None => match self.last.take() {
                Some((xp, up)) => self.arch.on_state_update(&xp, &up, x, t)?,
                None => Vec::new(),
            },
        };
        let mode = self.arch.estimate();
        let lookup = self.arch.memory_lookup_or_synthesize(mode, t)?;
        events.extend(lookup.events);
        self.current = Some(lookup.response.clone());
        let u = self.state.step(&lookup.response, x)?;
        self.last = Some((x.clone(), u.clone()));
        let (syntheses, synth_ms) = self.arch.take_step_cost();
        let sched = self.arch.scheduler.as_ref();
        let record = StepRecord {
            step: t,
            est_mode: mode,
            events,
            cache_hit: Some(lookup.cache_hit),
            syntheses,
            synth_ms,
            predictor_k: sched.map(|s| s.k_star),
            predicted_tau: sched.map(|s| s.expected_tau),
        };
        self.arch.log.records.push(record);
        Ok(u)
    }
}

impl LoggedController for PlpController {
    fn log(&self) -> &ControlLog {
        &self.arch.log
    }
}
