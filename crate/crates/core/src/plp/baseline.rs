//! Comparison controllers without memory or prediction.

use std::sync::Arc;

use nalgebra::DVector;

use super::{timed, ControlLog, LoggedController, PlpEvent, ResponseSource, StepRecord};
use crate::mode_id::ModeIdentifier;
use crate::sls::{synthesize, synthesize_robust, ControllerState, SlsProblem, SystemResponse};
use crate::system::{Controller, JumpLinearSystem};
use crate::{Error, Result};

/// Shared identification front end: runs the identifier (or reads the true
/// mode) and reports switch/estimate events.
struct Tracker {
    sys: Arc<JumpLinearSystem>,
    identifier: ModeIdentifier,
    initial_mode: usize,
    last: Option<(DVector<f64>, DVector<f64>)>,
    true_modes: Option<Vec<usize>>,
}

impl Tracker {
    fn new(sys: Arc<JumpLinearSystem>, prior_weight: f64, initial_mode: usize) -> Result<Self> {
        if initial_mode >= sys.num_modes() {
            return Err(Error::InvalidArgument(format!("initial mode {initial_mode} out of range")));
        }
        Ok(Self {
            identifier: ModeIdentifier::new(sys.num_modes(), prior_weight)?,
            sys,
            initial_mode,
            last: None,
            true_modes: None,
        })
    }

    fn estimate(&self) -> usize {
        self.identifier.estimate().unwrap_or(self.initial_mode)
    }

    fn update(&mut self, t: usize, x: &DVector<f64>) -> Result<Vec<PlpEvent>> {
        let prev = self.estimate();
        let had = self.identifier.estimate().is_some();
        let upd = match &self.true_modes {
            Some(modes) => {
                let m = *modes
                    .get(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("no true mode for step {t}")))?;
                Some(self.identifier.observe_true(m)?)
            }
            None => match self.last.take() {
                Some((xp, up)) => Some(self.identifier.observe(&self.sys, &xp, &up, x, t - 1)?),
                None => None,
            },
        };
        let mut events = Vec::new();
        if let Some(upd) = upd.filter(|_| had || self.true_modes.is_none()) {
            if upd.switched {
                events.push(PlpEvent::SwitchDetected { from: prev, to: upd.estimate });
            } else if upd.estimate != prev {
                events.push(PlpEvent::EstimateChanged { from: prev, to: upd.estimate });
            }
        }
        Ok(events)
    }
}

/// Model-based SLS that re-synthesises whenever the estimated mode changes.
pub struct BaselineSlsController {
    tracker: Tracker,
    designs: Vec<SlsProblem>,
    wall_clock: bool,
    state: ControllerState,
    current: Option<(usize, SystemResponse)>,
    log: ControlLog,
}

impl BaselineSlsController {
    pub fn new(sys: Arc<JumpLinearSystem>, designs: Vec<SlsProblem>, prior_weight: f64, initial_mode: usize, wall_clock: bool) -> Result<Self> {
        if designs.len() != sys.num_modes() {
            return Err(Error::DimensionMismatch {
                context: "mode designs",
                expected: sys.num_modes(),
                got: designs.len(),
            });
        }
        let h = designs[0].horizon;
        let nx = sys.state_dim();
        Ok(Self {
            tracker: Tracker::new(sys, prior_weight, initial_mode)?,
            designs,
            wall_clock,
            state: ControllerState::new(nx, h),
            current: None,
            log: ControlLog::default(),
        })
    }

    pub fn with_true_modes(mut self, modes: Vec<usize>) -> Self {
        self.tracker.true_modes = Some(modes);
        self
    }
}

impl Controller for BaselineSlsController {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut events = self.tracker.update(t, x)?;
        let mode = self.tracker.estimate();
        let mut syntheses = 0;
        let mut synth_ms = 0.0;
        if self.current.as_ref().is_none_or(|(m, _)| *m != mode) {
            let (resp, ms) = timed(self.wall_clock, || synthesize(&self.designs[mode]));
            self.current = Some((mode, resp?));
            syntheses = 1;
            synth_ms = ms;
            self.log.model_syntheses += 1;
            self.log.synth_ms += ms;
            events.push(PlpEvent::Synthesized {
                mode,
                source: ResponseSource::ModelBased,
            });
        }
        let resp = &self.current.as_ref().expect("response set").1;
        let u = self.state.step(resp, x)?;
        self.tracker.last = Some((x.clone(), u.clone()));
        self.log.records.push(StepRecord {
            step: t,
            est_mode: mode,
            events,
            cache_hit: None,
            syntheses,
            synth_ms,
            predictor_k: None,
            predicted_tau: None,
        });
        Ok(u)
    }
}

impl LoggedController for BaselineSlsController {
    fn log(&self) -> &ControlLog {
        &self.log
    }
}

/// One response shared by every topology, synthesised once up front.
///
/// The identifier still runs so that runs report comparable mode estimates,
/// but the response never changes.
pub struct RobustSlsController {
    tracker: Tracker,
    response: SystemResponse,
    residuals: Vec<f64>,
    state: ControllerState,
    log: ControlLog,
    pending: Option<(f64, Vec<PlpEvent>)>,
}

impl RobustSlsController {
    /// All problems should carry the same (union-graph) support.
    pub fn new(sys: Arc<JumpLinearSystem>, problems: &[SlsProblem], prior_weight: f64, initial_mode: usize, wall_clock: bool) -> Result<Self> {
        if problems.len() != sys.num_modes() {
            return Err(Error::DimensionMismatch {
                context: "mode designs",
                expected: sys.num_modes(),
                got: problems.len(),
            });
        }
        let (robust, ms) = timed(wall_clock, || synthesize_robust(problems));
        let robust = robust?;
        let nx = sys.state_dim();
        let h = robust.response.horizon();
        let log = ControlLog {
            model_syntheses: 1,
            synth_ms: ms,
            ..ControlLog::default()
        };
        Ok(Self {
            tracker: Tracker::new(sys, prior_weight, initial_mode)?,
            response: robust.response,
            residuals: robust.residuals,
            state: ControllerState::new(nx, h),
            log,
            pending: Some((ms, vec![PlpEvent::Synthesized {
                mode: initial_mode,
                source: ResponseSource::ModelBased,
            }])),
        })
    }

    pub fn with_true_modes(mut self, modes: Vec<usize>) -> Self {
        self.tracker.true_modes = Some(modes);
        self
    }

    pub fn response(&self) -> &SystemResponse {
        &self.response
    }

    /// Achievability residual of the shared response against each topology.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }
}

impl Controller for RobustSlsController {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut events = self.tracker.update(t, x)?;
        let (synth_ms, syntheses) = match self.pending.take() {
            Some((ms, ev)) => {
                events.extend(ev);
                (ms, 1)
            }
            None => (0.0, 0),
        };
        let u = self.state.step(&self.response, x)?;
        self.tracker.last = Some((x.clone(), u.clone()));
        self.log.records.push(StepRecord {
            step: t,
            est_mode: self.tracker.estimate(),
            events,
            cache_hit: None,
            syntheses,
            synth_ms,
            predictor_k: None,
            predicted_tau: None,
        });
        Ok(u)
    }
}

impl LoggedController for RobustSlsController {
    fn log(&self) -> &ControlLog {
        &self.log
    }
}
