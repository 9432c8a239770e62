//! Markov jump linear plant `x[t+1] = A_m x[t] + B_m u[t] + w[t]` and its
//! seeded simulator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::network::NetworkTopology;
use crate::{Error, Result};

/// Per-mode linear dynamics over a shared state and input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpLinearSystem {
    state_dim: usize,
    input_dim: usize,
    modes: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    disturbance_bound: f64,
}

impl JumpLinearSystem {
    pub fn new(modes: Vec<(DMatrix<f64>, DMatrix<f64>)>, disturbance_bound: f64) -> Result<Self> {
        let Some((a0, b0)) = modes.first() else {
            return Err(Error::InvalidArgument("at least one mode is required".into()));
        };
        let nx = a0.nrows();
        let nu = b0.ncols();
        for (a, b) in &modes {
            if a.shape() != (nx, nx) {
                return Err(Error::DimensionMismatch {
                    context: "A matrix",
                    expected: nx,
                    got: a.nrows().max(a.ncols()),
                });
            }
            if b.shape() != (nx, nu) {
                return Err(Error::DimensionMismatch {
                    context: "B matrix",
                    expected: nu,
                    got: b.ncols(),
                });
            }
        }
        if !(disturbance_bound >= 0.0) {
            return Err(Error::InvalidArgument("disturbance bound must be >= 0".into()));
        }
        Ok(Self {
            state_dim: nx,
            input_dim: nu,
            modes,
            disturbance_bound,
        })
    }

    /// One mode per topology with `A_m = I - eps L_m` and a shared input matrix.
    pub fn from_topology(topo: &NetworkTopology, b: DMatrix<f64>, disturbance_bound: f64) -> Result<Self> {
        let modes = (0..topo.num_modes())
            .map(|m| Ok((topo.dynamics(m)?.a, b.clone())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(modes, disturbance_bound)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn disturbance_bound(&self) -> f64 {
        self.disturbance_bound
    }

    pub fn a(&self, mode: usize) -> &DMatrix<f64> {
        &self.modes[mode].0
    }

    pub fn b(&self, mode: usize) -> &DMatrix<f64> {
        &self.modes[mode].1
    }

    pub fn step(&self, mode: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.a(mode) * x + self.b(mode) * u + w
    }
}

/// Exogenous disturbance model.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceModel {
    Zero,
    /// Zero-mean uniform on `[-bound, bound]` per coordinate.
    Uniform { bound: f64 },
    /// Zero-mean Gaussian. Unbounded, so mode-ID soundness no longer holds.
    Gaussian { std_dev: f64 },
    Constant(DVector<f64>),
    /// Explicit per-step values; zero past the end.
    Sequence(Vec<DVector<f64>>),
}

impl DisturbanceModel {
    pub fn is_bounded(&self) -> bool {
        !matches!(self, DisturbanceModel::Gaussian { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: usize, dim: usize, rng: &mut R) -> DVector<f64> {
        match self {
            DisturbanceModel::Zero => DVector::zeros(dim),
            DisturbanceModel::Uniform { bound } => {
                DVector::from_fn(dim, |_, _| if *bound > 0.0 { rng.random_range(-bound..=*bound) } else { 0.0 })
            }
            DisturbanceModel::Gaussian { std_dev } => {
                let normal = Normal::new(0.0, *std_dev).expect("std_dev must be finite and >= 0");
                DVector::from_fn(dim, |_, _| normal.sample(rng))
            }
            DisturbanceModel::Constant(c) => c.clone(),
            DisturbanceModel::Sequence(seq) => seq.get(t).cloned().unwrap_or_else(|| DVector::zeros(dim)),
        }
    }

    /// Pre-draws `horizon` values so several runs can share one realisation.
    pub fn realize(&self, horizon: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..horizon).map(|t| self.sample(t, dim, &mut rng)).collect()
    }
}

/// Feedback policy queried once per step with the current state.
pub trait Controller {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> Controller for F
where
    F: FnMut(usize, &DVector<f64>) -> Result<DVector<f64>>,
{
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self(t, x)
    }
}

/// Applies `u = 0` forever.
#[derive(Debug, Clone)]
pub struct ZeroInput(pub usize);

impl Controller for ZeroInput {
    fn control(&mut self, _t: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x[0..=T]`
    pub states: Vec<DVector<f64>>,
    /// `u[0..T]`
    pub inputs: Vec<DVector<f64>>,
    /// `w[0..T]`
    pub disturbances: Vec<DVector<f64>>,
    /// Mode active for the transition out of step `t`.
    pub true_modes: Vec<usize>,
    pub switch_times: Vec<usize>,
}

impl Trajectory {
    fn start(x0: DVector<f64>, horizon: usize) -> Self {
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(x0);
        Self {
            states,
            inputs: Vec::with_capacity(horizon),
            disturbances: Vec::with_capacity(horizon),
            true_modes: Vec::with_capacity(horizon),
            switch_times: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A failed simulation together with everything computed before the failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct SimulationFailure {
    pub error: Error,
    pub partial: Box<Trajectory>,
}

/// Rolls the plant forward for `horizon` steps under `controller`.
///
/// `modes[t]` selects the dynamics of the transition `x[t] -> x[t+1]`.
pub fn simulate(
    sys: &JumpLinearSystem,
    modes: &[usize],
    controller: &mut dyn Controller,
    disturbance: &DisturbanceModel,
    x0: &DVector<f64>,
    horizon: usize,
    seed: u64,
) -> std::result::Result<Trajectory, SimulationFailure> {
    let mut traj = Trajectory::start(x0.clone(), horizon);
    let fail = |error, traj: Trajectory| SimulationFailure {
        error,
        partial: Box::new(traj),
    };
    if x0.len() != sys.state_dim() {
        return Err(fail(
            Error::DimensionMismatch {
                context: "initial state",
                expected: sys.state_dim(),
                got: x0.len(),
            },
            traj,
        ));
    }
    if modes.len() < horizon {
        return Err(fail(
            Error::InvalidArgument(format!("{} modes supplied for horizon {horizon}", modes.len())),
            traj,
        ));
    }
    if let Some(&bad) = modes[..horizon].iter().find(|&&m| m >= sys.num_modes()) {
        return Err(fail(Error::InvalidArgument(format!("mode {bad} out of range")), traj));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    for t in 0..horizon {
        let mode = modes[t];
        if t > 0 && mode != modes[t - 1] {
            traj.switch_times.push(t);
        }
        let u = match controller.control(t, &x) {
            Ok(u) => u,
            Err(e) => return Err(fail(e, traj)),
        };
        if u.len() != sys.input_dim() {
            return Err(fail(
                Error::DimensionMismatch {
                    context: "controller output",
                    expected: sys.input_dim(),
                    got: u.len(),
                },
                traj,
            ));
        }
        let w = disturbance.sample(t, sys.state_dim(), &mut rng);
        let next = sys.step(mode, &x, &u, &w);
        traj.inputs.push(u);
        traj.disturbances.push(w);
        traj.true_modes.push(mode);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(fail(Error::Divergence { step: t + 1 }, traj));
        }
        traj.states.push(next.clone());
        x = next;
    }
    Ok(traj)
}
