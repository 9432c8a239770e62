//! Runtime realisation of a response and time-domain closed-loop checks.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SystemResponse;
use crate::system::Controller;
use crate::{Error, Result};

/// Internal state of the response-based controller.
///
/// `w_hat[0]` is the most recent disturbance estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    w_hat: VecDeque<DVector<f64>>,
    x_hat: DVector<f64>,
}

impl ControllerState {
    pub fn new(state_dim: usize, horizon: usize) -> Self {
        Self {
            w_hat: std::iter::repeat_n(DVector::zeros(state_dim), horizon).collect(),
            x_hat: DVector::zeros(state_dim),
        }
    }

    pub fn horizon(&self) -> usize {
        self.w_hat.len()
    }

    pub fn x_hat(&self) -> &DVector<f64> {
        &self.x_hat
    }

    pub fn w_hat(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.w_hat.iter()
    }

    pub fn reset(&mut self) {
        for w in &mut self.w_hat {
            w.fill(0.0);
        }
        self.x_hat.fill(0.0);
    }

    /// `x_hat = sum_{s>=2} Phi_x[s] w_hat[t+1-s]`, `w_hat[t] = x - x_hat`,
    /// `u = sum_{s>=1} Phi_u[s] w_hat[t+1-s]`.
    pub fn step(&mut self, resp: &SystemResponse, x: &DVector<f64>) -> Result<DVector<f64>> {
        let h = resp.horizon();
        if h != self.horizon() {
            return Err(Error::DimensionMismatch {
                context: "controller horizon",
                expected: self.horizon(),
                got: h,
            });
        }
        if x.len() != resp.state_dim() || self.x_hat.len() != x.len() {
            return Err(Error::DimensionMismatch {
                context: "controller state",
                expected: resp.state_dim(),
                got: x.len(),
            });
        }
        let mut x_hat = DVector::zeros(x.len());
        for s in 2..=h {
            x_hat.gemv(1.0, resp.x(s), &self.w_hat[s - 2], 1.0);
        }
        let w = x - &x_hat;
        self.w_hat.pop_back();
        self.w_hat.push_front(w);
        self.x_hat = x_hat;
        let mut u = DVector::zeros(resp.input_dim());
        for s in 1..=h {
            u.gemv(1.0, resp.u(s), &self.w_hat[s - 1], 1.0);
        }
        Ok(u)
    }
}

/// Free-function form of [`ControllerState::step`].
pub fn controller_step(state: &mut ControllerState, resp: &SystemResponse, x: &DVector<f64>) -> Result<DVector<f64>> {
    state.step(resp, x)
}

/// A fixed response wrapped as a [`Controller`].
#[derive(Debug, Clone)]
pub struct SlsController {
    pub response: SystemResponse,
    pub state: ControllerState,
}

impl SlsController {
    pub fn new(response: SystemResponse) -> Self {
        let state = ControllerState::new(response.state_dim(), response.horizon());
        Self { response, state }
    }
}

impl Controller for SlsController {
    fn control(&mut self, _t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.state.step(&self.response, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopReport {
    /// Max over impulse columns and steps of `|x[t] - Phi_x[t+1] e_i|`
    /// (`Phi_x[t+1] = 0` beyond the horizon).
    pub impulse_deviation: f64,
    /// Largest state magnitude from step `H` on after an impulse.
    pub post_horizon_peak: f64,
    /// Ratio of the last to the first post-horizon window peak, worst case.
    pub decay_ratio: f64,
    /// Largest state magnitude under persistent random disturbances.
    pub random_peak: f64,
    /// Post-horizon window peaks never grow and the loop stays finite.
    pub stabilized: bool,
}

const WINDOWS: usize = 8;

fn window_peaks(norms: &[f64], start: usize, width: usize) -> Vec<f64> {
    norms[start..]
        .chunks(width)
        .filter(|c| c.len() == width)
        .map(|c| c.iter().copied().fold(0.0, f64::max))
        .collect()
}

fn non_increasing(peaks: &[f64]) -> bool {
    peaks.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-12)
}

/// Runs the response-based controller on `(A, B)`.
///
/// Impulses enter as `x[0] = e_i`; random trials apply uniform disturbances
/// in `[-1, 1]` for `H` steps followed by a quiet tail. The loop counts as
/// stabilised when window peaks of `||x||_inf` after the excitation never
/// increase and the final window is below the first.
pub fn validate_closed_loop(
    resp: &SystemResponse,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    trials: usize,
    seed: u64,
) -> Result<ClosedLoopReport> {
    let nx = resp.state_dim();
    let h = resp.horizon();
    if a.shape() != (nx, nx) || b.shape() != (nx, resp.input_dim()) {
        return Err(Error::DimensionMismatch {
            context: "closed-loop validation",
            expected: nx,
            got: a.nrows(),
        });
    }
    let steps = h + WINDOWS * h;
    let run = |x0: DVector<f64>, dist: &dyn Fn(usize) -> DVector<f64>| -> Result<Vec<DVector<f64>>> {
        let mut state = ControllerState::new(nx, h);
        let mut x = x0;
        let mut xs = Vec::with_capacity(steps + 1);
        for t in 0..steps {
            xs.push(x.clone());
            let u = state.step(resp, &x)?;
            x = a * &x + b * u + dist(t);
            if x.iter().any(|v| !v.is_finite()) {
                break;
            }
        }
        xs.push(x);
        Ok(xs)
    };
    let finite = |xs: &[DVector<f64>]| xs.len() == steps + 1 && xs.iter().all(|x| x.iter().all(|v| v.is_finite()));

    let mut deviation = 0.0_f64;
    let mut post_peak = 0.0_f64;
    let mut decay = 0.0_f64;
    let mut stabilized = true;
    let zero = DVector::zeros(nx);
    for i in 0..nx {
        let mut e = DVector::zeros(nx);
        e[i] = 1.0;
        let xs = run(e.clone(), &|_| zero.clone())?;
        if !finite(&xs) {
            deviation = f64::INFINITY;
            post_peak = f64::INFINITY;
            decay = f64::INFINITY;
            stabilized = false;
            continue;
        }
        for (t, x) in xs.iter().enumerate() {
            let predicted = if t < h { resp.x(t + 1) * &e } else { zero.clone() };
            deviation = deviation.max((x - predicted).amax());
        }
        let norms: Vec<f64> = xs.iter().map(|x| x.amax()).collect();
        post_peak = post_peak.max(norms[h..].iter().copied().fold(0.0, f64::max));
        let peaks = window_peaks(&norms, h, h);
        stabilized &= non_increasing(&peaks);
        if let (Some(&first), Some(&last)) = (peaks.first(), peaks.last()) {
            decay = decay.max(if first > 0.0 { last / first } else { 0.0 });
            stabilized &= last < first || first < 1e-12;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_peak = 0.0_f64;
    for _ in 0..trials {
        let w: Vec<DVector<f64>> = (0..h).map(|_| DVector::from_fn(nx, |_, _| rng.random_range(-1.0..=1.0))).collect();
        let xs = run(DVector::zeros(nx), &|t| w.get(t).cloned().unwrap_or_else(|| zero.clone()))?;
        if !finite(&xs) {
            random_peak = f64::INFINITY;
            stabilized = false;
            continue;
        }
        let norms: Vec<f64> = xs.iter().map(|x| x.amax()).collect();
        random_peak = random_peak.max(norms.iter().copied().fold(0.0, f64::max));
        let peaks = window_peaks(&norms, 2 * h, h);
        stabilized &= non_increasing(&peaks);
        if let (Some(&first), Some(&last)) = (peaks.first(), peaks.last()) {
            stabilized &= last < first || first < 1e-12;
        }
    }
    Ok(ClosedLoopReport {
        impulse_deviation: deviation,
        post_horizon_peak: post_peak,
        decay_ratio: decay,
        random_peak,
        stabilized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sls::{synthesize, SlsProblem};

    #[test]
    fn quiescent_controller_outputs_zero() {
        let p = SlsProblem::new(DMatrix::from_element(2, 2, 0.3), DMatrix::identity(2, 2), 3).unwrap();
        let r = synthesize(&p).unwrap();
        let mut st = ControllerState::new(2, 3);
        let u = st.step(&r, &DVector::zeros(2)).unwrap();
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn first_step_applies_phi_u1() {
        let p = SlsProblem::new(DMatrix::from_element(2, 2, 0.3), DMatrix::identity(2, 2), 3).unwrap();
        let r = synthesize(&p).unwrap();
        let w = DVector::from_vec(vec![0.4, -1.0]);
        let mut st = ControllerState::new(2, 3);
        let u = st.step(&r, &w).unwrap();
        assert!((u - r.u(1) * &w).amax() < 1e-15);
        assert_eq!(st.w_hat().next().unwrap(), &w);
    }

    #[test]
    fn exact_model_tracks_response() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.8]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let p = SlsProblem::new(a.clone(), b.clone(), 6).unwrap();
        let r = synthesize(&p).unwrap();
        let rep = validate_closed_loop(&r, &a, &b, 5, 1).unwrap();
        assert!(rep.impulse_deviation < 1e-8, "{rep:?}");
        assert!(rep.post_horizon_peak < 1e-8);
        assert!(rep.stabilized);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = SlsProblem::new(DMatrix::from_element(1, 1, 0.3), DMatrix::identity(1, 1), 2).unwrap();
        let r = synthesize(&p).unwrap();
        let mut st = ControllerState::new(1, 2);
        assert!(st.step(&r, &DVector::zeros(2)).is_err());
    }
}
