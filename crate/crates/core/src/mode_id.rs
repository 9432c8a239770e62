//! Hidden-mode identification: residual-based consistent-set narrowing and a
//! smoothed empirical transition matrix.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::system::JumpLinearSystem;
use crate::{Error, Result};

/// Slack added to the disturbance bound in the residual test.
pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsistentSet {
    pub candidates: BTreeSet<usize>,
    pub last_reset_step: usize,
}

impl ConsistentSet {
    pub fn full(num_modes: usize, step: usize) -> Self {
        Self {
            candidates: (0..num_modes).collect(),
            last_reset_step: step,
        }
    }

    pub fn singleton(&self) -> Option<usize> {
        (self.candidates.len() == 1).then(|| *self.candidates.first().unwrap())
    }

    pub fn contains(&self, mode: usize) -> bool {
        self.candidates.contains(&mode)
    }
}

/// Outcome of one narrowing step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Narrowing {
    pub set: ConsistentSet,
    /// The prior set was emptied and re-narrowed from scratch.
    pub switched: bool,
}

pub fn residual(sys: &JumpLinearSystem, mode: usize, x: &DVector<f64>, u: &DVector<f64>, x_next: &DVector<f64>) -> f64 {
    (x_next - sys.a(mode) * x - sys.b(mode) * u).amax()
}

fn explaining_modes<'a>(
    sys: &'a JumpLinearSystem,
    modes: impl Iterator<Item = usize> + 'a,
    x: &'a DVector<f64>,
    u: &'a DVector<f64>,
    x_next: &'a DVector<f64>,
) -> impl Iterator<Item = usize> + 'a {
    let bound = sys.disturbance_bound() + RESIDUAL_TOL;
    modes.filter(move |&m| residual(sys, m, x, u, x_next) <= bound)
}

/// Keeps the prior candidates that explain `x -> x_next`; on emptiness tests all
/// modes again and flags a switch at `step`.
pub fn residual_consistent_set(
    sys: &JumpLinearSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
    prior: &ConsistentSet,
    step: usize,
) -> Result<Narrowing> {
    if prior.candidates.is_empty() {
        return Err(Error::InvalidArgument("prior consistent set is empty".into()));
    }
    let kept: BTreeSet<usize> = explaining_modes(sys, prior.candidates.iter().copied(), x, u, x_next).collect();
    if !kept.is_empty() {
        return Ok(Narrowing {
            set: ConsistentSet {
                candidates: kept,
                last_reset_step: prior.last_reset_step,
            },
            switched: false,
        });
    }
    let fresh: BTreeSet<usize> = explaining_modes(sys, 0..sys.num_modes(), x, u, x_next).collect();
    if fresh.is_empty() {
        return Err(Error::ModelMismatch { step });
    }
    Ok(Narrowing {
        set: ConsistentSet {
            candidates: fresh,
            last_reset_step: step,
        },
        switched: true,
    })
}

/// Transition counts with additive smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct TpmEstimate {
    counts: DMatrix<u64>,
    prior_weight: f64,
}

impl TpmEstimate {
    pub fn new(num_modes: usize, prior_weight: f64) -> Result<Self> {
        if num_modes == 0 {
            return Err(Error::InvalidArgument("at least one mode is required".into()));
        }
        if !(prior_weight >= 0.0 && prior_weight.is_finite()) {
            return Err(Error::InvalidArgument("prior weight must be finite and >= 0".into()));
        }
        Ok(Self {
            counts: DMatrix::zeros(num_modes, num_modes),
            prior_weight,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    pub fn prior_weight(&self) -> f64 {
        self.prior_weight
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, from: usize, to: usize) -> Result<()> {
        let m = self.num_modes();
        if from >= m || to >= m {
            return Err(Error::InvalidArgument(format!("transition {from}->{to} outside {m} modes")));
        }
        self.counts[(from, to)] += 1;
        Ok(())
    }

    /// Row `i` is `(counts[i] + a) / (sum counts[i] + M a)`; rows with no mass
    /// at all fall back to uniform.
    pub fn point_estimate(&self) -> DMatrix<f64> {
        let m = self.num_modes();
        let a = self.prior_weight;
        let mut p = DMatrix::zeros(m, m);
        for i in 0..m {
            let row_total: u64 = self.counts.row(i).iter().sum();
            let denom = row_total as f64 + m as f64 * a;
            for j in 0..m {
                p[(i, j)] = if denom > 0.0 {
                    (self.counts[(i, j)] as f64 + a) / denom
                } else {
                    1.0 / m as f64
                };
            }
        }
        p
    }
}

/// Picks one mode from a non-empty consistent set.
pub fn narrow_and_estimate(set: &ConsistentSet, tpm_est: &TpmEstimate, prev_mode: Option<usize>) -> Result<usize> {
    let Some(&first) = set.candidates.first() else {
        return Err(Error::InvalidArgument("consistent set is empty".into()));
    };
    if set.candidates.len() == 1 {
        return Ok(first);
    }
    let Some(prev) = prev_mode else {
        return Ok(first);
    };
    let p = tpm_est.point_estimate();
    let mut best = first;
    for &m in &set.candidates {
        if p[(prev, m)] > p[(prev, best)] {
            best = m;
        }
    }
    Ok(best)
}

/// Stateful wrapper running narrowing, estimation and switch bookkeeping.
///
/// A detected switch is committed to the TPM estimate once the new epoch's mode
/// is pinned down (singleton set), or at the following switch with the best
/// estimate available then.
#[derive(Debug, Clone)]
pub struct ModeIdentifier {
    set: ConsistentSet,
    tpm: TpmEstimate,
    estimate: Option<usize>,
    epoch_mode: Option<usize>,
    prev_epoch_mode: Option<usize>,
    pending: bool,
}

/// What one observation did to the identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdUpdate {
    pub estimate: usize,
    pub switched: bool,
    /// Transition committed to the TPM estimate at this step.
    pub transition: Option<(usize, usize)>,
    pub ambiguous: bool,
}

impl ModeIdentifier {
    pub fn new(num_modes: usize, prior_weight: f64) -> Result<Self> {
        Ok(Self {
            set: ConsistentSet::full(num_modes, 0),
            tpm: TpmEstimate::new(num_modes, prior_weight)?,
            estimate: None,
            epoch_mode: None,
            prev_epoch_mode: None,
            pending: false,
        })
    }

    pub fn consistent_set(&self) -> &ConsistentSet {
        &self.set
    }

    pub fn tpm(&self) -> &TpmEstimate {
        &self.tpm
    }

    pub fn estimate(&self) -> Option<usize> {
        self.estimate
    }

    fn commit(&mut self) -> Result<Option<(usize, usize)>> {
        self.pending = false;
        match (self.prev_epoch_mode, self.epoch_mode) {
            (Some(from), Some(to)) if from != to => {
                self.tpm.update(from, to)?;
                Ok(Some((from, to)))
            }
            _ => Ok(None),
        }
    }

    /// Processes transition `x[t] -> x[t+1]` under `u[t]`.
    pub fn observe(
        &mut self,
        sys: &JumpLinearSystem,
        x: &DVector<f64>,
        u: &DVector<f64>,
        x_next: &DVector<f64>,
        step: usize,
    ) -> Result<IdUpdate> {
        let n = residual_consistent_set(sys, x, u, x_next, &self.set, step)?;
        self.set = n.set;
        let mut transition = None;
        if n.switched {
            if self.pending {
                transition = self.commit()?;
            }
            self.prev_epoch_mode = self.epoch_mode;
            self.pending = self.prev_epoch_mode.is_some();
        }
        // Ambiguity is resolved against the epoch we came from, not the running guess.
        let est = narrow_and_estimate(&self.set, &self.tpm, self.prev_epoch_mode)?;
        self.epoch_mode = Some(est);
        if self.pending && self.set.singleton().is_some() {
            if let Some(t) = self.commit()? {
                transition = Some(t);
            }
        }
        self.estimate = Some(est);
        Ok(IdUpdate {
            estimate: est,
            switched: n.switched,
            transition,
            ambiguous: self.set.candidates.len() > 1,
        })
    }

    /// Feeds a known mode instead of an estimate (ground-truth ablation).
    pub fn observe_true(&mut self, mode: usize) -> Result<IdUpdate> {
        let switched = self.estimate.is_some_and(|p| p != mode);
        let mut transition = None;
        if switched {
            self.prev_epoch_mode = self.epoch_mode;
            self.epoch_mode = Some(mode);
            transition = self.commit()?;
        }
        self.estimate = Some(mode);
        self.epoch_mode = Some(mode);
        self.set = ConsistentSet {
            candidates: BTreeSet::from([mode]),
            last_reset_step: self.set.last_reset_step,
        };
        Ok(IdUpdate {
            estimate: mode,
            switched,
            transition,
            ambiguous: false,
        })
    }
}
