//! Gambling-team gains and the closed forms built on them.

use nalgebra::{DMatrix, DVector};

use super::{AugmentedCollection, EndingStringSet, PatternProblem};
use crate::chain::deviation_matrix;
use crate::linalg::{condition_number, solve_checked};
use crate::{Error, Result};

/// Largest condition number accepted for the linear solves.
pub const MAX_CONDITION: f64 = 1e12;
/// Negative probabilities down to `-PROB_CLAMP` are treated as round-off.
pub const PROB_CLAMP: f64 = 1e-9;

/// Wealth held at the end of `history` by a team betting at fair odds.
///
/// `history[0]` is a conditioning state and is never bet on. A fresh gambler
/// with unit stake joins before every later symbol `history[n]` (only when
/// `history[n-1] == entry_state`, if given) and bets on `bet[0], bet[1], ...`
/// in turn, multiplying its wealth by `1 / P(prev, next)` on every hit and
/// losing everything on a miss. Gamblers still alive at the end contribute
/// their wealth; gamblers that finished the whole bet earlier are ignored.
pub fn fair_team_wealth(tpm: &DMatrix<f64>, bet: &[usize], history: &[usize], entry_state: Option<usize>) -> f64 {
    let mut total = 0.0;
    for n in 1..history.len() {
        if entry_state.is_some_and(|e| history[n - 1] != e) {
            continue;
        }
        let rest = &history[n..];
        if rest.len() > bet.len() || bet[..rest.len()] != *rest {
            continue;
        }
        let mut wealth = 1.0;
        let mut prev = history[n - 1];
        for &sym in rest {
            wealth /= tpm[(prev, sym)];
            prev = sym;
        }
        total += wealth;
    }
    total
}

/// Gain matrix with its solved initial rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    /// Rows: ending strings (initial first); columns: augmented patterns.
    pub w: DMatrix<f64>,
    pub num_initial: usize,
    pub c_star: DVector<f64>,
    /// Condition number of the later-row block.
    pub condition: f64,
}

impl GainMatrix {
    pub fn later_block(&self) -> DMatrix<f64> {
        self.w.rows(self.num_initial, self.w.nrows() - self.num_initial).into_owned()
    }

    pub fn initial_block(&self) -> DMatrix<f64> {
        self.w.rows(0, self.num_initial).into_owned()
    }
}

/// `W[s, l]`: normalised net gain of team `l` when the process stops on string `s`.
///
/// Team `l = (m1, m2) ∘ psi` enters only after visits to `m1` and bets on
/// `(m2) ∘ psi`. Its raw wealth is corrected by the deviation matrix so that
/// the entry count is replaced by its stationary rate; dividing by `pi[m1]`
/// makes every team's net reward `W - tau` a zero-mean martingale increment.
pub fn compute_gain_matrix(
    gamma: &AugmentedCollection,
    endings: &EndingStringSet,
    tpm: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (d, pi) = deviation_matrix(tpm)?;
    let phi0 = gamma.start_mode;
    let rows: Vec<&Vec<usize>> = endings.strings().collect();
    let mut w = DMatrix::zeros(rows.len(), gamma.len());
    for (s, string) in rows.iter().enumerate() {
        let last = *string.last().expect("ending strings are non-empty");
        for (l, g) in gamma.augmented.iter().enumerate() {
            let m1 = g[0];
            let raw = fair_team_wealth(tpm, &g[1..], string, Some(m1));
            w[(s, l)] = (raw + d[(last, m1)] - d[(phi0, m1)]) / pi[m1];
        }
    }
    Ok(w)
}

/// Solves `W_later c* = 1`.
pub fn solve_initial_rewards(w: DMatrix<f64>, num_initial: usize) -> Result<GainMatrix> {
    let kl = w.ncols();
    if w.nrows() != num_initial + kl {
        return Err(Error::DimensionMismatch {
            context: "gain matrix rows",
            expected: num_initial + kl,
            got: w.nrows(),
        });
    }
    let later = w.rows(num_initial, kl).into_owned();
    let ones = DVector::from_element(kl, 1.0);
    let c_star = solve_checked(&later, &ones, MAX_CONDITION).map_err(|condition| Error::DegenerateCollection {
        reason: "later-string gain block is singular".into(),
        condition,
    })?;
    let residual = (&later * &c_star - &ones).amax();
    let condition = condition_number(&later);
    if residual > 1e-9 {
        return Err(Error::DegenerateCollection {
            reason: format!("initial-reward residual {residual:.3e}"),
            condition,
        });
    }
    Ok(GainMatrix {
        w,
        num_initial,
        c_star,
        condition,
    })
}

/// `E[tau] = ((1 - sum P_I) + P_I^T W_I c*) / sum c*`.
pub fn expected_tau(problem: &PatternProblem) -> Result<f64> {
    let g = &problem.gain;
    let p_i = DVector::from_vec(problem.endings.initial_probs.clone());
    let sum_c = g.c_star.sum();
    if sum_c.abs() < 1e-300 || !sum_c.is_finite() {
        return Err(Error::DegenerateCollection {
            reason: "initial rewards sum to zero".into(),
            condition: g.condition,
        });
    }
    let initial_gain = if g.num_initial > 0 {
        p_i.dot(&(g.initial_block() * &g.c_star))
    } else {
        0.0
    };
    let tau = ((1.0 - p_i.sum()) + initial_gain) / sum_c;
    if !tau.is_finite() {
        return Err(Error::Numerical(format!("expected occurrence time is {tau}")));
    }
    Ok(tau)
}

/// Solves `W_later^T P_L = E[tau] 1 - W_I^T P_I` for the later-string
/// termination probabilities and aggregates them per pattern.
///
/// Returns `(q, P_L)`.
pub fn first_occurrence_probs(problem: &PatternProblem, expected_tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = &problem.gain;
    let e = &problem.endings;
    let kl = g.w.ncols();
    let p_i = DVector::from_vec(e.initial_probs.clone());
    let mut rhs = DVector::from_element(kl, expected_tau);
    if g.num_initial > 0 {
        rhs -= g.initial_block().transpose() * &p_i;
    }
    let p_l = solve_checked(&g.later_block().transpose(), &rhs, MAX_CONDITION).map_err(|condition| {
        Error::DegenerateCollection {
            reason: "first-occurrence system is singular".into(),
            condition,
        }
    })?;

    let mut q = vec![0.0; problem.psi.len()];
    for (p, &k) in e.initial_probs.iter().zip(&e.initial_group) {
        q[k] += p;
    }
    for (p, &k) in p_l.iter().zip(&problem.gamma.group_of) {
        q[k] += p;
    }
    let later_probs = clamp_probabilities(p_l.iter().copied().collect())?;
    let q = clamp_probabilities(q)?;
    let total: f64 = q.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("first-occurrence probabilities sum to zero".into()));
    }
    Ok((q.into_iter().map(|p| p / total).collect(), later_probs))
}

fn clamp_probabilities(mut p: Vec<f64>) -> Result<Vec<f64>> {
    for v in &mut p {
        if *v < -PROB_CLAMP || !v.is_finite() {
            return Err(Error::Numerical(format!("negative probability {v:.3e}")));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(p)
}
