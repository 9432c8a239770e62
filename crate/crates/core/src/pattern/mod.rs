//! Pattern-occurrence statistics on a finite Markov mode chain.
//!
//! Given a collection of equal-length mode patterns, computes the expected
//! time until the first of them occurs and the probability that each one is
//! the first, both in closed form from a system of fair gambling teams.
//!
//! Index convention: the chain starts at `X_0 = phi0`, which only conditions
//! the first transition. An occurrence must lie entirely in `X_1, X_2, ...`
//! (see [`OCCURRENCE_OFFSET`]), and `tau` is the index of its last symbol.

mod gain;
mod oracle;

pub use gain::{
    compute_gain_matrix, expected_tau, fair_team_wealth, first_occurrence_probs, solve_initial_rewards, GainMatrix,
    MAX_CONDITION, PROB_CLAMP,
};
pub use oracle::{monte_carlo_oracle, team_net_reward, OracleEstimate, TeamNetReward};

use nalgebra::DMatrix;

use crate::chain::validate_tpm;
use crate::{Error, Result};

/// First index at which a pattern symbol may sit.
pub const OCCURRENCE_OFFSET: usize = 1;

/// Equal-length, distinct mode patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternCollection {
    patterns: Vec<Vec<usize>>,
}

impl PatternCollection {
    pub fn new(patterns: Vec<Vec<usize>>, num_modes: usize) -> Result<Self> {
        let Some(first) = patterns.first() else {
            return Err(Error::InvalidArgument("pattern collection is empty".into()));
        };
        let len = first.len();
        if len == 0 {
            return Err(Error::InvalidArgument("patterns must be non-empty".into()));
        }
        for (k, p) in patterns.iter().enumerate() {
            if p.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "pattern {k} has length {} but pattern 0 has length {len}",
                    p.len()
                )));
            }
            if let Some(&s) = p.iter().find(|&&s| s >= num_modes) {
                return Err(Error::InvalidArgument(format!("pattern {k} uses mode {s} >= {num_modes}")));
            }
            if patterns[..k].contains(p) {
                return Err(Error::InvalidArgument(format!("pattern {k} is a duplicate")));
            }
        }
        Ok(Self { patterns })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn pattern_len(&self) -> usize {
        self.patterns[0].len()
    }

    pub fn patterns(&self) -> &[Vec<usize>] {
        &self.patterns
    }

    pub fn get(&self, k: usize) -> &[usize] {
        &self.patterns[k]
    }

    /// Index of the pattern equal to `window`, if any.
    pub fn find(&self, window: &[usize]) -> Option<usize> {
        self.patterns.iter().position(|p| p == window)
    }
}

pub(crate) fn path_probability(tpm: &DMatrix<f64>, path: &[usize]) -> f64 {
    path.windows(2).map(|w| tpm[(w[0], w[1])]).product()
}

/// Patterns extended by a two-symbol prefix: `gamma = (m1, m2) ∘ psi_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedCollection {
    pub augmented: Vec<Vec<usize>>,
    pub group_of: Vec<usize>,
    pub start_mode: usize,
}

impl AugmentedCollection {
    pub fn len(&self) -> usize {
        self.augmented.len()
    }

    pub fn is_empty(&self) -> bool {
        self.augmented.is_empty()
    }
}

/// Enumerates every prefix `(m1, m2)` whose augmented path has positive
/// probability. Identical strings from different groups cannot arise since the
/// patterns are distinct.
pub fn augment_collection(psi: &PatternCollection, phi0: usize, tpm: &DMatrix<f64>) -> Result<AugmentedCollection> {
    validate_tpm(tpm)?;
    let m = tpm.nrows();
    if phi0 >= m {
        return Err(Error::InvalidArgument(format!("start mode {phi0} >= {m}")));
    }
    let mut augmented = Vec::new();
    let mut group_of = Vec::new();
    for (k, p) in psi.patterns().iter().enumerate() {
        for m1 in 0..m {
            for m2 in 0..m {
                let mut g = Vec::with_capacity(p.len() + 2);
                g.push(m1);
                g.push(m2);
                g.extend_from_slice(p);
                if path_probability(tpm, &g) > 0.0 {
                    augmented.push(g);
                    group_of.push(k);
                }
            }
        }
    }
    if augmented.is_empty() {
        return Err(Error::UnreachablePatterns);
    }
    Ok(AugmentedCollection {
        augmented,
        group_of,
        start_mode: phi0,
    })
}

/// Terminal strings of the stopped process.
///
/// Initial strings `(phi0) ∘ psi_k` describe an occurrence at the earliest
/// possible index; later strings are the augmented patterns themselves, i.e.
/// the last `L + 2` symbols of any later termination.
#[derive(Debug, Clone, PartialEq)]
pub struct EndingStringSet {
    pub initial: Vec<Vec<usize>>,
    pub initial_probs: Vec<f64>,
    pub initial_group: Vec<usize>,
    pub later: Vec<Vec<usize>>,
}

impl EndingStringSet {
    pub fn build(psi: &PatternCollection, gamma: &AugmentedCollection, tpm: &DMatrix<f64>) -> Self {
        let mut initial = Vec::new();
        let mut initial_probs = Vec::new();
        let mut initial_group = Vec::new();
        for (k, p) in psi.patterns().iter().enumerate() {
            let mut s = Vec::with_capacity(p.len() + 1);
            s.push(gamma.start_mode);
            s.extend_from_slice(p);
            let prob = path_probability(tpm, &s);
            if prob > 0.0 {
                initial.push(s);
                initial_probs.push(prob);
                initial_group.push(k);
            }
        }
        Self {
            initial,
            initial_probs,
            initial_group,
            later: gamma.augmented.clone(),
        }
    }

    pub fn num_initial(&self) -> usize {
        self.initial.len()
    }

    pub fn num_later(&self) -> usize {
        self.later.len()
    }

    /// All strings, initial first.
    pub fn strings(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.initial.iter().chain(self.later.iter())
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.strings().map(Vec::len).collect()
    }
}

/// Closed-form results for one pattern problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OccurrenceStats {
    pub expected_tau: f64,
    /// First-occurrence probability per pattern.
    pub q: Vec<f64>,
    /// Probability that the process terminates on each later string.
    pub later_probs: Vec<f64>,
    /// Expected occurrence time of each pattern on its own, where solvable.
    pub per_pattern_tau: Vec<Option<f64>>,
    pub condition: f64,
}

/// Everything needed to evaluate the closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternProblem {
    pub tpm: DMatrix<f64>,
    pub psi: PatternCollection,
    pub gamma: AugmentedCollection,
    pub endings: EndingStringSet,
    pub gain: GainMatrix,
}

impl PatternProblem {
    pub fn new(tpm: &DMatrix<f64>, psi: PatternCollection, phi0: usize) -> Result<Self> {
        let gamma = augment_collection(&psi, phi0, tpm)?;
        let endings = EndingStringSet::build(&psi, &gamma, tpm);
        let w = compute_gain_matrix(&gamma, &endings, tpm)?;
        let gain = solve_initial_rewards(w, endings.num_initial())?;
        Ok(Self {
            tpm: tpm.clone(),
            psi,
            gamma,
            endings,
            gain,
        })
    }

    pub fn start_mode(&self) -> usize {
        self.gamma.start_mode
    }

    /// Evaluates `E[tau]`, `q` and the per-pattern diagnostics.
    pub fn solve(&self) -> Result<OccurrenceStats> {
        let tau = expected_tau(self)?;
        let (q, later_probs) = first_occurrence_probs(self, tau)?;
        let per_pattern_tau = if self.psi.len() == 1 {
            vec![Some(tau)]
        } else {
            self.psi
                .patterns()
                .iter()
                .map(|p| {
                    let single = PatternCollection { patterns: vec![p.clone()] };
                    PatternProblem::new(&self.tpm, single, self.start_mode())
                        .and_then(|pp| expected_tau(&pp))
                        .ok()
                })
                .collect()
        };
        Ok(OccurrenceStats {
            expected_tau: tau,
            q,
            later_probs,
            per_pattern_tau,
            condition: self.gain.condition,
        })
    }
}

/// Index of the most likely first pattern, ties to the lowest index.
pub fn most_likely_pattern(q: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &p) in q.iter().enumerate() {
        if best.is_none_or(|b| p > q[b]) {
            best = Some(k);
        }
    }
    best
}
