//! Monte Carlo estimates used to cross-check the closed forms.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{fair_team_wealth, path_probability, PatternCollection, OCCURRENCE_OFFSET};
use crate::chain::validate_tpm;
use crate::{Error, Result};

const CHUNK: usize = 1 << 14;
/// Per-trial step cap, guarding against chains that never hit a pattern.
pub const MAX_TRIAL_STEPS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub trials: usize,
    pub mean_tau: f64,
    /// `None` with a single trial.
    pub se_tau: Option<f64>,
    pub q: Vec<f64>,
    pub q_se: Vec<Option<f64>>,
}

struct Sampler {
    cumulative: Vec<Vec<f64>>,
}

impl Sampler {
    fn new(tpm: &DMatrix<f64>) -> Self {
        let cumulative = (0..tpm.nrows())
            .map(|i| {
                let mut acc = 0.0;
                tpm.row(i)
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { cumulative }
    }

    fn next<R: Rng>(&self, cur: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.cumulative[cur];
        row.iter()
            .position(|&c| u < c)
            .unwrap_or_else(|| row.iter().rposition(|&c| c > 0.0).unwrap_or(row.len() - 1))
    }
}

fn check_reachable(tpm: &DMatrix<f64>, psi: &PatternCollection, phi0: usize) -> Result<()> {
    let m = tpm.nrows();
    if phi0 >= m {
        return Err(Error::InvalidArgument(format!("start mode {phi0} >= {m}")));
    }
    // States reachable in at least OCCURRENCE_OFFSET steps.
    let mut frontier = vec![phi0];
    for _ in 0..OCCURRENCE_OFFSET {
        let mut next: Vec<usize> = frontier
            .iter()
            .flat_map(|&i| (0..m).filter(move |&j| tpm[(i, j)] > 0.0))
            .collect();
        next.sort_unstable();
        next.dedup();
        frontier = next;
    }
    let mut seen = vec![false; m];
    let mut stack = frontier;
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        stack.extend((0..m).filter(|&j| tpm[(i, j)] > 0.0 && !seen[j]));
    }
    let any = psi.patterns().iter().any(|p| seen[p[0]] && path_probability(tpm, p) > 0.0);
    if any {
        Ok(())
    } else {
        Err(Error::UnreachablePatterns)
    }
}

struct Matcher {
    lookup: HashMap<u64, usize>,
    modulus: u64,
    base: u64,
    len: usize,
}

impl Matcher {
    fn new(psi: &PatternCollection, num_modes: usize) -> Result<Self> {
        let base = num_modes as u64;
        let len = psi.pattern_len();
        let modulus = base
            .checked_pow(len as u32)
            .filter(|&m| m < u64::MAX / base.max(1))
            .ok_or_else(|| Error::InvalidArgument("pattern space too large to encode".into()))?;
        let lookup = psi
            .patterns()
            .iter()
            .enumerate()
            .map(|(k, p)| (p.iter().fold(0u64, |c, &s| c * base + s as u64), k))
            .collect();
        Ok(Self {
            lookup,
            modulus,
            base,
            len,
        })
    }

    /// Simulates from `phi0` until the first occurrence; returns `(tau, k)`,
    /// pushing visited states into `history` when given.
    fn run<R: Rng>(
        &self,
        sampler: &Sampler,
        phi0: usize,
        rng: &mut R,
        mut history: Option<&mut Vec<usize>>,
    ) -> Result<(usize, usize)> {
        let mut cur = phi0;
        let mut code = 0u64;
        if let Some(h) = history.as_deref_mut() {
            h.clear();
            h.push(phi0);
        }
        for t in 1..=MAX_TRIAL_STEPS {
            cur = sampler.next(cur, rng);
            if let Some(h) = history.as_deref_mut() {
                h.push(cur);
            }
            if t >= OCCURRENCE_OFFSET {
                code = (code * self.base + cur as u64) % self.modulus;
                if t + 1 >= OCCURRENCE_OFFSET + self.len {
                    if let Some(&k) = self.lookup.get(&code) {
                        return Ok((t, k));
                    }
                }
            }
        }
        Err(Error::Numerical(format!("no pattern occurred within {MAX_TRIAL_STEPS} steps")))
    }
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

fn chunks(trials: usize) -> Vec<(usize, usize)> {
    (0..trials.div_ceil(CHUNK))
        .map(|c| (c, CHUNK.min(trials - c * CHUNK)))
        .collect()
}

#[derive(Default)]
struct Tally {
    sum: f64,
    sum_sq: f64,
    counts: Vec<u64>,
}

/// Empirical occurrence time and first-occurrence frequencies.
///
/// Deterministic for a given seed regardless of thread count.
pub fn monte_carlo_oracle(
    tpm: &DMatrix<f64>,
    psi: &PatternCollection,
    phi0: usize,
    trials: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    validate_tpm(tpm)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    check_reachable(tpm, psi, phi0)?;
    let sampler = Sampler::new(tpm);
    let matcher = Matcher::new(psi, tpm.nrows())?;
    let k = psi.len();
    let parts: Vec<Result<Tally>> = chunks(trials)
        .into_par_iter()
        .map(|(c, n)| {
            let mut rng = chunk_rng(seed, c);
            let mut tally = Tally {
                counts: vec![0; k],
                ..Default::default()
            };
            for _ in 0..n {
                let (tau, which) = matcher.run(&sampler, phi0, &mut rng, None)?;
                let tau = tau as f64;
                tally.sum += tau;
                tally.sum_sq += tau * tau;
                tally.counts[which] += 1;
            }
            Ok(tally)
        })
        .collect();
    let mut total = Tally {
        counts: vec![0; k],
        ..Default::default()
    };
    for part in parts {
        let part = part?;
        total.sum += part.sum;
        total.sum_sq += part.sum_sq;
        for (a, b) in total.counts.iter_mut().zip(part.counts) {
            *a += b;
        }
    }
    let n = trials as f64;
    let mean_tau = total.sum / n;
    let se = |var: f64| (trials > 1).then(|| (var.max(0.0) * n / (n - 1.0) / n).sqrt());
    let q: Vec<f64> = total.counts.iter().map(|&c| c as f64 / n).collect();
    Ok(OracleEstimate {
        trials,
        mean_tau,
        se_tau: se(total.sum_sq / n - mean_tau * mean_tau),
        q_se: q.iter().map(|&p| se(p * (1.0 - p))).collect(),
        q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeamNetReward {
    pub mean: f64,
    pub se: f64,
}

/// Plays one gambling team directly until the first pattern occurs and
/// reports its wealth minus total stakes. The team must end with a pattern of
/// `psi`, so no gambler can complete its bet before the stop.
pub fn team_net_reward(
    tpm: &DMatrix<f64>,
    psi: &PatternCollection,
    phi0: usize,
    team: &[usize],
    trials: usize,
    seed: u64,
) -> Result<TeamNetReward> {
    validate_tpm(tpm)?;
    let l = psi.pattern_len();
    if team.len() != l + 2 || psi.find(&team[2..]).is_none() {
        return Err(Error::InvalidArgument("team must be (m1, m2) followed by a pattern".into()));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument("at least two trials are required".into()));
    }
    check_reachable(tpm, psi, phi0)?;
    let sampler = Sampler::new(tpm);
    let matcher = Matcher::new(psi, tpm.nrows())?;
    let parts: Vec<Result<(f64, f64)>> = chunks(trials)
        .into_par_iter()
        .map(|(c, n)| {
            let mut rng = chunk_rng(seed ^ 0x9e37_79b9_7f4a_7c15, c);
            let mut history = Vec::new();
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                matcher.run(&sampler, phi0, &mut rng, Some(&mut history))?;
                let wealth = fair_team_wealth(tpm, &team[1..], &history, Some(team[0]));
                let stakes = history[..history.len() - 1].iter().filter(|&&x| x == team[0]).count() as f64;
                let net = wealth - stakes;
                s += net;
                s2 += net * net;
            }
            Ok((s, s2))
        })
        .collect();
    let (mut s, mut s2) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        s += a;
        s2 += b;
    }
    let n = trials as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(TeamNetReward {
        mean,
        se: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_chain_has_zero_variance() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let psi = PatternCollection::new(vec![vec![0, 1]], 2).unwrap();
        let est = monte_carlo_oracle(&p, &psi, 0, 100, 3).unwrap();
        assert_eq!(est.mean_tau, 3.0);
        assert_eq!(est.se_tau, Some(0.0));
        assert_eq!(est.q, vec![1.0]);
    }

    #[test]
    fn single_trial_has_no_standard_error() {
        let p = DMatrix::from_element(2, 2, 0.5);
        let psi = PatternCollection::new(vec![vec![0, 0]], 2).unwrap();
        let est = monte_carlo_oracle(&p, &psi, 0, 1, 3).unwrap();
        assert!(est.se_tau.is_none());
        assert!(est.q_se.iter().all(Option::is_none));
    }

    #[test]
    fn unreachable_is_reported() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let psi = PatternCollection::new(vec![vec![1, 1]], 2).unwrap();
        assert_eq!(monte_carlo_oracle(&p, &psi, 0, 10, 0).unwrap_err(), Error::UnreachablePatterns);
    }

    #[test]
    fn seeded_runs_repeat() {
        let p = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let psi = PatternCollection::new(vec![vec![0, 0, 1], vec![1, 1, 1]], 2).unwrap();
        let a = monte_carlo_oracle(&p, &psi, 1, 40_000, 9).unwrap();
        let b = monte_carlo_oracle(&p, &psi, 1, 40_000, 9).unwrap();
        assert_eq!(a, b);
    }
}
