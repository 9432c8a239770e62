//! Finite Markov chain over mode indices.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Markov chain driving the jumps: `tpm[i][j] = P(next = j | current = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeChain {
    tpm: DMatrix<f64>,
    initial_mode: usize,
}

impl ModeChain {
    pub fn new(tpm: DMatrix<f64>, initial_mode: usize) -> Result<Self> {
        validate_tpm(&tpm)?;
        if initial_mode >= tpm.nrows() {
            return Err(Error::InvalidArgument(format!(
                "initial mode {initial_mode} out of range for {} modes",
                tpm.nrows()
            )));
        }
        Ok(Self { tpm, initial_mode })
    }

    pub fn from_rows(rows: &[Vec<f64>], initial_mode: usize) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?, initial_mode)
    }

    pub fn num_modes(&self) -> usize {
        self.tpm.nrows()
    }

    pub fn tpm(&self) -> &DMatrix<f64> {
        &self.tpm
    }

    pub fn initial_mode(&self) -> usize {
        self.initial_mode
    }

    pub fn with_initial_mode(&self, mode: usize) -> Result<Self> {
        Self::new(self.tpm.clone(), mode)
    }

    pub fn is_irreducible(&self) -> bool {
        is_irreducible(&self.tpm)
    }

    /// Draws the successor of `current`.
    pub fn step<R: Rng + ?Sized>(&self, current: usize, rng: &mut R) -> usize {
        sample_row(&self.tpm, current, rng)
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidTpm("empty matrix".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidTpm("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(n, cols, |i, j| rows[i][j]))
}

/// Checks squareness, entries in `[0, 1]` and unit row sums.
pub fn validate_tpm(tpm: &DMatrix<f64>) -> Result<()> {
    if tpm.nrows() == 0 || !tpm.is_square() {
        return Err(Error::InvalidTpm(format!(
            "expected a non-empty square matrix, got {}x{}",
            tpm.nrows(),
            tpm.ncols()
        )));
    }
    for (i, row) in tpm.row_iter().enumerate() {
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
            return Err(Error::InvalidTpm(format!("row {i} has entries outside [0, 1]")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidTpm(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Strong connectivity of the positive-entry support graph.
pub fn is_irreducible(tpm: &DMatrix<f64>) -> bool {
    let n = tpm.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let p = if forward { tpm[(i, j)] } else { tpm[(j, i)] };
                if p > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n > 0 && reach(true) && reach(false)
}

/// Stationary distribution of an irreducible chain.
pub fn stationary_distribution(tpm: &DMatrix<f64>) -> Result<DVector<f64>> {
    if !is_irreducible(tpm) {
        return Err(Error::Reducible);
    }
    let n = tpm.nrows();
    // Solve pi^T (I - P) = 0 with sum(pi) = 1 by replacing one equation.
    let mut a = (DMatrix::identity(n, n) - tpm).transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("stationary system is singular".into()))?;
    Ok(pi)
}

/// Deviation matrix `D = (I - P + 1 pi^T)^{-1} - 1 pi^T`.
///
/// It satisfies `(I - P) D = I - 1 pi^T`, so for every mode `i`
/// `D[X_n, i] + #{t < n : X_t = i} - n * pi_i` is a martingale.
pub fn deviation_matrix(tpm: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let pi = stationary_distribution(tpm)?;
    let n = tpm.nrows();
    let one_pi = DMatrix::from_fn(n, n, |_, j| pi[j]);
    let z = (DMatrix::identity(n, n) - tpm + &one_pi)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("fundamental matrix is singular".into()))?;
    Ok((z - one_pi, pi))
}

fn sample_row<R: Rng + ?Sized>(tpm: &DMatrix<f64>, row: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let n = tpm.ncols();
    for j in 0..n {
        acc += tpm[(row, j)];
        if u < acc {
            return j;
        }
    }
    // Round-off: fall back to the last state with positive mass.
    (0..n).rev().find(|&j| tpm[(row, j)] > 0.0).unwrap_or(n - 1)
}

/// How long the chain stays in a mode before the next transition is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DwellTime {
    /// A transition is drawn at every step.
    #[default]
    PerStep,
    /// Each mode epoch lasts exactly this many steps.
    Fixed(usize),
}

impl DwellTime {
    fn steps(self) -> usize {
        match self {
            DwellTime::PerStep => 1,
            DwellTime::Fixed(n) => n.max(1),
        }
    }
}

/// A sampled realisation of the mode process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSequence {
    /// Active mode at each step `0..num_steps`.
    pub modes: Vec<usize>,
    /// Steps at which the mode changed (the start is not a switch).
    pub switch_times: Vec<usize>,
    /// Mode of each epoch, including epochs where the draw repeated the mode.
    pub epochs: Vec<usize>,
}

pub fn sample_mode_sequence(
    chain: &ModeChain,
    num_steps: usize,
    dwell: DwellTime,
    seed: u64,
) -> Result<ModeSequence> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("num_steps must be at least 1".into()));
    }
    validate_tpm(chain.tpm())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dwell.steps();
    let mut modes = Vec::with_capacity(num_steps);
    let mut switch_times = Vec::new();
    let mut epochs = vec![chain.initial_mode()];
    let mut current = chain.initial_mode();
    for t in 0..num_steps {
        if t > 0 && t % d == 0 {
            let next = chain.step(current, &mut rng);
            epochs.push(next);
            if next != current {
                switch_times.push(t);
            }
            current = next;
        }
        modes.push(current);
    }
    Ok(ModeSequence {
        modes,
        switch_times,
        epochs,
    })
}
