//! Model-based and topology-robust synthesis.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{validate_achievability, SlsProblem, Support, SystemResponse};
use crate::linalg::{lexicographic_lsq, psd_sqrt};
use crate::{Error, Result};

/// Largest constraint residual accepted from a model-based solve.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Dense per-column least-squares data in full (unmasked) coordinates.
///
/// Unknowns: `x_2..x_H` (state columns) then `u_1..u_H`.
struct ColumnSystem {
    c: DMatrix<f64>,
    d: DVector<f64>,
    f: DMatrix<f64>,
    g: DVector<f64>,
    /// Indices of unknowns allowed to be non-zero.
    free: Vec<usize>,
}

struct Layout {
    nx: usize,
    nu: usize,
    h: usize,
}

impl Layout {
    fn of(p: &SlsProblem) -> Self {
        Self {
            nx: p.state_dim(),
            nu: p.input_dim(),
            h: p.horizon,
        }
    }

    fn num_vars(&self) -> usize {
        (self.h - 1) * self.nx + self.h * self.nu
    }

    /// Offset of `x_s`, `s >= 2`.
    fn xi(&self, s: usize) -> usize {
        (s - 2) * self.nx
    }

    fn ui(&self, s: usize) -> usize {
        (self.h - 1) * self.nx + (s - 1) * self.nu
    }

    fn free(&self, support: Option<&Support>, col: usize) -> Vec<usize> {
        let mut free = Vec::with_capacity(self.num_vars());
        for s in 2..=self.h {
            for j in 0..self.nx {
                if support.is_none_or(|m| m.x[s - 1][(j, col)]) {
                    free.push(self.xi(s) + j);
                }
            }
        }
        for s in 1..=self.h {
            for k in 0..self.nu {
                if support.is_none_or(|m| m.u[s - 1][(k, col)]) {
                    free.push(self.ui(s) + k);
                }
            }
        }
        free
    }
}

/// Achievability equations for column `col` of one `(A, B)`:
/// `x_{s+1} - A x_s - B u_s = 0` for `s < H` and `A x_H + B u_H = 0`, with `x_1 = e_col`.
fn constraint_rows(l: &Layout, a: &DMatrix<f64>, b: &DMatrix<f64>, col: usize) -> (DMatrix<f64>, DVector<f64>) {
    let (nx, h) = (l.nx, l.h);
    let mut c = DMatrix::zeros(h * nx, l.num_vars());
    let mut d = DVector::zeros(h * nx);
    for s in 1..=h {
        let row = (s - 1) * nx;
        if s < h {
            c.view_mut((row, l.xi(s + 1)), (nx, nx)).fill_with_identity();
        }
        if s == 1 {
            // A x_1 moves to the right-hand side (sign flips for the closure row).
            let sign = if s < h { 1.0 } else { -1.0 };
            d.rows_mut(row, nx).copy_from(&(a.column(col) * sign));
        } else {
            let sign = if s < h { -1.0 } else { 1.0 };
            c.view_mut((row, l.xi(s)), (nx, nx)).copy_from(&(a * sign));
        }
        let sign = if s < h { -1.0 } else { 1.0 };
        c.view_mut((row, l.ui(s)), (nx, l.nu)).copy_from(&(b * sign));
    }
    (c, d)
}

fn objective_rows(l: &Layout, q_half: &DMatrix<f64>, r_half: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let rows = (l.h - 1) * l.nx + l.h * l.nu;
    let mut f = DMatrix::zeros(rows, l.num_vars());
    for s in 2..=l.h {
        f.view_mut((l.xi(s), l.xi(s)), (l.nx, l.nx)).copy_from(q_half);
    }
    for s in 1..=l.h {
        f.view_mut((l.ui(s), l.ui(s)), (l.nu, l.nu)).copy_from(r_half);
    }
    (f, DVector::zeros(rows))
}

fn column_system(
    l: &Layout,
    models: &[(&DMatrix<f64>, &DMatrix<f64>)],
    q_half: &DMatrix<f64>,
    r_half: &DMatrix<f64>,
    support: Option<&Support>,
    col: usize,
) -> ColumnSystem {
    let blocks: Vec<_> = models.iter().map(|(a, b)| constraint_rows(l, a, b, col)).collect();
    let rows: usize = blocks.iter().map(|(c, _)| c.nrows()).sum();
    let mut c = DMatrix::zeros(rows, l.num_vars());
    let mut d = DVector::zeros(rows);
    let mut at = 0;
    for (cb, db) in blocks {
        c.view_mut((at, 0), cb.shape()).copy_from(&cb);
        d.rows_mut(at, db.len()).copy_from(&db);
        at += cb.nrows();
    }
    let (f, g) = objective_rows(l, q_half, r_half);
    ColumnSystem {
        c,
        d,
        f,
        g,
        free: l.free(support, col),
    }
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Solves a column; returns the full unknown vector and the constraint residual.
fn solve_column(sys: &ColumnSystem, n: usize) -> (DVector<f64>, f64) {
    let c = select_columns(&sys.c, &sys.free);
    let f = select_columns(&sys.f, &sys.free);
    let sol = lexicographic_lsq(&c, &sys.d, &f, &sys.g);
    let mut z = DVector::zeros(n);
    for (k, &idx) in sys.free.iter().enumerate() {
        z[idx] = sol.z[k];
    }
    (z, sol.constraint_residual)
}

fn assemble(l: &Layout, columns: &[DVector<f64>], support: Option<&Support>) -> SystemResponse {
    let mut phi_x = vec![DMatrix::zeros(l.nx, l.nx); l.h];
    let mut phi_u = vec![DMatrix::zeros(l.nu, l.nx); l.h];
    phi_x[0].fill_with_identity();
    for (col, z) in columns.iter().enumerate() {
        for s in 2..=l.h {
            phi_x[s - 1].column_mut(col).copy_from(&z.rows(l.xi(s), l.nx));
        }
        for s in 1..=l.h {
            phi_u[s - 1].column_mut(col).copy_from(&z.rows(l.ui(s), l.nu));
        }
    }
    SystemResponse {
        phi_x,
        phi_u,
        support: support.cloned(),
    }
}

fn weights(p: &SlsProblem) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((psd_sqrt(&p.q)?, psd_sqrt(&p.r)?))
}

/// Minimises `sum_s ||Q^{1/2} Phi_x[s]||^2 + ||R^{1/2} Phi_u[s]||^2` over
/// achievable responses within the support, one disturbance column at a time.
pub fn synthesize(p: &SlsProblem) -> Result<SystemResponse> {
    let l = Layout::of(p);
    let (qh, rh) = weights(p)?;
    let support = p.support.as_ref();
    let solved: Vec<(DVector<f64>, f64)> = (0..l.nx)
        .into_par_iter()
        .map(|col| solve_column(&column_system(&l, &[(&p.a, &p.b)], &qh, &rh, support, col), l.num_vars()))
        .collect();
    if let Some((column, (_, residual))) = solved
        .iter()
        .enumerate()
        .find(|(_, (_, r))| *r > FEASIBILITY_TOL)
    {
        return Err(Error::InfeasibleLocality {
            column,
            residual: *residual,
        });
    }
    let cols: Vec<_> = solved.into_iter().map(|(z, _)| z).collect();
    Ok(assemble(&l, &cols, support))
}

/// Same problem solved as one block system over all columns at once.
pub fn synthesize_joint(p: &SlsProblem) -> Result<SystemResponse> {
    let l = Layout::of(p);
    let (qh, rh) = weights(p)?;
    let support = p.support.as_ref();
    let systems: Vec<ColumnSystem> = (0..l.nx)
        .map(|col| column_system(&l, &[(&p.a, &p.b)], &qh, &rh, support, col))
        .collect();
    let n = l.num_vars();
    let (cr, fr) = (systems[0].c.nrows(), systems[0].f.nrows());
    let mut c = DMatrix::zeros(cr * l.nx, n * l.nx);
    let mut d = DVector::zeros(cr * l.nx);
    let mut f = DMatrix::zeros(fr * l.nx, n * l.nx);
    let mut g = DVector::zeros(fr * l.nx);
    let mut free = Vec::new();
    for (i, s) in systems.iter().enumerate() {
        c.view_mut((i * cr, i * n), (cr, n)).copy_from(&s.c);
        d.rows_mut(i * cr, cr).copy_from(&s.d);
        f.view_mut((i * fr, i * n), (fr, n)).copy_from(&s.f);
        g.rows_mut(i * fr, fr).copy_from(&s.g);
        free.extend(s.free.iter().map(|&k| i * n + k));
    }
    let (z, residual) = solve_column(&ColumnSystem { c, d, f, g, free }, n * l.nx);
    if residual > FEASIBILITY_TOL {
        // Attribute the failure to the first column that cannot be satisfied on its own.
        let column = systems
            .iter()
            .position(|s| solve_column(s, n).1 > FEASIBILITY_TOL)
            .unwrap_or(0);
        return Err(Error::InfeasibleLocality { column, residual });
    }
    let cols: Vec<_> = (0..l.nx).map(|i| z.rows(i * n, n).into_owned()).collect();
    Ok(assemble(&l, &cols, support))
}

/// A single response shared across several plants.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustResponse {
    pub response: SystemResponse,
    /// Achievability residual against each plant.
    pub residuals: Vec<f64>,
}

/// Finds one response for all plants: first minimises the summed squared
/// achievability residuals, then the quadratic cost among those minimisers.
///
/// The plants must share the horizon, dimensions and support; weights come
/// from the first problem.
pub fn synthesize_robust(probs: &[SlsProblem]) -> Result<RobustResponse> {
    let Some(first) = probs.first() else {
        return Err(Error::InvalidArgument("robust synthesis needs at least one plant".into()));
    };
    for p in probs {
        if p.horizon != first.horizon || p.a.shape() != first.a.shape() || p.b.shape() != first.b.shape() {
            return Err(Error::InvalidArgument("robust plants must share horizon and dimensions".into()));
        }
        if p.support != first.support {
            return Err(Error::InvalidArgument("robust plants must share the support".into()));
        }
    }
    let l = Layout::of(first);
    let (qh, rh) = weights(first)?;
    let support = first.support.as_ref();
    let models: Vec<_> = probs.iter().map(|p| (&p.a, &p.b)).collect();
    let cols: Vec<DVector<f64>> = (0..l.nx)
        .into_par_iter()
        .map(|col| solve_column(&column_system(&l, &models, &qh, &rh, support, col), l.num_vars()).0)
        .collect();
    let response = assemble(&l, &cols, support);
    let residuals = probs
        .iter()
        .map(|p| validate_achievability(&response, &p.a, &p.b))
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustResponse { response, residuals })
}
