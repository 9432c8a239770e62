//! Data-driven synthesis from recorded same-mode trajectory segments.

use nalgebra::{DMatrix, DVector};

use super::{Support, SystemResponse};
use crate::linalg::{lexicographic_lsq, psd_sqrt};
use crate::{Error, Result};

/// Constraint residual accepted from a data-driven solve.
pub const DATA_FEASIBILITY_TOL: f64 = 1e-6;

/// Block Hankel matrix: block `(i, j)` is `signal[i + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    pub data: DMatrix<f64>,
    pub order: usize,
    pub signal_dim: usize,
}

pub fn build_hankel(signal: &[DVector<f64>], order: usize) -> Result<HankelMatrix> {
    let len = signal.len();
    if order == 0 || order > len {
        return Err(Error::InvalidArgument(format!(
            "Hankel order {order} must be in 1..={len}"
        )));
    }
    let d = signal[0].len();
    if signal.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument("signal samples differ in dimension".into()));
    }
    let cols = len - order + 1;
    let mut data = DMatrix::zeros(order * d, cols);
    for i in 0..order {
        for j in 0..cols {
            data.view_mut((i * d, j), (d, 1)).copy_from(&signal[i + j]);
        }
    }
    Ok(HankelMatrix {
        data,
        order,
        signal_dim: d,
    })
}

/// Full row rank of the order-`r` Hankel matrix.
pub fn persistence_check(signal: &[DVector<f64>], order: usize) -> bool {
    match build_hankel(signal, order) {
        Ok(h) => {
            let (m, n) = h.data.shape();
            crate::linalg::rank(&h.data) == m.min(n)
        }
        Err(_) => false,
    }
}

/// A contiguous same-mode record: `states.len() == inputs.len() + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segment {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Segment {
    pub fn start(x0: DVector<f64>) -> Self {
        Self {
            states: vec![x0],
            inputs: Vec::new(),
        }
    }

    pub fn push(&mut self, u: DVector<f64>, x_next: DVector<f64>) {
        self.inputs.push(u);
        self.states.push(x_next);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Stacks, per window start `t`, the column `[x_t; ...; x_{t+h}; u_t; ...; u_{t+h-1}]`.
/// Windows never straddle two segments.
pub fn build_segment_hankel(segments: &[Segment], h: usize) -> Result<DMatrix<f64>> {
    let first = segments
        .iter()
        .find(|s| !s.states.is_empty())
        .ok_or_else(|| Error::InvalidArgument("no trajectory data".into()))?;
    let nx = first.states[0].len();
    let nu = first.inputs.first().map_or(0, |u| u.len());
    let mut cols = Vec::new();
    for seg in segments {
        if seg.states.len() != seg.inputs.len() + 1 {
            return Err(Error::InvalidArgument("segment needs one more state than inputs".into()));
        }
        if seg.states.iter().any(|x| x.len() != nx) || seg.inputs.iter().any(|u| u.len() != nu) {
            return Err(Error::InvalidArgument("segments differ in dimension".into()));
        }
        for t in 0..(seg.len() + 1).saturating_sub(h) {
            let mut col = DVector::zeros((h + 1) * nx + h * nu);
            for k in 0..=h {
                col.rows_mut(k * nx, nx).copy_from(&seg.states[t + k]);
            }
            for k in 0..h {
                col.rows_mut((h + 1) * nx + k * nu, nu).copy_from(&seg.inputs[t + k]);
            }
            cols.push(col);
        }
    }
    if cols.is_empty() {
        return Err(Error::InvalidArgument(format!("no segment spans {h} steps")));
    }
    Ok(DMatrix::from_columns(&cols))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataDrivenResponse {
    pub response: SystemResponse,
    /// Window weights: `[X; U] g_i` reproduces column `i` of the response.
    pub g: DMatrix<f64>,
    pub windows: usize,
    /// Largest constraint residual over columns.
    pub constraint_residual: f64,
}

/// Synthesises a response using trajectory data in place of `(A, B)`.
///
/// Every achievable response column is a trajectory of the plant, so it lies in
/// the column span of the window matrix once the data excite all
/// `n_x + H n_u` directions. The search runs over an orthonormal basis of that
/// span, which avoids the redundancy of raw window weights.
pub fn data_driven_synthesize(
    segments: &[Segment],
    h: usize,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    support: Option<&Support>,
) -> Result<DataDrivenResponse> {
    if h == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let data = build_segment_hankel(segments, h)?;
    let nx = q.nrows();
    let nu = r.nrows();
    if data.nrows() != (h + 1) * nx + h * nu {
        return Err(Error::DimensionMismatch {
            context: "trajectory data vs weights",
            expected: (h + 1) * nx + h * nu,
            got: data.nrows(),
        });
    }
    let required = nx + h * nu;
    let mut excite = DMatrix::zeros(required, data.ncols());
    excite.rows_mut(0, nx).copy_from(&data.rows(0, nx));
    excite.rows_mut(nx, h * nu).copy_from(&data.rows((h + 1) * nx, h * nu));
    let rank = crate::linalg::rank(&excite);
    if rank < required {
        return Err(Error::NotPersistentlyExciting { order: h, rank, required });
    }

    let svd = crate::linalg::svd(&data);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let basis_idx = &order[..required];
    let u_full = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let basis = DMatrix::from_fn(data.nrows(), required, |i, j| u_full[(i, basis_idx[j])]);

    let qh = psd_sqrt(q)?;
    let rh = psd_sqrt(r)?;
    let xrow = |k: usize| k * nx;
    let urow = |k: usize| (h + 1) * nx + k * nu;

    // Objective rows: Q^{1/2} x_k (k = 1..h-1), R^{1/2} u_k (k = 0..h-1).
    let mut f = DMatrix::zeros((h - 1) * nx + h * nu, required);
    for k in 1..h {
        let rows = &qh * basis.rows(xrow(k), nx);
        f.view_mut(((k - 1) * nx, 0), (nx, required)).copy_from(&rows);
    }
    for k in 0..h {
        let rows = &rh * basis.rows(urow(k), nu);
        f.view_mut(((h - 1) * nx + k * nu, 0), (nu, required)).copy_from(&rows);
    }
    let g0 = DVector::zeros(f.nrows());

    let mut phi_x = vec![DMatrix::zeros(nx, nx); h];
    let mut phi_u = vec![DMatrix::zeros(nu, nx); h];
    let mut weights = DMatrix::zeros(data.ncols(), nx);
    let mut worst = 0.0_f64;
    for col in 0..nx {
        // Pinned rows: x_0 = e_col, closure x_h = 0, and entries outside the support.
        let mut pinned: Vec<(usize, f64)> = (0..nx).map(|j| (xrow(0) + j, if j == col { 1.0 } else { 0.0 })).collect();
        pinned.extend((0..nx).map(|j| (xrow(h) + j, 0.0)));
        if let Some(sup) = support {
            for k in 1..h {
                pinned.extend((0..nx).filter(|&j| !sup.x[k][(j, col)]).map(|j| (xrow(k) + j, 0.0)));
            }
            for k in 0..h {
                pinned.extend((0..nu).filter(|&j| !sup.u[k][(j, col)]).map(|j| (urow(k) + j, 0.0)));
            }
        }
        let c = DMatrix::from_fn(pinned.len(), required, |i, j| basis[(pinned[i].0, j)]);
        let d = DVector::from_iterator(pinned.len(), pinned.iter().map(|p| p.1));
        let sol = lexicographic_lsq(&c, &d, &f, &g0);
        if sol.constraint_residual > DATA_FEASIBILITY_TOL {
            return Err(Error::InfeasibleLocality {
                column: col,
                residual: sol.constraint_residual,
            });
        }
        worst = worst.max(sol.constraint_residual);
        let mut stacked = &basis * &sol.z;
        for &(row, val) in &pinned {
            stacked[row] = val;
        }
        for k in 0..h {
            phi_x[k].column_mut(col).copy_from(&stacked.rows(xrow(k), nx));
            phi_u[k].column_mut(col).copy_from(&stacked.rows(urow(k), nu));
        }
        // g = V_r S_r^{-1} alpha
        let mut g = DVector::zeros(data.ncols());
        for (j, &idx) in basis_idx.iter().enumerate() {
            let coef = sol.z[j] / svd.singular_values[idx];
            g.axpy(coef, &v_t.row(idx).transpose(), 1.0);
        }
        weights.column_mut(col).copy_from(&g);
    }
    Ok(DataDrivenResponse {
        response: SystemResponse {
            phi_x,
            phi_u,
            support: support.cloned(),
        },
        g: weights,
        windows: data.ncols(),
        constraint_residual: worst,
    })
}
