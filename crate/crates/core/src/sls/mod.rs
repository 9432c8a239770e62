//! Finite-horizon System Level Synthesis.
//!
//! A response `Phi = {Phi_x[s], Phi_u[s]}`, `s = 1..=H`, maps a disturbance
//! to the closed-loop state and input `s - 1` steps later. It is achievable
//! for `(A, B)` iff `Phi_x[1] = I`, `Phi_x[s+1] = A Phi_x[s] + B Phi_u[s]` and
//! the FIR closure `A Phi_x[H] + B Phi_u[H] = 0` hold.

mod controller;
mod data;
mod synth;

pub use controller::{controller_step, validate_closed_loop, ClosedLoopReport, ControllerState, SlsController};
pub use data::{
    DATA_FEASIBILITY_TOL,
    build_hankel, build_segment_hankel, data_driven_synthesize, persistence_check, DataDrivenResponse, HankelMatrix,
    Segment,
};
pub use synth::{synthesize, synthesize_joint, synthesize_robust, RobustResponse, FEASIBILITY_TOL};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Boolean sparsity pattern per horizon index (`x[s-1]`, `u[s-1]` for `s = 1..=H`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    pub x: Vec<DMatrix<bool>>,
    pub u: Vec<DMatrix<bool>>,
}

impl Support {
    /// Column `i` may touch the state rows in `neighborhoods[i]` and the inputs
    /// whose actuated node lies there, at every horizon index.
    pub fn from_neighborhoods(
        neighborhoods: &[BTreeSet<usize>],
        actuated: &[usize],
        horizon: usize,
    ) -> Result<Self> {
        let n = neighborhoods.len();
        for (i, nb) in neighborhoods.iter().enumerate() {
            if !nb.contains(&i) || nb.iter().any(|&j| j >= n) {
                return Err(Error::InvalidArgument(format!("neighborhood {i} is malformed")));
            }
        }
        let x = DMatrix::from_fn(n, n, |j, i| neighborhoods[i].contains(&j));
        let u = DMatrix::from_fn(actuated.len(), n, |k, i| neighborhoods[i].contains(&actuated[k]));
        Ok(Self {
            x: vec![x; horizon],
            u: vec![u; horizon],
        })
    }

    pub fn horizon(&self) -> usize {
        self.x.len()
    }
}

/// Response maps, stored as `phi_x[s - 1]`, `phi_u[s - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemResponse {
    pub phi_x: Vec<DMatrix<f64>>,
    pub phi_u: Vec<DMatrix<f64>>,
    pub support: Option<Support>,
}

impl SystemResponse {
    pub fn horizon(&self) -> usize {
        self.phi_x.len()
    }

    pub fn state_dim(&self) -> usize {
        self.phi_x[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.phi_u[0].nrows()
    }

    /// `Phi_x[s]` with 1-based `s`.
    pub fn x(&self, s: usize) -> &DMatrix<f64> {
        &self.phi_x[s - 1]
    }

    /// `Phi_u[s]` with 1-based `s`.
    pub fn u(&self, s: usize) -> &DMatrix<f64> {
        &self.phi_u[s - 1]
    }

    /// Largest magnitude outside the support (0 when unconstrained).
    pub fn support_violation(&self) -> f64 {
        let Some(sup) = &self.support else { return 0.0 };
        let off = |m: &DMatrix<f64>, mask: &DMatrix<bool>| {
            m.iter().zip(mask.iter()).filter(|(_, &k)| !k).map(|(v, _)| v.abs()).fold(0.0, f64::max)
        };
        let x = self.phi_x.iter().zip(&sup.x).map(|(m, k)| off(m, k));
        let u = self.phi_u.iter().zip(&sup.u).map(|(m, k)| off(m, k));
        x.chain(u).fold(0.0, f64::max)
    }

    /// Plain-text serialisation: one CSV line per matrix row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "horizon,{}", self.horizon());
        let _ = writeln!(out, "state_dim,{}", self.state_dim());
        let _ = writeln!(out, "input_dim,{}", self.input_dim());
        let mut block = |tag: &str, mats: &[DMatrix<f64>]| {
            for (s, m) in mats.iter().enumerate() {
                for r in 0..m.nrows() {
                    let _ = write!(out, "{tag},{},{r}", s + 1);
                    for v in m.row(r).iter() {
                        let _ = write!(out, ",{v}");
                    }
                    out.push('\n');
                }
            }
        };
        block("x", &self.phi_x);
        block("u", &self.phi_u);
        if let Some(sup) = &self.support {
            for (tag, masks) in [("mask_x", &sup.x), ("mask_u", &sup.u)] {
                for (s, m) in masks.iter().enumerate() {
                    for r in 0..m.nrows() {
                        let _ = write!(out, "{tag},{},{r}", s + 1);
                        for &v in m.row(r).iter() {
                            out.push_str(if v { ",1" } else { ",0" });
                        }
                        out.push('\n');
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Parse(msg);
        let mut header = [None; 3];
        let mut rows: Vec<(String, usize, usize, Vec<&str>)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let num = |f: &str| f.trim().parse::<usize>().map_err(|e| bad(format!("line {}: {e}", ln + 1)));
            match fields[0] {
                key @ ("horizon" | "state_dim" | "input_dim") => {
                    let v = num(fields.get(1).ok_or_else(|| bad(format!("line {}: missing value", ln + 1)))?)?;
                    header[["horizon", "state_dim", "input_dim"].iter().position(|k| *k == key).unwrap()] = Some(v);
                }
                tag @ ("x" | "u" | "mask_x" | "mask_u") => {
                    if fields.len() < 3 {
                        return Err(bad(format!("line {}: truncated row", ln + 1)));
                    }
                    rows.push((tag.to_string(), num(fields[1])?, num(fields[2])?, fields[3..].to_vec()));
                }
                other => return Err(bad(format!("line {}: unknown tag {other:?}", ln + 1))),
            }
        }
        let [Some(h), Some(nx), Some(nu)] = header else {
            return Err(bad("missing horizon/state_dim/input_dim header".into()));
        };
        if h == 0 {
            return Err(bad("horizon must be >= 1".into()));
        }
        let mut phi_x = vec![DMatrix::zeros(nx, nx); h];
        let mut phi_u = vec![DMatrix::zeros(nu, nx); h];
        let mut mask_x = vec![DMatrix::from_element(nx, nx, false); h];
        let mut mask_u = vec![DMatrix::from_element(nu, nx, false); h];
        let mut has_mask = false;
        for (tag, s, r, vals) in rows {
            let nrows = if tag.ends_with('x') { nx } else { nu };
            if s == 0 || s > h || r >= nrows || vals.len() != nx {
                return Err(bad(format!("{tag} row ({s},{r}) out of shape")));
            }
            for (c, v) in vals.iter().enumerate() {
                match tag.as_str() {
                    "x" | "u" => {
                        let v: f64 = v.trim().parse().map_err(|e| bad(format!("{tag} ({s},{r}): {e}")))?;
                        let m = if tag == "x" { &mut phi_x } else { &mut phi_u };
                        m[s - 1][(r, c)] = v;
                    }
                    _ => {
                        has_mask = true;
                        let b = match v.trim() {
                            "0" => false,
                            "1" => true,
                            o => return Err(bad(format!("mask value {o:?}"))),
                        };
                        let m = if tag == "mask_x" { &mut mask_x } else { &mut mask_u };
                        m[s - 1][(r, c)] = b;
                    }
                }
            }
        }
        Ok(Self {
            phi_x,
            phi_u,
            support: has_mask.then_some(Support { x: mask_x, u: mask_u }),
        })
    }
}

/// One synthesis problem for a single `(A, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlsProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub support: Option<Support>,
}

impl SlsProblem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let (nx, nu) = (a.nrows(), b.ncols());
        Self {
            q: DMatrix::identity(nx, nx),
            r: DMatrix::identity(nu, nu),
            a,
            b,
            horizon,
            support: None,
        }
        .validated()
    }

    pub fn with_weights(mut self, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        self.q = q;
        self.r = r;
        self.validated()
    }

    pub fn with_support(mut self, support: Support) -> Result<Self> {
        self.support = Some(support);
        self.validated()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn validated(self) -> Result<Self> {
        let (nx, nu) = (self.a.nrows(), self.b.ncols());
        let dim = |context, expected, got| Err(Error::DimensionMismatch { context, expected, got });
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.a.ncols() != nx {
            return dim("A columns", nx, self.a.ncols());
        }
        if self.b.nrows() != nx {
            return dim("B rows", nx, self.b.nrows());
        }
        if self.q.shape() != (nx, nx) {
            return dim("Q", nx, self.q.nrows());
        }
        if self.r.shape() != (nu, nu) {
            return dim("R", nu, self.r.nrows());
        }
        if let Some(sup) = &self.support {
            if sup.horizon() != self.horizon || sup.u.len() != self.horizon {
                return dim("support horizon", self.horizon, sup.horizon());
            }
            if sup.x.iter().any(|m| m.shape() != (nx, nx)) || sup.u.iter().any(|m| m.shape() != (nu, nx)) {
                return Err(Error::InvalidArgument("support mask shape mismatch".into()));
            }
            if (0..nx).any(|i| !sup.x[0][(i, i)]) {
                return Err(Error::InvalidArgument("support must contain the identity at s = 1".into()));
            }
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("R must be positive definite".into()));
        }
        Ok(self)
    }
}

/// Max-norm violation of the achievability recursion, including `Phi_x[1] = I`
/// and the FIR closure.
pub fn validate_achievability(resp: &SystemResponse, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let nx = resp.state_dim();
    if a.shape() != (nx, nx) || b.shape() != (nx, resp.input_dim()) {
        return Err(Error::DimensionMismatch {
            context: "achievability check",
            expected: nx,
            got: a.nrows(),
        });
    }
    let h = resp.horizon();
    let mut res = (resp.x(1) - DMatrix::<f64>::identity(nx, nx)).amax();
    for s in 1..=h {
        let next = a * resp.x(s) + b * resp.u(s);
        let target_gap = if s < h { resp.x(s + 1) - next } else { next };
        res = res.max(target_gap.amax());
    }
    Ok(res)
}
