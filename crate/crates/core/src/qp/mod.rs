//! Condensed dense QPs in the Hankel combination vector `g`, and the solver.
//!
//! Both DeePC and GDPC are posed only in `g` after substituting the
//! predicted inputs, outputs and past-output slack as affine images of `g`:
//!
//! ```text
//! min  ½ gᵀ H g + fᵀ g
//! s.t. A_eq g = b_eq
//!      lb ≤ A_box g ≤ ub
//! ```

mod solver;

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use solver::{solve_qp, KktResiduals, QpSettings, QpSolution, QpStatus, QpWorkspace};

use crate::error::{dim_check, DpcError, Result};
use crate::hankel::{HankelSet, Projector};
use crate::linalg::{self, DenseMatrix};
use crate::predictor::{input_weight, output_weight, repeat_vector};
use crate::sim::fmt_f64;

#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub h: DenseMatrix,
    pub f: DVector<f64>,
    pub a_eq: DenseMatrix,
    pub b_eq: DVector<f64>,
    pub a_box: DenseMatrix,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    /// Trailing decision variables that are output-box slacks rather than
    /// Hankel weights (zero unless output boxes are softened).
    pub n_slack: usize,
}

impl CondensedQp {
    pub fn new(
        h: DenseMatrix,
        f: DVector<f64>,
        a_eq: DenseMatrix,
        b_eq: DVector<f64>,
        a_box: DenseMatrix,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self> {
        let qp = Self {
            h,
            f,
            a_eq,
            b_eq,
            a_box,
            lb,
            ub,
            n_slack: 0,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Number of Hankel weights, i.e. `dim() - n_slack`.
    pub fn n_weights(&self) -> usize {
        self.dim() - self.n_slack
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.h.nrows();
        dim_check("Hessian columns", self.h.ncols(), m)?;
        dim_check("linear term length", self.f.len(), m)?;
        dim_check("equality matrix columns", self.a_eq.ncols(), m)?;
        dim_check("equality rhs length", self.b_eq.len(), self.a_eq.nrows())?;
        dim_check("box matrix columns", self.a_box.ncols(), m)?;
        dim_check("lower bound length", self.lb.len(), self.a_box.nrows())?;
        dim_check("upper bound length", self.ub.len(), self.a_box.nrows())?;
        let finite = self.h.iter().all(|v| v.is_finite())
            && self.f.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite())
            && self.a_box.iter().all(|v| v.is_finite());
        if !finite {
            return Err(DpcError::InvalidArgument("QP data must be finite".into()));
        }
        if self.lb.iter().chain(self.ub.iter()).any(|v| v.is_nan()) {
            return Err(DpcError::InvalidArgument("QP bounds must not be NaN".into()));
        }
        Ok(())
    }

    pub fn objective(&self, g: &DVector<f64>) -> f64 {
        0.5 * g.dot(&(&self.h * g)) + self.f.dot(g)
    }

    /// Write `H, f, A_eq, b_eq, A_box, lb, ub` as CSV files into `dir`.
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_matrix(&dir.join("H.csv"), &self.h)?;
        write_vector(&dir.join("f.csv"), &self.f)?;
        write_matrix(&dir.join("A_eq.csv"), &self.a_eq)?;
        write_vector(&dir.join("b_eq.csv"), &self.b_eq)?;
        write_matrix(&dir.join("A_box.csv"), &self.a_box)?;
        write_vector(&dir.join("lb.csv"), &self.lb)?;
        write_vector(&dir.join("ub.csv"), &self.ub)?;
        Ok(())
    }
}

fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for x in v.iter() {
        writeln!(f, "{}", fmt_f64(*x))?;
    }
    Ok(())
}

/// Stage-cost and regulariser weights shared by DeePC and GDPC.
#[derive(Debug, Clone)]
pub struct CostWeights {
    pub q: DenseMatrix,
    pub r: DenseMatrix,
    pub alpha: f64,
    pub lambda_g: f64,
    pub lambda_sigma: f64,
}

/// Per-sample input and output boxes; infinite entries are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boxes {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
}

impl Boxes {
    pub fn unbounded(n_u: usize, n_y: usize) -> Self {
        Self {
            u_min: vec![f64::NEG_INFINITY; n_u],
            u_max: vec![f64::INFINITY; n_u],
            y_min: vec![f64::NEG_INFINITY; n_y],
            y_max: vec![f64::INFINITY; n_y],
        }
    }

    pub fn validate(&self, n_u: usize, n_y: usize) -> Result<()> {
        dim_check("u_min length", self.u_min.len(), n_u)?;
        dim_check("u_max length", self.u_max.len(), n_u)?;
        dim_check("y_min length", self.y_min.len(), n_y)?;
        dim_check("y_max length", self.y_max.len(), n_y)?;
        for (lo, hi) in self
            .u_min
            .iter()
            .zip(&self.u_max)
            .chain(self.y_min.iter().zip(&self.y_max))
        {
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return Err(DpcError::InvalidArgument(format!("empty box [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Clip a stacked input sequence (any number of samples) into the box.
    pub fn clip_input(&self, u: &DVector<f64>) -> DVector<f64> {
        let n_u = self.u_min.len();
        DVector::from_fn(u.len(), |i, _| u[i].max(self.u_min[i % n_u]).min(self.u_max[i % n_u]))
    }

    pub fn contains_input(&self, u: &DVector<f64>, tol: f64) -> bool {
        let n_u = self.u_min.len();
        u.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.u_min[i % n_u] - tol && *v <= self.u_max[i % n_u] + tol)
    }

    pub fn contains_output(&self, y: &DVector<f64>, tol: f64) -> bool {
        let n_y = self.y_min.len();
        y.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.y_min[i % n_y] - tol && *v <= self.y_max[i % n_y] + tol)
    }
}

fn stacked(v: &[f64], horizon: usize) -> DVector<f64> {
    repeat_vector(&DVector::from_column_slice(v), horizon)
}

/// How the past-output consistency rows `Y_p g` are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackMode {
    /// Slack `σ` penalised by `λ_σ ‖σ‖²`.
    #[default]
    Penalized,
    /// `σ = 0` imposed as an equality (noise-free formulation).
    Pinned,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CondenseOptions {
    pub slack: SlackMode,
    /// Soften the output boxes with an exact linear penalty of this weight.
    pub soft_output_penalty: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// `u = ū + U_f g`, `y = ȳ + Y_f g`, `U_p g = 0`.
    Gdpc,
    /// `u = U_f g`, `y = Y_f g`, `U_p g = u_ini`.
    Deepc,
}

/// Right-hand-side data of one condensed QP instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QpVectors {
    pub f: DVector<f64>,
    pub b_eq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

/// The step-independent part of a condensed problem: Hessian and constraint
/// matrices are fixed by the data and weights, only `(f, b_eq, lb, ub)`
/// change from step to step.
#[derive(Debug, Clone)]
pub struct QpTemplate {
    pub formulation: Formulation,
    pub h: DenseMatrix,
    pub a_eq: DenseMatrix,
    pub a_box: DenseMatrix,
    pub n_slack: usize,
    opts: CondenseOptions,
    /// `2 Y_fᵀΩ`
    yf_omega: DenseMatrix,
    /// `2 U_fᵀΨ`
    uf_psi: DenseMatrix,
    /// `2 λ_σ Y_pᵀ`
    yp_sigma: DenseMatrix,
    up_rows: usize,
    yp_rows: usize,
    horizon: usize,
    n_u: usize,
    n_y: usize,
    u_lo: DVector<f64>,
    u_hi: DVector<f64>,
    y_lo: DVector<f64>,
    y_hi: DVector<f64>,
}

impl QpTemplate {
    pub fn new(
        formulation: Formulation,
        h: &HankelSet,
        proj: &Projector,
        weights: &CostWeights,
        bounds: &Boxes,
        opts: CondenseOptions,
    ) -> Result<Self> {
        dim_check("Q size", weights.q.nrows(), h.n_y)?;
        dim_check("R size", weights.r.nrows(), h.n_u)?;
        dim_check("regulariser size", proj.m_reg.nrows(), h.cols())?;
        if !(weights.lambda_g >= 0.0 && weights.lambda_sigma >= 0.0) {
            return Err(DpcError::InvalidArgument(
                "regularisation weights must be non-negative".into(),
            ));
        }
        if !(weights.alpha >= 1.0) {
            return Err(DpcError::InvalidArgument("terminal scaling must be >= 1".into()));
        }
        if let Some(p) = opts.soft_output_penalty {
            if !(p > 0.0 && p.is_finite()) {
                return Err(DpcError::InvalidArgument("soft output penalty must be positive".into()));
            }
        }
        bounds.validate(h.n_u, h.n_y)?;
        let n = h.horizon;
        let omega = output_weight(&weights.q, weights.alpha, n);
        let psi = input_weight(&weights.r, n);
        let yf_omega = h.yf.transpose() * &omega * 2.0;
        let uf_psi = h.uf.transpose() * &psi * 2.0;

        let mut hess = &yf_omega * &h.yf + &uf_psi * &h.uf;
        if weights.lambda_g > 0.0 {
            hess += &proj.m_reg * (2.0 * weights.lambda_g);
        }
        let penalized = opts.slack == SlackMode::Penalized;
        if penalized && weights.lambda_sigma > 0.0 {
            hess += h.yp.transpose() * &h.yp * (2.0 * weights.lambda_sigma);
        }
        linalg::symmetrize(&mut hess);
        let yp_sigma = if penalized {
            h.yp.transpose() * (2.0 * weights.lambda_sigma)
        } else {
            DenseMatrix::zeros(h.cols(), 0)
        };
        let a_eq = if penalized {
            h.up.clone()
        } else {
            linalg::vstack(&[&h.up, &h.yp])
        };
        let mut t = Self {
            formulation,
            h: hess,
            a_eq,
            a_box: linalg::vstack(&[&h.uf, &h.yf]),
            n_slack: 0,
            opts,
            yf_omega,
            uf_psi,
            yp_sigma,
            up_rows: h.up.nrows(),
            yp_rows: h.yp.nrows(),
            horizon: n,
            n_u: h.n_u,
            n_y: h.n_y,
            u_lo: stacked(&bounds.u_min, n),
            u_hi: stacked(&bounds.u_max, n),
            y_lo: stacked(&bounds.y_min, n),
            y_hi: stacked(&bounds.y_max, n),
        };
        if opts.soft_output_penalty.is_some() {
            t.soften();
        }
        Ok(t)
    }

    /// Number of Hankel weights.
    pub fn n_weights(&self) -> usize {
        self.h.nrows() - self.n_slack
    }

    pub fn options(&self) -> CondenseOptions {
        self.opts
    }

    /// Replace the hard output rows by `Y_f g + s ≥ lb_y`, `Y_f g − s ≤ ub_y`,
    /// `s ≥ 0`; the matching cost `penalty · 1ᵀs` enters through `f`.
    fn soften(&mut self) {
        let m = self.h.nrows();
        let nu = self.u_lo.len();
        let ny = self.y_lo.len();
        let total = m + ny;
        let mut h = DenseMatrix::zeros(total, total);
        h.view_mut((0, 0), (m, m)).copy_from(&self.h);
        let mut a_eq = DenseMatrix::zeros(self.a_eq.nrows(), total);
        a_eq.columns_mut(0, m).copy_from(&self.a_eq);
        let mut a_box = DenseMatrix::zeros(nu + 3 * ny, total);
        a_box.view_mut((0, 0), (nu, m)).copy_from(&self.a_box.rows(0, nu));
        let yf = self.a_box.rows(nu, ny).into_owned();
        a_box.view_mut((nu, 0), (ny, m)).copy_from(&yf);
        a_box.view_mut((nu + ny, 0), (ny, m)).copy_from(&yf);
        for i in 0..ny {
            a_box[(nu + i, m + i)] = 1.0;
            a_box[(nu + ny + i, m + i)] = -1.0;
            a_box[(nu + 2 * ny + i, m + i)] = 1.0;
        }
        self.h = h;
        self.a_eq = a_eq;
        self.a_box = a_box;
        self.n_slack = ny;
    }

    fn assemble(&self, f: DVector<f64>, b_eq: DVector<f64>, u_off: &DVector<f64>, y_off: &DVector<f64>) -> QpVectors {
        let nu = self.u_lo.len();
        let ny = self.y_lo.len();
        let ul = &self.u_lo - u_off;
        let uh = &self.u_hi - u_off;
        let yl = &self.y_lo - y_off;
        let yh = &self.y_hi - y_off;
        match self.opts.soft_output_penalty {
            None => {
                let mut lb = DVector::zeros(nu + ny);
                let mut ub = DVector::zeros(nu + ny);
                lb.rows_mut(0, nu).copy_from(&ul);
                ub.rows_mut(0, nu).copy_from(&uh);
                lb.rows_mut(nu, ny).copy_from(&yl);
                ub.rows_mut(nu, ny).copy_from(&yh);
                QpVectors { f, b_eq, lb, ub }
            }
            Some(p) => {
                let m = f.len();
                let mut fs = DVector::from_element(m + ny, p);
                fs.rows_mut(0, m).copy_from(&f);
                let rows = nu + 3 * ny;
                let mut lb = DVector::from_element(rows, f64::NEG_INFINITY);
                let mut ub = DVector::from_element(rows, f64::INFINITY);
                lb.rows_mut(0, nu).copy_from(&ul);
                ub.rows_mut(0, nu).copy_from(&uh);
                lb.rows_mut(nu, ny).copy_from(&yl);
                ub.rows_mut(nu + ny, ny).copy_from(&yh);
                lb.rows_mut(nu + 2 * ny, ny).fill(0.0);
                QpVectors { f: fs, b_eq, lb, ub }
            }
        }
    }

    fn check_refs(&self, r_y: &DVector<f64>, r_u: &DVector<f64>) -> Result<()> {
        dim_check("r_y length", r_y.len(), self.n_y)?;
        dim_check("r_u length", r_u.len(), self.n_u)
    }

    /// GDPC vectors around the base pair `(ū, ȳ)`.
    pub fn gdpc_vectors(
        &self,
        y_bar: &DVector<f64>,
        u_bar: &DVector<f64>,
        r_y: &DVector<f64>,
        r_u: &DVector<f64>,
    ) -> Result<QpVectors> {
        if self.formulation != Formulation::Gdpc {
            return Err(DpcError::InvalidArgument("template is not a GDPC problem".into()));
        }
        self.check_refs(r_y, r_u)?;
        dim_check("base output length", y_bar.len(), self.n_y * self.horizon)?;
        dim_check("base input length", u_bar.len(), self.n_u * self.horizon)?;
        let ey = y_bar - repeat_vector(r_y, self.horizon);
        let eu = u_bar - repeat_vector(r_u, self.horizon);
        let f = &self.yf_omega * ey + &self.uf_psi * eu;
        let b_eq = DVector::zeros(self.a_eq.nrows());
        Ok(self.assemble(f, b_eq, u_bar, y_bar))
    }

    /// DeePC vectors for the current past windows.
    pub fn deepc_vectors(
        &self,
        u_ini: &DVector<f64>,
        y_ini: &DVector<f64>,
        r_y: &DVector<f64>,
        r_u: &DVector<f64>,
    ) -> Result<QpVectors> {
        if self.formulation != Formulation::Deepc {
            return Err(DpcError::InvalidArgument("template is not a DeePC problem".into()));
        }
        self.check_refs(r_y, r_u)?;
        dim_check("u_ini length", u_ini.len(), self.up_rows)?;
        dim_check("y_ini length", y_ini.len(), self.yp_rows)?;
        let mut f =
            -(&self.yf_omega * repeat_vector(r_y, self.horizon) + &self.uf_psi * repeat_vector(r_u, self.horizon));
        let mut b_eq = u_ini.clone();
        match self.opts.slack {
            SlackMode::Penalized => f -= &self.yp_sigma * y_ini,
            SlackMode::Pinned => {
                b_eq = DVector::zeros(self.up_rows + self.yp_rows);
                b_eq.rows_mut(0, self.up_rows).copy_from(u_ini);
                b_eq.rows_mut(self.up_rows, self.yp_rows).copy_from(y_ini);
            }
        }
        let zu = DVector::zeros(self.u_lo.len());
        let zy = DVector::zeros(self.y_lo.len());
        Ok(self.assemble(f, b_eq, &zu, &zy))
    }

    pub fn instantiate(&self, v: QpVectors) -> Result<CondensedQp> {
        let mut qp = CondensedQp::new(
            self.h.clone(),
            v.f,
            self.a_eq.clone(),
            v.b_eq,
            self.a_box.clone(),
            v.lb,
            v.ub,
        )?;
        qp.n_slack = self.n_slack;
        Ok(qp)
    }

    pub fn workspace(&self) -> Result<QpWorkspace> {
        QpWorkspace::new(&self.h, &self.a_eq, &self.a_box)
    }
}

/// GDPC problem around the base-line pair `(ū, ȳ)`:
/// `u = ū + U_f g`, `y = ȳ + Y_f g`, `σ = Y_p g`, `U_p g = 0`.
#[allow(clippy::too_many_arguments)]
pub fn condense_gdpc(
    h: &HankelSet,
    proj: &Projector,
    y_bar: &DVector<f64>,
    u_bar: &DVector<f64>,
    weights: &CostWeights,
    bounds: &Boxes,
    r_y: &DVector<f64>,
    r_u: &DVector<f64>,
    opts: CondenseOptions,
) -> Result<CondensedQp> {
    let t = QpTemplate::new(Formulation::Gdpc, h, proj, weights, bounds, opts)?;
    let v = t.gdpc_vectors(y_bar, u_bar, r_y, r_u)?;
    t.instantiate(v)
}

/// DeePC problem: `u = U_f g`, `y = Y_f g`, `σ = Y_p g − y_ini`,
/// `U_p g = u_ini`.
#[allow(clippy::too_many_arguments)]
pub fn condense_deepc(
    h: &HankelSet,
    proj: &Projector,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    weights: &CostWeights,
    bounds: &Boxes,
    r_y: &DVector<f64>,
    r_u: &DVector<f64>,
    opts: CondenseOptions,
) -> Result<CondensedQp> {
    let t = QpTemplate::new(Formulation::Deepc, h, proj, weights, bounds, opts)?;
    let v = t.deepc_vectors(u_ini, y_ini, r_y, r_u)?;
    t.instantiate(v)
}
