//! Least-squares multi-step predictor `Θ`, the unconstrained SPC law, and
//! ARX coefficient identification.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DVector;

use crate::error::{dim_check, DpcError, Result};
use crate::hankel::HankelSet;
use crate::linalg::{self, DenseMatrix, SpdFactor, DEFAULT_RANK_TOL};
use crate::sim::{fmt_f64, ExperimentData};

/// `Θ = Ȳ_f [Ū_p; Ȳ_p; Ū_f]^†`, partitioned as `[P1 P2 Γ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaPredictor {
    pub theta: DenseMatrix,
    pub p1: DenseMatrix,
    pub p2: DenseMatrix,
    pub gamma: DenseMatrix,
    pub t_ini: usize,
    pub horizon: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl ThetaPredictor {
    pub fn from_theta(theta: DenseMatrix, t_ini: usize, horizon: usize, n_u: usize, n_y: usize) -> Result<Self> {
        dim_check("rows of Theta", theta.nrows(), n_y * horizon)?;
        dim_check("columns of Theta", theta.ncols(), t_ini * (n_u + n_y) + n_u * horizon)?;
        let w1 = n_u * t_ini;
        let w2 = n_y * t_ini;
        let w3 = n_u * horizon;
        let p1 = theta.columns(0, w1).into_owned();
        let p2 = theta.columns(w1, w2).into_owned();
        let gamma = theta.columns(w1 + w2, w3).into_owned();
        Ok(Self {
            theta,
            p1,
            p2,
            gamma,
            t_ini,
            horizon,
            n_u,
            n_y,
        })
    }

    /// `[P1 P2]`, the free-response part of the predictor.
    pub fn past_map(&self) -> DenseMatrix {
        self.theta.columns(0, self.p1.ncols() + self.p2.ncols()).into_owned()
    }

    /// Dump as CSV: a `#`-prefixed dimension line followed by the rows of `Θ`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# t_ini={},horizon={},n_u={},n_y={}",
            self.t_ini, self.horizon, self.n_u, self.n_y
        )?;
        for row in self.theta.row_iter() {
            let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| DpcError::InvalidArgument("empty predictor file".into()))??;
        let mut dims = [0usize; 4];
        let body = header
            .strip_prefix("# ")
            .ok_or_else(|| DpcError::InvalidArgument(format!("bad predictor header {header:?}")))?;
        for (slot, (part, key)) in dims
            .iter_mut()
            .zip(body.split(',').zip(["t_ini", "horizon", "n_u", "n_y"]))
        {
            let value = part
                .strip_prefix(key)
                .and_then(|s| s.strip_prefix('='))
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| DpcError::InvalidArgument(format!("bad header field {part:?}")))?;
            *slot = value;
        }
        let [t_ini, horizon, n_u, n_y] = dims;
        let mut vals = Vec::new();
        let mut rows = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split(',') {
                vals.push(
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| DpcError::InvalidArgument(format!("bad number {tok:?}: {e}")))?,
                );
            }
            rows += 1;
        }
        let cols = t_ini * (n_u + n_y) + n_u * horizon;
        dim_check("predictor entries", vals.len(), rows * cols)?;
        Self::from_theta(DenseMatrix::from_row_slice(rows, cols, &vals), t_ini, horizon, n_u, n_y)
    }
}

pub fn fit_theta(h: &HankelSet) -> Result<ThetaPredictor> {
    let dec = linalg::svd(&h.regressor())?;
    let pinv = linalg::pinv_from_svd(&dec, DEFAULT_RANK_TOL);
    let theta = &h.yf * pinv;
    ThetaPredictor::from_theta(theta, h.t_ini, h.horizon, h.n_u, h.n_y)
}

/// `col(u_ini, y_ini, ū)`.
pub fn stack_regressor(u_ini: &DVector<f64>, y_ini: &DVector<f64>, u_bar: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(u_ini.len() + y_ini.len() + u_bar.len());
    z.rows_mut(0, u_ini.len()).copy_from(u_ini);
    z.rows_mut(u_ini.len(), y_ini.len()).copy_from(y_ini);
    z.rows_mut(u_ini.len() + y_ini.len(), u_bar.len()).copy_from(u_bar);
    z
}

/// Base-line output prediction `ȳ = Θ col(u_ini, y_ini, ū)`.
pub fn predict_base_output(
    p: &ThetaPredictor,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    u_bar: &DVector<f64>,
) -> Result<DVector<f64>> {
    dim_check("u_ini length", u_ini.len(), p.p1.ncols())?;
    dim_check("y_ini length", y_ini.len(), p.p2.ncols())?;
    dim_check("base input length", u_bar.len(), p.gamma.ncols())?;
    Ok(&p.theta * stack_regressor(u_ini, y_ini, u_bar))
}

/// Weights and offline factorisation of the unconstrained SPC problem.
#[derive(Debug, Clone)]
pub struct SpcGain {
    pub g: DenseMatrix,
    pub f: DenseMatrix,
    pub psi: DenseMatrix,
    pub omega: DenseMatrix,
    factor: SpdFactor,
}

impl SpcGain {
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor.solve(rhs)?)
    }
}

fn require_spd(name: &str, m: &DenseMatrix) -> Result<()> {
    let asym = linalg::max_abs(&(m - m.transpose()));
    if asym > 1e-12 * linalg::max_abs(m).max(1.0) {
        return Err(DpcError::InvalidArgument(format!("{name} must be symmetric")));
    }
    SpdFactor::new(m)
        .map(|_| ())
        .map_err(|_| DpcError::InvalidArgument(format!("{name} must be positive definite")))
}

/// `Ψ = diag(R, …, R)` with `N` blocks.
pub fn input_weight(r: &DenseMatrix, horizon: usize) -> DenseMatrix {
    linalg::block_diag(&vec![r.clone(); horizon])
}

/// `Ω = diag(Q, …, Q, αQ)` with `N` blocks.
pub fn output_weight(q: &DenseMatrix, alpha: f64, horizon: usize) -> DenseMatrix {
    let mut blocks = vec![q.clone(); horizon];
    if let Some(last) = blocks.last_mut() {
        *last *= alpha;
    }
    linalg::block_diag(&blocks)
}

pub fn build_spc_gain(p: &ThetaPredictor, q: &DenseMatrix, r: &DenseMatrix, alpha: f64) -> Result<SpcGain> {
    dim_check("Q size", q.nrows(), p.n_y)?;
    dim_check("R size", r.nrows(), p.n_u)?;
    require_spd("Q", q)?;
    require_spd("R", r)?;
    if !(alpha >= 1.0) {
        return Err(DpcError::InvalidArgument(format!(
            "terminal scaling must be >= 1, got {alpha}"
        )));
    }
    let psi = input_weight(r, p.horizon);
    let omega = output_weight(q, alpha, p.horizon);
    let gt_omega = p.gamma.transpose() * &omega;
    let mut g = (&psi + &gt_omega * &p.gamma) * 2.0;
    linalg::symmetrize(&mut g);
    let f = gt_omega * 2.0;
    let factor = SpdFactor::new(&g)?;
    Ok(SpcGain {
        g,
        f,
        psi,
        omega,
        factor,
    })
}

/// `N` stacked copies of `r`.
pub fn repeat_vector(r: &DVector<f64>, times: usize) -> DVector<f64> {
    DVector::from_iterator(r.len() * times, (0..times).flat_map(|_| r.iter().copied()))
}

/// `ū_spc = −G⁻¹(F([P1 P2] col(u_ini, y_ini) − r_y) − 2Ψ r_u)`.
pub fn unconstrained_spc(
    gain: &SpcGain,
    p: &ThetaPredictor,
    u_ini: &DVector<f64>,
    y_ini: &DVector<f64>,
    r_y: &DVector<f64>,
    r_u: &DVector<f64>,
) -> Result<DVector<f64>> {
    dim_check("u_ini length", u_ini.len(), p.p1.ncols())?;
    dim_check("y_ini length", y_ini.len(), p.p2.ncols())?;
    dim_check("r_y length", r_y.len(), p.n_y)?;
    dim_check("r_u length", r_u.len(), p.n_u)?;
    let free = &p.p1 * u_ini + &p.p2 * y_ini;
    let ry = repeat_vector(r_y, p.horizon);
    let ru = repeat_vector(r_u, p.horizon);
    let rhs = &gain.f * (free - ry) - (&gain.psi * ru) * 2.0;
    Ok(-gain.solve(&rhs)?)
}

/// `y(k) = Σ a_i y(k−i) + Σ b_i u(k−i)`, `i = 1..=T_ini`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxModel {
    pub a: Vec<DenseMatrix>,
    pub b: Vec<DenseMatrix>,
}

impl ArxModel {
    pub fn order(&self) -> usize {
        self.a.len()
    }

    /// Predict the next output from histories ordered oldest first; the last
    /// element of each slice is lag 1.
    pub fn predict(&self, past_y: &[DVector<f64>], past_u: &[DVector<f64>]) -> Result<DVector<f64>> {
        let order = self.order();
        if past_y.len() < order || past_u.len() < order {
            return Err(DpcError::DataTooShort(format!(
                "ARX prediction needs {order} past samples"
            )));
        }
        let n_y = self.a[0].nrows();
        let mut y = DVector::zeros(n_y);
        for i in 1..=order {
            y += &self.a[i - 1] * &past_y[past_y.len() - i];
            y += &self.b[i - 1] * &past_u[past_u.len() - i];
        }
        Ok(y)
    }
}

pub fn fit_arx(data: &ExperimentData, order: usize) -> Result<ArxModel> {
    if order == 0 {
        return Err(DpcError::InvalidArgument("ARX order must be positive".into()));
    }
    if data.len() <= order {
        return Err(DpcError::DataTooShort(format!(
            "ARX fit of order {order} needs more than {order} samples, have {}",
            data.len()
        )));
    }
    let (n_u, n_y) = (data.n_u(), data.n_y());
    let rows = data.len() - order;
    let width = order * (n_y + n_u);
    let mut phi = DenseMatrix::zeros(rows, width);
    let mut target = DenseMatrix::zeros(rows, n_y);
    for (r, k) in (order..data.len()).enumerate() {
        for i in 1..=order {
            let y = &data.outputs[k - i];
            let u = &data.inputs[k - i];
            for c in 0..n_y {
                phi[(r, (i - 1) * n_y + c)] = y[c];
            }
            for c in 0..n_u {
                phi[(r, order * n_y + (i - 1) * n_u + c)] = u[c];
            }
        }
        for c in 0..n_y {
            target[(r, c)] = data.outputs[k][c];
        }
    }
    if phi.iter().all(|&v| v == 0.0) {
        return Err(DpcError::CheckFailed(
            "ARX regressors are identically zero; model is degenerate".into(),
        ));
    }
    let x = linalg::least_squares(&phi, &target)?;
    let a = (0..order).map(|i| x.rows(i * n_y, n_y).transpose()).collect();
    let b = (0..order)
        .map(|i| x.rows(order * n_y + i * n_u, n_u).transpose())
        .collect();
    Ok(ArxModel { a, b })
}
