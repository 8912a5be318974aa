//! Receding-horizon controllers: GDPC with a shifted or SPC base sequence,
//! regularised DeePC and the unconstrained SPC law.
//!
//! One step predicts, condenses, solves and extracts the first input. The
//! caller measures the plant and feeds the sample back with
//! [`advance_windows`].

use std::collections::VecDeque;
use std::fmt;
use std::time::Duration;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, DpcError, Result};
use crate::hankel::{build_projector, HankelSet, RegularizerMode};
use crate::linalg::{DenseMatrix, SpdFactor};
use crate::predictor::{
    build_spc_gain, fit_theta, input_weight, output_weight, predict_base_output, repeat_vector, unconstrained_spc,
    SpcGain, ThetaPredictor,
};
use crate::qp::{
    Boxes, CondenseOptions, CostWeights, Formulation, QpSettings, QpStatus, QpTemplate, QpWorkspace, SlackMode,
};
use crate::sim::ExperimentData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    GdpcShift,
    GdpcSpc,
    Deepc,
    Spc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::GdpcShift,
        ControllerKind::GdpcSpc,
        ControllerKind::Deepc,
        ControllerKind::Spc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::GdpcShift => "gdpc-shift",
            ControllerKind::GdpcSpc => "gdpc-spc",
            ControllerKind::Deepc => "deepc",
            ControllerKind::Spc => "spc",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            DpcError::InvalidArgument(format!(
                "unknown controller '{s}' (expected gdpc-shift, gdpc-spc, deepc or spc)"
            ))
        })
    }

    pub fn is_gdpc(self) -> bool {
        matches!(self, ControllerKind::GdpcShift | ControllerKind::GdpcSpc)
    }

    /// Uses the large predictor data set `H̄`.
    pub fn uses_predictor(self) -> bool {
        !matches!(self, ControllerKind::Deepc)
    }

    /// Solves a QP in `g` over the Hankel set `H`.
    pub fn uses_qp(self) -> bool {
        !matches!(self, ControllerKind::Spc)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Last element of the shifted base sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TailRule {
    /// Repeat `u*(N−1|k−1)`.
    #[default]
    #[serde(rename = "repeat_last")]
    RepeatLast,
    /// Append the input reference.
    #[serde(rename = "r_u")]
    Reference,
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub q: DenseMatrix,
    pub r: DenseMatrix,
    /// Terminal weight scaling, `Ω = diag(Q, …, Q, αQ)`.
    pub alpha: f64,
    pub lambda_g: f64,
    pub lambda_sigma: f64,
    pub bounds: Boxes,
    pub regularizer: RegularizerMode,
    pub tail_rule: TailRule,
    pub slack: SlackMode,
    pub soft_output_penalty: Option<f64>,
    pub qp: QpSettings,
}

impl ControllerConfig {
    pub fn n_u(&self) -> usize {
        self.r.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_ini == 0 {
            return Err(DpcError::InvalidArgument("T_ini must be positive".into()));
        }
        if self.horizon < self.t_ini {
            return Err(DpcError::InvalidArgument(format!(
                "horizon N={} must be at least T_ini={}",
                self.horizon, self.t_ini
            )));
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r)] {
            if !m.is_square() || m.nrows() == 0 {
                return Err(DpcError::Dimension(format!("{name} must be square and non-empty")));
            }
            if SpdFactor::new(m).is_err() || (m - m.transpose()).amax() > 1e-12 * m.amax() {
                return Err(DpcError::InvalidArgument(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        if !(self.alpha >= 1.0) {
            return Err(DpcError::InvalidArgument(format!(
                "terminal scaling alpha must be >= 1, got {}",
                self.alpha
            )));
        }
        if !(self.lambda_g >= 0.0 && self.lambda_sigma >= 0.0) {
            return Err(DpcError::InvalidArgument(
                "lambda_g and lambda_sigma must be non-negative".into(),
            ));
        }
        self.bounds.validate(self.n_u(), self.n_y())
    }

    pub fn weights(&self) -> CostWeights {
        CostWeights {
            q: self.q.clone(),
            r: self.r.clone(),
            alpha: self.alpha,
            lambda_g: self.lambda_g,
            lambda_sigma: self.lambda_sigma,
        }
    }

    fn condense_options(&self) -> CondenseOptions {
        CondenseOptions {
            slack: self.slack,
            soft_output_penalty: self.soft_output_penalty,
        }
    }
}

/// Previous optimum, kept for shifting and warm starts.
#[derive(Debug, Clone, PartialEq)]
pub struct LastSolution {
    pub u_star: DVector<f64>,
    pub y_star: DVector<f64>,
    pub g: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// `u(k−T_ini), …, u(k−1)`.
    pub u_ini: VecDeque<DVector<f64>>,
    /// `y(k−T_ini+1), …, y(k)`.
    pub y_ini: VecDeque<DVector<f64>>,
    pub u_bar: DVector<f64>,
    pub last: Option<LastSolution>,
}

fn flatten(w: &VecDeque<DVector<f64>>) -> DVector<f64> {
    let len = w.iter().map(|v| v.len()).sum();
    DVector::from_iterator(len, w.iter().flat_map(|v| v.iter().copied()))
}

impl ControllerState {
    pub fn u_ini_vec(&self) -> DVector<f64> {
        flatten(&self.u_ini)
    }

    pub fn y_ini_vec(&self) -> DVector<f64> {
        flatten(&self.y_ini)
    }
}

/// Fill the windows from the tail of `warmup` and the current measurement
/// `y_now = y(k)`, where `k = warmup.len()`.
pub fn init_controller(
    cfg: &ControllerConfig,
    warmup: &ExperimentData,
    y_now: &DVector<f64>,
) -> Result<ControllerState> {
    let t = cfg.t_ini;
    if warmup.len() < t {
        return Err(DpcError::DataTooShort(format!(
            "warmup has {} samples, T_ini = {t}",
            warmup.len()
        )));
    }
    dim_check("warmup input width", warmup.n_u(), cfg.n_u())?;
    dim_check("warmup output width", warmup.n_y(), cfg.n_y())?;
    dim_check("measurement length", y_now.len(), cfg.n_y())?;
    let len = warmup.len();
    let u_ini: VecDeque<_> = warmup.inputs[len - t..].iter().cloned().collect();
    let mut y_ini: VecDeque<_> = warmup.outputs[len - t + 1..].iter().cloned().collect();
    y_ini.push_back(y_now.clone());
    Ok(ControllerState {
        u_ini,
        y_ini,
        u_bar: DVector::zeros(cfg.n_u() * cfg.horizon),
        last: None,
    })
}

/// Drop the first block of `prev` and append the tail.
pub fn shift_sequence(prev: &DVector<f64>, n_u: usize, rule: TailRule, r_u: &DVector<f64>) -> Result<DVector<f64>> {
    dim_check("input reference length", r_u.len(), n_u)?;
    if n_u == 0 || !prev.len().is_multiple_of(n_u) || prev.is_empty() {
        return Err(DpcError::Dimension(format!(
            "sequence of length {} is not a whole number of {n_u}-blocks",
            prev.len()
        )));
    }
    let len = prev.len();
    let mut out = DVector::zeros(len);
    out.rows_mut(0, len - n_u).copy_from(&prev.rows(n_u, len - n_u));
    match rule {
        TailRule::RepeatLast => out.rows_mut(len - n_u, n_u).copy_from(&prev.rows(len - n_u, n_u)),
        TailRule::Reference => out.rows_mut(len - n_u, n_u).copy_from(r_u),
    }
    Ok(out)
}

/// Push the applied input and the new measurement, dropping the oldest.
pub fn advance_windows(state: &mut ControllerState, applied_u: &DVector<f64>, measured_y: &DVector<f64>) {
    state.u_ini.pop_front();
    state.u_ini.push_back(applied_u.clone());
    state.y_ini.pop_front();
    state.y_ini.push_back(measured_y.clone());
}

#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub applied: DVector<f64>,
    pub u_star: DVector<f64>,
    pub y_star: DVector<f64>,
    pub u_bar: DVector<f64>,
    pub y_bar: DVector<f64>,
    /// Optimised input correction `U_f g`; for DeePC this is the whole input.
    pub u_g: DVector<f64>,
    pub g: DVector<f64>,
    pub sigma: DVector<f64>,
    /// Optimal cost of the horizon problem including regularisers.
    pub cost: f64,
    pub status: Option<QpStatus>,
    pub iterations: usize,
    pub kkt_max: f64,
    pub solve_time: Duration,
}

/// A configured controller. Stateless across steps apart from the
/// [`ControllerState`] it is driven with.
pub struct Controller {
    kind: ControllerKind,
    cfg: ControllerConfig,
    hankel: Option<HankelSet>,
    template: Option<QpTemplate>,
    workspace: Option<QpWorkspace>,
    m_reg: Option<DenseMatrix>,
    predictor: Option<ThetaPredictor>,
    spc_gain: Option<SpcGain>,
    omega: DenseMatrix,
    psi: DenseMatrix,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller")
            .field("kind", &self.kind)
            .field("cols", &self.hankel.as_ref().map(|h| h.cols()))
            .finish()
    }
}

impl Controller {
    /// `h_bar` feeds the predictor `Θ` (GDPC and SPC), `h` the QP (GDPC and
    /// DeePC).
    pub fn new(
        kind: ControllerKind,
        cfg: ControllerConfig,
        h_bar: Option<&HankelSet>,
        h: Option<&HankelSet>,
    ) -> Result<Self> {
        cfg.validate()?;
        let check_set = |set: &HankelSet, what: &str| -> Result<()> {
            if set.t_ini != cfg.t_ini || set.horizon != cfg.horizon {
                return Err(DpcError::Dimension(format!(
                    "{what} built for T_ini={}, N={} but controller uses T_ini={}, N={}",
                    set.t_ini, set.horizon, cfg.t_ini, cfg.horizon
                )));
            }
            dim_check(&format!("{what} input width"), set.n_u, cfg.n_u())?;
            dim_check(&format!("{what} output width"), set.n_y, cfg.n_y())
        };
        let (predictor, spc_gain) = if kind.uses_predictor() {
            let hb = h_bar.ok_or_else(|| DpcError::InvalidArgument(format!("{kind} needs the predictor data set")))?;
            check_set(hb, "predictor data set")?;
            let p = fit_theta(hb)?;
            let gain = build_spc_gain(&p, &cfg.q, &cfg.r, cfg.alpha)?;
            (Some(p), Some(gain))
        } else {
            (None, None)
        };
        let (hankel, template, workspace, m_reg) = if kind.uses_qp() {
            let h = h.ok_or_else(|| DpcError::InvalidArgument(format!("{kind} needs a Hankel data set")))?;
            check_set(h, "Hankel data set")?;
            let proj = build_projector(h, cfg.regularizer)?;
            let form = if kind.is_gdpc() {
                Formulation::Gdpc
            } else {
                Formulation::Deepc
            };
            let t = QpTemplate::new(form, h, &proj, &cfg.weights(), &cfg.bounds, cfg.condense_options())?;
            let ws = t.workspace()?;
            (Some(h.clone()), Some(t), Some(ws), Some(proj.m_reg))
        } else {
            (None, None, None, None)
        };
        let omega = output_weight(&cfg.q, cfg.alpha, cfg.horizon);
        let psi = input_weight(&cfg.r, cfg.horizon);
        Ok(Self {
            kind,
            cfg,
            hankel,
            template,
            workspace,
            m_reg,
            predictor,
            spc_gain,
            omega,
            psi,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn predictor(&self) -> Option<&ThetaPredictor> {
        self.predictor.as_ref()
    }

    /// Number of Hankel columns in the QP, `0` for SPC.
    pub fn qp_size(&self) -> usize {
        self.hankel.as_ref().map_or(0, |h| h.cols())
    }

    pub fn init(&self, warmup: &ExperimentData, y_now: &DVector<f64>) -> Result<ControllerState> {
        init_controller(&self.cfg, warmup, y_now)
    }

    fn tracking_cost(&self, y: &DVector<f64>, u: &DVector<f64>, r_y: &DVector<f64>, r_u: &DVector<f64>) -> f64 {
        let ey = y - repeat_vector(r_y, self.cfg.horizon);
        let eu = u - repeat_vector(r_u, self.cfg.horizon);
        ey.dot(&(&self.omega * &ey)) + eu.dot(&(&self.psi * &eu))
    }

    fn spc_base(&self, state: &ControllerState, r_y: &DVector<f64>, r_u: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.predictor.as_ref().expect("predictor present");
        let gain = self.spc_gain.as_ref().expect("gain present");
        let u = unconstrained_spc(gain, p, &state.u_ini_vec(), &state.y_ini_vec(), r_y, r_u)?;
        Ok(self.cfg.bounds.clip_input(&u))
    }

    fn first_block(&self, u: &DVector<f64>) -> DVector<f64> {
        let n_u = self.cfg.n_u();
        let first = u.rows(0, n_u).into_owned();
        self.cfg.bounds.clip_input(&first)
    }

    /// One receding-horizon step at the current windows. Updates the base
    /// sequence and the stored optimum but not the windows.
    pub fn step(&self, state: &mut ControllerState, r_y: &DVector<f64>, r_u: &DVector<f64>) -> Result<StepDiagnostics> {
        dim_check("r_y length", r_y.len(), self.cfg.n_y())?;
        dim_check("r_u length", r_u.len(), self.cfg.n_u())?;
        dim_check("u_ini window", state.u_ini.len(), self.cfg.t_ini)?;
        dim_check("y_ini window", state.y_ini.len(), self.cfg.t_ini)?;
        dim_check(
            "base sequence length",
            state.u_bar.len(),
            self.cfg.n_u() * self.cfg.horizon,
        )?;
        match self.kind {
            ControllerKind::Spc => self.spc_step(state, r_y, r_u),
            ControllerKind::Deepc => self.qp_step(state, r_y, r_u),
            ControllerKind::GdpcShift | ControllerKind::GdpcSpc => self.qp_step(state, r_y, r_u),
        }
    }

    fn spc_step(&self, state: &mut ControllerState, r_y: &DVector<f64>, r_u: &DVector<f64>) -> Result<StepDiagnostics> {
        let p = self.predictor.as_ref().expect("predictor present");
        let u = self.spc_base(state, r_y, r_u)?;
        let y = predict_base_output(p, &state.u_ini_vec(), &state.y_ini_vec(), &u)?;
        let cost = self.tracking_cost(&y, &u, r_y, r_u);
        state.u_bar = u.clone();
        state.last = Some(LastSolution {
            u_star: u.clone(),
            y_star: y.clone(),
            g: DVector::zeros(0),
        });
        Ok(StepDiagnostics {
            applied: self.first_block(&u),
            u_g: DVector::zeros(u.len()),
            u_bar: u.clone(),
            y_bar: y.clone(),
            u_star: u,
            y_star: y,
            g: DVector::zeros(0),
            sigma: DVector::zeros(0),
            cost,
            status: None,
            iterations: 0,
            kkt_max: 0.0,
            solve_time: Duration::ZERO,
        })
    }

    fn qp_step(&self, state: &mut ControllerState, r_y: &DVector<f64>, r_u: &DVector<f64>) -> Result<StepDiagnostics> {
        let h = self.hankel.as_ref().expect("hankel present");
        let template = self.template.as_ref().expect("template present");
        let ws = self.workspace.as_ref().expect("workspace present");
        let u_ini = state.u_ini_vec();
        let y_ini = state.y_ini_vec();
        let n_u_rows = self.cfg.n_u() * self.cfg.horizon;
        let n_y_rows = self.cfg.n_y() * self.cfg.horizon;

        let (u_bar, y_bar, vectors) = if self.kind.is_gdpc() {
            let u_bar = match self.kind {
                ControllerKind::GdpcSpc => self.spc_base(state, r_y, r_u)?,
                _ => state.u_bar.clone(),
            };
            let p = self.predictor.as_ref().expect("predictor present");
            let y_bar = predict_base_output(p, &u_ini, &y_ini, &u_bar)?;
            let v = template.gdpc_vectors(&y_bar, &u_bar, r_y, r_u)?;
            (u_bar, y_bar, v)
        } else {
            let v = template.deepc_vectors(&u_ini, &y_ini, r_y, r_u)?;
            (DVector::zeros(n_u_rows), DVector::zeros(n_y_rows), v)
        };

        let warm = state
            .last
            .as_ref()
            .and_then(|l| (l.g.len() == ws.dim()).then_some(&l.g));
        let sol = ws.solve(&vectors.f, &vectors.b_eq, &vectors.lb, &vectors.ub, warm, &self.cfg.qp)?;
        if sol.status == QpStatus::Infeasible {
            return Err(DpcError::Infeasible(format!(
                "{} QP with {} columns: u_ini={:?}, y_ini={:?}",
                self.kind,
                h.cols(),
                u_ini.as_slice(),
                y_ini.as_slice()
            )));
        }
        let g = sol.g_star.rows(0, template.n_weights()).into_owned();
        let u_g = &h.uf * &g;
        let y_g = &h.yf * &g;
        let u_star = &u_bar + &u_g;
        let y_star = &y_bar + &y_g;
        let sigma = match self.kind {
            ControllerKind::Deepc => &h.yp * &g - &y_ini,
            _ => &h.yp * &g,
        };
        let m_reg = self.m_reg.as_ref().expect("regulariser present");
        let mut cost = self.tracking_cost(&y_star, &u_star, r_y, r_u) + self.cfg.lambda_g * g.dot(&(m_reg * &g));
        if self.cfg.slack == SlackMode::Penalized {
            cost += self.cfg.lambda_sigma * sigma.norm_squared();
        }
        if let Some(p) = self.cfg.soft_output_penalty {
            cost += p * sol.g_star.rows(template.n_weights(), template.n_slack).sum();
        }

        if self.kind == ControllerKind::GdpcShift {
            state.u_bar = shift_sequence(&u_star, self.cfg.n_u(), self.cfg.tail_rule, r_u)?;
        } else {
            state.u_bar = u_bar.clone();
        }
        state.last = Some(LastSolution {
            u_star: u_star.clone(),
            y_star: y_star.clone(),
            g: sol.g_star.clone(),
        });
        Ok(StepDiagnostics {
            applied: self.first_block(&u_star),
            u_star,
            y_star,
            u_bar,
            y_bar,
            u_g,
            g,
            sigma,
            cost,
            status: Some(sol.status),
            iterations: sol.iterations,
            kkt_max: sol.kkt.max(),
            solve_time: sol.solve_time,
        })
    }
}

#[cfg(test)]
mod tests;
