//! Runtime checks of the terminal condition and of the storage/supply
//! dissipation inequality along a closed loop.

use nalgebra::DVector;

use crate::controllers::{ControllerConfig, StepDiagnostics, TailRule};
use crate::error::{dim_check, Result};
use crate::linalg::DenseMatrix;
use crate::predictor::ArxModel;

#[derive(Debug, Clone)]
pub struct StabilityMonitor {
    pub arx: ArxModel,
    pub q: DenseMatrix,
    pub r: DenseMatrix,
    pub t_ini: usize,
    pub horizon: usize,
    pub tail_rule: TailRule,
    pub epsilon_rho: f64,
    /// Absolute slack of the terminal test; absorbs rounding once both
    /// sides have decayed to the floating-point floor.
    pub terminal_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalCheck {
    /// `l(ȳ(N+1|k), ū(N|k))`.
    pub lhs: f64,
    /// `ε_ρ · l(y(k−T_ini), u(k−T_ini))`.
    pub rhs: f64,
    pub holds: bool,
}

impl TerminalCheck {
    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Everything the monitor needs about one step.
#[derive(Debug, Clone)]
pub struct StepEvaluation {
    pub terminal: TerminalCheck,
    /// `V(k) = J*(k) + ‖y(k) − r_y‖²_Q + W(k)`.
    pub storage: f64,
    /// `s(k) = l(ȳ(N+1|k), ū(N|k)) − l(y(k−T_ini), u(k−T_ini))`.
    pub supply: f64,
}

impl StabilityMonitor {
    pub fn new(arx: ArxModel, cfg: &ControllerConfig, epsilon_rho: f64, terminal_tol: f64) -> Self {
        Self {
            arx,
            q: cfg.q.clone(),
            r: cfg.r.clone(),
            t_ini: cfg.t_ini,
            horizon: cfg.horizon,
            tail_rule: cfg.tail_rule,
            epsilon_rho,
            terminal_tol,
        }
    }

    /// `l(y, u) = ‖y − r_y‖²_Q + ‖u − r_u‖²_R`.
    pub fn stage(&self, y: &DVector<f64>, u: &DVector<f64>, r_y: &DVector<f64>, r_u: &DVector<f64>) -> f64 {
        let ey = y - r_y;
        let eu = u - r_u;
        ey.dot(&(&self.q * &ey)) + eu.dot(&(&self.r * &eu))
    }

    /// `W(k) = Σ_{i=1..T_ini} l(y(k−i), u(k−i))` from histories indexed by
    /// absolute time.
    pub fn storage_w(
        &self,
        ys: &[DVector<f64>],
        us: &[DVector<f64>],
        k: usize,
        r_y: &DVector<f64>,
        r_u: &DVector<f64>,
    ) -> f64 {
        (1..=self.t_ini.min(k))
            .map(|i| self.stage(&ys[k - i], &us[k - i], r_y, r_u))
            .sum()
    }

    /// Tail input `ū(N|k)` appended by the next shift.
    pub fn tail_input(&self, u_star: &DVector<f64>, r_u: &DVector<f64>) -> DVector<f64> {
        let n_u = r_u.len();
        match self.tail_rule {
            TailRule::RepeatLast => u_star.rows(u_star.len() - n_u, n_u).into_owned(),
            TailRule::Reference => r_u.clone(),
        }
    }

    /// `ȳ(N+1|k)` by running the ARX model on the measured windows followed
    /// by the predicted trajectory and the tail input.
    pub fn terminal_output(
        &self,
        u_ini: &[DVector<f64>],
        y_ini: &[DVector<f64>],
        u_star: &DVector<f64>,
        y_star: &DVector<f64>,
        u_tail: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n_u = u_tail.len();
        let n_y = self.q.nrows();
        dim_check("predicted input length", u_star.len(), n_u * self.horizon)?;
        dim_check("predicted output length", y_star.len(), n_y * self.horizon)?;
        // us: u(k−T_ini) … u(k+N), ys: y(k−T_ini+1) … y(k+N)
        let mut us: Vec<DVector<f64>> = u_ini.to_vec();
        us.extend((0..self.horizon).map(|i| u_star.rows(i * n_u, n_u).into_owned()));
        us.push(u_tail.clone());
        let mut ys: Vec<DVector<f64>> = y_ini.to_vec();
        ys.extend((0..self.horizon).map(|i| y_star.rows(i * n_y, n_y).into_owned()));
        self.arx.predict(&ys, &us)
    }

    /// Evaluate one step. `ys`/`us` hold the measured history up to `y(k)`
    /// and `u(k−1)`; `u_k` is the input applied at `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        k: usize,
        ys: &[DVector<f64>],
        us: &[DVector<f64>],
        diag: &StepDiagnostics,
        r_y: &DVector<f64>,
        r_u: &DVector<f64>,
    ) -> Result<StepEvaluation> {
        let lo = k.saturating_sub(self.t_ini);
        let u_tail = self.tail_input(&diag.u_star, r_u);
        let y_term = self.terminal_output(&us[lo..k], &ys[lo + 1..=k], &diag.u_star, &diag.y_star, &u_tail)?;
        let lhs = self.stage(&y_term, &u_tail, r_y, r_u);
        let old = if k >= self.t_ini {
            self.stage(&ys[k - self.t_ini], &us[k - self.t_ini], r_y, r_u)
        } else {
            0.0
        };
        let rhs = self.epsilon_rho * old;
        let e = &ys[k] - r_y;
        let storage = diag.cost + e.dot(&(&self.q * &e)) + self.storage_w(ys, us, k, r_y, r_u);
        Ok(StepEvaluation {
            terminal: TerminalCheck {
                lhs,
                rhs,
                holds: lhs <= rhs + self.terminal_tol,
            },
            storage,
            supply: lhs - old,
        })
    }
}

/// `V(k+1) − V(k) − s(k)`; expected `≤ 0` in the noise-free feasible case.
pub fn dissipation_gap(current: &StepEvaluation, next: &StepEvaluation) -> f64 {
    next.storage - current.storage - current.supply
}
