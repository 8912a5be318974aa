//! Dense convex QP solver.
//!
//! Equality rows are removed by a null-space basis of `A_eq`, leaving a
//! box-constrained problem in `w` with `g = g_p + Z w`. That problem is solved
//! by a primal-dual active-set iteration on a regularised KKT system with
//! iterative refinement; when the active-set iteration stalls, an ADMM
//! splitting identifies the active set and every few iterations the same
//! refined KKT solve polishes the iterate.
//!
//! Everything that depends only on `(H, A_eq, A_box)` lives in
//! [`QpWorkspace`], so receding-horizon callers can factor once and re-solve
//! with new `(f, b_eq, lb, ub)` each step.

use std::collections::HashSet;
use std::time::Duration;

use nalgebra::DVector;
use web_time::Instant;

use super::CondensedQp;
use crate::error::{dim_check, DpcError, Result};
use crate::linalg::{self, DenseMatrix, LinalgError, SpdFactor, DEFAULT_RANK_TOL};

/// Reduced iterate and box multipliers.
type PrimalDual = (DVector<f64>, DVector<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max_iter",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

/// KKT residuals in the original variables, all in the max-norm.
///
/// `stationarity` is `‖H g + f + A_eqᵀν + A_boxᵀμ‖` divided by
/// `1 + max(‖f‖, ‖H‖‖g‖, ‖A_box‖‖μ‖, ‖A_eq‖‖ν‖)`, a normwise backward error.
/// `complementarity` is `max |μ_i| · dist(a_i g, bound the sign of μ_i
/// points to)`, which is infinite when a multiplier pushes on an infinite
/// bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }

    fn worst() -> Self {
        Self {
            stationarity: f64::INFINITY,
            primal_eq: f64::INFINITY,
            primal_ineq: f64::INFINITY,
            complementarity: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub tol: f64,
    /// ADMM iteration budget.
    pub max_iter: usize,
    /// Active-set iterations of the first phase.
    pub max_active_set_iter: usize,
    /// ADMM iterations between polishing attempts.
    pub polish_interval: usize,
    /// ADMM over-relaxation.
    pub alpha: f64,
    /// Initial ADMM penalty; derived from the problem scale when `None`.
    pub rho: Option<f64>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 4000,
            max_active_set_iter: 50,
            polish_interval: 25,
            alpha: 1.6,
            rho: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub g_star: DVector<f64>,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub solve_time: Duration,
    /// Equality multipliers.
    pub nu: DVector<f64>,
    /// Box multipliers; positive on the upper bound, negative on the lower.
    pub mu: DVector<f64>,
    pub objective: f64,
}

struct EqBasis {
    u_r: DenseMatrix,
    s_r: DVector<f64>,
    v_r: DenseMatrix,
    /// Orthonormal basis of `null(A_eq)`.
    z: DenseMatrix,
}

fn equality_basis(a_eq: &DenseMatrix) -> Result<Option<EqBasis>> {
    let m = a_eq.ncols();
    if a_eq.nrows() == 0 {
        return Ok(None);
    }
    let dec = linalg::svd(a_eq)?;
    let r = dec.rank(DEFAULT_RANK_TOL);
    let v_r = dec.v.columns(0, r).into_owned();
    let z = if r == 0 {
        DenseMatrix::identity(m, m)
    } else {
        let qr = v_r.clone().qr();
        let mut qt = DenseMatrix::identity(m, m);
        qr.q_tr_mul(&mut qt);
        qt.rows(r, m - r).transpose()
    };
    Ok(Some(EqBasis {
        u_r: dec.u.columns(0, r).into_owned(),
        s_r: dec.s.rows(0, r).into_owned(),
        v_r,
        z,
    }))
}

/// Cholesky of `h + δI` with the smallest `δ ≥ 1e-12·max diag` that works,
/// giving up once `δ` exceeds `1e-8·‖H‖_F`.
fn regularized_cholesky(h: &DenseMatrix, h_norm: f64) -> Result<(SpdFactor, f64)> {
    let n = h.nrows();
    let diag_max = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max);
    let ceiling = (1e-8 * h_norm).max(f64::MIN_POSITIVE);
    let mut delta = (1e-12 * diag_max).max(1e-300).min(ceiling);
    loop {
        let mut k = h.clone();
        for i in 0..n {
            k[(i, i)] += delta;
        }
        if let Ok(f) = SpdFactor::new(&k) {
            return Ok((f, delta));
        }
        if delta >= ceiling {
            return Err(DpcError::InvalidArgument("Hessian is not positive semidefinite".into()));
        }
        delta = (delta * 100.0).min(ceiling);
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Side {
    Free,
    Lower,
    Upper,
}

/// One step's data in the reduced variables.
struct Reduced {
    f: DVector<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    g_p: DVector<f64>,
    f_scale: f64,
    /// Box rows that vanish after elimination and can never become active.
    dead: Vec<bool>,
}

struct Candidate {
    g: DVector<f64>,
    nu: DVector<f64>,
    mu: DVector<f64>,
    kkt: KktResiduals,
}

/// Factorisations for a fixed `(H, A_eq, A_box)`.
pub struct QpWorkspace {
    h: DenseMatrix,
    a_eq: DenseMatrix,
    a_box: DenseMatrix,
    eq: Option<EqBasis>,
    h_w: DenseMatrix,
    a_w: DenseMatrix,
    /// Cholesky of `H_w + δI`.
    factor: SpdFactor,
    delta: f64,
    /// `(H_w + δI)⁻¹ A_wᵀ`.
    g_raw: DenseMatrix,
    /// `A_w (H_w + δI)⁻¹ A_wᵀ`.
    m_raw: DenseMatrix,
    row_norms: Vec<f64>,
    norms: InfNorms,
}

/// Induced ∞-norms of the fixed matrices.
#[derive(Debug, Clone, Copy)]
struct InfNorms {
    h: f64,
    a_box: f64,
    a_eq: f64,
}

fn matrix_inf_norm(m: &DenseMatrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

impl std::fmt::Debug for QpWorkspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QpWorkspace")
            .field("dim", &self.dim())
            .field("reduced_dim", &self.h_w.nrows())
            .field("n_eq", &self.a_eq.nrows())
            .field("n_box", &self.a_box.nrows())
            .field("delta", &self.delta)
            .finish()
    }
}

impl QpWorkspace {
    pub fn new(h: &DenseMatrix, a_eq: &DenseMatrix, a_box: &DenseMatrix) -> Result<Self> {
        let m = h.nrows();
        dim_check("Hessian columns", h.ncols(), m)?;
        dim_check("equality matrix columns", a_eq.ncols(), m)?;
        dim_check("box matrix columns", a_box.ncols(), m)?;
        linalg::ensure_finite(h)?;
        linalg::ensure_finite(a_eq)?;
        linalg::ensure_finite(a_box)?;
        let mut h = h.clone();
        linalg::symmetrize(&mut h);
        let h_norm = h.norm();

        // smallest eigenvalue must be >= -1e-8 ||H||
        if m > 0 {
            let mut shifted = h.clone();
            let shift = (1e-8 * h_norm).max(1e-300);
            for i in 0..m {
                shifted[(i, i)] += shift;
            }
            SpdFactor::new(&shifted)
                .map_err(|_| DpcError::InvalidArgument("Hessian is not positive semidefinite".into()))?;
        }

        let eq = equality_basis(a_eq)?;
        let (mut h_w, a_w) = match &eq {
            Some(b) => {
                let hz = &h * &b.z;
                (b.z.transpose() * hz, a_box * &b.z)
            }
            None => (h.clone(), a_box.clone()),
        };
        linalg::symmetrize(&mut h_w);
        let (factor, delta) = regularized_cholesky(&h_w, h_norm)?;
        let g_raw = factor.solve_matrix(&a_w.transpose())?;
        let mut m_raw = &a_w * &g_raw;
        linalg::symmetrize(&mut m_raw);
        let row_norms = a_w.row_iter().map(|r| r.norm()).collect();
        let norms = InfNorms {
            h: matrix_inf_norm(&h),
            a_box: matrix_inf_norm(a_box),
            a_eq: matrix_inf_norm(a_eq),
        };
        Ok(Self {
            h,
            a_eq: a_eq.clone(),
            a_box: a_box.clone(),
            eq,
            h_w,
            a_w,
            factor,
            delta,
            g_raw,
            m_raw,
            row_norms,
            norms,
        })
    }

    pub fn from_qp(qp: &CondensedQp) -> Result<Self> {
        qp.validate()?;
        Self::new(&qp.h, &qp.a_eq, &qp.a_box)
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Dimension after eliminating the equality rows.
    pub fn reduced_dim(&self) -> usize {
        self.h_w.nrows()
    }

    fn expand(&self, g_p: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        match &self.eq {
            Some(b) => g_p + &b.z * w,
            None => w.clone(),
        }
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.eq {
            Some(b) => b.z.transpose() * v,
            None => v.clone(),
        }
    }

    /// KKT residuals of `(g, μ)` with the least-squares equality multipliers.
    fn certify(
        &self,
        f: &DVector<f64>,
        b_eq: &DVector<f64>,
        lb: &DVector<f64>,
        ub: &DVector<f64>,
        g: DVector<f64>,
        mu: DVector<f64>,
    ) -> Candidate {
        let mut grad = &self.h * &g + f + self.a_box.transpose() * &mu;
        let nu = match &self.eq {
            Some(b) if !b.s_r.is_empty() => {
                let mut t = b.v_r.transpose() * &grad;
                t.component_div_assign(&b.s_r);
                -(&b.u_r * t)
            }
            _ => DVector::zeros(self.a_eq.nrows()),
        };
        if self.a_eq.nrows() > 0 {
            grad += self.a_eq.transpose() * &nu;
        }
        // normwise backward error: cancellation inside H g is not the
        // solver's fault when H is badly scaled
        let scale = 1.0
            + inf_norm(f)
                .max(self.norms.h * inf_norm(&g))
                .max(self.norms.a_box * inf_norm(&mu))
                .max(self.norms.a_eq * inf_norm(&nu));
        let stationarity = inf_norm(&grad) / scale;
        let primal_eq = if self.a_eq.nrows() > 0 {
            inf_norm(&(&self.a_eq * &g - b_eq))
        } else {
            0.0
        };
        let ag = &self.a_box * &g;
        let mut primal_ineq = 0.0_f64;
        let mut complementarity = 0.0_f64;
        for i in 0..ag.len() {
            primal_ineq = primal_ineq.max(ag[i] - ub[i]).max(lb[i] - ag[i]);
            let c = if mu[i] > 0.0 {
                mu[i] * (ub[i] - ag[i]).abs()
            } else if mu[i] < 0.0 {
                -mu[i] * (ag[i] - lb[i]).abs()
            } else {
                0.0
            };
            complementarity = complementarity.max(if c.is_nan() { f64::INFINITY } else { c });
        }
        Candidate {
            g,
            nu,
            mu,
            kkt: KktResiduals {
                stationarity,
                primal_eq,
                primal_ineq,
                complementarity,
            },
        }
    }

    /// Solve the equality-constrained QP with the given box rows held at
    /// `targets`, by the `δ`-regularised KKT system refined against the exact
    /// one. Returns `(w, λ)`.
    fn eq_qp(&self, f: &DVector<f64>, rows: &[usize], targets: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.h_w.nrows();
        let k = rows.len();
        let a = DenseMatrix::from_fn(k, n, |i, j| self.a_w[(rows[i], j)]);
        let gk = DenseMatrix::from_fn(n, k, |i, j| self.g_raw[(i, rows[j])]);
        let s_factor = if k > 0 {
            let mut s = DenseMatrix::from_fn(k, k, |i, j| self.m_raw[(rows[i], rows[j])]);
            let diag_max = (0..k).map(|i| s[(i, i)].abs()).fold(0.0, f64::max);
            let mut dc = (1e-13 * diag_max).max(1e-300);
            loop {
                if let Ok(fac) = SpdFactor::new(&s) {
                    break Some(fac);
                }
                if dc > 1e-2 * diag_max.max(1e-300) {
                    return None;
                }
                for i in 0..k {
                    s[(i, i)] += dc;
                }
                dc *= 100.0;
            }
        } else {
            None
        };

        let scale = 1.0 + inf_norm(f);
        let mut w = DVector::zeros(n);
        let mut lam = DVector::zeros(k);
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            let r1 = -f - &self.h_w * &w - a.transpose() * &lam;
            let r2 = targets - &a * &w;
            let res = (inf_norm(&r1) / scale).max(if k > 0 { inf_norm(&r2) } else { 0.0 });
            if res == 0.0 || res > 0.5 * last {
                break;
            }
            last = res;
            let t = self.factor.solve(&r1).ok()?;
            match &s_factor {
                Some(sf) => {
                    let dl = sf.solve(&(&a * &t - &r2)).ok()?;
                    w += t - &gk * &dl;
                    lam += dl;
                }
                None => w += t,
            }
        }
        Some((w, lam))
    }

    /// Primal-dual active-set iteration from the initial sides.
    fn active_set(
        &self,
        red: &Reduced,
        mut sides: Vec<Side>,
        max_iter: usize,
        tol: f64,
    ) -> (Option<PrimalDual>, usize) {
        let q = sides.len();
        let mut seen = HashSet::new();
        for it in 0..max_iter {
            if !seen.insert(sides.clone()) {
                return (None, it);
            }
            let rows: Vec<usize> = (0..q).filter(|&i| sides[i] != Side::Free).collect();
            let targets = DVector::from_iterator(
                rows.len(),
                rows.iter().map(|&i| match sides[i] {
                    Side::Upper => red.u[i],
                    _ => red.l[i],
                }),
            );
            let Some((w, lam)) = self.eq_qp(&red.f, &rows, &targets) else {
                return (None, it + 1);
            };
            let mut mu = DVector::zeros(q);
            for (j, &i) in rows.iter().enumerate() {
                mu[i] = lam[j];
            }
            let mu_tol = 1e-12 * (1.0 + inf_norm(&mu));
            let az = &self.a_w * &w;
            let mut changed = false;
            for i in 0..q {
                let next = match sides[i] {
                    Side::Upper if mu[i] < -mu_tol => {
                        if red.l[i] == red.u[i] {
                            Side::Lower
                        } else {
                            Side::Free
                        }
                    }
                    Side::Lower if mu[i] > mu_tol => {
                        if red.l[i] == red.u[i] {
                            Side::Upper
                        } else {
                            Side::Free
                        }
                    }
                    Side::Free if !red.dead[i] => {
                        if az[i] > red.u[i] + 0.1 * tol {
                            Side::Upper
                        } else if az[i] < red.l[i] - 0.1 * tol {
                            Side::Lower
                        } else {
                            Side::Free
                        }
                    }
                    s => s,
                };
                if next != sides[i] {
                    changed = true;
                    sides[i] = next;
                }
            }
            if !changed {
                return (Some((w, mu)), it + 1);
            }
        }
        (None, max_iter)
    }

    fn initial_sides(&self, red: &Reduced, w: &DVector<f64>) -> Vec<Side> {
        let az = &self.a_w * w;
        (0..az.len())
            .map(|i| {
                if red.dead[i] {
                    Side::Free
                } else if red.u[i].is_finite() && az[i] >= red.u[i] - 1e-9 * (1.0 + red.u[i].abs()) {
                    Side::Upper
                } else if red.l[i].is_finite() && az[i] <= red.l[i] + 1e-9 * (1.0 + red.l[i].abs()) {
                    Side::Lower
                } else {
                    Side::Free
                }
            })
            .collect()
    }

    /// Solve with new linear term, equality right-hand side and bounds.
    pub fn solve(
        &self,
        f: &DVector<f64>,
        b_eq: &DVector<f64>,
        lb: &DVector<f64>,
        ub: &DVector<f64>,
        warm_start: Option<&DVector<f64>>,
        settings: &QpSettings,
    ) -> Result<QpSolution> {
        let start = Instant::now();
        let m = self.dim();
        let q = self.a_box.nrows();
        dim_check("linear term length", f.len(), m)?;
        dim_check("equality rhs length", b_eq.len(), self.a_eq.nrows())?;
        dim_check("lower bound length", lb.len(), q)?;
        dim_check("upper bound length", ub.len(), q)?;
        if let Some(g0) = warm_start {
            dim_check("warm start length", g0.len(), m)?;
        }
        if f.iter().chain(b_eq.iter()).any(|v| !v.is_finite()) || lb.iter().chain(ub.iter()).any(|v| v.is_nan()) {
            return Err(DpcError::Linalg(LinalgError::NonFinite));
        }
        let tol = settings.tol;
        let infeasible = || -> Result<QpSolution> {
            Ok(QpSolution {
                g_star: DVector::zeros(m),
                status: QpStatus::Infeasible,
                kkt: KktResiduals::worst(),
                iterations: 0,
                solve_time: start.elapsed(),
                nu: DVector::zeros(self.a_eq.nrows()),
                mu: DVector::zeros(q),
                objective: f64::NAN,
            })
        };
        if lb.iter().zip(ub.iter()).any(|(l, u)| l > u) {
            return infeasible();
        }

        let g_p = match &self.eq {
            Some(b) => {
                let mut t = b.u_r.transpose() * b_eq;
                t.component_div_assign(&b.s_r);
                let g_p = &b.v_r * t;
                let resid = inf_norm(&(&self.a_eq * &g_p - b_eq));
                if resid > 1e-6 * (1.0 + inf_norm(b_eq)) {
                    return infeasible();
                }
                g_p
            }
            None => DVector::zeros(m),
        };
        let f_w = self.project(&(&self.h * &g_p + f));
        let shift = &self.a_box * &g_p;
        let l = lb - &shift;
        let u = ub - &shift;
        let a_scale = self.row_norms.iter().fold(0.0_f64, |a, &b| a.max(b));
        let mut dead = vec![false; q];
        for i in 0..q {
            if self.row_norms[i] <= 1e-13 * a_scale.max(1e-300) {
                if l[i] > tol || u[i] < -tol {
                    return infeasible();
                }
                dead[i] = true;
            }
        }
        let red = Reduced {
            f_scale: 1.0 + inf_norm(&f_w),
            f: f_w,
            l,
            u,
            g_p,
            dead,
        };

        let finish = |cand: Candidate, status: QpStatus, iterations: usize| QpSolution {
            objective: 0.5 * cand.g.dot(&(&self.h * &cand.g)) + f.dot(&cand.g),
            g_star: cand.g,
            status,
            kkt: cand.kkt,
            iterations,
            solve_time: start.elapsed(),
            nu: cand.nu,
            mu: cand.mu,
        };

        let n = self.reduced_dim();
        let w0 = match warm_start {
            Some(g0) => self.project(&(g0 - &red.g_p)),
            None => DVector::zeros(n),
        };

        let mut best: Option<Candidate> = None;
        let consider = |cand: Candidate, best: &mut Option<Candidate>| -> bool {
            let ok = cand.kkt.within(tol);
            if best.as_ref().is_none_or(|b| cand.kkt.max() < b.kkt.max()) {
                *best = Some(cand);
            }
            ok
        };

        let sides = self.initial_sides(&red, &w0);
        let (res, mut iterations) = self.active_set(&red, sides, settings.max_active_set_iter, tol);
        if let Some((w, mu)) = res {
            let cand = self.certify(f, b_eq, lb, ub, self.expand(&red.g_p, &w), mu);
            if consider(cand, &mut best) {
                return Ok(finish(best.unwrap(), QpStatus::Optimal, iterations));
            }
        }

        // ADMM on the row-scaled reduced problem
        let d: Vec<f64> = self
            .row_norms
            .iter()
            .map(|&r| if r > 0.0 { 1.0 / r } else { 1.0 })
            .collect();
        let dv = DVector::from_column_slice(&d);
        let mut a_s = self.a_w.clone();
        for (i, di) in d.iter().enumerate() {
            a_s.row_mut(i).scale_mut(*di);
        }
        let l_s = red.l.component_mul(&dv);
        let u_s = red.u.component_mul(&dv);
        let ata = a_s.transpose() * &a_s;
        let tr_h = self.h_w.trace();
        let tr_a = ata.trace();
        let sigma = (1e-6 * tr_h / n.max(1) as f64).max(1e-12);
        let mut rho = settings
            .rho
            .unwrap_or_else(|| if tr_a > 0.0 { (0.1 * tr_h / tr_a).max(1e-6) } else { 1.0 });
        let factor_for = |rho: f64, sigma: f64| -> Result<SpdFactor> {
            let mut k = &self.h_w + &ata * rho;
            for i in 0..n {
                k[(i, i)] += sigma;
            }
            Ok(SpdFactor::new(&k)?)
        };
        let mut kf = factor_for(rho, sigma)?;
        let alpha = settings.alpha;
        let clip = |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| v[i].max(l_s[i]).min(u_s[i]));
        let mut x = w0;
        let mut z = clip(&(&a_s * &x));
        let mut y = DVector::<f64>::zeros(q);
        let interval = settings.polish_interval.max(1);
        for it in 1..=settings.max_iter {
            let rhs = &x * sigma - &red.f + a_s.transpose() * (&z * rho - &y);
            let xt = kf.solve(&rhs)?;
            let zt = &a_s * &xt;
            x = &xt * alpha + &x * (1.0 - alpha);
            let zr = &zt * alpha + &z * (1.0 - alpha);
            let z_new = clip(&(&zr + &y / rho));
            let y_prev = y.clone();
            y += (&zr - &z_new) * rho;
            z = z_new;
            iterations += 1;
            if it % interval != 0 && it != settings.max_iter {
                continue;
            }

            // primal infeasibility certificate
            let dy = &y - &y_prev;
            let dy_norm = inf_norm(&dy);
            if dy_norm > 0.0 && q > 0 {
                let at_dy = inf_norm(&(a_s.transpose() * &dy));
                let support: f64 = (0..q)
                    .map(|i| {
                        if dy[i] > 0.0 {
                            u_s[i] * dy[i]
                        } else if dy[i] < 0.0 {
                            l_s[i] * dy[i]
                        } else {
                            0.0
                        }
                    })
                    .sum();
                if at_dy <= 1e-9 * dy_norm && support < -1e-6 * dy_norm {
                    return infeasible();
                }
            }

            let sides: Vec<Side> = (0..q)
                .map(|i| {
                    if red.dead[i] {
                        Side::Free
                    } else if z[i] - l_s[i] < -y[i] {
                        Side::Lower
                    } else if u_s[i] - z[i] < y[i] {
                        Side::Upper
                    } else {
                        Side::Free
                    }
                })
                .collect();
            let (res, its) = self.active_set(&red, sides, 10, tol);
            iterations += its;
            if let Some((w, mu)) = res {
                let cand = self.certify(f, b_eq, lb, ub, self.expand(&red.g_p, &w), mu);
                if consider(cand, &mut best) {
                    return Ok(finish(best.unwrap(), QpStatus::Optimal, iterations));
                }
            }
            let mu_admm = y.component_mul(&dv);
            let cand = self.certify(f, b_eq, lb, ub, self.expand(&red.g_p, &x), mu_admm);
            if consider(cand, &mut best) {
                return Ok(finish(best.unwrap(), QpStatus::Optimal, iterations));
            }

            let ax = &a_s * &x;
            let prim = inf_norm(&(&ax - &z)) / inf_norm(&ax).max(inf_norm(&z)).max(1e-30);
            let hx = &self.h_w * &x;
            let aty = a_s.transpose() * &y;
            let dual =
                inf_norm(&(&hx + &red.f + &aty)) / inf_norm(&hx).max(inf_norm(&aty)).max(red.f_scale - 1.0).max(1e-30);
            if dual > 0.0 && prim > 0.0 {
                let ratio = (prim / dual).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    rho = (rho * ratio).clamp(1e-9, 1e12);
                    kf = factor_for(rho, sigma)?;
                }
            }
        }
        let best = match best {
            Some(b) => b,
            None => self.certify(f, b_eq, lb, ub, self.expand(&red.g_p, &x), y.component_mul(&dv)),
        };
        Ok(finish(best, QpStatus::MaxIter, iterations))
    }
}

/// Solve a condensed QP from scratch.
pub fn solve_qp(qp: &CondensedQp, warm_start: Option<&DVector<f64>>, settings: &QpSettings) -> Result<QpSolution> {
    let start = Instant::now();
    let ws = QpWorkspace::from_qp(qp)?;
    let mut sol = ws.solve(&qp.f, &qp.b_eq, &qp.lb, &qp.ub, warm_start, settings)?;
    sol.solve_time = start.elapsed();
    Ok(sol)
}
