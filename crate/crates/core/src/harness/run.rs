use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::{reference_at, Reference, RunConfig};
use super::monitor::{dissipation_gap, StabilityMonitor, StepEvaluation};
use crate::controllers::{advance_windows, Controller, ControllerKind};
use crate::error::{DpcError, Result};
use crate::hankel::{
    build_hankel, check_input_rank, check_pe_length, check_regularizer_length, check_trajectory_rank, HankelSet,
    RegularizerMode,
};
use crate::linalg::DEFAULT_RANK_TOL;
use crate::predictor::fit_arx;
use crate::sim::{fmt_f64, generate_prbs, generate_uniform, ExperimentData, LinearSystem, SimRng};

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    PredictorData = 1,
    HankelData = 2,
    Warmup = 3,
    ClosedLoop = 4,
}

fn stream(seed: u64, which: Stream) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// The two excitation records of a run.
#[derive(Debug, Clone)]
pub struct DataSets {
    pub predictor: Option<ExperimentData>,
    pub hankel: Option<ExperimentData>,
}

fn excite(sys: &LinearSystem, len: usize, amplitude: f64, seed: u64, which: Stream) -> Result<ExperimentData> {
    let mut rng = stream(seed, which);
    let u = generate_prbs(len, amplitude, sys.n_u(), &mut rng)?;
    sys.simulate_sequence(&DVector::zeros(sys.n()), &u, &mut rng, seed)
}

/// Run the PRBS experiments the configured controller needs.
pub fn collect_data(cfg: &RunConfig, seed: u64) -> Result<DataSets> {
    let sys = cfg.model.system(cfg.noise_variance)?;
    let amp = cfg.excitation.prbs_amplitude;
    let predictor = cfg
        .controller
        .uses_predictor()
        .then(|| excite(&sys, cfg.excitation.predictor_length, amp, seed, Stream::PredictorData))
        .transpose()?;
    let hankel = cfg
        .controller
        .uses_qp()
        .then(|| excite(&sys, cfg.excitation.hankel_length, amp, seed, Stream::HankelData))
        .transpose()?;
    Ok(DataSets { predictor, hankel })
}

/// Same as [`collect_data`] but records both sets regardless of controller.
pub fn collect_all(cfg: &RunConfig, seed: u64) -> Result<DataSets> {
    let sys = cfg.model.system(cfg.noise_variance)?;
    let amp = cfg.excitation.prbs_amplitude;
    Ok(DataSets {
        predictor: Some(excite(
            &sys,
            cfg.excitation.predictor_length,
            amp,
            seed,
            Stream::PredictorData,
        )?),
        hankel: Some(excite(
            &sys,
            cfg.excitation.hankel_length,
            amp,
            seed,
            Stream::HankelData,
        )?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub value: usize,
    pub bound: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckItem> {
        self.items.iter().find(|i| !i.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

fn gate_items(
    prefix: &str,
    h: Option<&HankelSet>,
    cols: usize,
    cfg: &RunConfig,
    n: usize,
    projector: bool,
) -> Result<Vec<CheckItem>> {
    let c = &cfg.control;
    let (n_u, n_y) = (c.r.len(), c.q.len());
    let pe = check_pe_length(cols, n, n_u, c.t_ini, c.horizon);
    let mut items = vec![CheckItem {
        name: format!("{prefix}.pe_length"),
        value: pe.cols,
        bound: pe.bound,
        passed: pe.passed,
    }];
    if projector {
        let reg = check_regularizer_length(cols, c.t_ini, n_u, n_y, c.horizon);
        items.push(CheckItem {
            name: format!("{prefix}.regularizer_length"),
            value: reg.cols,
            bound: reg.bound,
            passed: reg.passed,
        });
    }
    if let Some(h) = h {
        let inputs = check_input_rank(h, DEFAULT_RANK_TOL)?;
        items.push(CheckItem {
            name: format!("{prefix}.input_rank"),
            value: inputs.rank,
            bound: inputs.rows,
            passed: inputs.passed,
        });
        let traj = check_trajectory_rank(h, n, DEFAULT_RANK_TOL)?;
        items.push(CheckItem {
            name: format!("{prefix}.trajectory_rank"),
            value: traj.cols,
            bound: traj.bound,
            passed: traj.passed,
        });
    }
    Ok(items)
}

/// Dimension, persistency-of-excitation and rank report for a config.
pub fn check_config(cfg: &RunConfig, seed: u64) -> Result<CheckReport> {
    cfg.validate()?;
    let sys = cfg.model.system(cfg.noise_variance)?;
    let data = collect_data(cfg, seed)?;
    let (t, n) = (cfg.control.t_ini, cfg.control.horizon);
    let mut items = Vec::new();
    if cfg.controller.uses_qp() {
        let cols = cfg.hankel_cols();
        let h = if cols > 0 {
            Some(build_hankel(data.hankel.as_ref().expect("hankel data"), t, n)?)
        } else {
            None
        };
        let projector = cfg.controller_config()?.regularizer == RegularizerMode::Projector;
        items.extend(gate_items("hankel", h.as_ref(), cols, cfg, sys.n(), projector)?);
    }
    if cfg.controller.uses_predictor() {
        let cols = cfg.predictor_cols();
        let h = if cols > 0 {
            Some(build_hankel(data.predictor.as_ref().expect("predictor data"), t, n)?)
        } else {
            None
        };
        items.extend(gate_items("predictor", h.as_ref(), cols, cfg, sys.n(), false)?);
    }
    Ok(CheckReport { items })
}

/// One closed-loop sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub k: usize,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub r_y: Vec<f64>,
    pub r_u: Vec<f64>,
    /// `l(y(k), u(k))` against the reference in force.
    pub stage_cost: f64,
    /// Optimal horizon cost reported by the controller.
    pub cost: f64,
    /// First block of `U_f g*`.
    pub u_g: Vec<f64>,
    pub u_g_norm: f64,
    pub g_norm: f64,
    pub sigma_norm: f64,
    pub iterations: usize,
    pub status: String,
    pub kkt: f64,
    pub solve_ms: f64,
    pub terminal_lhs: f64,
    pub terminal_rhs: f64,
    pub terminal_ok: bool,
    /// `V(k+1) − V(k) − s(k)`; absent on the last step and across
    /// reference changes.
    pub dissipation_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub controller: ControllerKind,
    pub seed: u64,
    pub j: f64,
    pub j_u: f64,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub converged: bool,
    /// Largest `‖y − r_y‖` over the final 10 % of rows.
    pub final_error: f64,
    /// `‖U_f g*‖` on the last step.
    pub final_u_g_norm: f64,
    /// Terminal-condition violations from `T_ini + 2N` on.
    pub terminal_violations: usize,
    pub max_dissipation_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub n_u: usize,
    pub n_y: usize,
    pub rows: Vec<StepRow>,
    pub summary: RunSummary,
    /// Sample where the controller first acted.
    pub t_ini: usize,
    pub horizon: usize,
}

/// `(J, J_u)` from measured data: `J = Σ ‖y−r_y‖²_Q + ‖u−r_u‖²_R`,
/// `J_u = Σ ‖u‖²`.
pub fn compute_metrics(rows: &[StepRow], q: &crate::linalg::DenseMatrix, r: &crate::linalg::DenseMatrix) -> (f64, f64) {
    let mut j = 0.0;
    let mut j_u = 0.0;
    for row in rows {
        let ey = DVector::from_column_slice(&row.y) - DVector::from_column_slice(&row.r_y);
        let u = DVector::from_column_slice(&row.u);
        let eu = &u - DVector::from_column_slice(&row.r_u);
        j += ey.dot(&(q * &ey)) + eu.dot(&(r * &eu));
        j_u += u.norm_squared();
    }
    (j, j_u)
}

/// Everything fixed before the loop starts: plant, controller, monitor.
pub struct Prepared {
    pub sys: LinearSystem,
    pub controller: Controller,
    pub monitor: StabilityMonitor,
    pub data: DataSets,
}

/// Phase 1: excitation, data matrices, predictor and checks.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let report = check_config(cfg, seed)?;
    if let Some(bad) = report.first_failure() {
        return Err(DpcError::CheckFailed(format!(
            "{}: {} < {}",
            bad.name, bad.value, bad.bound
        )));
    }
    let sys = cfg.model.system(cfg.noise_variance)?;
    let ctrl_cfg = cfg.controller_config()?;
    let data = collect_data(cfg, seed)?;
    let (t, n) = (ctrl_cfg.t_ini, ctrl_cfg.horizon);
    let h_bar = data.predictor.as_ref().map(|d| build_hankel(d, t, n)).transpose()?;
    let h = data.hankel.as_ref().map(|d| build_hankel(d, t, n)).transpose()?;
    let arx_data = data
        .predictor
        .as_ref()
        .or(data.hankel.as_ref())
        .expect("every controller records data");
    let arx = fit_arx(arx_data, t)?;
    let monitor = StabilityMonitor::new(arx, &ctrl_cfg, cfg.epsilon_rho, cfg.terminal_tol);
    let controller = Controller::new(cfg.controller, ctrl_cfg, h_bar.as_ref(), h.as_ref())?;
    Ok(Prepared {
        sys,
        controller,
        monitor,
        data,
    })
}

/// The pre-`T_ini` actuation, identical for every controller at one seed.
pub fn warmup_inputs(cfg: &RunConfig, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = stream(seed, Stream::Warmup);
    generate_uniform(cfg.control.t_ini, cfg.warmup_amplitude, cfg.control.r.len(), &mut rng)
}

/// Excitation, warmup and closed loop for `k = T_ini..=t_max`.
pub fn run_closed_loop(cfg: &RunConfig, seed: u64) -> Result<RunRecord> {
    let prepared = prepare(cfg, seed)?;
    run_prepared(cfg, seed, &prepared)
}

pub fn run_prepared(cfg: &RunConfig, seed: u64, prepared: &Prepared) -> Result<RunRecord> {
    let Prepared {
        sys,
        controller,
        monitor,
        ..
    } = prepared;
    let ctrl_cfg = controller.config();
    let (n_u, n_y, t_ini) = (sys.n_u(), sys.n_y(), ctrl_cfg.t_ini);
    let schedule = cfg.schedule();
    let x0 = cfg
        .initial_state
        .as_ref()
        .map_or_else(|| DVector::zeros(sys.n()), |x| DVector::from_column_slice(x));

    let mut warm_rng = stream(seed, Stream::Warmup);
    let u_warm = generate_uniform(t_ini, cfg.warmup_amplitude, n_u, &mut warm_rng);
    let warm = sys.simulate_sequence(&x0, &u_warm, &mut warm_rng, seed)?;
    let mut x = x0;
    for u in &u_warm {
        x = sys.propagate(&x, u)?;
    }
    let mut rng = stream(seed, Stream::ClosedLoop);
    let mut us: Vec<DVector<f64>> = u_warm.clone();
    let mut ys: Vec<DVector<f64>> = warm.outputs.clone();
    let y_now = sys.measure(&x, &mut rng)?;
    ys.push(y_now.clone());
    let mut state = controller.init(&warm, &y_now)?;

    let mut rows = Vec::with_capacity(cfg.t_max + 1 - t_ini);
    let mut evals: Vec<(StepEvaluation, Reference)> = Vec::with_capacity(rows.capacity());
    for k in t_ini..=cfg.t_max {
        let Reference { r_y, r_u } = reference_at(&schedule, k, n_y, n_u);
        let diag = controller.step(&mut state, &r_y, &r_u).map_err(|e| match e {
            DpcError::Infeasible(msg) => DpcError::Infeasible(format!("k={k}: {msg}")),
            other => other,
        })?;
        let eval = monitor.evaluate(k, &ys, &us, &diag, &r_y, &r_u)?;
        let u = diag.applied.clone();
        rows.push(StepRow {
            k,
            u: u.iter().copied().collect(),
            y: ys[k].iter().copied().collect(),
            r_y: r_y.iter().copied().collect(),
            r_u: r_u.iter().copied().collect(),
            stage_cost: monitor.stage(&ys[k], &u, &r_y, &r_u),
            cost: diag.cost,
            u_g: diag.u_g.rows(0, n_u).iter().copied().collect(),
            u_g_norm: diag.u_g.norm(),
            g_norm: diag.g.norm(),
            sigma_norm: diag.sigma.norm(),
            iterations: diag.iterations,
            status: diag.status.map_or("closed_form", |s| s.as_str()).to_string(),
            kkt: diag.kkt_max,
            solve_ms: diag.solve_time.as_secs_f64() * 1e3,
            terminal_lhs: eval.terminal.lhs,
            terminal_rhs: eval.terminal.rhs,
            terminal_ok: eval.terminal.holds,
            dissipation_gap: None,
        });
        evals.push((eval, Reference { r_y, r_u }));
        x = sys.propagate(&x, &u)?;
        let y = sys.measure(&x, &mut rng)?;
        advance_windows(&mut state, &u, &y);
        us.push(u);
        ys.push(y);
    }
    for i in 0..evals.len().saturating_sub(1) {
        let (cur, r0) = &evals[i];
        let (next, r1) = &evals[i + 1];
        if r0 == r1 {
            rows[i].dissipation_gap = Some(dissipation_gap(cur, next));
        }
    }
    let summary = summarize(cfg, seed, controller, &rows)?;
    Ok(RunRecord {
        n_u,
        n_y,
        rows,
        summary,
        t_ini,
        horizon: ctrl_cfg.horizon,
    })
}

fn summarize(cfg: &RunConfig, seed: u64, controller: &Controller, rows: &[StepRow]) -> Result<RunSummary> {
    let c = controller.config();
    let (j, j_u) = compute_metrics(rows, &c.q, &c.r);
    let solve: Vec<f64> = rows.iter().map(|r| r.solve_ms).collect();
    let mean_solve_ms = solve.iter().sum::<f64>() / solve.len().max(1) as f64;
    let max_solve_ms = solve.iter().copied().fold(0.0, f64::max);
    let tail = (rows.len() / 10).max(1);
    let final_error = rows[rows.len() - tail..]
        .iter()
        .map(|r| {
            let e = DVector::from_column_slice(&r.y) - DVector::from_column_slice(&r.r_y);
            e.norm()
        })
        .fold(0.0, f64::max);
    let settle = c.t_ini + 2 * c.horizon;
    Ok(RunSummary {
        controller: controller.kind(),
        seed,
        j,
        j_u,
        mean_solve_ms,
        max_solve_ms,
        converged: final_error <= cfg.convergence_tol,
        final_error,
        final_u_g_norm: rows.last().map_or(0.0, |r| r.u_g_norm),
        terminal_violations: rows.iter().filter(|r| r.k > settle && !r.terminal_ok).count(),
        max_dissipation_gap: rows
            .iter()
            .filter_map(|r| r.dissipation_gap)
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

fn push_vec(out: &mut Vec<String>, v: &[f64]) {
    out.extend(v.iter().map(|x| fmt_f64(*x)));
}

impl RunRecord {
    pub fn header(n_u: usize, n_y: usize) -> Vec<String> {
        let mut h = vec!["k".to_string()];
        h.extend((1..=n_u).map(|i| format!("u{i}")));
        h.extend((1..=n_y).map(|i| format!("y{i}")));
        h.extend((1..=n_y).map(|i| format!("r_y{i}")));
        h.extend((1..=n_u).map(|i| format!("r_u{i}")));
        h.extend(["stage_cost", "cost"].map(String::from));
        h.extend((1..=n_u).map(|i| format!("u_g{i}")));
        h.extend(
            [
                "u_g_norm",
                "g_norm",
                "sigma_norm",
                "iterations",
                "status",
                "kkt",
                "solve_ms",
                "terminal_lhs",
                "terminal_rhs",
                "terminal_ok",
                "dissipation_gap",
            ]
            .map(String::from),
        );
        h
    }

    /// Per-step rows; floats round-trip exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::header(self.n_u, self.n_y))?;
        for r in &self.rows {
            let mut rec = vec![r.k.to_string()];
            push_vec(&mut rec, &r.u);
            push_vec(&mut rec, &r.y);
            push_vec(&mut rec, &r.r_y);
            push_vec(&mut rec, &r.r_u);
            push_vec(&mut rec, &[r.stage_cost, r.cost]);
            push_vec(&mut rec, &r.u_g);
            push_vec(&mut rec, &[r.u_g_norm, r.g_norm, r.sigma_norm]);
            rec.push(r.iterations.to_string());
            rec.push(r.status.clone());
            push_vec(&mut rec, &[r.kkt, r.solve_ms, r.terminal_lhs, r.terminal_rhs]);
            rec.push(r.terminal_ok.to_string());
            rec.push(r.dissipation_gap.map_or(String::new(), fmt_f64));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows written by [`RunRecord::write_csv`]; dimensions come from the
    /// header.
    pub fn read_rows<R: std::io::Read>(reader: R) -> Result<(usize, usize, Vec<StepRow>)> {
        let mut rd = csv::Reader::from_reader(reader);
        let header = rd.headers()?.clone();
        let count = |p: &str| {
            header
                .iter()
                .filter(|h| h.strip_prefix(p).is_some_and(|s| s.parse::<usize>().is_ok()))
                .count()
        };
        let (n_u, n_y) = (count("u"), count("y"));
        let expected = Self::header(n_u, n_y);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(DpcError::InvalidArgument(format!(
                "not a run record header: {header:?}"
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| DpcError::InvalidArgument(format!("bad number {s:?}: {e}")))
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            if f.len() != header.len() {
                return Err(DpcError::InvalidArgument("ragged run record row".into()));
            }
            let k = f[0]
                .parse::<usize>()
                .map_err(|e| DpcError::InvalidArgument(format!("bad k: {e}")))?;
            let mut i = 1;
            let mut take = |n: usize| -> Result<Vec<f64>> {
                let v = f[i..i + n].iter().map(|s| num(s)).collect::<Result<Vec<_>>>();
                i += n;
                v
            };
            let u = take(n_u)?;
            let y = take(n_y)?;
            let r_y = take(n_y)?;
            let r_u = take(n_u)?;
            let costs = take(2)?;
            let u_g = take(n_u)?;
            let norms = take(3)?;
            let idx = 1 + 3 * n_u + 2 * n_y + 5;
            let iterations = f[idx]
                .parse::<usize>()
                .map_err(|e| DpcError::InvalidArgument(format!("bad iterations: {e}")))?;
            let status = f[idx + 1].to_string();
            let kkt = num(f[idx + 2])?;
            let solve_ms = num(f[idx + 3])?;
            let terminal_lhs = num(f[idx + 4])?;
            let terminal_rhs = num(f[idx + 5])?;
            let terminal_ok = f[idx + 6] == "true";
            let dissipation_gap = match f[idx + 7] {
                "" => None,
                s => Some(num(s)?),
            };
            rows.push(StepRow {
                k,
                u,
                y,
                r_y,
                r_u,
                stage_cost: costs[0],
                cost: costs[1],
                u_g,
                u_g_norm: norms[0],
                g_norm: norms[1],
                sigma_norm: norms[2],
                iterations,
                status,
                kkt,
                solve_ms,
                terminal_lhs,
                terminal_rhs,
                terminal_ok,
                dissipation_gap,
            });
        }
        Ok((n_u, n_y, rows))
    }
}

impl RunSummary {
    pub const HEADER: [&'static str; 11] = [
        "controller",
        "seed",
        "J",
        "J_u",
        "mean_solve_ms",
        "max_solve_ms",
        "converged",
        "final_error",
        "final_u_g_norm",
        "terminal_violations",
        "max_dissipation_gap",
    ];

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::HEADER)?;
        w.write_record([
            self.controller.name().to_string(),
            self.seed.to_string(),
            fmt_f64(self.j),
            fmt_f64(self.j_u),
            fmt_f64(self.mean_solve_ms),
            fmt_f64(self.max_solve_ms),
            self.converged.to_string(),
            fmt_f64(self.final_error),
            fmt_f64(self.final_u_g_norm),
            self.terminal_violations.to_string(),
            fmt_f64(self.max_dissipation_gap),
        ])?;
        w.flush()?;
        Ok(())
    }
}
