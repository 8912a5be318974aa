use std::time::Duration;

use nalgebra::{dmatrix, dvector, DVector};

use super::*;
use crate::controllers::{ControllerKind, StepDiagnostics, TailRule};
use crate::hankel::RegularizerMode;
use crate::linalg::DenseMatrix;
use crate::predictor::ArxModel;

fn row(k: usize, u: &[f64], y: &[f64], r_y: &[f64]) -> StepRow {
    StepRow {
        k,
        u: u.to_vec(),
        y: y.to_vec(),
        r_y: r_y.to_vec(),
        r_u: vec![0.0; u.len()],
        stage_cost: 0.0,
        cost: 0.0,
        u_g: vec![0.0; u.len()],
        u_g_norm: 0.0,
        g_norm: 0.0,
        sigma_norm: 0.0,
        iterations: 0,
        status: "closed_form".into(),
        kkt: 0.0,
        solve_ms: 0.0,
        terminal_lhs: 0.0,
        terminal_rhs: 0.0,
        terminal_ok: true,
        dissipation_gap: None,
    }
}

#[test]
fn metrics_hand_examples() {
    let q = DenseMatrix::identity(2, 2) * 10.0;
    let r = DenseMatrix::identity(2, 2) * 0.01;
    let on_ref: Vec<StepRow> = (0..5).map(|k| row(k, &[0.0, 0.0], &[1.0, 2.0], &[1.0, 2.0])).collect();
    assert_eq!(compute_metrics(&on_ref, &q, &r), (0.0, 0.0));

    let one = vec![row(0, &[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0])];
    assert_eq!(compute_metrics(&one, &q, &r).0, 10.0);

    let unit: Vec<StepRow> = (0..10).map(|k| row(k, &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0])).collect();
    let (j, j_u) = compute_metrics(&unit, &q, &r);
    assert_eq!(j_u, 20.0);
    assert!((j - 0.2).abs() < 1e-15);
}

#[test]
fn quantile_interpolates() {
    assert!(quantile(&[], 0.5).is_nan());
    assert_eq!(quantile(&[3.0], 0.9), 3.0);
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(quantile(&v, 0.5), 2.5);
    assert_eq!(quantile(&v, 0.25), 1.75);
    assert_eq!(quantile(&v, 0.0), 1.0);
    assert_eq!(quantile(&v, 1.0), 4.0);
}

fn scalar_monitor() -> StabilityMonitor {
    StabilityMonitor {
        arx: ArxModel {
            a: vec![dmatrix![0.5]],
            b: vec![dmatrix![1.0]],
        },
        q: dmatrix![1.0],
        r: dmatrix![0.0],
        t_ini: 1,
        horizon: 2,
        tail_rule: TailRule::RepeatLast,
        epsilon_rho: 0.01,
        terminal_tol: 0.0,
    }
}

fn diag(u_star: DVector<f64>, y_star: DVector<f64>, cost: f64) -> StepDiagnostics {
    StepDiagnostics {
        applied: u_star.rows(0, 1).into_owned(),
        u_bar: u_star.clone(),
        y_bar: y_star.clone(),
        u_g: DVector::zeros(u_star.len()),
        g: DVector::zeros(0),
        sigma: DVector::zeros(0),
        u_star,
        y_star,
        cost,
        status: None,
        iterations: 0,
        kkt_max: 0.0,
        solve_time: Duration::ZERO,
    }
}

#[test]
fn monitor_at_rest_is_tight() {
    let m = scalar_monitor();
    let z = dvector![0.0];
    let ys = vec![z.clone(), z.clone(), z.clone()];
    let us = vec![z.clone(), z.clone()];
    let d = diag(dvector![0.0, 0.0], dvector![0.0, 0.0], 0.0);
    let e1 = m.evaluate(1, &ys, &us, &d, &z, &z).unwrap();
    let e2 = m.evaluate(2, &ys, &us, &d, &z, &z).unwrap();
    assert!(e1.terminal.holds);
    assert_eq!(e1.terminal.margin(), 0.0);
    assert_eq!(e1.storage, 0.0);
    assert_eq!(e1.supply, 0.0);
    assert_eq!(dissipation_gap(&e1, &e2), 0.0);
}

#[test]
fn monitor_flags_synthetic_violation() {
    let m = scalar_monitor();
    let z = dvector![0.0];
    let ys = vec![dvector![1.0], dvector![0.5]];
    let us = vec![z.clone()];
    let d = diag(dvector![1.0, 1.0], dvector![1.0, 1.5], 2.0);
    let e = m.evaluate(1, &ys, &us, &d, &z, &z).unwrap();
    // ȳ = 0.5 · 1.5 + 1 · 1
    assert!((e.terminal.lhs - 1.75f64.powi(2)).abs() < 1e-15);
    assert!((e.terminal.rhs - 0.01).abs() < 1e-15);
    assert!(!e.terminal.holds);
    assert!(e.terminal.margin() < 0.0);
    assert!((e.supply - (1.75f64.powi(2) - 1.0)).abs() < 1e-15);
    // V = J* + ‖y(k)‖² + l(y(k−1), u(k−1))
    assert!((e.storage - (2.0 + 0.25 + 1.0)).abs() < 1e-15);

    let tolerant = StabilityMonitor {
        terminal_tol: 10.0,
        ..m
    };
    assert!(tolerant.evaluate(1, &ys, &us, &d, &z, &z).unwrap().terminal.holds);
}

#[test]
fn reference_tail_rule_uses_r_u() {
    let m = StabilityMonitor {
        tail_rule: TailRule::Reference,
        ..scalar_monitor()
    };
    assert_eq!(m.tail_input(&dvector![1.0, 2.0], &dvector![7.0]), dvector![7.0]);
    assert_eq!(
        scalar_monitor().tail_input(&dvector![1.0, 2.0], &dvector![7.0]),
        dvector![2.0]
    );
}

#[test]
fn steady_state_input_holds_output() {
    let sys = RunConfig::default().model.system(0.0).unwrap();
    let r_y = dvector![10.0, 6.0];
    let u = steady_state_input(&sys, &r_y).unwrap();
    let n = sys.n();
    let x = (DenseMatrix::identity(n, n) - &sys.a)
        .lu()
        .solve(&(&sys.b * &u))
        .unwrap();
    assert!((&sys.c * &x - &r_y).amax() < 1e-9);
    assert!(steady_state_input(&sys, &dvector![1.0]).is_err());
}

#[test]
fn default_schedule_and_lookup() {
    let cfg = RunConfig::default();
    let s = cfg.schedule();
    assert_eq!(s.len(), 3);
    assert_eq!(s[1].k_start, 20);
    assert_eq!(s[1].r_y, vec![10.0, 6.0]);
    assert_eq!(s[2].k_start, 150);
    let at = |k| reference_at(&s, k, 2, 2).r_y;
    assert_eq!(at(19), dvector![0.0, 0.0]);
    assert_eq!(at(20), dvector![10.0, 6.0]);
    assert_eq!(at(149), dvector![10.0, 6.0]);
    assert_eq!(at(150), dvector![0.0, 0.0]);
    assert_eq!(reference_at(&s, 20, 2, 2).r_u, dvector![0.0, 0.0]);

    let short = RunConfig {
        t_max: 30,
        ..RunConfig::default()
    };
    assert_eq!(short.schedule().len(), 2);
    short.validate().unwrap();
}

#[test]
fn config_json_round_trip() {
    let mut cfg = RunConfig {
        noise_variance: 0.05,
        controller: ControllerKind::Deepc,
        ..RunConfig::default()
    };
    cfg.control.regularizer = Some(RegularizerMode::Identity);
    let back = RunConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    let partial = RunConfig::from_json(r#"{"controller": "spc", "t_max": 50}"#).unwrap();
    assert_eq!(partial.controller, ControllerKind::Spc);
    assert_eq!(partial.control, ControlSpec::default());
}

#[test]
fn config_errors_name_the_field() {
    let err = |json: &str| {
        RunConfig::from_json(json)
            .and_then(|c| c.validate())
            .unwrap_err()
            .to_string()
    };
    assert!(err(r#"{"t_maxx": 3}"#).contains("t_maxx"));
    assert!(err(r#"{"control": {"lambda_g": "big"}}"#).starts_with("config: control.lambda_g"));
    assert!(err(r#"{"t_max": 10}"#).contains("t_max"));
    assert!(err(r#"{"epsilon_rho": 1.5}"#).contains("epsilon_rho"));
    assert!(err(r#"{"noise_variance": -1}"#).contains("noise_variance"));
    assert!(err(r#"{"model": "cessna"}"#).contains("model"));
    assert!(err(r#"{"initial_state": [1.0]}"#).contains("initial_state"));
    assert!(err(r#"{"control": {"horizon": 0}}"#).contains("control"));
    assert!(err(r#"{"reference": [{"k_start": 0, "r_y": [1]}]}"#).contains("reference[0].r_y"));
    assert!(
        err(r#"{"reference": [{"k_start": 5, "r_y": [1, 1]}, {"k_start": 5, "r_y": [0, 0]}]}"#)
            .contains("reference[1].k_start")
    );
}

#[test]
fn default_regularizer_per_controller() {
    assert_eq!(default_regularizer(ControllerKind::GdpcSpc), RegularizerMode::Identity);
    assert_eq!(
        default_regularizer(ControllerKind::GdpcShift),
        RegularizerMode::Projector
    );
    assert_eq!(default_regularizer(ControllerKind::Deepc), RegularizerMode::Projector);
}

#[test]
fn merge_patch_follows_rfc7386() {
    let mut v = serde_json::json!({"a": 1, "b": {"c": 2, "d": 3}, "e": [1, 2]});
    merge_patch(
        &mut v,
        &serde_json::json!({"a": null, "b": {"c": 5}, "e": [9], "f": {"g": 1}}),
    );
    assert_eq!(v, serde_json::json!({"b": {"c": 5, "d": 3}, "e": [9], "f": {"g": 1}}));
}

#[test]
fn sweep_resolves_arms() {
    let sweep = SweepConfig::from_json(
        r#"{"base": {"noise_variance": 0.05, "t_max": 60},
            "arms": [{"name": "spc", "overrides": {"controller": "spc"}},
                     {"name": "short", "overrides": {"control": {"horizon": 10}}}],
            "seeds": [1, 2]}"#,
    )
    .unwrap();
    let arms = sweep.resolve().unwrap();
    assert_eq!(arms.len(), 2);
    assert_eq!(arms[0].1.controller, ControllerKind::Spc);
    assert_eq!(arms[0].1.noise_variance, 0.05);
    assert_eq!(arms[1].1.control.horizon, 10);
    assert_eq!(arms[1].1.control.t_ini, 20);
    assert_eq!(sweep.seeds, Some(vec![1, 2]));

    let bad = SweepConfig::from_json(r#"{"arms": [{"name": "x", "overrides": {"bogus": 1}}]}"#).unwrap();
    assert!(bad.resolve().unwrap_err().to_string().contains("\"x\""));
    assert!(SweepConfig::from_json(r#"{"arms": []}"#).unwrap().resolve().is_err());
}

fn short_run(kind: ControllerKind) -> RunConfig {
    RunConfig {
        controller: kind,
        t_max: 60,
        ..RunConfig::default()
    }
}

#[test]
fn check_report_bounds() {
    let cfg = short_run(ControllerKind::GdpcShift);
    let report = check_config(&cfg, 1).unwrap();
    let pe = report.get("hankel.pe_length").unwrap();
    assert_eq!((pe.value, pe.bound, pe.passed), (150, 131, true));
    let reg = report.get("hankel.regularizer_length").unwrap();
    assert_eq!((reg.bound, reg.passed), (120, true));
    assert!(report.get("hankel.input_rank").unwrap().passed);
    assert!(report.get("hankel.trajectory_rank").unwrap().passed);
    assert!(report.get("predictor.pe_length").unwrap().passed);
    assert!(report.passed());

    let low = cfg.clone().with_hankel_cols(130);
    let r = check_config(&low, 1).unwrap();
    assert_eq!(r.first_failure().unwrap().name, "hankel.pe_length");
    let err = run_closed_loop(&low, 1).unwrap_err().to_string();
    assert!(err.contains("hankel.pe_length"), "{err}");

    let mut tight = cfg;
    tight.control.t_ini = 5;
    tight.control.horizon = 5;
    let tight = tight.with_hankel_cols(119);
    let r = check_config(&tight, 1).unwrap();
    let reg = r.get("hankel.regularizer_length").unwrap();
    assert_eq!((reg.value, reg.bound, reg.passed), (119, 30, true));

    let spc = check_config(&short_run(ControllerKind::Spc), 1).unwrap();
    assert!(spc.get("hankel.pe_length").is_none());
    assert!(spc.get("predictor.pe_length").is_some());
}

#[test]
fn regularizer_gate_rejects_short_data() {
    let mut cfg = short_run(ControllerKind::Deepc);
    cfg.control.t_ini = 5;
    cfg.control.horizon = 30;
    // (n_u + n_y) T_ini + n_y N = 80
    let cfg = cfg.with_hankel_cols(79);
    let r = check_config(&cfg, 1).unwrap();
    let reg = r.get("hankel.regularizer_length").unwrap();
    assert_eq!(reg.bound, 80);
    assert!(!reg.passed);
}

#[test]
fn run_is_deterministic_and_round_trips() {
    let cfg = short_run(ControllerKind::GdpcShift);
    let a = run_closed_loop(&cfg, 7).unwrap();
    let b = run_closed_loop(&cfg, 7).unwrap();
    assert_eq!(a.rows.len(), cfg.t_max - cfg.control.t_ini + 1);
    let strip = |rows: &[StepRow]| -> Vec<StepRow> {
        rows.iter()
            .map(|r| StepRow {
                solve_ms: 0.0,
                ..r.clone()
            })
            .collect()
    };
    assert_eq!(strip(&a.rows), strip(&b.rows));

    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let (n_u, n_y, rows) = RunRecord::read_rows(buf.as_slice()).unwrap();
    assert_eq!((n_u, n_y), (2, 2));
    assert_eq!(rows, a.rows);
    let c = cfg.controller_config().unwrap();
    let (j, j_u) = compute_metrics(&rows, &c.q, &c.r);
    assert!((j - a.summary.j).abs() <= 1e-12 * a.summary.j.max(1.0));
    assert!((j_u - a.summary.j_u).abs() <= 1e-12 * a.summary.j_u.max(1.0));

    let mut s = Vec::new();
    a.summary.write_csv(&mut s).unwrap();
    let text = String::from_utf8(s).unwrap();
    assert!(text.starts_with(&RunSummary::HEADER.join(",")));

    assert!(RunRecord::read_rows("a,b\n1,2\n".as_bytes()).is_err());
}

#[test]
fn warmup_is_shared_across_controllers() {
    let base = short_run(ControllerKind::GdpcShift);
    let w = warmup_inputs(&base, 3);
    assert_eq!(w.len(), 20);
    let first: Vec<Vec<f64>> = ControllerKind::ALL
        .iter()
        .map(|&kind| {
            let rec = run_closed_loop(
                &RunConfig {
                    t_max: 25,
                    ..short_run(kind)
                },
                3,
            )
            .unwrap();
            rec.rows[0].y.clone()
        })
        .collect();
    for y in &first[1..] {
        assert_eq!(y, &first[0]);
    }
    assert_eq!(w, warmup_inputs(&short_run(ControllerKind::Spc), 3));
}

#[test]
fn zero_reference_at_rest_stays_at_rest() {
    let cfg = RunConfig {
        t_max: 40,
        warmup_amplitude: 0.0,
        reference: vec![ReferenceStep {
            k_start: 0,
            r_y: vec![0.0, 0.0],
            r_u: None,
        }],
        ..RunConfig::default()
    };
    let rec = run_closed_loop(&cfg, 1).unwrap();
    for r in &rec.rows {
        assert!(r.y.iter().chain(&r.u).all(|v| v.abs() < 1e-12));
        assert!(r.terminal_ok);
        assert!(r.dissipation_gap.is_none_or(|g| g.abs() < 1e-12));
    }
    assert_eq!(rec.summary.terminal_violations, 0);
}

#[test]
fn figure_panels_shape() {
    let rows = vec![row(20, &[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0])];
    let panels = figure_panels(2, 2, &rows);
    let names: Vec<&str> = panels.iter().map(|p| p.name).collect();
    assert_eq!(names, ["outputs", "inputs", "u_g"]);
    assert_eq!(panels[0].columns, ["k", "y1", "y2", "r_y1", "r_y2"]);
    assert_eq!(panels[0].rows[0], vec![20.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(panels[2].columns.last().unwrap(), "u_g_norm");
    let mut buf = Vec::new();
    panels[1].write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "k,u1,u2\n20,1.0,2.0\n");
}

#[test]
fn compare_single_cell_and_failures() {
    let cfg = RunConfig {
        t_max: 30,
        ..RunConfig::default()
    };
    let one = compare_runs(&[("a".into(), cfg.clone())], &[1]);
    assert_eq!(one.rows.len(), 1);
    assert!(one.rows[0].ok);
    assert_eq!(one.aggregate("a").unwrap().median_j, one.rows[0].j);
    assert_eq!(one.aggregate("a").unwrap().iqr_j, 0.0);

    let broken = cfg.clone().with_hankel_cols(100);
    let table = compare_runs(
        &[("a".into(), cfg.clone()), ("b".into(), cfg), ("bad".into(), broken)],
        &[2, 1],
    );
    assert_eq!(table.rows.len(), 6);
    assert_eq!(table.rows[0].seed, 1);
    let j = |name: &str, seed: u64| {
        table
            .rows
            .iter()
            .find(|r| r.config == name && r.seed == seed)
            .unwrap()
            .j
    };
    assert_eq!(j("a", 1), j("b", 1));
    assert_eq!(j("a", 2), j("b", 2));
    let bad = table.aggregate("bad").unwrap();
    assert_eq!((bad.runs, bad.failed), (0, 2));
    assert!(bad.median_j.is_nan());
    let failed = table.rows.iter().find(|r| r.config == "bad").unwrap();
    assert!(failed.error.as_ref().unwrap().contains("hankel.pe_length"));

    let mut buf = Vec::new();
    table.write_runs_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
}
