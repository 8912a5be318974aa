use nalgebra::DVector;

use super::*;
use crate::hankel::build_hankel;
use crate::sim::{boeing747_benchmark, generate_prbs, generate_uniform, rng_from_seed, LinearSystem};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn boeing_config(slack: SlackMode) -> ControllerConfig {
    ControllerConfig {
        t_ini: 20,
        horizon: 20,
        q: DenseMatrix::identity(2, 2) * 10.0,
        r: DenseMatrix::identity(2, 2) * 0.01,
        alpha: 1.0,
        lambda_g: 1e5,
        lambda_sigma: 1e7,
        bounds: Boxes {
            u_min: vec![-20.0, -20.0],
            u_max: vec![20.0, 20.0],
            y_min: vec![-25.0, -15.0],
            y_max: vec![25.0, 15.0],
        },
        regularizer: RegularizerMode::Projector,
        tail_rule: TailRule::RepeatLast,
        slack,
        soft_output_penalty: None,
        qp: QpSettings::default(),
    }
}

fn excite(sys: &LinearSystem, len: usize, seed: u64) -> ExperimentData {
    let mut rng = rng_from_seed(seed);
    let u = generate_prbs(len, 3.0, sys.n_u(), &mut rng).unwrap();
    sys.simulate_sequence(&DVector::zeros(sys.n()), &u, &mut rng, seed)
        .unwrap()
}

struct Loop {
    sys: LinearSystem,
    x: DVector<f64>,
    state: ControllerState,
    rng: crate::sim::SimRng,
}

impl Loop {
    fn start(sys: LinearSystem, ctrl: &Controller, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let t = ctrl.config().t_ini;
        let u = generate_uniform(t, 0.1, 2, &mut rng);
        let warm = sys
            .simulate_sequence(&DVector::zeros(sys.n()), &u, &mut rng, seed)
            .unwrap();
        let mut x = DVector::zeros(sys.n());
        for uk in &u {
            x = sys.propagate(&x, uk).unwrap();
        }
        let y = sys.measure(&x, &mut rng).unwrap();
        let state = ctrl.init(&warm, &y).unwrap();
        Self { sys, x, state, rng }
    }

    fn step(&mut self, ctrl: &Controller, r_y: &DVector<f64>) -> StepDiagnostics {
        let d = ctrl.step(&mut self.state, r_y, &v(&[0.0, 0.0])).unwrap();
        self.x = self.sys.propagate(&self.x, &d.applied).unwrap();
        let y = self.sys.measure(&self.x, &mut self.rng).unwrap();
        advance_windows(&mut self.state, &d.applied, &y);
        d
    }

    fn y(&self) -> DVector<f64> {
        self.state.y_ini.back().unwrap().clone()
    }
}

fn noise_free(kind: ControllerKind, cols: usize) -> Controller {
    let sys = boeing747_benchmark();
    let cfg = boeing_config(SlackMode::Pinned);
    let h_bar = build_hankel(&excite(&sys, 1040, 1), 20, 20).unwrap();
    let h = build_hankel(&excite(&sys, cols + 40, 2), 20, 20).unwrap();
    Controller::new(kind, cfg, Some(&h_bar), Some(&h)).unwrap()
}

#[test]
fn shift_repeat_last() {
    let s = shift_sequence(&v(&[1.0, 2.0, 3.0]), 1, TailRule::RepeatLast, &v(&[9.0])).unwrap();
    assert_eq!(s, v(&[2.0, 3.0, 3.0]));
}

#[test]
fn shift_reference_tail() {
    let s = shift_sequence(&v(&[1.0, 2.0, 3.0]), 1, TailRule::Reference, &v(&[9.0])).unwrap();
    assert_eq!(s, v(&[2.0, 3.0, 9.0]));
}

#[test]
fn shift_single_block() {
    let s = shift_sequence(&v(&[4.0]), 1, TailRule::RepeatLast, &v(&[0.0])).unwrap();
    assert_eq!(s, v(&[4.0]));
    assert!(shift_sequence(&v(&[1.0, 2.0, 3.0]), 2, TailRule::RepeatLast, &v(&[0.0, 0.0])).is_err());
}

#[test]
fn windows_advance_in_lockstep() {
    let mut st = ControllerState {
        u_ini: [v(&[0.0]), v(&[1.0])].into_iter().collect(),
        y_ini: [v(&[10.0]), v(&[11.0])].into_iter().collect(),
        u_bar: v(&[0.0]),
        last: None,
    };
    advance_windows(&mut st, &v(&[2.0]), &v(&[12.0]));
    assert_eq!(st.u_ini_vec(), v(&[1.0, 2.0]));
    assert_eq!(st.y_ini_vec(), v(&[11.0, 12.0]));
}

#[test]
fn windows_track_history() {
    let mut cfg = boeing_config(SlackMode::Penalized);
    cfg.t_ini = 3;
    cfg.horizon = 3;
    let mk = |k: usize| v(&[k as f64, -(k as f64)]);
    let warm = ExperimentData::new((0..3).map(mk).collect(), (0..3).map(|k| mk(100 + k)).collect(), 0, 0.0).unwrap();
    let mut st = init_controller(&cfg, &warm, &mk(103)).unwrap();
    // exactly T_ini warmup samples: u window is the warmup input
    assert_eq!(st.u_ini_vec(), v(&[0.0, 0.0, 1.0, -1.0, 2.0, -2.0]));
    // outputs lead by one and end at the current measurement
    assert_eq!(st.y_ini.back().unwrap(), &mk(103));
    assert_eq!(st.y_ini.front().unwrap(), &mk(101));
    assert_eq!(st.u_bar, DVector::zeros(6));
    for k in 3..10 {
        advance_windows(&mut st, &mk(k), &mk(101 + k));
    }
    assert_eq!(
        st.u_ini.iter().cloned().collect::<Vec<_>>(),
        (7..10).map(mk).collect::<Vec<_>>()
    );
    assert_eq!(st.y_ini.back().unwrap(), &mk(110));
}

#[test]
fn short_warmup_rejected() {
    let cfg = boeing_config(SlackMode::Penalized);
    let warm = ExperimentData::new(vec![v(&[0.0, 0.0]); 5], vec![v(&[0.0, 0.0]); 5], 0, 0.0).unwrap();
    assert!(matches!(
        init_controller(&cfg, &warm, &v(&[0.0, 0.0])),
        Err(DpcError::DataTooShort(_))
    ));
}

#[test]
fn config_validation() {
    let mut cfg = boeing_config(SlackMode::Penalized);
    cfg.horizon = 10;
    assert!(cfg.validate().is_err());
    let mut cfg = boeing_config(SlackMode::Penalized);
    cfg.alpha = 0.5;
    assert!(cfg.validate().is_err());
    let mut cfg = boeing_config(SlackMode::Penalized);
    cfg.lambda_g = -1.0;
    assert!(cfg.validate().is_err());
    assert!(boeing_config(SlackMode::Penalized).validate().is_ok());
    assert_eq!(ControllerKind::from_name("gdpc-spc").unwrap(), ControllerKind::GdpcSpc);
    assert!(ControllerKind::from_name("mpc").is_err());
}

#[test]
fn gdpc_solutions_are_system_trajectories() {
    let ctrl = noise_free(ControllerKind::GdpcShift, 150);
    let sys = boeing747_benchmark();
    let mut lp = Loop::start(sys.clone(), &ctrl, 3);
    let r = v(&[10.0, 5.0]);
    for _ in 0..15 {
        let u_ini: Vec<_> = lp.state.u_ini.iter().cloned().collect();
        let y_ini: Vec<_> = lp.state.y_ini.iter().cloned().collect();
        let d = lp.step(&ctrl, &r);
        let mut x = sys.reconstruct_state(&u_ini, &y_ini).unwrap();
        let mut err = 0.0_f64;
        for j in 0..20 {
            x = sys.propagate(&x, &d.u_star.rows(2 * j, 2).into_owned()).unwrap();
            let y = &sys.c * &x;
            err = err.max((y - d.y_star.rows(2 * j, 2)).amax());
        }
        assert!(err <= 1e-6, "trajectory error {err}");
        assert_eq!(d.status, Some(QpStatus::Optimal));
    }
}

#[test]
fn gdpc_applied_inputs_respect_the_box() {
    let ctrl = noise_free(ControllerKind::GdpcShift, 150);
    let mut lp = Loop::start(boeing747_benchmark(), &ctrl, 4);
    // a far reference drives the inputs into saturation
    let r = v(&[24.0, 14.0]);
    let mut saturated = false;
    for _ in 0..30 {
        let d = lp.step(&ctrl, &r);
        assert!(ctrl.config().bounds.contains_input(&d.applied, 0.0));
        assert!(ctrl.config().bounds.contains_output(&d.y_star, 1e-6));
        saturated |= d.applied.amax() >= 20.0 - 1e-9;
    }
    assert!(saturated);
}

#[test]
fn gdpc_shift_converges_and_goes_quiet() {
    let ctrl = noise_free(ControllerKind::GdpcShift, 150);
    let mut lp = Loop::start(boeing747_benchmark(), &ctrl, 5);
    // with r_u = 0 only the zero reference makes the shifted tail optimal
    let mut last = None;
    for k in 0..200 {
        let r = if k < 100 { v(&[10.0, 5.0]) } else { v(&[0.0, 0.0]) };
        last = Some(lp.step(&ctrl, &r));
        if k == 99 {
            assert!((lp.y() - &r).amax() <= 1e-3, "y = {}", lp.y());
        }
    }
    assert!(lp.y().amax() <= 1e-6, "y = {}", lp.y());
    assert!(last.unwrap().u_g.norm() <= 1e-6);
}

#[test]
fn spc_base_with_heavy_regularisation_follows_the_spc_law() {
    let sys = boeing747_benchmark();
    let mut cfg = boeing_config(SlackMode::Penalized);
    cfg.regularizer = RegularizerMode::Identity;
    cfg.lambda_g = 1e8;
    cfg.bounds = Boxes::unbounded(2, 2);
    let h_bar = build_hankel(&excite(&sys, 1040, 1), 20, 20).unwrap();
    let h = build_hankel(&excite(&sys, 190, 2), 20, 20).unwrap();
    let gdpc = Controller::new(ControllerKind::GdpcSpc, cfg.clone(), Some(&h_bar), Some(&h)).unwrap();
    let spc = Controller::new(ControllerKind::Spc, cfg, Some(&h_bar), None).unwrap();
    let mut lp = Loop::start(sys, &gdpc, 6);
    let r = v(&[3.0, -2.0]);
    for _ in 0..10 {
        let mut probe = lp.state.clone();
        let s = spc.step(&mut probe, &r, &v(&[0.0, 0.0])).unwrap();
        let d = lp.step(&gdpc, &r);
        assert!((&d.applied - &s.applied).amax() <= 1e-4);
    }
}

#[test]
fn penalised_slack_prediction_matches_simulation() {
    let sys = boeing747_benchmark();
    let mut cfg = boeing_config(SlackMode::Penalized);
    cfg.bounds = Boxes::unbounded(2, 2);
    cfg.lambda_sigma = 1e10;
    let h_bar = build_hankel(&excite(&sys, 1040, 1), 20, 20).unwrap();
    let h = build_hankel(&excite(&sys, 190, 2), 20, 20).unwrap();
    let ctrl = Controller::new(ControllerKind::GdpcShift, cfg, Some(&h_bar), Some(&h)).unwrap();
    let mut lp = Loop::start(sys.clone(), &ctrl, 7);
    let r = v(&[5.0, 5.0]);
    for _ in 0..5 {
        let u_ini: Vec<_> = lp.state.u_ini.iter().cloned().collect();
        let y_ini: Vec<_> = lp.state.y_ini.iter().cloned().collect();
        let d = lp.step(&ctrl, &r);
        let mut x = sys.reconstruct_state(&u_ini, &y_ini).unwrap();
        for j in 0..20 {
            x = sys.propagate(&x, &d.u_star.rows(2 * j, 2).into_owned()).unwrap();
            assert!((&sys.c * &x - d.y_star.rows(2 * j, 2)).amax() <= 1e-6);
        }
    }
}

#[test]
fn deepc_at_rest_stays_at_rest() {
    let sys = boeing747_benchmark();
    let cfg = boeing_config(SlackMode::Penalized);
    let h = build_hankel(&excite(&sys, 190, 2), 20, 20).unwrap();
    let ctrl = Controller::new(ControllerKind::Deepc, cfg.clone(), None, Some(&h)).unwrap();
    let warm = ExperimentData::new(vec![v(&[0.0, 0.0]); 20], vec![v(&[0.0, 0.0]); 20], 0, 0.0).unwrap();
    let mut st = init_controller(&cfg, &warm, &v(&[0.0, 0.0])).unwrap();
    let d = ctrl.step(&mut st, &v(&[0.0, 0.0]), &v(&[0.0, 0.0])).unwrap();
    assert!(d.applied.amax() <= 1e-12);
}

#[test]
fn spc_is_deterministic_and_clips() {
    let sys = boeing747_benchmark();
    let cfg = boeing_config(SlackMode::Penalized);
    let h_bar = build_hankel(&excite(&sys, 1040, 1), 20, 20).unwrap();
    let ctrl = Controller::new(ControllerKind::Spc, cfg, Some(&h_bar), None).unwrap();
    let lp = Loop::start(sys, &ctrl, 8);
    let mut a = lp.state.clone();
    let mut b = lp.state.clone();
    let far = v(&[200.0, -150.0]);
    let da = ctrl.step(&mut a, &far, &v(&[0.0, 0.0])).unwrap();
    let db = ctrl.step(&mut b, &far, &v(&[0.0, 0.0])).unwrap();
    assert_eq!(da.applied, db.applied);
    assert!(da.applied.amax() == 20.0);
}

#[test]
fn missing_data_sets_are_reported() {
    let cfg = boeing_config(SlackMode::Penalized);
    assert!(Controller::new(ControllerKind::GdpcShift, cfg.clone(), None, None).is_err());
    assert!(Controller::new(ControllerKind::Deepc, cfg, None, None).is_err());
}
