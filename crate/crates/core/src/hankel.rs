//! Block Hankel data matrices, data-length gates, rank checks and the
//! regularisation projector.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{DpcError, Result};
use crate::linalg::{self, DenseMatrix, DEFAULT_RANK_TOL};
use crate::sim::ExperimentData;

/// The four data blocks `U_p`, `Y_p`, `U_f`, `Y_f` built from one record.
///
/// Column `j` holds the windows
/// `u(j..j+T_ini)`, `y(j+1..=j+T_ini)`, `u(j+T_ini..j+T_ini+N)` and
/// `y(j+T_ini+1..=j+T_ini+N)`; outputs lead inputs by one sample so that the
/// past-output window ends at the current measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    pub up: DenseMatrix,
    pub yp: DenseMatrix,
    pub uf: DenseMatrix,
    pub yf: DenseMatrix,
    pub t_ini: usize,
    pub horizon: usize,
    pub n_u: usize,
    pub n_y: usize,
}

impl HankelSet {
    pub fn cols(&self) -> usize {
        self.up.ncols()
    }

    /// `[U_p; Y_p; U_f]`, the regressor of the least-squares predictor.
    pub fn regressor(&self) -> DenseMatrix {
        linalg::vstack(&[&self.up, &self.yp, &self.uf])
    }

    /// `[U_p; Y_p; U_f; Y_f]`.
    pub fn stacked(&self) -> DenseMatrix {
        linalg::vstack(&[&self.up, &self.yp, &self.uf, &self.yf])
    }
}

fn fill_window(dst: &mut DenseMatrix, col: usize, samples: &[DVector<f64>]) {
    let mut r = 0;
    for s in samples {
        for v in s.iter() {
            dst[(r, col)] = *v;
            r += 1;
        }
    }
}

pub fn build_hankel(data: &ExperimentData, t_ini: usize, horizon: usize) -> Result<HankelSet> {
    if t_ini == 0 || horizon == 0 {
        return Err(DpcError::InvalidArgument("T_ini and N must be positive".into()));
    }
    let len = data.len();
    if len < t_ini + horizon + 1 {
        return Err(DpcError::DataTooShort(format!(
            "{len} samples cannot fill a Hankel matrix with T_ini={t_ini}, N={horizon} \
             (need at least {})",
            t_ini + horizon + 1
        )));
    }
    let cols = len - t_ini - horizon;
    let (n_u, n_y) = (data.n_u(), data.n_y());
    let mut up = DenseMatrix::zeros(n_u * t_ini, cols);
    let mut yp = DenseMatrix::zeros(n_y * t_ini, cols);
    let mut uf = DenseMatrix::zeros(n_u * horizon, cols);
    let mut yf = DenseMatrix::zeros(n_y * horizon, cols);
    let (u, y) = (&data.inputs, &data.outputs);
    for j in 0..cols {
        fill_window(&mut up, j, &u[j..j + t_ini]);
        fill_window(&mut yp, j, &y[j + 1..=j + t_ini]);
        fill_window(&mut uf, j, &u[j + t_ini..j + t_ini + horizon]);
        fill_window(&mut yf, j, &y[j + t_ini + 1..=j + t_ini + horizon]);
    }
    Ok(HankelSet {
        up,
        yp,
        uf,
        yf,
        t_ini,
        horizon,
        n_u,
        n_y,
    })
}

/// First `first_len` samples for the large predictor set, the rest for the
/// small Hankel set.
pub fn split_experiment(data: &ExperimentData, first_len: usize) -> Result<(ExperimentData, ExperimentData)> {
    if first_len > data.len() {
        return Err(DpcError::DataTooShort(format!(
            "cannot take {first_len} samples from a record of {}",
            data.len()
        )));
    }
    Ok((data.segment(0, first_len), data.segment(first_len, data.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthCheck {
    pub passed: bool,
    pub bound: usize,
    pub cols: usize,
}

/// Persistency-of-excitation length gate `T ≥ (n_u + 1)(T_ini + N + n) − 1`.
pub fn check_pe_length(cols: usize, n: usize, n_u: usize, t_ini: usize, horizon: usize) -> LengthCheck {
    let bound = (n_u + 1) * (t_ini + horizon + n) - 1;
    LengthCheck {
        passed: cols >= bound,
        bound,
        cols,
    }
}

/// Length gate for the projector regulariser `T ≥ T_ini (n_u + n_y) + N n_u`.
pub fn check_regularizer_length(cols: usize, t_ini: usize, n_u: usize, n_y: usize, horizon: usize) -> LengthCheck {
    let bound = t_ini * (n_u + n_y) + horizon * n_u;
    LengthCheck {
        passed: cols >= bound,
        bound,
        cols,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    pub passed: bool,
    pub rank: usize,
    pub rows: usize,
}

/// Numerical row rank of `[U_p; Y_p; U_f; Y_f]` relative to `tol · σ_max`.
pub fn check_full_row_rank(h: &HankelSet, tol: f64) -> Result<RankCheck> {
    let stacked = h.stacked();
    let rows = stacked.nrows();
    let rank = linalg::svd(&stacked)?.rank(tol);
    Ok(RankCheck {
        passed: rank == rows,
        rank,
        rows,
    })
}

/// Rank of the input rows `[U_p; U_f]`; full row rank means the input is
/// persistently exciting of order `T_ini + N`.
pub fn check_input_rank(h: &HankelSet, tol: f64) -> Result<RankCheck> {
    let stacked = linalg::vstack(&[&h.up, &h.uf]);
    let rows = stacked.nrows();
    let rank = linalg::svd(&stacked)?.rank(tol);
    Ok(RankCheck {
        passed: rank == rows,
        rank,
        rows,
    })
}

/// Rank of the stacked trajectory matrix against the bound
/// `n_u (T_ini + N) + n` attained by exact data of an order-`n` system.
/// Noise only adds rank, so the gate is `rank ≥ bound`.
pub fn check_trajectory_rank(h: &HankelSet, n: usize, tol: f64) -> Result<LengthCheck> {
    let bound = h.n_u * (h.t_ini + h.horizon) + n;
    let rank = linalg::svd(&h.stacked())?.rank(tol);
    Ok(LengthCheck {
        passed: rank >= bound,
        bound,
        cols: rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    /// `‖(I − Π) g‖²` with `Π` the projector onto the row space of `[U_p; Y_p; U_f]`.
    #[default]
    Projector,
    /// Plain `‖g‖²`.
    Identity,
}

#[derive(Debug, Clone)]
pub struct Projector {
    /// Absent in identity mode.
    pub pi: Option<DenseMatrix>,
    /// Quadratic form of the regulariser, `(I − Π)ᵀ(I − Π)` or `I`.
    pub m_reg: DenseMatrix,
    pub mode: RegularizerMode,
}

pub fn build_projector(h: &HankelSet, mode: RegularizerMode) -> Result<Projector> {
    let cols = h.cols();
    match mode {
        RegularizerMode::Identity => Ok(Projector {
            pi: None,
            m_reg: DenseMatrix::identity(cols, cols),
            mode,
        }),
        RegularizerMode::Projector => {
            let gate = check_regularizer_length(cols, h.t_ini, h.n_u, h.n_y, h.horizon);
            if !gate.passed {
                return Err(DpcError::CheckFailed(format!(
                    "projector regulariser needs T >= {} columns, have {}",
                    gate.bound, gate.cols
                )));
            }
            let dec = linalg::svd(&h.regressor())?;
            let r = dec.rank(DEFAULT_RANK_TOL);
            let vr = dec.v.columns(0, r);
            let pi = vr * vr.transpose();
            let complement = DenseMatrix::identity(cols, cols) - &pi;
            let m_reg = complement.transpose() * &complement;
            Ok(Projector {
                pi: Some(pi),
                m_reg,
                mode,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{boeing747_benchmark, generate_prbs, rng_from_seed};

    fn scalar_data(u: &[f64], y: &[f64]) -> ExperimentData {
        ExperimentData::new(
            u.iter().map(|&v| DVector::from_element(1, v)).collect(),
            y.iter().map(|&v| DVector::from_element(1, v)).collect(),
            0,
            0.0,
        )
        .unwrap()
    }

    pub(crate) fn boeing_data(len: usize, seed: u64) -> ExperimentData {
        let sys = boeing747_benchmark();
        let mut rng = rng_from_seed(seed);
        let u = generate_prbs(len, 3.0, 2, &mut rng).unwrap();
        sys.simulate_sequence(&DVector::zeros(4), &u, &mut rng, seed).unwrap()
    }

    #[test]
    fn scalar_hankel_entries() {
        let h = build_hankel(&scalar_data(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1, 1).unwrap();
        assert_eq!(h.cols(), 1);
        assert_eq!(h.up[(0, 0)], 1.0);
        assert_eq!(h.yp[(0, 0)], 20.0);
        assert_eq!(h.uf[(0, 0)], 2.0);
        assert_eq!(h.yf[(0, 0)], 30.0);
    }

    #[test]
    fn too_short_is_rejected() {
        let d = scalar_data(&[1.0, 2.0], &[1.0, 2.0]);
        assert!(matches!(build_hankel(&d, 1, 1), Err(DpcError::DataTooShort(_))));
    }

    #[test]
    fn boeing_block_shapes() {
        let h = build_hankel(&boeing_data(200, 1), 20, 20).unwrap();
        assert_eq!(h.up.nrows(), 40);
        assert_eq!(h.yf.nrows(), 40);
        assert_eq!(h.cols(), 160);
        for b in [&h.up, &h.yp, &h.uf, &h.yf] {
            assert_eq!(b.ncols(), 160);
        }
    }

    #[test]
    fn blocks_reconstruct_source_samples() {
        let data = boeing_data(90, 4);
        let (t_ini, n) = (3, 5);
        let h = build_hankel(&data, t_ini, n).unwrap();
        for j in 0..h.cols() {
            for i in 0..t_ini {
                for c in 0..2 {
                    assert_eq!(h.up[(2 * i + c, j)], data.inputs[j + i][c]);
                    assert_eq!(h.yp[(2 * i + c, j)], data.outputs[j + 1 + i][c]);
                }
            }
            for i in 0..n {
                for c in 0..2 {
                    assert_eq!(h.uf[(2 * i + c, j)], data.inputs[j + t_ini + i][c]);
                    assert_eq!(h.yf[(2 * i + c, j)], data.outputs[j + t_ini + 1 + i][c]);
                }
            }
            // shifting the record by one sample shifts the columns by one
            if j + 1 < h.cols() {
                let shifted = build_hankel(&data.segment(1, data.len()), t_ini, n).unwrap();
                assert_eq!(shifted.up.column(j), h.up.column(j + 1));
                assert_eq!(shifted.yf.column(j), h.yf.column(j + 1));
            }
        }
    }

    #[test]
    fn pe_length_gate() {
        let c = check_pe_length(150, 4, 2, 20, 20);
        assert_eq!(c.bound, 131);
        assert!(c.passed);
        assert!(check_pe_length(131, 4, 2, 20, 20).passed);
        assert!(!check_pe_length(130, 4, 2, 20, 20).passed);
    }

    #[test]
    fn regularizer_length_gate() {
        let c = check_regularizer_length(150, 20, 2, 2, 20);
        assert_eq!(c.bound, 120);
        assert!(c.passed);
        assert!(check_regularizer_length(120, 20, 2, 2, 20).passed);
        assert!(!check_regularizer_length(119, 20, 2, 2, 20).passed);
    }

    #[test]
    fn exact_data_rank_is_inputs_plus_order() {
        let sys = boeing747_benchmark();
        let mut rng = rng_from_seed(1);
        let u = generate_prbs(1040, 3.0, 2, &mut rng).unwrap();
        let d = sys
            .simulate_sequence(&nalgebra::DVector::zeros(4), &u, &mut rng, 1)
            .unwrap();
        let h = build_hankel(&d, 20, 20).unwrap();
        assert_eq!(h.cols(), 1000);
        // exact LTI data never has full row rank: rank = n_u L + n
        let full = check_full_row_rank(&h, DEFAULT_RANK_TOL).unwrap();
        assert_eq!((full.rank, full.rows, full.passed), (84, 160, false));
        let traj = check_trajectory_rank(&h, 4, DEFAULT_RANK_TOL).unwrap();
        assert_eq!((traj.cols, traj.bound), (84, 84));
        assert!(traj.passed);
        let inputs = check_input_rank(&h, DEFAULT_RANK_TOL).unwrap();
        assert!(inputs.passed);
        assert_eq!(inputs.rank, 80);

        let noisy = sys
            .with_noise_variance(0.05)
            .unwrap()
            .simulate_sequence(&nalgebra::DVector::zeros(4), &u, &mut rng, 1)
            .unwrap();
        let hn = build_hankel(&noisy, 20, 20).unwrap();
        assert!(check_full_row_rank(&hn, DEFAULT_RANK_TOL).unwrap().passed);
    }

    #[test]
    fn rank_of_degenerate_data() {
        let zeros = scalar_data(&[0.0; 10], &[0.0; 10]);
        let r = check_full_row_rank(&build_hankel(&zeros, 2, 2).unwrap(), DEFAULT_RANK_TOL).unwrap();
        assert!(!r.passed);
        assert_eq!(r.rank, 0);

        let constant = scalar_data(&[1.0; 10], &[2.0; 10]);
        let r = check_full_row_rank(&build_hankel(&constant, 2, 2).unwrap(), DEFAULT_RANK_TOL).unwrap();
        assert!(!r.passed);
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn identity_regularizer() {
        let d = scalar_data(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], &[0.0; 7]);
        let p = build_projector(&build_hankel(&d, 1, 1).unwrap(), RegularizerMode::Identity).unwrap();
        assert_eq!(p.m_reg, DenseMatrix::identity(5, 5));
        assert!(p.pi.is_none());
    }

    #[test]
    fn projector_requires_length() {
        let h = build_hankel(&boeing_data(150, 2), 20, 20).unwrap();
        assert_eq!(h.cols(), 110);
        assert!(matches!(
            build_projector(&h, RegularizerMode::Projector),
            Err(DpcError::CheckFailed(_))
        ));
    }

    #[test]
    fn projector_is_idempotent_and_kills_row_space() {
        let h = build_hankel(&boeing_data(190, 3), 20, 20).unwrap();
        let p = build_projector(&h, RegularizerMode::Projector).unwrap();
        let pi = p.pi.as_ref().unwrap();
        assert!(linalg::max_abs(&(pi * pi - pi)) <= 1e-8);
        assert!(linalg::max_abs(&(&p.m_reg - p.m_reg.transpose())) <= 1e-12);

        // M_reg annihilates the row space of the regressor
        let reg = h.regressor();
        let scale = linalg::max_abs(&reg);
        for i in [0, 17, 45, 99] {
            let v = reg.row(i).transpose();
            assert!((&p.m_reg * &v).amax() <= 1e-8 * v.amax().max(scale));
        }

        // and leaves null-space vectors untouched
        let dec = linalg::svd(&reg).unwrap();
        let r = dec.rank(DEFAULT_RANK_TOL);
        let g = dec.v.column(r).into_owned();
        let complement = DenseMatrix::identity(h.cols(), h.cols()) - pi;
        assert!((&complement * &g - &g).norm() <= 1e-8 * g.norm());
    }

    #[test]
    fn splitter_partitions_record() {
        let d = boeing_data(50, 5);
        let (a, b) = split_experiment(&d, 30).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(b.len(), 20);
        assert_eq!(b.inputs[0], d.inputs[30]);
        assert!(split_experiment(&d, 51).is_err());
    }
}
