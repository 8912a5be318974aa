//! Experiment orchestration: configuration, data collection, the closed
//! loop, metrics, stability monitoring, sweeps and CSV persistence.

mod compare;
mod config;
mod monitor;
mod plot;
mod run;

pub use compare::{compare_runs, quantile, CompareAggregate, CompareRow, CompareTable};
pub use config::{
    default_regularizer, merge_patch, reference_at, ControlSpec, ExcitationConfig, ModelSpec, Reference, ReferenceStep,
    RunConfig, SweepArm, SweepConfig,
};
pub use monitor::{dissipation_gap, StabilityMonitor, StepEvaluation, TerminalCheck};
pub use plot::{figure_panels, Panel};
pub use run::{
    check_config, collect_all, collect_data, compute_metrics, prepare, run_closed_loop, run_prepared, warmup_inputs,
    CheckItem, CheckReport, DataSets, Prepared, RunRecord, RunSummary, StepRow,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{DpcError, Result};
use crate::linalg;
use crate::sim::LinearSystem;

/// Input that holds `y = r_y` at equilibrium: the least-squares solution of
/// `[A − I, B; C, 0] [x; u] = [0; r_y]`.
pub fn steady_state_input(sys: &LinearSystem, r_y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, n_u, n_y) = (sys.n(), sys.n_u(), sys.n_y());
    if r_y.len() != n_y {
        return Err(DpcError::Dimension(format!(
            "r_y has {} entries, system has {n_y} outputs",
            r_y.len()
        )));
    }
    let mut m = DMatrix::zeros(n + n_y, n + n_u);
    m.view_mut((0, 0), (n, n))
        .copy_from(&(&sys.a - DMatrix::identity(n, n)));
    m.view_mut((0, n), (n, n_u)).copy_from(&sys.b);
    m.view_mut((n, 0), (n_y, n)).copy_from(&sys.c);
    let mut rhs = DMatrix::zeros(n + n_y, 1);
    rhs.view_mut((n, 0), (n_y, 1)).copy_from(r_y);
    let sol = linalg::least_squares(&m, &rhs)?;
    Ok(sol.view((n, 0), (n_u, 1)).column(0).into_owned())
}

#[cfg(test)]
mod tests;
