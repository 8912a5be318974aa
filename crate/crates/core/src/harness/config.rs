use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::controllers::{ControllerConfig, ControllerKind, TailRule};
use crate::error::{DpcError, Result};
use crate::hankel::RegularizerMode;
use crate::linalg::DenseMatrix;
use crate::qp::{Boxes, QpSettings, SlackMode};
use crate::sim::{boeing747_benchmark, LinearSystem};

/// Deserialize, prefixing errors with the path of the offending field.
fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            DpcError::Config(e.into_inner().to_string())
        } else {
            DpcError::Config(format!("{path}: {}", e.into_inner()))
        }
    })
}

/// Plant selection: a builtin name or explicit row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Builtin(String),
    Matrices {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Builtin("boeing747".into())
    }
}

pub(crate) fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DenseMatrix> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, |r| r.len());
    if n_rows == 0 || n_cols == 0 {
        return Err(DpcError::Config(format!("{name}: matrix must be non-empty")));
    }
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(DpcError::Config(format!("{name}: rows have different lengths")));
    }
    Ok(DenseMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn system(&self, noise_variance: f64) -> Result<LinearSystem> {
        let sys = match self {
            ModelSpec::Builtin(name) if name == "boeing747" => boeing747_benchmark(),
            ModelSpec::Builtin(name) => return Err(DpcError::Config(format!("model: unknown builtin {name:?}"))),
            ModelSpec::Matrices { a, b, c } => LinearSystem::new(
                matrix_from_rows("model.a", a)?,
                matrix_from_rows("model.b", b)?,
                matrix_from_rows("model.c", c)?,
                0.0,
            )
            .map_err(|e| DpcError::Config(format!("model: {e}")))?,
        };
        sys.with_noise_variance(noise_variance)
            .map_err(|e| DpcError::Config(format!("noise_variance: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationConfig {
    pub prbs_amplitude: f64,
    /// Samples recorded for the predictor data set `H̄`.
    pub predictor_length: usize,
    /// Samples recorded for the optimisation data set `H`.
    pub hankel_length: usize,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            prbs_amplitude: 3.0,
            predictor_length: 1040,
            hankel_length: 190,
        }
    }
}

/// JSON form of [`ControllerConfig`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSpec {
    pub t_ini: usize,
    pub horizon: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub alpha: f64,
    pub lambda_g: f64,
    pub lambda_sigma: f64,
    pub bounds: Boxes,
    /// `None` picks `identity` for the SPC-base GDPC (its base prediction is
    /// already unbiased) and `projector` otherwise.
    pub regularizer: Option<RegularizerMode>,
    pub tail_rule: TailRule,
    pub slack: SlackMode,
    pub soft_output_penalty: Option<f64>,
    pub qp: QpSettings,
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            t_ini: 20,
            horizon: 20,
            q: vec![vec![10.0, 0.0], vec![0.0, 10.0]],
            r: vec![vec![0.01, 0.0], vec![0.0, 0.01]],
            alpha: 1.0,
            lambda_g: 1e5,
            lambda_sigma: 1e7,
            bounds: Boxes {
                u_min: vec![-20.0, -20.0],
                u_max: vec![20.0, 20.0],
                y_min: vec![-25.0, -15.0],
                y_max: vec![25.0, 15.0],
            },
            regularizer: None,
            tail_rule: TailRule::RepeatLast,
            slack: SlackMode::Penalized,
            soft_output_penalty: None,
            qp: QpSettings::default(),
        }
    }
}

/// Regulariser used when the config leaves it open.
pub fn default_regularizer(kind: ControllerKind) -> RegularizerMode {
    match kind {
        ControllerKind::GdpcSpc => RegularizerMode::Identity,
        _ => RegularizerMode::Projector,
    }
}

impl ControlSpec {
    pub fn to_config(&self, kind: ControllerKind) -> Result<ControllerConfig> {
        let cfg = ControllerConfig {
            t_ini: self.t_ini,
            horizon: self.horizon,
            q: matrix_from_rows("control.q", &self.q)?,
            r: matrix_from_rows("control.r", &self.r)?,
            alpha: self.alpha,
            lambda_g: self.lambda_g,
            lambda_sigma: self.lambda_sigma,
            bounds: self.bounds.clone(),
            regularizer: self.regularizer.unwrap_or_else(|| default_regularizer(kind)),
            tail_rule: self.tail_rule,
            slack: self.slack,
            soft_output_penalty: self.soft_output_penalty,
            qp: self.qp.clone(),
        };
        cfg.validate().map_err(|e| DpcError::Config(format!("control: {e}")))?;
        Ok(cfg)
    }
}

/// Reference values held from `k_start` until the next entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub k_start: usize,
    pub r_y: Vec<f64>,
    #[serde(default)]
    pub r_u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub r_y: DVector<f64>,
    pub r_u: DVector<f64>,
}

/// Full closed-loop experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Informational only.
    pub sample_time: f64,
    pub noise_variance: f64,
    pub seeds: Vec<u64>,
    pub t_max: usize,
    pub warmup_amplitude: f64,
    pub excitation: ExcitationConfig,
    pub controller: ControllerKind,
    pub control: ControlSpec,
    /// Empty selects the default step schedule.
    pub reference: Vec<ReferenceStep>,
    pub initial_state: Option<Vec<f64>>,
    pub epsilon_rho: f64,
    /// Absolute slack of the terminal-condition monitor.
    pub terminal_tol: f64,
    /// Output error bound for the convergence flag over the final 10 %.
    pub convergence_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            sample_time: 0.1,
            noise_variance: 0.0,
            seeds: vec![1],
            t_max: 300,
            warmup_amplitude: 0.1,
            excitation: ExcitationConfig::default(),
            controller: ControllerKind::GdpcShift,
            control: ControlSpec::default(),
            reference: Vec::new(),
            initial_state: None,
            epsilon_rho: 0.01,
            terminal_tol: 1e-12,
            convergence_tol: 1e-3,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        parse_json(text)
    }

    pub fn controller_config(&self) -> Result<ControllerConfig> {
        self.control.to_config(self.controller)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hankel columns of the predictor and optimisation data sets.
    pub fn predictor_cols(&self) -> usize {
        self.excitation
            .predictor_length
            .saturating_sub(self.control.t_ini + self.control.horizon)
    }

    pub fn hankel_cols(&self) -> usize {
        self.excitation
            .hankel_length
            .saturating_sub(self.control.t_ini + self.control.horizon)
    }

    /// Set the data length so that the optimisation set has `cols` columns.
    pub fn with_hankel_cols(mut self, cols: usize) -> Self {
        self.excitation.hankel_length = cols + self.control.t_ini + self.control.horizon;
        self
    }

    pub fn with_predictor_cols(mut self, cols: usize) -> Self {
        self.excitation.predictor_length = cols + self.control.t_ini + self.control.horizon;
        self
    }

    /// Explicit schedule, or the default: zero, a step to 40 % of the upper
    /// output bound at `T_ini`, back to zero at `t_max / 2`; `r_u = 0`.
    pub fn schedule(&self) -> Vec<ReferenceStep> {
        if !self.reference.is_empty() {
            return self.reference.clone();
        }
        let n_y = self.control.q.len();
        let mid: Vec<f64> = (0..n_y)
            .map(|i| match self.control.bounds.y_max.get(i) {
                Some(&v) if v.is_finite() => 0.4 * v,
                _ => 1.0,
            })
            .collect();
        let mut steps = vec![
            ReferenceStep {
                k_start: 0,
                r_y: vec![0.0; n_y],
                r_u: None,
            },
            ReferenceStep {
                k_start: self.control.t_ini.max(1),
                r_y: mid,
                r_u: None,
            },
        ];
        if self.t_max / 2 > steps[1].k_start {
            steps.push(ReferenceStep {
                k_start: self.t_max / 2,
                r_y: vec![0.0; n_y],
                r_u: None,
            });
        }
        steps
    }

    pub fn validate(&self) -> Result<()> {
        let ctrl = self.controller_config()?;
        let sys = self.model.system(self.noise_variance)?;
        if sys.n_u() != ctrl.n_u() || sys.n_y() != ctrl.n_y() {
            return Err(DpcError::Config(format!(
                "control: weights sized for n_u={}, n_y={} but model has n_u={}, n_y={}",
                ctrl.n_u(),
                ctrl.n_y(),
                sys.n_u(),
                sys.n_y()
            )));
        }
        if self.t_max <= ctrl.t_ini {
            return Err(DpcError::Config(format!(
                "t_max: must exceed T_ini={}, got {}",
                ctrl.t_ini, self.t_max
            )));
        }
        if !(self.warmup_amplitude >= 0.0 && self.warmup_amplitude.is_finite()) {
            return Err(DpcError::Config("warmup_amplitude: must be finite and >= 0".into()));
        }
        if !(self.excitation.prbs_amplitude > 0.0 && self.excitation.prbs_amplitude.is_finite()) {
            return Err(DpcError::Config("excitation.prbs_amplitude: must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon_rho) || self.epsilon_rho == 0.0 {
            return Err(DpcError::Config("epsilon_rho: must lie in (0, 1)".into()));
        }
        if !(self.terminal_tol >= 0.0) {
            return Err(DpcError::Config("terminal_tol: must be >= 0".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(DpcError::Config("convergence_tol: must be positive".into()));
        }
        if let Some(x0) = &self.initial_state {
            if x0.len() != sys.n() {
                return Err(DpcError::Config(format!(
                    "initial_state: expected {} entries, got {}",
                    sys.n(),
                    x0.len()
                )));
            }
        }
        let mut prev = None;
        for (i, step) in self.schedule().iter().enumerate() {
            if step.r_y.len() != sys.n_y() {
                return Err(DpcError::Config(format!(
                    "reference[{i}].r_y: expected {} entries",
                    sys.n_y()
                )));
            }
            if step.r_u.as_ref().is_some_and(|r| r.len() != sys.n_u()) {
                return Err(DpcError::Config(format!(
                    "reference[{i}].r_u: expected {} entries",
                    sys.n_u()
                )));
            }
            if prev.is_some_and(|p| step.k_start <= p) {
                return Err(DpcError::Config(format!(
                    "reference[{i}].k_start: entries must be strictly increasing"
                )));
            }
            prev = Some(step.k_start);
        }
        Ok(())
    }
}

/// Reference in force at sample `k`; zero before the first entry.
pub fn reference_at(schedule: &[ReferenceStep], k: usize, n_y: usize, n_u: usize) -> Reference {
    let step = schedule.iter().rev().find(|s| s.k_start <= k);
    match step {
        Some(s) => Reference {
            r_y: DVector::from_column_slice(&s.r_y),
            r_u: s
                .r_u
                .as_ref()
                .map_or_else(|| DVector::zeros(n_u), |r| DVector::from_column_slice(r)),
        },
        None => Reference {
            r_y: DVector::zeros(n_y),
            r_u: DVector::zeros(n_u),
        },
    }
}

/// A named sweep: each arm patches `base` with a JSON merge patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub base: Value,
    pub arms: Vec<SweepArm>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArm {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
}

/// RFC 7386 merge patch.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match patch {
        Value::Object(p) => {
            if !target.is_object() {
                *target = Value::Object(Default::default());
            }
            let t = target.as_object_mut().expect("object");
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        other => *target = other.clone(),
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        parse_json(text)
    }

    pub fn resolve(&self) -> Result<Vec<(String, RunConfig)>> {
        if self.arms.is_empty() {
            return Err(DpcError::Config("arms: at least one arm is required".into()));
        }
        self.arms
            .iter()
            .map(|arm| {
                let mut v = if self.base.is_null() {
                    Value::Object(Default::default())
                } else {
                    self.base.clone()
                };
                merge_patch(&mut v, &arm.overrides);
                let cfg: RunConfig =
                    serde_json::from_value(v).map_err(|e| DpcError::Config(format!("arm {:?}: {e}", arm.name)))?;
                Ok((arm.name.clone(), cfg))
            })
            .collect()
    }
}
