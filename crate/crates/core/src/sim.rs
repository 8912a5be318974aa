//! Ground-truth discrete-time LTI plant with Gaussian output noise,
//! excitation signals and the Boeing 747 longitudinal benchmark.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_check, DpcError, Result};
use crate::linalg::{self, DenseMatrix};

/// The deterministic generator used for every experiment.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `x(k+1) = A x(k) + B u(k)`, `y(k) = C x(k) + w(k)` with
/// `w(k) ~ N(0, σ_w² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
    pub noise_variance: f64,
}

impl LinearSystem {
    pub fn new(a: DenseMatrix, b: DenseMatrix, c: DenseMatrix, noise_variance: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(DpcError::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        dim_check("rows of B", b.nrows(), a.nrows())?;
        dim_check("columns of C", c.ncols(), a.nrows())?;
        if b.ncols() == 0 || c.nrows() == 0 {
            return Err(DpcError::Dimension("B and C must be non-empty".into()));
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(DpcError::InvalidArgument(format!(
                "noise variance must be finite and >= 0, got {noise_variance}"
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            noise_variance,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn with_noise_variance(mut self, noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(DpcError::InvalidArgument(format!(
                "noise variance must be finite and >= 0, got {noise_variance}"
            )));
        }
        self.noise_variance = noise_variance;
        Ok(self)
    }

    /// Noisy measurement `C x + w` of the current state.
    pub fn measure<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        dim_check("state length", x.len(), self.n())?;
        let mut y = &self.c * x;
        if self.noise_variance > 0.0 {
            let sd = self.noise_variance.sqrt();
            for yi in y.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *yi += sd * z;
            }
        }
        Ok(y)
    }

    pub fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        dim_check("state length", x.len(), self.n())?;
        dim_check("input length", u.len(), self.n_u())?;
        Ok(&self.a * x + &self.b * u)
    }

    /// One plant step. The output is taken from the pre-update state.
    pub fn simulate_step<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        dim_check("input length", u.len(), self.n_u())?;
        let y = self.measure(x, rng)?;
        let next = self.propagate(x, u)?;
        Ok((next, y))
    }

    /// Least-squares state estimate after a noise-free window: `inputs[j]` is
    /// applied at step `j` and `outputs_next[j]` is the output measured right
    /// after it. Returns the state reached once all inputs are applied.
    pub fn reconstruct_state(&self, inputs: &[DVector<f64>], outputs_next: &[DVector<f64>]) -> Result<DVector<f64>> {
        dim_check("output window length", outputs_next.len(), inputs.len())?;
        let (n, n_y) = (self.n(), self.n_y());
        let len = inputs.len();
        // y(j+1) = C A^{j+1} x0 + sum_{i<=j} C A^{j-i} B u(i)
        let mut obs = DenseMatrix::zeros(len * n_y, n);
        let mut rhs = DVector::zeros(len * n_y);
        let mut a_pow = self.a.clone();
        let mut forced = DVector::zeros(n);
        for j in 0..len {
            dim_check("input length", inputs[j].len(), self.n_u())?;
            dim_check("output length", outputs_next[j].len(), n_y)?;
            forced = &self.a * forced + &self.b * &inputs[j];
            obs.rows_mut(j * n_y, n_y).copy_from(&(&self.c * &a_pow));
            rhs.rows_mut(j * n_y, n_y)
                .copy_from(&(&outputs_next[j] - &self.c * &forced));
            a_pow = &self.a * a_pow;
        }
        let x0 = linalg::least_squares(&obs, &DenseMatrix::from_column_slice(len * n_y, 1, rhs.as_slice()))?;
        let mut x = x0.column(0).into_owned();
        for u in inputs {
            x = &self.a * x + &self.b * u;
        }
        Ok(x)
    }

    /// Run the plant from `x0` under `inputs`; `outputs[k]` is measured before
    /// `inputs[k]` is applied.
    pub fn simulate_sequence<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        rng: &mut R,
        seed: u64,
    ) -> Result<ExperimentData> {
        dim_check("initial state length", x0.len(), self.n())?;
        let mut x = x0.clone();
        let mut outputs = Vec::with_capacity(inputs.len());
        for u in inputs {
            let (next, y) = self.simulate_step(&x, u, rng)?;
            outputs.push(y);
            x = next;
        }
        Ok(ExperimentData {
            inputs: inputs.to_vec(),
            outputs,
            seed,
            noise_variance: self.noise_variance,
        })
    }
}

/// Recorded input/output sequences of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub seed: u64,
    pub noise_variance: f64,
}

impl ExperimentData {
    pub fn new(inputs: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>, seed: u64, noise_variance: f64) -> Result<Self> {
        dim_check("output sequence length", outputs.len(), inputs.len())?;
        if let (Some(u0), Some(y0)) = (inputs.first(), outputs.first()) {
            if inputs.iter().any(|u| u.len() != u0.len()) || outputs.iter().any(|y| y.len() != y0.len()) {
                return Err(DpcError::Dimension(
                    "samples within a record must share one dimension".into(),
                ));
            }
        }
        Ok(Self {
            inputs,
            outputs,
            seed,
            noise_variance,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn n_y(&self) -> usize {
        self.outputs.first().map_or(0, |y| y.len())
    }

    /// Samples `start..end` as a new record with the same metadata.
    pub fn segment(&self, start: usize, end: usize) -> ExperimentData {
        ExperimentData {
            inputs: self.inputs[start..end].to_vec(),
            outputs: self.outputs[start..end].to_vec(),
            seed: self.seed,
            noise_variance: self.noise_variance,
        }
    }

    /// Header `k,u1..u{n_u},y1..y{n_y}`, one row per sample.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.n_u()).map(|i| format!("u{i}")));
        header.extend((1..=self.n_y()).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for (k, (u, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(u.iter().chain(y.iter()).map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`ExperimentData::write_csv`]. Seed and noise variance are
    /// not part of the CSV and must be supplied.
    pub fn read_csv<R: Read>(reader: R, seed: u64, noise_variance: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let n_u = header.iter().filter(|h| h.starts_with('u')).count();
        let n_y = header.iter().filter(|h| h.starts_with('y')).count();
        if header.get(0) != Some("k") || header.len() != 1 + n_u + n_y {
            return Err(DpcError::InvalidArgument(format!(
                "unexpected dataset header: {header:?}"
            )));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| DpcError::InvalidArgument(format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            dim_check("dataset row width", vals.len(), n_u + n_y)?;
            inputs.push(DVector::from_column_slice(&vals[..n_u]));
            outputs.push(DVector::from_column_slice(&vals[n_u..]));
        }
        ExperimentData::new(inputs, outputs, seed, noise_variance)
    }
}

/// Shortest representation that round-trips to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Two-level pseudo-random binary sequence: every channel independently
/// takes `-amplitude` or `+amplitude` at each sample.
pub fn generate_prbs<R: Rng + ?Sized>(
    length: usize,
    amplitude: f64,
    n_u: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    if length == 0 {
        return Err(DpcError::InvalidArgument("PRBS length must be >= 1".into()));
    }
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(DpcError::InvalidArgument(format!(
            "PRBS amplitude must be > 0, got {amplitude}"
        )));
    }
    Ok((0..length)
        .map(|_| DVector::from_fn(n_u, |_, _| if rng.random_bool(0.5) { amplitude } else { -amplitude }))
        .collect())
}

/// Uniform noise on `[-amplitude, amplitude]` per channel; used to actuate the
/// plant before the controllers have a full initial window.
pub fn generate_uniform<R: Rng + ?Sized>(length: usize, amplitude: f64, n_u: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..length)
        .map(|_| {
            DVector::from_fn(n_u, |_, _| {
                if amplitude > 0.0 {
                    rng.random_range(-amplitude..=amplitude)
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Longitudinal Boeing 747 flight dynamics, zero-order-hold discretised at
/// `T_s = 0.1 s`. Inputs: throttle, elevator angle. Outputs: longitudinal
/// velocity, climb rate.
pub fn boeing747_benchmark() -> LinearSystem {
    #[rustfmt::skip]
    let a = DenseMatrix::from_row_slice(4, 4, &[
         0.9997,  0.0038, -0.0001, -0.0322,
        -0.0056,  0.9648,  0.7446,  0.0001,
         0.0020, -0.0097,  0.9543, -0.0000,
         0.0001, -0.0005,  0.0978,  1.0000,
    ]);
    #[rustfmt::skip]
    let b = DenseMatrix::from_row_slice(4, 2, &[
         0.0010, 0.1000,
        -0.0615, 0.0183,
        -0.1133, 0.0586,
        -0.0057, 0.0029,
    ]);
    #[rustfmt::skip]
    let c = DenseMatrix::from_row_slice(2, 4, &[
        1.0000,  0.0,    0.0, 0.0,
        0.0,    -1.0000, 0.0, 7.7400,
    ]);
    LinearSystem {
        a,
        b,
        c,
        noise_variance: 0.0,
    }
}
