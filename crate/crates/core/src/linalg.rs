//! Dense linear algebra kernel: SVD, Moore-Penrose pseudo-inverse, SPD solves
//! and minimum-norm least squares.
//!
//! Everything is double precision and backed by `nalgebra` dense storage.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type DenseMatrix = DMatrix<f64>;

/// Relative truncation tolerance for pseudo-inverses and numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Thin singular value decomposition `A = U diag(S) Vᵀ`.
///
/// `u` is `rows × k`, `v` is `cols × k` with `k = min(rows, cols)` and the
/// singular values are sorted in non-increasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub s: DVector<f64>,
    pub v: DenseMatrix,
}

impl Svd {
    pub fn max_singular_value(&self) -> f64 {
        if self.s.is_empty() {
            0.0
        } else {
            self.s[0]
        }
    }

    /// Number of singular values above `tol · σ_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let cutoff = tol * self.max_singular_value();
        self.s.iter().filter(|&&s| s > cutoff && s > 0.0).count()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

pub fn ensure_finite(a: &DenseMatrix) -> Result<(), LinalgError> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

pub fn svd(a: &DenseMatrix) -> Result<Svd, LinalgError> {
    ensure_finite(a)?;
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: DenseMatrix::zeros(rows, 0),
            s: DVector::zeros(0),
            v: DenseMatrix::zeros(cols, 0),
        });
    }
    // nalgebra's bidiagonalisation is more robust on tall inputs
    if rows < cols {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let dec = a.clone().svd(true, true);
    let u = dec.u.expect("requested U");
    let vt = dec.v_t.expect("requested Vᵀ");
    let s = dec.singular_values;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut su = DenseMatrix::zeros(rows, k);
    let mut sv = DenseMatrix::zeros(cols, k);
    let mut ss = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        ss[dst] = s[src].max(0.0);
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &vt.row(src).transpose());
    }
    Ok(Svd { u: su, s: ss, v: sv })
}

/// Moore-Penrose pseudo-inverse with singular values below `tol · σ_max`
/// treated as zero.
pub fn pinv(a: &DenseMatrix, tol: f64) -> Result<DenseMatrix, LinalgError> {
    let dec = svd(a)?;
    Ok(pinv_from_svd(&dec, tol))
}

pub fn pinv_from_svd(dec: &Svd, tol: f64) -> DenseMatrix {
    let r = dec.rank(tol);
    let rows = dec.u.nrows();
    let cols = dec.v.nrows();
    if r == 0 {
        return DenseMatrix::zeros(cols, rows);
    }
    let mut vs = dec.v.columns(0, r).into_owned();
    for j in 0..r {
        vs.column_mut(j).scale_mut(1.0 / dec.s[j]);
    }
    vs * dec.u.columns(0, r).transpose()
}

/// Solve `H x = b` for symmetric positive definite `H` by Cholesky.
pub fn solve_spd(h: &DenseMatrix, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let chol = SpdFactor::new(h)?;
    chol.solve(b)
}

/// A reusable Cholesky factorization.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    n: usize,
}

impl SpdFactor {
    pub fn new(h: &DenseMatrix) -> Result<Self, LinalgError> {
        ensure_finite(h)?;
        if !h.is_square() {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        let n = h.nrows();
        let chol = nalgebra::Cholesky::new(h.clone()).ok_or(LinalgError::NotPositiveDefinite)?;
        Ok(Self { chol, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch(format!(
                "rhs has length {}, factor has dimension {}",
                b.len(),
                self.n
            )));
        }
        Ok(self.chol.solve(b))
    }

    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if b.nrows() != self.n {
            return Err(LinalgError::DimensionMismatch(format!(
                "rhs has {} rows, factor has dimension {}",
                b.nrows(),
                self.n
            )));
        }
        Ok(self.chol.solve(b))
    }
}

/// Minimum-norm least-squares solution of `A X ≈ B`.
pub fn least_squares(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if a.nrows() != b.nrows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "A has {} rows but B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    ensure_finite(b)?;
    Ok(pinv(a, DEFAULT_RANK_TOL)? * b)
}

/// Stack matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[&DenseMatrix]) -> DenseMatrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack: column count mismatch");
        out.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Block-diagonal matrix with `blocks` on the diagonal.
pub fn block_diag(blocks: &[DenseMatrix]) -> DenseMatrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DenseMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn max_abs(a: &DenseMatrix) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn symmetrize(h: &mut DenseMatrix) {
    let n = h.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormal_residual(q: &DenseMatrix) -> f64 {
        let k = q.ncols();
        max_abs(&(q.transpose() * q - DenseMatrix::identity(k, k)))
    }

    #[test]
    fn svd_of_diagonal() {
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let d = svd(&a).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-14);
        assert!((d.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_of_zero() {
        let d = svd(&DenseMatrix::zeros(2, 3)).unwrap();
        assert_eq!(d.s.len(), 2);
        assert!(d.s.iter().all(|&s| s == 0.0));
        assert_eq!(d.rank(DEFAULT_RANK_TOL), 0);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(r, c) in &[(5, 4), (4, 5), (1, 6), (7, 1)] {
            let a = random(r, c, &mut rng);
            let d = svd(&a).unwrap();
            let res = (&a - d.reconstruct()).norm();
            assert!(res <= 1e-10 * a.norm().max(1.0), "residual {res}");
            assert!(orthonormal_residual(&d.u) < 1e-10);
            assert!(orthonormal_residual(&d.v) < 1e-10);
            for w in d.s.as_slice().windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let a = DenseMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert_eq!(svd(&a).unwrap_err(), LinalgError::NonFinite);
        assert!(pinv(&a, DEFAULT_RANK_TOL).is_err());
    }

    #[test]
    fn pinv_scalar_and_zero() {
        let p = pinv(&DenseMatrix::from_element(1, 1, 2.0), DEFAULT_RANK_TOL).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        let z = pinv(&DenseMatrix::zeros(2, 3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(z.shape(), (3, 2));
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pinv_of_pinv_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(6, 4, &mut rng) + DenseMatrix::identity(6, 4) * 2.0;
        let back = pinv(&pinv(&a, DEFAULT_RANK_TOL).unwrap(), DEFAULT_RANK_TOL).unwrap();
        assert!(max_abs(&(back - a)) < 1e-7);
    }

    #[test]
    fn spd_solves() {
        let x = solve_spd(
            &DenseMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]),
            &DVector::from_vec(vec![2.0, 4.0]),
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);

        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let x = solve_spd(&DenseMatrix::identity(3, 3), &b).unwrap();
        assert_eq!(x, b);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(8, 8, &mut rng);
        let h = m.transpose() * &m + DenseMatrix::identity(8, 8);
        let b = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let x = solve_spd(&h, &b).unwrap();
        assert!((&h * &x - &b).norm() <= 1e-9 * b.norm());
        let via_pinv = pinv(&h, DEFAULT_RANK_TOL).unwrap() * &b;
        assert!((x - via_pinv).amax() < 1e-8);
    }

    #[test]
    fn spd_rejects_indefinite() {
        let h = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            solve_spd(&h, &DVector::zeros(2)).unwrap_err(),
            LinalgError::NotPositiveDefinite
        );
    }

    #[test]
    fn least_squares_cases() {
        let b = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let x = least_squares(&DenseMatrix::identity(2, 2), &b).unwrap();
        assert!(max_abs(&(x - &b)) < 1e-14);

        let x = least_squares(&DenseMatrix::zeros(2, 3), &b).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(10, 3, &mut rng);
        let b = random(10, 2, &mut rng);
        let x = least_squares(&a, &b).unwrap();
        let normal = a.transpose() * (&a * &x - &b);
        assert!(max_abs(&normal) < 1e-8 * (1.0 + max_abs(&b)));
    }

    #[test]
    fn block_helpers() {
        let a = DenseMatrix::from_element(1, 2, 1.0);
        let b = DenseMatrix::from_element(2, 2, 2.0);
        let s = vstack(&[&a, &b]);
        assert_eq!(s.shape(), (3, 2));
        assert_eq!(s[(2, 1)], 2.0);
        let d = block_diag(&[a.clone(), b]);
        assert_eq!(d.shape(), (3, 4));
        assert_eq!(d[(0, 2)], 0.0);
        assert_eq!(d[(1, 3)], 2.0);
    }
}
