//! Linear solves on the KKT matrix: sparse LU for Newton steps, dense LU and
//! SVD least squares for sensitivities.

use std::cell::Cell;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Once;

use faer::prelude::SpSolver;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::SparseColMat;
use faer::Mat;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

thread_local! {
    static QUIET_PANICS: Cell<bool> = const { Cell::new(false) };
}

/// Sparse LU that reports an exactly zero pivot as an error. The
/// factorization panics in that case, so the panic is caught and kept off
/// stderr for the calling thread only.
fn sparse_lu(mat: &SparseColMat<usize, f64>) -> Result<Lu<usize, f64>> {
    static HOOK: Once = Once::new();
    HOOK.call_once(|| {
        let previous = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            if !QUIET_PANICS.with(Cell::get) {
                previous(info);
            }
        }));
    });
    QUIET_PANICS.with(|q| q.set(true));
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| mat.sp_lu()));
    QUIET_PANICS.with(|q| q.set(false));
    match outcome {
        Ok(Ok(lu)) => Ok(lu),
        Ok(Err(e)) => Err(Error::SolverFailure(format!("sparse LU: {e:?}"))),
        Err(_) => Err(Error::SolverFailure("sparse LU: zero pivot".into())),
    }
}

/// Square sparse matrix in coordinate form. Duplicate entries add up.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplets {
    dim: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn with_capacity(dim: usize, capacity: usize) -> Self {
        Triplets {
            dim,
            entries: Vec::with_capacity(capacity),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        self.entries.push((row, col, value));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// `A x`
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim);
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    /// `Aᵀ x`
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim);
        for &(r, c, v) in &self.entries {
            y[c] += v * x[r];
        }
        y
    }

    pub fn amax(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, e| m.max(e.2.abs()))
    }

    /// Solves `(A + δI) x = b` by sparse LU with partial pivoting.
    ///
    /// Fails when the factorization breaks down or the computed solution is
    /// not finite or leaves a large relative residual.
    pub fn solve_shifted(&self, shift: f64, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.dim {
            return Err(Error::Dimension {
                what: "right-hand side",
                expected: self.dim,
                got: b.len(),
            });
        }
        let mut entries = self.entries.clone();
        if shift != 0.0 {
            entries.extend((0..self.dim).map(|i| (i, i, shift)));
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(self.dim, self.dim, &entries)
            .map_err(|e| Error::SolverFailure(format!("sparse assembly: {e:?}")))?;
        let lu = sparse_lu(&mat)?;
        let rhs = Mat::from_fn(self.dim, 1, |i, _| b[i]);
        let sol = lu.solve(&rhs);
        let x = DVector::from_fn(self.dim, |i, _| sol.read(i, 0));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure("non-finite linear solve".into()));
        }
        let mut r = self.mul_vec(&x) - b;
        if shift != 0.0 {
            r += &x * shift;
        }
        let scale = b.amax() + (self.amax() + shift.abs()) * x.amax();
        if r.amax() > 1e-8 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::SolverFailure(format!(
                "inaccurate linear solve (residual {:.3e}, scale {:.3e})",
                r.amax(),
                scale
            )));
        }
        Ok(x)
    }
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m.read(i, j))
}

/// Dense LU with partial pivoting.
pub struct DenseLu {
    lu: faer::solvers::PartialPivLu<f64>,
    min_pivot: f64,
    max_pivot: f64,
}

impl DenseLu {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension {
                what: "square matrix",
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix to factor"));
        }
        let lu = to_faer(m).partial_piv_lu();
        let u = lu.compute_u();
        let (mut min_pivot, mut max_pivot) = (f64::INFINITY, 0.0f64);
        for i in 0..u.nrows() {
            let p = u.read(i, i).abs();
            min_pivot = min_pivot.min(p);
            max_pivot = max_pivot.max(p);
        }
        if u.nrows() == 0 {
            min_pivot = 0.0;
        }
        Ok(DenseLu {
            lu,
            min_pivot,
            max_pivot,
        })
    }

    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    /// Smallest over largest pivot magnitude.
    pub fn pivot_ratio(&self) -> f64 {
        if self.max_pivot == 0.0 {
            0.0
        } else {
            self.min_pivot / self.max_pivot
        }
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        from_faer(&self.lu.solve(&to_faer(rhs)))
    }
}

/// Minimum-norm least-squares solution of `A X = B` via SVD, discarding
/// singular values below `rcond · σ_max`.
pub fn min_norm_least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension {
            what: "least-squares right-hand side rows",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    let svd = to_faer(a).thin_svd();
    let (u, s, v) = (svd.u(), svd.s_diagonal(), svd.v());
    let rank_cut = s.read(0) * rcond;
    let fb = to_faer(b);
    let mut out = Mat::<f64>::zeros(a.ncols(), b.ncols());
    for k in 0..s.nrows() {
        let sk = s.read(k);
        if sk <= rank_cut || sk == 0.0 {
            continue;
        }
        for col in 0..b.ncols() {
            let mut dot = 0.0;
            for i in 0..a.nrows() {
                dot += u.read(i, k) * fb.read(i, col);
            }
            let coef = dot / sk;
            for j in 0..a.ncols() {
                let cur = out.read(j, col);
                out.write(j, col, cur + coef * v.read(j, k));
            }
        }
    }
    Ok(from_faer(&out))
}
