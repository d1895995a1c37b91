//! Dense symmetric positive (semi-)definite linear algebra.
//!
//! Matrices are `nalgebra` column-major buffers. Cholesky factorization,
//! triangular solves and large products are delegated to `faer` through
//! zero-copy views of the same buffers.

use faer::{Accum, MatMut, MatRef, Par, Side};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Relative jitter levels tried in order by [`chol`], multiplied by the mean
/// absolute diagonal of the input.
pub const JITTER_SCHEDULE: [f64; 6] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4];

/// Eigenvalues below this fraction of the largest one are treated as zero by
/// [`pseudo_inverse`].
pub const PINV_RTOL: f64 = 1e-10;

/// Square symmetric matrix. Construction symmetrizes as `(A + Aᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        check_dim("SymMatrix::new (square)", a.nrows(), a.ncols())?;
        let mut a = a;
        symmetrize_in_place(&mut a);
        Ok(SymMatrix(a))
    }

    /// Wraps a matrix that is already exactly symmetric.
    pub(crate) fn from_symmetric(a: DMatrix<f64>) -> Self {
        debug_assert!(a.nrows() == a.ncols());
        SymMatrix(a)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn mean_abs_diag(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|i| self.0[(i, i)].abs()).sum::<f64>() / n as f64
    }

    /// Smallest eigenvalue, computed by a full symmetric eigendecomposition.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0.clone())
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.0.clone()).eigenvalues
    }
}

pub(crate) fn symmetrize_in_place(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

fn view(a: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(a.as_slice(), a.nrows(), a.ncols())
}

fn view_mut(a: &mut DMatrix<f64>) -> MatMut<'_, f64> {
    let (r, c) = a.shape();
    MatMut::from_column_major_slice_mut(a.as_mut_slice(), r, c)
}

/// `A B`.
pub fn mul_nn(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "mul_nn shape");
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    faer::linalg::matmul::matmul(view_mut(&mut out), Accum::Replace, view(a), view(b), 1.0, Par::Seq);
    out
}

/// `Aᵀ B`.
pub fn mul_tn(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "mul_tn shape");
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    faer::linalg::matmul::matmul(
        view_mut(&mut out),
        Accum::Replace,
        view(a).transpose(),
        view(b),
        1.0,
        Par::Seq,
    );
    out
}

/// `A Bᵀ`.
pub fn mul_nt(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "mul_nt shape");
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    faer::linalg::matmul::matmul(
        view_mut(&mut out),
        Accum::Replace,
        view(a),
        view(b).transpose(),
        1.0,
        Par::Seq,
    );
    out
}

/// `dst += alpha · Aᵀ B`.
pub fn add_mul_tn(dst: &mut DMatrix<f64>, alpha: f64, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    assert_eq!(a.nrows(), b.nrows(), "add_mul_tn shape");
    assert_eq!(dst.shape(), (a.ncols(), b.ncols()), "add_mul_tn dst shape");
    faer::linalg::matmul::matmul(
        view_mut(dst),
        Accum::Add,
        view(a).transpose(),
        view(b),
        alpha,
        Par::Seq,
    );
}

/// Lower Cholesky factor of `A + jitter_used·I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
    jitter_used: f64,
}

/// Factorizes `a`, escalating through [`JITTER_SCHEDULE`] until the
/// factorization succeeds.
pub fn chol(a: &SymMatrix) -> Result<CholFactor> {
    let n = a.dim();
    let scale = match a.mean_abs_diag() {
        s if s > 0.0 && s.is_finite() => s,
        _ => 1.0,
    };
    let mut tried = Vec::with_capacity(JITTER_SCHEDULE.len());
    for rel in JITTER_SCHEDULE {
        let jitter = rel * scale;
        tried.push(jitter);
        let mut work = a.0.clone();
        for i in 0..n {
            work[(i, i)] += jitter;
        }
        if let Some(l) = try_llt(&work) {
            if jitter > 0.0 {
                log::warn!("cholesky of {n}x{n} matrix needed jitter {jitter:.3e}");
            }
            return Ok(CholFactor { l, jitter_used: jitter });
        }
    }
    Err(Error::Singular { schedule: tried })
}

fn try_llt(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let llt = view(a).llt(Side::Lower).ok()?;
    let lv = llt.L();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            l[(i, j)] = lv[(i, j)];
        }
    }
    if (0..n).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
        Some(l)
    } else {
        None
    }
}

impl CholFactor {
    /// Wraps an existing lower-triangular factor with positive diagonal.
    pub fn from_lower(l: DMatrix<f64>, jitter_used: f64) -> Result<Self> {
        check_dim("CholFactor::from_lower (square)", l.nrows(), l.ncols())?;
        let n = l.nrows();
        for i in 0..n {
            if !(l[(i, i)] > 0.0) {
                return Err(Error::Domain(format!("non-positive diagonal at {i}")));
            }
        }
        let mut l = l;
        for j in 1..n {
            for i in 0..j {
                l[(i, j)] = 0.0;
            }
        }
        Ok(CholFactor { l, jitter_used })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// `L Lᵀ`, i.e. the factorized matrix including jitter.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        mul_nt(&self.l, &self.l)
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// In place `B ← L⁻¹ B`.
    pub fn solve_lower_in_place(&self, b: &mut DMatrix<f64>) -> Result<()> {
        check_dim("CholFactor::solve_lower", self.dim(), b.nrows())?;
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(
            view(&self.l),
            view_mut(b),
            Par::Seq,
        );
        Ok(())
    }

    /// In place `B ← L⁻ᵀ B`.
    pub fn solve_lower_transpose_in_place(&self, b: &mut DMatrix<f64>) -> Result<()> {
        check_dim("CholFactor::solve_lower_transpose", self.dim(), b.nrows())?;
        faer::linalg::triangular_solve::solve_upper_triangular_in_place(
            view(&self.l).transpose(),
            view_mut(b),
            Par::Seq,
        );
        Ok(())
    }

    /// `X` with `(A + jitter·I) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x)?;
        self.solve_lower_transpose_in_place(&mut x)?;
        Ok(x)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = self.solve(&m)?;
        Ok(DVector::from_column_slice(x.as_slice()))
    }

    /// `(A + jitter·I)⁻¹`, formed from the factor.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim();
        let mut linv = DMatrix::identity(n, n);
        self.solve_lower_in_place(&mut linv)
            .expect("square identity matches factor");
        let mut inv = mul_tn(&linv, &linv);
        symmetrize_in_place(&mut inv);
        SymMatrix(inv)
    }

    /// `‖L⁻¹ B‖²_F = tr(Bᵀ A⁻¹ B)`.
    pub fn inv_quad_trace(&self, b: &DMatrix<f64>) -> Result<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x)?;
        Ok(x.iter().map(|v| v * v).sum())
    }
}

/// Moore-Penrose pseudo-inverse through the symmetric eigendecomposition.
/// Eigenvalues below `PINV_RTOL·λ_max` are zeroed. Intended for the small
/// K×K likelihood Hessians.
pub fn pseudo_inverse(a: &SymMatrix) -> SymMatrix {
    spectral_map(a, |lam, lam_max| {
        if lam > PINV_RTOL * lam_max && lam > 0.0 {
            1.0 / lam
        } else {
            0.0
        }
    })
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
pub fn psd_sqrt(a: &SymMatrix) -> SymMatrix {
    spectral_map(a, |lam, _| lam.max(0.0).sqrt())
}

fn spectral_map(a: &SymMatrix, f: impl Fn(f64, f64) -> f64) -> SymMatrix {
    let n = a.dim();
    if n == 1 {
        let v = a.0[(0, 0)];
        return SymMatrix(DMatrix::from_element(1, 1, f(v, v.abs())));
    }
    let eig = SymmetricEigen::new(a.0.clone());
    let lam_max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = f(lam, lam_max);
        scaled.column_mut(j).scale_mut(s);
    }
    let mut out = &scaled * eig.eigenvectors.transpose();
    symmetrize_in_place(&mut out);
    SymMatrix(out)
}

/// Draws `count` samples `mean + L z` with `z ~ N(0, I)`; one draw per column.
/// `l` may be any square matrix, including zero.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = mean.len();
    check_dim("sample_mvn (rows of L)", n, l.nrows())?;
    check_dim("sample_mvn (cols of L)", n, l.ncols())?;
    let z = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = mul_nn(l, &z);
    for mut col in out.column_iter_mut() {
        col += mean;
    }
    Ok(out)
}

/// Evaluates both sides of the completing-the-square identity
/// `½xᵀAx + xᵀb = ½(x + A⁺b)ᵀA(x + A⁺b) − ½bᵀA⁺b`.
/// The two sides agree whenever `b` lies in the range of `A`.
pub fn complete_square_check(a: &SymMatrix, x: &DVector<f64>, b: &DVector<f64>) -> Result<(f64, f64)> {
    check_dim("complete_square_check (x)", a.dim(), x.len())?;
    check_dim("complete_square_check (b)", a.dim(), b.len())?;
    let am = a.as_matrix();
    let lhs = 0.5 * x.dot(&(am * x)) + x.dot(b);
    let pinv = pseudo_inverse(a);
    let pb = pinv.as_matrix() * b;
    let shifted = x + &pb;
    let rhs = 0.5 * shifted.dot(&(am * &shifted)) - 0.5 * b.dot(&pb);
    Ok((lhs, rhs))
}
