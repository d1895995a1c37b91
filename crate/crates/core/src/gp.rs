//! Function-space view of the linearized model: the GP prior kernel
//! `κ(x, x') = J(x) Σ₀ J(x')ᵀ`, the Laplace GP posterior at test inputs and
//! the GP form of the surrogate marginal likelihood.
//!
//! Block ordering is datapoint-major: block `(i, j)` of an `NK × NK` kernel
//! occupies rows `iK..iK+K` and columns `jK..jK+K`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::export_csv;
use crate::error::{check_dim, Result};
use crate::laplace::{blockdiag_times, LinearPoint, LinearizedModel};
use crate::likelihood::Likelihood;
use crate::linalg::{chol, mul_nn, psd_sqrt, CholFactor, SymMatrix};
use crate::train::PriorSpec;

/// `J_a Σ₀ J_bᵀ`.
pub fn prior_kernel(prior: &PriorSpec, j_a: &DMatrix<f64>, j_b: &DMatrix<f64>) -> DMatrix<f64> {
    j_a * prior.covariance_times(&j_b.transpose())
}

/// GP prior mean `m(x) = f_lin(x; μ₀) = f(x; w*) + J(x)(μ₀ − w*)`.
pub fn prior_mean(prior: &PriorSpec, w_star: &DVector<f64>, point: &LinearPoint) -> DVector<f64> {
    point.f_lin(w_star, &prior.mean)
}

/// `D(x) κ(x, x') D(x')ᵀ` with the surrogate scale `D` (`Λ` for
/// unit-dispersion families, the identity for the Gaussian).
pub fn hat_kernel(lik: &Likelihood, prior: &PriorSpec, a: &LinearPoint, b: &LinearPoint) -> Result<DMatrix<f64>> {
    let da = lik.surrogate_scale(a.f.as_slice())?;
    let db = lik.surrogate_scale(b.f.as_slice())?;
    Ok(da.as_matrix() * prior_kernel(prior, &a.jac, &b.jac) * db.as_matrix())
}

/// `m̂(x) = g⁻¹(f(x; w*)) + D(x) J(x)(μ₀ − w*)`.
pub fn hat_mean(lik: &Likelihood, prior: &PriorSpec, w_star: &DVector<f64>, point: &LinearPoint) -> Result<DVector<f64>> {
    let d = lik.surrogate_scale(point.f.as_slice())?;
    Ok(lik.inv_link(point.f.as_slice())? + d.as_matrix() * (&point.jac * (&prior.mean - w_star)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Prior,
    Hat,
}

/// Dense `NK × NK` kernel over the training inputs.
#[derive(Debug, Clone)]
pub struct BlockKernelMatrix {
    pub n: usize,
    pub k: usize,
    pub matrix: SymMatrix,
}

impl BlockKernelMatrix {
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.matrix.as_matrix().view((i * self.k, j * self.k), (self.k, self.k)).into_owned()
    }

    /// Writes the dense matrix as CSV with header `c0, c1, …`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let m = self.matrix.as_matrix();
        let header: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect())
            .collect();
        export_csv(&header_refs, &rows, path)
    }
}

/// Surrogate scales `D_i` (`K × K`) per training point.
fn scales(model: &LinearizedModel) -> Result<Vec<SymMatrix>> {
    (0..model.n())
        .map(|i| model.lik.surrogate_scale(&model.f_row(i)))
        .collect()
}

pub fn assemble_train_kernel(model: &LinearizedModel, prior: &PriorSpec, which: KernelKind) -> Result<BlockKernelMatrix> {
    check_dim("prior dimension", model.p(), prior.dim())?;
    let design = match which {
        KernelKind::Prior => model.jac.clone(),
        KernelKind::Hat => blockdiag_times(&scales(model)?, &model.jac),
    };
    let s = prior.covariance_times(&design.transpose());
    let matrix = SymMatrix::new(mul_nn(&design, &s))?;
    Ok(BlockKernelMatrix {
        n: model.n(),
        k: model.k(),
        matrix,
    })
}

/// Function-space posterior at one test input.
#[derive(Debug, Clone)]
pub struct GpPosteriorAt {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
}

/// Laplace GP posterior of the linearized model, factorized once and
/// evaluated at any number of test inputs.
///
/// With `W = blockdiag(Λ_i)`, `B = I + W^{1/2} K W^{1/2}` and
/// `u = r + W (f − m)`:
/// mean `m* + K*n (u − W^{1/2} B⁻¹ W^{1/2} K u)` and covariance
/// `K** − K*n W^{1/2} B⁻¹ W^{1/2} Kn*`. `W` is never inverted.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    w_star: DVector<f64>,
    prior: PriorSpec,
    /// `Σ₀ Jᵀ`, `P × NK`.
    prior_cov_jt: DMatrix<f64>,
    w_half: Vec<SymMatrix>,
    b_factor: CholFactor,
    alpha: DVector<f64>,
}

pub fn gp_laplace_posterior(model: &LinearizedModel, prior: &PriorSpec) -> Result<GpPosterior> {
    check_dim("prior dimension", model.p(), prior.dim())?;
    let nk = model.n() * model.k();
    let prior_cov_jt = prior.covariance_times(&model.jac.transpose());
    let kmat = mul_nn(&model.jac, &prior_cov_jt);
    let w_half: Vec<SymMatrix> = model.lambdas.iter().map(psd_sqrt).collect();
    let whk = blockdiag_times(&w_half, &kmat);
    let mut b = blockdiag_times(&w_half, &whk.transpose());
    for i in 0..nk {
        b[(i, i)] += 1.0;
    }
    let b_factor = chol(&SymMatrix::new(b)?)?;
    let f_minus_m = &model.jac * (&model.w_star - &prior.mean);
    let wfm = blockdiag_times(&model.lambdas, &DMatrix::from_column_slice(nk, 1, f_minus_m.as_slice()));
    let u = model.residual_vec() + DVector::from_column_slice(wfm.as_slice());
    let ku = &kmat * &u;
    let whku = blockdiag_times(&w_half, &DMatrix::from_column_slice(nk, 1, ku.as_slice()));
    let sol = b_factor.solve(&whku)?;
    let correction = blockdiag_times(&w_half, &sol);
    let alpha = u - DVector::from_column_slice(correction.as_slice());
    Ok(GpPosterior {
        w_star: model.w_star.clone(),
        prior: prior.clone(),
        prior_cov_jt,
        w_half,
        b_factor,
        alpha,
    })
}

impl GpPosterior {
    pub fn at(&self, point: &LinearPoint) -> Result<GpPosteriorAt> {
        check_dim("test jacobian", self.w_star.len(), point.jac.ncols())?;
        let m_star = prior_mean(&self.prior, &self.w_star, point);
        let k_sn = &point.jac * &self.prior_cov_jt;
        let k_ss = prior_kernel(&self.prior, &point.jac, &point.jac);
        let mean = m_star + &k_sn * &self.alpha;
        let mut v = blockdiag_times(&self.w_half, &k_sn.transpose());
        self.b_factor.solve_lower_in_place(&mut v)?;
        let cov = SymMatrix::new(k_ss - v.transpose() * v)?;
        Ok(GpPosteriorAt { mean, cov })
    }
}

/// `log N(y | m̂, K̂ + C)` on the reduced label coordinates of the
/// surrogate regression, with `K̂` the hat kernel over the training inputs
/// and `C = blockdiag(C_i)` the surrogate noise.
pub fn gp_log_marglik(model: &LinearizedModel, prior: &PriorSpec) -> Result<f64> {
    check_dim("prior dimension", model.p(), prior.dim())?;
    let n = model.n();
    if n == 0 {
        return Ok(0.0);
    }
    let k = model.k();
    let kr = model.lik.surrogate_dim(k);
    let p = model.p();
    let mut design = DMatrix::zeros(n * kr, p);
    let mut noise = DMatrix::zeros(n * kr, n * kr);
    let mut resid = DVector::zeros(n * kr);
    let dmu = &prior.mean - &model.w_star;
    for i in 0..n {
        let s = model.lik.reduced_surrogate(&model.f_row(i))?;
        let dj = &s.scale * model.jac_i(i);
        let m_hat = &s.mean + &dj * &dmu;
        let y = model.lik.reduce_label(&model.y_row(i));
        design.rows_mut(i * kr, kr).copy_from(&dj);
        noise.view_mut((i * kr, i * kr), (kr, kr)).copy_from(s.noise.as_matrix());
        resid.rows_mut(i * kr, kr).copy_from(&(y - m_hat));
    }
    let khat = mul_nn(&design, &prior.covariance_times(&design.transpose()));
    let total = SymMatrix::new(khat + noise)?;
    let factor = chol(&total)?;
    let mut v = DMatrix::from_column_slice(n * kr, 1, resid.as_slice());
    factor.solve_lower_in_place(&mut v)?;
    let quad = v.norm_squared();
    Ok(-0.5 * quad - 0.5 * factor.logdet() - 0.5 * (n * kr) as f64 * (2.0 * PI).ln())
}
