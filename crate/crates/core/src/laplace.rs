//! Linearization of a network at `w*` and the Laplace-GGN Gaussian posterior,
//! computed either by assembling the GGN precision or by solving the
//! equivalent surrogate Bayesian linear regression exactly.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::likelihood::Likelihood;
use crate::linalg::{add_mul_tn, chol, pseudo_inverse, CholFactor, SymMatrix};
use crate::nn::{read_f64_blob, write_f64_blob, Network};
use crate::train::PriorSpec;

/// Network output and Jacobian at one input, evaluated at `w*`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPoint {
    pub f: DVector<f64>,
    /// `K × P`.
    pub jac: DMatrix<f64>,
}

impl LinearPoint {
    pub fn at(net: &dyn Network, w_star: &DVector<f64>, x: &[f64]) -> Result<Self> {
        let f = net.forward(w_star.as_slice(), x)?;
        let jac = net.jacobian(w_star.as_slice(), x)?;
        Ok(LinearPoint { f, jac })
    }

    /// Linearized outputs for every row of `xs`.
    pub fn batch(net: &dyn Network, w_star: &DVector<f64>, xs: &DMatrix<f64>) -> Result<Vec<Self>> {
        let f = net.forward_batch(w_star.as_slice(), xs)?;
        let jac = net.jacobian_batch(w_star.as_slice(), xs)?;
        let k = net.output_dim();
        Ok((0..xs.nrows())
            .map(|i| LinearPoint {
                f: f.row(i).transpose(),
                jac: jac.rows(i * k, k).into_owned(),
            })
            .collect())
    }

    /// `f(x; w*) + J(x) (w − w*)`.
    pub fn f_lin(&self, w_star: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.f + &self.jac * (w - w_star)
    }
}

/// The generalized linear model obtained by linearizing a network at `w*`.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    pub lik: Likelihood,
    pub w_star: DVector<f64>,
    /// Training labels, `N × K`.
    pub y: DMatrix<f64>,
    /// Network outputs at `w*`, `N × K`.
    pub f: DMatrix<f64>,
    /// Stacked Jacobians, `NK × P`, datapoint-major.
    pub jac: DMatrix<f64>,
    /// Residuals `∇_f log p(y_i | f_i)`, `N × K`.
    pub residuals: DMatrix<f64>,
    /// Likelihood Hessians `Λ_i`, each `K × K`.
    pub lambdas: Vec<SymMatrix>,
}

/// Builds the linearized model of `net` at `w_star` over `data`.
pub fn linearize(net: &dyn Network, w_star: &DVector<f64>, lik: &Likelihood, data: &Dataset) -> Result<LinearizedModel> {
    check_dim("linearize parameters", net.param_count(), w_star.len())?;
    if w_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("expansion point has non-finite entries".into()));
    }
    let f = net.forward_batch(w_star.as_slice(), &data.x)?;
    let jac = net.jacobian_batch(w_star.as_slice(), &data.x)?;
    LinearizedModel::from_parts(*lik, w_star.clone(), data.y.clone(), f, jac)
}

impl LinearizedModel {
    /// Builds a model from explicit outputs and Jacobians.
    pub fn from_parts(
        lik: Likelihood,
        w_star: DVector<f64>,
        y: DMatrix<f64>,
        f: DMatrix<f64>,
        jac: DMatrix<f64>,
    ) -> Result<Self> {
        let n = y.nrows();
        let k = f.ncols();
        check_dim("model outputs rows", n, f.nrows())?;
        check_dim("model label width", k, y.ncols())?;
        check_dim("model jacobian rows", n * k, jac.nrows())?;
        check_dim("model jacobian cols", w_star.len(), jac.ncols())?;
        let mut residuals = DMatrix::zeros(n, k);
        let mut lambdas = Vec::with_capacity(n);
        for i in 0..n {
            let fi: Vec<f64> = f.row(i).iter().cloned().collect();
            let yi: Vec<f64> = y.row(i).iter().cloned().collect();
            let r = lik.residual(&yi, &fi)?;
            residuals.row_mut(i).copy_from(&r.transpose());
            lambdas.push(lik.hessian_lambda(&fi)?);
        }
        Ok(LinearizedModel {
            lik,
            w_star,
            y,
            f,
            jac,
            residuals,
            lambdas,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn k(&self) -> usize {
        self.f.ncols()
    }

    pub fn p(&self) -> usize {
        self.w_star.len()
    }

    pub fn f_row(&self, i: usize) -> Vec<f64> {
        self.f.row(i).iter().cloned().collect()
    }

    pub fn y_row(&self, i: usize) -> Vec<f64> {
        self.y.row(i).iter().cloned().collect()
    }

    /// `J_i`, `K × P`.
    pub fn jac_i(&self, i: usize) -> DMatrix<f64> {
        let k = self.k();
        self.jac.rows(i * k, k).into_owned()
    }

    /// `f(x_i; w*) + J_i (w − w*)`.
    pub fn f_lin(&self, i: usize, w: &DVector<f64>) -> DVector<f64> {
        self.f.row(i).transpose() + self.jac_i(i) * (w - &self.w_star)
    }

    /// Residuals stacked into a length-NK vector.
    pub fn residual_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.n() * self.k(), self.residuals.transpose().iter().cloned())
    }

    /// `W J`, with `W` the block-diagonal matrix of the `Λ_i`.
    pub fn w_times_jac(&self) -> DMatrix<f64> {
        blockdiag_times(&self.lambdas, &self.jac)
    }
}

/// Applies a block-diagonal matrix with `K × K` blocks to a stacked `NK × m` matrix.
pub fn blockdiag_times(blocks: &[SymMatrix], m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = blocks.first().map(|b| b.dim()).unwrap_or(1);
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    if k == 1 {
        for (i, b) in blocks.iter().enumerate() {
            let s = b.as_matrix()[(0, 0)];
            out.row_mut(i).copy_from(&(m.row(i) * s));
        }
    } else {
        for (i, b) in blocks.iter().enumerate() {
            let rows = m.rows(i * k, k);
            out.rows_mut(i * k, k).copy_from(&(b.as_matrix() * rows));
        }
    }
    out
}

/// `Σ_i J_iᵀ Λ_i J_i`.
pub fn ggn_matrix(model: &LinearizedModel) -> SymMatrix {
    let p = model.p();
    let mut g = DMatrix::zeros(p, p);
    if model.n() > 0 {
        add_mul_tn(&mut g, 1.0, &model.jac, &model.w_times_jac());
    }
    SymMatrix::new(g).expect("square")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    LaplaceGgn,
    BlrExact,
    NgviStep,
    Prior,
}

/// Gaussian over parameters, stored as mean plus precision and its Cholesky
/// factor `Σ⁻¹ = L Lᵀ`. A point mass (`Σ = 0`) is also representable.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub provenance: Provenance,
    form: Form,
    cov: OnceLock<SymMatrix>,
}

#[derive(Debug, Clone)]
enum Form {
    Precision { precision: SymMatrix, factor: CholFactor },
    PointMass,
}

impl GaussianPosterior {
    pub fn from_precision(mean: DVector<f64>, precision: SymMatrix, provenance: Provenance) -> Result<Self> {
        let factor = chol(&precision)?;
        Self::from_factored(mean, precision, factor, provenance)
    }

    /// Like [`GaussianPosterior::from_precision`] with an existing Cholesky
    /// factor of `precision`.
    pub(crate) fn from_factored(
        mean: DVector<f64>,
        precision: SymMatrix,
        factor: CholFactor,
        provenance: Provenance,
    ) -> Result<Self> {
        check_dim("posterior precision", mean.len(), precision.dim())?;
        check_dim("precision factor", precision.dim(), factor.dim())?;
        Ok(GaussianPosterior {
            mean,
            provenance,
            form: Form::Precision { precision, factor },
            cov: OnceLock::new(),
        })
    }

    pub fn from_covariance(mean: DVector<f64>, cov: &SymMatrix, provenance: Provenance) -> Result<Self> {
        check_dim("posterior covariance", mean.len(), cov.dim())?;
        let precision = chol(cov)?.inverse();
        let mut post = Self::from_precision(mean, precision, provenance)?;
        let _ = post.cov.set(cov.clone());
        post.provenance = provenance;
        Ok(post)
    }

    /// Degenerate distribution with all mass at `mean`.
    pub fn point_mass(mean: DVector<f64>, provenance: Provenance) -> Self {
        let p = mean.len();
        let cov = OnceLock::new();
        let _ = cov.set(SymMatrix::zeros(p));
        GaussianPosterior {
            mean,
            provenance,
            form: Form::PointMass,
            cov,
        }
    }

    pub fn from_prior(prior: &PriorSpec) -> Result<Self> {
        Self::from_precision(prior.mean.clone(), prior.precision_matrix(), Provenance::Prior)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self.form, Form::PointMass)
    }

    pub fn precision(&self) -> Option<&SymMatrix> {
        match &self.form {
            Form::Precision { precision, .. } => Some(precision),
            Form::PointMass => None,
        }
    }

    pub fn precision_factor(&self) -> Option<&CholFactor> {
        match &self.form {
            Form::Precision { factor, .. } => Some(factor),
            Form::PointMass => None,
        }
    }

    pub fn jitter_used(&self) -> f64 {
        self.precision_factor().map(|f| f.jitter_used()).unwrap_or(0.0)
    }

    /// `Σ`, formed on first use from the precision factor.
    pub fn covariance(&self) -> &SymMatrix {
        self.cov.get_or_init(|| match &self.form {
            Form::Precision { factor, .. } => factor.inverse(),
            Form::PointMass => SymMatrix::zeros(self.dim()),
        })
    }

    /// `log det Σ`; `−∞` for a point mass.
    pub fn logdet_cov(&self) -> f64 {
        match &self.form {
            Form::Precision { factor, .. } => -factor.logdet(),
            Form::PointMass => f64::NEG_INFINITY,
        }
    }

    /// Maps standard-normal columns `z` to draws `μ + L⁻ᵀ z`.
    pub fn transform_standard(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("standard normal rows", self.dim(), z.nrows())?;
        let mut out = match &self.form {
            Form::Precision { factor, .. } => {
                let mut v = z.clone();
                factor.solve_lower_transpose_in_place(&mut v)?;
                v
            }
            Form::PointMass => DMatrix::zeros(z.nrows(), z.ncols()),
        };
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        Ok(out)
    }

    /// `count` draws as columns of a `P × count` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let z = DMatrix::from_fn(self.dim(), count, |_, _| rng.sample::<f64, _>(StandardNormal));
        self.transform_standard(&z)
    }

    /// `A Σ Aᵀ` for an `m × P` matrix `A`, computed as `(L⁻¹Aᵀ)ᵀ(L⁻¹Aᵀ)`.
    pub fn project_cov(&self, a: &DMatrix<f64>) -> Result<SymMatrix> {
        check_dim("projection cols", self.dim(), a.ncols())?;
        match &self.form {
            Form::Precision { factor, .. } => {
                let mut v = a.transpose();
                factor.solve_lower_in_place(&mut v)?;
                SymMatrix::new(v.transpose() * v)
            }
            Form::PointMass => Ok(SymMatrix::zeros(a.nrows())),
        }
    }

    /// Writes `<stem>.json` (header), `<stem>.mean.bin` and, unless the
    /// posterior is a point mass, `<stem>.factor.bin`: the lower triangle of
    /// the precision factor, row by row, as little-endian f64.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = PosteriorHeader {
            provenance: self.provenance,
            p: self.dim(),
            jitter_used: self.jitter_used(),
            factor: if self.is_point_mass() { "none".into() } else { "precision_lower".into() },
        };
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        write_f64_blob(&stem.with_extension("mean.bin"), self.mean.as_slice())?;
        if let Some(f) = self.precision_factor() {
            let l = f.l();
            let p = self.dim();
            let mut packed = Vec::with_capacity(p * (p + 1) / 2);
            for i in 0..p {
                for j in 0..=i {
                    packed.push(l[(i, j)]);
                }
            }
            write_f64_blob(&stem.with_extension("factor.bin"), &packed)?;
        }
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: PosteriorHeader = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        let mean = DVector::from_vec(read_f64_blob(&stem.with_extension("mean.bin"))?);
        check_dim("stored posterior mean", header.p, mean.len())?;
        match header.factor.as_str() {
            "none" => Ok(Self::point_mass(mean, header.provenance)),
            "precision_lower" => {
                let packed = read_f64_blob(&stem.with_extension("factor.bin"))?;
                let p = header.p;
                check_dim("stored factor length", p * (p + 1) / 2, packed.len())?;
                let mut l = DMatrix::zeros(p, p);
                let mut it = packed.into_iter();
                for i in 0..p {
                    for j in 0..=i {
                        l[(i, j)] = it.next().expect("length checked");
                    }
                }
                let factor = CholFactor::from_lower(l, header.jitter_used)?;
                let precision = SymMatrix::new(factor.reconstruct())?;
                Ok(GaussianPosterior {
                    mean,
                    provenance: header.provenance,
                    form: Form::Precision { precision, factor },
                    cov: OnceLock::new(),
                })
            }
            other => Err(Error::Parse {
                line: 0,
                message: format!("unknown posterior factor kind '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PosteriorHeader {
    provenance: Provenance,
    p: usize,
    jitter_used: f64,
    factor: String,
}

fn check_prior(model: &LinearizedModel, prior: &PriorSpec) -> Result<()> {
    check_dim("prior dimension", model.p(), prior.dim())
}

/// Laplace-GGN posterior: `Σ⁻¹ = Σ₀⁻¹ + G`,
/// `μ = Σ (Σ₀⁻¹μ₀ + Σ_i J_iᵀ r_i + G w*)` with `G` the GGN.
pub fn laplace_ggn_posterior(model: &LinearizedModel, prior: &PriorSpec) -> Result<GaussianPosterior> {
    check_prior(model, prior)?;
    let ggn = ggn_matrix(model);
    let mut precision = ggn.as_matrix() + prior.precision_matrix().as_matrix();
    crate::linalg::symmetrize_in_place(&mut precision);
    let mut rhs = prior.precision_times(&prior.mean) + ggn.as_matrix() * &model.w_star;
    if model.n() > 0 {
        rhs += model.jac.transpose() * model.residual_vec();
    }
    let precision = SymMatrix::new(precision)?;
    let factor = chol(&precision)?;
    let mean = factor.solve_vec(&rhs)?;
    Ok(GaussianPosterior {
        mean,
        provenance: Provenance::LaplaceGgn,
        form: Form::Precision { precision, factor },
        cov: OnceLock::new(),
    })
}

/// Surrogate linear-regression data of the linearized model. For datum `i`
/// the observation model is `y_i = b_i + A_i w + ε_i` with `ε_i ~ N(0, C_i)`,
/// `A_i = D_i J_i` and `b_i = g⁻¹(f_i) − D_i J_i w*`.
#[derive(Debug, Clone)]
pub struct SurrogateRegression {
    /// Stacked `A_i`, `NK × P`.
    pub design: DMatrix<f64>,
    /// Stacked offsets `b_i`.
    pub offset: DVector<f64>,
    /// Stacked targets `y_i`.
    pub target: DVector<f64>,
    pub noise: Vec<SymMatrix>,
}

/// Builds the full-coordinate surrogate regression (`D_i = Λ_i`, `C_i = Λ_i`
/// for unit-dispersion families; `D_i = I`, `C_i = σ²I` for the Gaussian).
pub fn surrogate_regression(model: &LinearizedModel) -> Result<SurrogateRegression> {
    let (n, k, p) = (model.n(), model.k(), model.p());
    let mut design = DMatrix::zeros(n * k, p);
    let mut offset = DVector::zeros(n * k);
    let mut target = DVector::zeros(n * k);
    let mut noise = Vec::with_capacity(n);
    for i in 0..n {
        let fi = model.f_row(i);
        let d = model.lik.surrogate_scale(&fi)?;
        let a = d.as_matrix() * model.jac_i(i);
        let b = model.lik.inv_link(&fi)? - &a * &model.w_star;
        design.rows_mut(i * k, k).copy_from(&a);
        offset.rows_mut(i * k, k).copy_from(&b);
        target.rows_mut(i * k, k).copy_from(&DVector::from_vec(model.y_row(i)));
        noise.push(model.lik.surrogate_noise(&fi)?);
    }
    Ok(SurrogateRegression {
        design,
        offset,
        target,
        noise,
    })
}

/// Exact conjugate posterior of the surrogate linear regression, using the
/// pseudo-inverse of each noise block.
pub fn blr_exact_posterior(model: &LinearizedModel, prior: &PriorSpec) -> Result<GaussianPosterior> {
    check_prior(model, prior)?;
    let s = surrogate_regression(model)?;
    let pinv: Vec<SymMatrix> = s.noise.iter().map(pseudo_inverse).collect();
    let mut precision = prior.precision_matrix().into_inner();
    let mut rhs = prior.precision_times(&prior.mean);
    if model.n() > 0 {
        let weighted = blockdiag_times(&pinv, &s.design);
        add_mul_tn(&mut precision, 1.0, &s.design, &weighted);
        let resid = &s.target - &s.offset;
        rhs += weighted.transpose() * resid;
    }
    let precision = SymMatrix::new(precision)?;
    let factor = chol(&precision)?;
    let mean = factor.solve_vec(&rhs)?;
    Ok(GaussianPosterior {
        mean,
        provenance: Provenance::BlrExact,
        form: Form::Precision { precision, factor },
        cov: OnceLock::new(),
    })
}

/// Relative Frobenius difference `‖A − B‖ / max(‖B‖, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Computes `Σ J_iᵀ Λ_i J_i` through one rank-K update per datum, as an
/// independent check of [`ggn_matrix`].
pub fn ggn_by_datum(model: &LinearizedModel) -> DMatrix<f64> {
    let p = model.p();
    let mut g = DMatrix::zeros(p, p);
    for i in 0..model.n() {
        let j = model.jac_i(i);
        g += j.transpose() * model.lambdas[i].as_matrix() * &j;
    }
    g
}
