//! Natural-gradient Gaussian variational inference with full covariance, in
//! three variants that differ in where the GGN is formed: after sampling
//! (VOGGN), before sampling (LGVA) or at the mean only (OGGN). Each step is
//! also available as an exact Bayesian linear regression solve.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{export_csv, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::laplace::{blockdiag_times, GaussianPosterior, Provenance};
use crate::likelihood::Likelihood;
use crate::linalg::{add_mul_tn, chol, symmetrize_in_place, SymMatrix};
use crate::nn::Network;
use crate::train::{residual_matrix, sum_log_lik, PriorCov, PriorSpec};

/// `η1 = Σ⁻¹μ`, `η2 = −½Σ⁻¹`.
#[derive(Debug, Clone)]
pub struct NaturalParams {
    pub eta1: DVector<f64>,
    pub eta2: SymMatrix,
}

pub fn to_natural(mean: &DVector<f64>, cov: &SymMatrix) -> Result<NaturalParams> {
    check_dim("mean/covariance", cov.dim(), mean.len())?;
    let precision = chol(cov)?.inverse();
    Ok(natural_from_precision(mean, &precision))
}

pub fn natural_from_precision(mean: &DVector<f64>, precision: &SymMatrix) -> NaturalParams {
    NaturalParams {
        eta1: precision.as_matrix() * mean,
        eta2: SymMatrix::from_symmetric(precision.as_matrix() * -0.5),
    }
}

/// Returns `(μ, Σ)`; fails unless `−2η2` is positive definite.
pub fn from_natural(eta: &NaturalParams) -> Result<(DVector<f64>, SymMatrix)> {
    let post = posterior_from_natural(eta, Provenance::NgviStep)?;
    Ok((post.mean.clone(), post.covariance().clone()))
}

pub fn posterior_from_natural(eta: &NaturalParams, provenance: Provenance) -> Result<GaussianPosterior> {
    check_dim("natural parameters", eta.eta2.dim(), eta.eta1.len())?;
    let precision = SymMatrix::new(eta.eta2.as_matrix() * -2.0)?;
    let factor = chol(&precision)?;
    let mean = factor.solve_vec(&eta.eta1)?;
    GaussianPosterior::from_factored(mean, precision, factor, provenance)
}

impl NaturalParams {
    fn norm(&self) -> f64 {
        (self.eta1.norm_squared() + self.eta2.as_matrix().norm_squared()).sqrt()
    }

    fn distance(&self, other: &NaturalParams) -> f64 {
        ((&self.eta1 - &other.eta1).norm_squared() + (self.eta2.as_matrix() - other.eta2.as_matrix()).norm_squared())
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Voggn,
    Lgva,
    Oggn,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "voggn" => Ok(Estimator::Voggn),
            "lgva" => Ok(Estimator::Lgva),
            "oggn" => Ok(Estimator::Oggn),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NgviConfig {
    pub estimator: Estimator,
    /// Step size `γ ∈ (0, 1]`; 0 is accepted and leaves the state unchanged.
    pub gamma: f64,
    pub samples: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once `‖Δη‖ / ‖η‖` falls below this.
    pub tol: f64,
    /// Initial covariance `init_var · I`.
    pub init_var: f64,
    /// Pair every draw `z` with `−z`; needs an even sample count.
    pub antithetic: bool,
    /// Evaluate the ELBO and the smallest covariance eigenvalue every
    /// `trace_every` iterations; other trace rows carry `NaN` there.
    pub trace_every: usize,
}

impl Default for NgviConfig {
    fn default() -> Self {
        NgviConfig {
            estimator: Estimator::Voggn,
            gamma: 0.999,
            samples: 1,
            seed: 0,
            max_iters: 5000,
            tol: 1e-6,
            init_var: 0.1,
            antithetic: false,
            trace_every: 1,
        }
    }
}

impl NgviConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("ngvi.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.samples == 0 {
            return Err(Error::Config("ngvi.samples must be at least 1".into()));
        }
        if self.antithetic && !self.samples.is_multiple_of(2) {
            return Err(Error::Config("ngvi.antithetic needs an even ngvi.samples".into()));
        }
        if !(self.init_var > 0.0 && self.init_var.is_finite()) {
            return Err(Error::Config("ngvi.init_var must be positive".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("ngvi.trace_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VariationalState {
    pub iteration: usize,
    pub q: GaussianPosterior,
    pub estimator: Estimator,
}

impl VariationalState {
    pub fn new(mean: DVector<f64>, precision: SymMatrix, estimator: Estimator) -> Result<Self> {
        Ok(VariationalState {
            iteration: 0,
            q: GaussianPosterior::from_precision(mean, precision, Provenance::NgviStep)?,
            estimator,
        })
    }

    pub fn precision(&self) -> &SymMatrix {
        self.q.precision().expect("variational state has a precision")
    }

    pub fn natural(&self) -> NaturalParams {
        natural_from_precision(&self.q.mean, self.precision())
    }
}

/// Standard-normal draws for iteration `t`: column `s` comes from its own
/// ChaCha stream keyed by `(seed, t, s)`, so any draw can be regenerated
/// independently of the others.
pub fn standard_draws(seed: u64, iteration: usize, p: usize, count: usize, antithetic: bool) -> DMatrix<f64> {
    let base = if antithetic { count / 2 } else { count };
    let mut z = DMatrix::<f64>::zeros(p, count);
    for s in 0..base {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(iteration as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(s as u64);
        for i in 0..p {
            z[(i, s)] = StandardNormal.sample(&mut rng);
        }
        if antithetic {
            for i in 0..p {
                z[(i, s + base)] = -z[(i, s)];
            }
        }
    }
    z
}

/// Expansion point of one sample: outputs `N × K` and Jacobian `NK × P`.
#[derive(Debug, Clone)]
pub struct Expansion {
    pub f: DMatrix<f64>,
    pub jac: DMatrix<f64>,
}

/// Outputs and Jacobians at which each estimator evaluates the likelihood
/// terms for the given weight samples (`P × S`).
///
/// VOGGN: network at `w_s`. LGVA: Jacobian at `μ` and the linearized
/// output at `w_s`. OGGN: the network at `μ`, once.
pub fn expansions(
    estimator: Estimator,
    net: &dyn Network,
    mean: &DVector<f64>,
    samples: &DMatrix<f64>,
    xs: &DMatrix<f64>,
) -> Result<Vec<Expansion>> {
    check_dim("sample rows", mean.len(), samples.nrows())?;
    match estimator {
        Estimator::Voggn => (0..samples.ncols())
            .map(|s| {
                let w = samples.column(s);
                Ok(Expansion {
                    f: net.forward_batch(w.as_slice(), xs)?,
                    jac: net.jacobian_batch(w.as_slice(), xs)?,
                })
            })
            .collect(),
        Estimator::Lgva => {
            let f_mu = net.forward_batch(mean.as_slice(), xs)?;
            let jac = net.jacobian_batch(mean.as_slice(), xs)?;
            let (n, k) = (f_mu.nrows(), f_mu.ncols());
            (0..samples.ncols())
                .map(|s| {
                    let df = &jac * (samples.column(s) - mean);
                    let f = DMatrix::from_fn(n, k, |i, j| f_mu[(i, j)] + df[i * k + j]);
                    Ok(Expansion { f, jac: jac.clone() })
                })
                .collect()
        }
        Estimator::Oggn => Ok(vec![Expansion {
            f: net.forward_batch(mean.as_slice(), xs)?,
            jac: net.jacobian_batch(mean.as_slice(), xs)?,
        }]),
    }
}

/// Estimates of `∇_μ E_q[log p(D|w)]` and `∇_Σ E_q[log p(D|w)]`.
#[derive(Debug, Clone)]
pub struct Terms {
    pub g_mu: DVector<f64>,
    /// `−(1/2S) Σ_s Σ_i Ĵᵀ Λ Ĵ`, negative semidefinite.
    pub g_sigma: SymMatrix,
}

fn lambda_blocks(lik: &Likelihood, f: &DMatrix<f64>) -> Result<Vec<SymMatrix>> {
    (0..f.nrows())
        .map(|i| {
            let row: Vec<f64> = f.row(i).iter().copied().collect();
            lik.hessian_lambda(&row)
        })
        .collect()
}

pub fn terms_from_expansions(lik: &Likelihood, data: &Dataset, exps: &[Expansion], p: usize) -> Result<Terms> {
    let s = exps.len() as f64;
    let mut g_mu = DVector::zeros(p);
    let mut ggn = DMatrix::zeros(p, p);
    for e in exps {
        check_dim("expansion jacobian cols", p, e.jac.ncols())?;
        let r = residual_matrix(lik, &e.f, &data.y)?;
        let r = DVector::from_iterator(r.len(), r.transpose().iter().copied());
        g_mu += e.jac.transpose() * r;
        let wj = blockdiag_times(&lambda_blocks(lik, &e.f)?, &e.jac);
        add_mul_tn(&mut ggn, 1.0, &e.jac, &wj);
    }
    g_mu /= s;
    ggn *= -0.5 / s;
    symmetrize_in_place(&mut ggn);
    Ok(Terms {
        g_mu,
        g_sigma: SymMatrix::from_symmetric(ggn),
    })
}

/// Estimator terms for `state` with frozen weight samples (`P × S`).
pub fn estimate_terms(
    state: &VariationalState,
    net: &dyn Network,
    lik: &Likelihood,
    data: &Dataset,
    samples: &DMatrix<f64>,
) -> Result<Terms> {
    let exps = expansions(state.estimator, net, &state.q.mean, samples, &data.x)?;
    terms_from_expansions(lik, data, &exps, net.param_count())
}

/// Natural-gradient update:
/// `Σ⁻¹' = (1−γ)Σ⁻¹ + γΣ₀⁻¹ − 2γ G_Σ`,
/// `Σ⁻¹'μ' = (1−γ)Σ⁻¹μ + γΣ₀⁻¹μ₀ + γ(G_μ − 2 G_Σ μ)`.
pub fn ngvi_step(state: &VariationalState, prior: &PriorSpec, terms: &Terms, gamma: f64) -> Result<VariationalState> {
    check_dim("prior dimension", state.q.dim(), prior.dim())?;
    let p_t = state.precision().as_matrix();
    let mu = &state.q.mean;
    let mut precision = p_t * (1.0 - gamma) + prior.precision_matrix().as_matrix() * gamma
        - terms.g_sigma.as_matrix() * (2.0 * gamma);
    symmetrize_in_place(&mut precision);
    let eta1 = p_t * mu * (1.0 - gamma)
        + prior.precision_times(&prior.mean) * gamma
        + (&terms.g_mu - terms.g_sigma.as_matrix() * mu * 2.0) * gamma;
    let eta = NaturalParams {
        eta1,
        eta2: SymMatrix::from_symmetric(precision * -0.5),
    };
    Ok(VariationalState {
        iteration: state.iteration + 1,
        q: posterior_from_natural(&eta, Provenance::NgviStep)?,
        estimator: state.estimator,
    })
}

/// Exact posterior of a linear regression whose prior is the intermediary
/// `η = (1−γ)η_t + γη₀` and whose data are the `N·S` surrogate observations
/// `y_i ~ N(g⁻¹(f̂_s,i) + D_s,i Ĵ_s,i (w − μ_t), (S/γ) C_s,i)`, with one
/// expansion per sample (OGGN: a single expansion).
pub fn augmented_blr_oracle(
    state: &VariationalState,
    net: &dyn Network,
    lik: &Likelihood,
    data: &Dataset,
    prior: &PriorSpec,
    samples: &DMatrix<f64>,
    gamma: f64,
) -> Result<GaussianPosterior> {
    let exps = expansions(state.estimator, net, &state.q.mean, samples, &data.x)?;
    augmented_blr_from_expansions(state, lik, data, prior, &exps, gamma)
}

pub fn augmented_blr_from_expansions(
    state: &VariationalState,
    lik: &Likelihood,
    data: &Dataset,
    prior: &PriorSpec,
    exps: &[Expansion],
    gamma: f64,
) -> Result<GaussianPosterior> {
    let p = state.q.dim();
    let mu = &state.q.mean;
    let p_t = state.precision().as_matrix();
    let mut precision = p_t * (1.0 - gamma) + prior.precision_matrix().as_matrix() * gamma;
    let mut rhs = p_t * mu * (1.0 - gamma) + prior.precision_times(&prior.mean) * gamma;
    let weight = gamma / exps.len() as f64;
    let k = lik.output_dim().unwrap_or_else(|| data.y.ncols());
    for e in exps {
        for i in 0..data.len() {
            let f: Vec<f64> = e.f.row(i).iter().copied().collect();
            let s = lik.reduced_surrogate(&f)?;
            let a = &s.scale * e.jac.rows(i * k, k);
            let y = lik.reduce_label(&data.y_row(i));
            let c_inv = chol(&s.noise)?.inverse();
            let target = y - &s.mean + &a * mu;
            let atc = a.transpose() * c_inv.as_matrix();
            precision += &atc * &a * weight;
            rhs += &atc * target * weight;
        }
    }
    symmetrize_in_place(&mut precision);
    let precision = SymMatrix::new(precision)?;
    let mean = chol(&precision)?.solve_vec(&rhs)?;
    check_dim("oracle mean", p, mean.len())?;
    GaussianPosterior::from_precision(mean, precision, Provenance::NgviStep)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NgviTraceEntry {
    pub iteration: usize,
    pub elbo: f64,
    pub grad_mu_norm: f64,
    pub grad_sigma_norm: f64,
    pub min_eig_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct NgviResult {
    pub state: VariationalState,
    pub trace: Vec<NgviTraceEntry>,
    pub converged: bool,
}

impl NgviResult {
    pub fn export_trace_csv(&self, path: &Path) -> Result<()> {
        let header = ["iteration", "elbo_estimate", "grad_mu_norm", "grad_sigma_norm", "min_eig_sigma"];
        let rows: Vec<Vec<String>> = self
            .trace
            .iter()
            .map(|t| {
                vec![
                    t.iteration.to_string(),
                    format!("{}", t.elbo),
                    format!("{}", t.grad_mu_norm),
                    format!("{}", t.grad_sigma_norm),
                    format!("{}", t.min_eig_sigma),
                ]
            })
            .collect();
        export_csv(&header, &rows, path)
    }
}

/// `KL(q ‖ p₀)` in closed form.
pub fn kl_to_prior(q: &GaussianPosterior, prior: &PriorSpec) -> Result<f64> {
    check_dim("prior dimension", q.dim(), prior.dim())?;
    let factor = q
        .precision_factor()
        .ok_or_else(|| Error::Domain("KL needs a non-degenerate distribution".into()))?;
    let p = q.dim();
    let trace = match &prior.cov {
        PriorCov::Isotropic { delta } => delta * factor.inv_quad_trace(&DMatrix::identity(p, p))?,
        PriorCov::Diagonal { variances } => {
            factor.inv_quad_trace(&DMatrix::from_diagonal(&variances.map(|v| 1.0 / v.sqrt())))?
        }
        PriorCov::Full { precision, .. } => precision.as_matrix().component_mul(q.covariance().as_matrix()).sum(),
    };
    Ok(0.5 * (trace + prior.mahalanobis(&q.mean) - p as f64 + prior.logdet_cov() - q.logdet_cov()))
}

/// Largest eigenvalue of an SPD matrix by power iteration.
fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..500 {
        let w = a * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lam).abs() <= 1e-10 * next.abs() {
            return next;
        }
        lam = next;
    }
    lam
}

/// Monte Carlo ELBO `(1/S) Σ_s log p(D | w_s) − KL(q ‖ p₀)`.
fn elbo_estimate(
    net: &dyn Network,
    lik: &Likelihood,
    data: &Dataset,
    prior: &PriorSpec,
    q: &GaussianPosterior,
    samples: &DMatrix<f64>,
) -> Result<f64> {
    let mut ll = 0.0;
    for s in 0..samples.ncols() {
        let f = net.forward_batch(samples.column(s).as_slice(), &data.x)?;
        ll += sum_log_lik(lik, &f, &data.y)?;
    }
    Ok(ll / samples.ncols() as f64 - kl_to_prior(q, prior)?)
}

/// Runs NGVI from `N(init, init_var·I)` (or from the network's seeded
/// initialization when `init` is `None`) until the relative change of the
/// natural parameters drops below `tol` or `max_iters` is reached.
pub fn run_ngvi(
    net: &dyn Network,
    lik: &Likelihood,
    prior: &PriorSpec,
    data: &Dataset,
    config: &NgviConfig,
    init: Option<&DVector<f64>>,
) -> Result<NgviResult> {
    config.validate()?;
    lik.validate()?;
    let p = net.param_count();
    check_dim("prior dimension", p, prior.dim())?;
    let mean = match init {
        Some(w) => {
            check_dim("initial mean", p, w.len())?;
            w.clone()
        }
        None => net.init_params(&mut ChaCha8Rng::seed_from_u64(config.seed)),
    };
    let mut state = VariationalState::new(
        mean,
        SymMatrix::from_diagonal(&vec![1.0 / config.init_var; p]),
        config.estimator,
    )?;
    let mut trace = Vec::new();
    let mut converged = false;
    let diverged = |step: usize, reason: String, trace: &[NgviTraceEntry]| Error::Diverged {
        step,
        reason,
        trace: trace.iter().map(|t| t.elbo).collect(),
    };
    for t in 0..config.max_iters {
        let z = standard_draws(config.seed, t, p, config.samples, config.antithetic);
        let samples = state.q.transform_standard(&z)?;
        let terms = estimate_terms(&state, net, lik, data, &samples)?;
        let record = t % config.trace_every == 0 || t + 1 == config.max_iters;
        let (elbo, min_eig) = if record {
            let elbo = elbo_estimate(net, lik, data, prior, &state.q, &samples)?;
            (elbo, 1.0 / max_eigenvalue(state.precision().as_matrix()))
        } else {
            (f64::NAN, f64::NAN)
        };
        let entry = NgviTraceEntry {
            iteration: t,
            elbo,
            grad_mu_norm: terms.g_mu.norm(),
            grad_sigma_norm: terms.g_sigma.as_matrix().norm(),
            min_eig_sigma: min_eig,
        };
        trace.push(entry);
        if !entry.grad_mu_norm.is_finite() || !entry.grad_sigma_norm.is_finite() || (record && !elbo.is_finite()) {
            return Err(diverged(t, "non-finite estimator terms or ELBO".into(), &trace));
        }
        let before = state.natural();
        let next = ngvi_step(&state, prior, &terms, config.gamma).map_err(|e| diverged(t, e.to_string(), &trace))?;
        if !next.q.mean.iter().all(|v| v.is_finite()) {
            return Err(diverged(t, "non-finite mean".into(), &trace));
        }
        let change = next.natural().distance(&before) / before.norm().max(f64::MIN_POSITIVE);
        state = next;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(NgviResult {
        state,
        trace,
        converged,
    })
}
