//! Posterior predictive distributions for a Gaussian weight posterior:
//! network sampling, linearized-model sampling and the closed-form
//! surrogate-regression predictive.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::export_csv;
use crate::error::{check_dim, Error, Result};
use crate::gp::GpPosteriorAt;
use crate::laplace::{GaussianPosterior, LinearPoint};
use crate::likelihood::Likelihood;
use crate::linalg::{psd_sqrt, sample_mvn, SymMatrix};
use crate::nn::Network;

pub const DEFAULT_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveMethod {
    NnSampling,
    GlmSampling,
    BlrClosed,
}

impl PredictiveMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            PredictiveMethod::NnSampling => "nn",
            PredictiveMethod::GlmSampling => "glm",
            PredictiveMethod::BlrClosed => "blr",
        }
    }
}

impl std::str::FromStr for PredictiveMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" | "nn_sampling" => Ok(PredictiveMethod::NnSampling),
            "glm" | "glm_sampling" => Ok(PredictiveMethod::GlmSampling),
            "blr" | "blr_closed" => Ok(PredictiveMethod::BlrClosed),
            other => Err(Error::Config(format!("unknown predictive method `{other}`"))),
        }
    }
}

/// Predictive summary at one test input.
///
/// `mean` is the predictive mean of `y`: the class-probability vector for
/// Bernoulli (`[p(y=1)]`) and Categorical, the rate for Poisson.
///
/// `cov` is the total predictive covariance of `y` for Gaussian and
/// Poisson. For the classification families under sampling it is the
/// spread of the class probabilities across weight samples. For the
/// closed form it is always `D J Σ Jᵀ D + C`, the covariance of the
/// surrogate Gaussian.
#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub x: Vec<f64>,
    pub method: PredictiveMethod,
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
    /// For the closed form with a classification likelihood, the mean
    /// clipped to `[0, 1]`; the raw `mean` may leave that interval.
    pub clipped: Option<DVector<f64>>,
    /// Number of weight samples, 0 for the closed form.
    pub sample_count: usize,
    /// Latent network outputs per sample (`S × K`) when requested.
    pub samples: Option<DMatrix<f64>>,
}

impl PredictiveSummary {
    /// Probability of the positive class for Bernoulli models, using the
    /// clipped value for the closed form.
    pub fn probability(&self) -> f64 {
        self.clipped.as_ref().unwrap_or(&self.mean)[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingOptions {
    pub samples: usize,
    pub retain_samples: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            samples: DEFAULT_SAMPLES,
            retain_samples: false,
        }
    }
}

impl SamplingOptions {
    pub fn with_samples(samples: usize) -> Self {
        SamplingOptions {
            samples,
            retain_samples: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        Ok(())
    }
}

fn is_classification(lik: &Likelihood) -> bool {
    matches!(lik, Likelihood::Bernoulli | Likelihood::Categorical { .. })
}

/// Reduces latent samples (`S × K`) into predictive mean and covariance.
fn summarize_latent(lik: &Likelihood, latent: &DMatrix<f64>) -> Result<(DVector<f64>, SymMatrix)> {
    let s = latent.nrows();
    let k = latent.ncols();
    let mut means = DMatrix::zeros(s, k);
    for i in 0..s {
        let f: Vec<f64> = latent.row(i).iter().copied().collect();
        means.set_row(i, &lik.inv_link(&f)?.transpose());
    }
    let mean: DVector<f64> = means.row_mean().transpose();
    let mut between = DMatrix::zeros(k, k);
    for i in 0..s {
        let d = means.row(i).transpose() - &mean;
        between += &d * d.transpose();
    }
    between /= s as f64;
    let within = match lik {
        Likelihood::Gaussian { sigma2 } => DMatrix::from_diagonal_element(k, k, *sigma2),
        Likelihood::Poisson => DMatrix::from_diagonal(&mean),
        _ => DMatrix::zeros(k, k),
    };
    Ok((mean, SymMatrix::new(between + within)?))
}

fn summary(
    lik: &Likelihood,
    x: Vec<f64>,
    method: PredictiveMethod,
    latent: DMatrix<f64>,
    retain: bool,
) -> Result<PredictiveSummary> {
    let (mean, cov) = summarize_latent(lik, &latent)?;
    Ok(PredictiveSummary {
        x,
        method,
        mean,
        cov,
        clipped: None,
        sample_count: latent.nrows(),
        samples: retain.then_some(latent),
    })
}

/// Averages the likelihood over network outputs `f(x*; w_s)`, `w_s ~ q`, for
/// every row of `xs`. All test inputs share the same weight draws.
pub fn predict_nn_sampling<R: Rng + ?Sized>(
    net: &dyn Network,
    lik: &Likelihood,
    posterior: &GaussianPosterior,
    xs: &DMatrix<f64>,
    opts: SamplingOptions,
    rng: &mut R,
) -> Result<Vec<PredictiveSummary>> {
    opts.validate()?;
    check_dim("posterior dimension", net.param_count(), posterior.dim())?;
    let w = posterior.sample(opts.samples, rng)?;
    let outputs: Vec<DMatrix<f64>> = (0..opts.samples)
        .into_par_iter()
        .map(|s| net.forward_batch(w.column(s).as_slice(), xs))
        .collect::<Result<_>>()?;
    let k = net.output_dim();
    (0..xs.nrows())
        .map(|n| {
            let latent = DMatrix::from_fn(opts.samples, k, |s, j| outputs[s][(n, j)]);
            summary(lik, xs.row(n).iter().copied().collect(), PredictiveMethod::NnSampling, latent, opts.retain_samples)
        })
        .collect()
}

/// Averages the likelihood over linearized outputs
/// `f(x*; w*) + J(x*)(w_s − w*)`, `w_s ~ q`. `points` and `xs` describe the
/// same test inputs; the weight draws coincide with
/// [`predict_nn_sampling`] under the same rng state.
pub fn predict_glm_sampling<R: Rng + ?Sized>(
    lik: &Likelihood,
    w_star: &DVector<f64>,
    posterior: &GaussianPosterior,
    points: &[LinearPoint],
    xs: &DMatrix<f64>,
    opts: SamplingOptions,
    rng: &mut R,
) -> Result<Vec<PredictiveSummary>> {
    opts.validate()?;
    check_dim("posterior dimension", w_star.len(), posterior.dim())?;
    check_dim("test points", xs.nrows(), points.len())?;
    let mut w = posterior.sample(opts.samples, rng)?;
    for mut col in w.column_iter_mut() {
        col -= w_star;
    }
    points
        .par_iter()
        .enumerate()
        .map(|(n, pt)| {
            let df = &pt.jac * &w;
            let latent = DMatrix::from_fn(opts.samples, pt.f.len(), |s, j| pt.f[j] + df[(j, s)]);
            summary(lik, xs.row(n).iter().copied().collect(), PredictiveMethod::GlmSampling, latent, opts.retain_samples)
        })
        .collect()
}

/// Linearized-model predictive computed by sampling the function-space
/// posterior `N(m, V)` at one test input directly.
pub fn predict_gp_sampling<R: Rng + ?Sized>(
    lik: &Likelihood,
    at: &GpPosteriorAt,
    x: Vec<f64>,
    opts: SamplingOptions,
    rng: &mut R,
) -> Result<PredictiveSummary> {
    opts.validate()?;
    let root = psd_sqrt(&at.cov).into_inner();
    let f = sample_mvn(&at.mean, &root, opts.samples, rng)?;
    summary(lik, x, PredictiveMethod::GlmSampling, f.transpose(), opts.retain_samples)
}

/// Closed-form predictive of the surrogate regression: mean
/// `g⁻¹(f*) + D J (μ − w*)`, covariance `D J Σ Jᵀ D + C` with `D`, `C` the
/// surrogate scale and noise at `f*`.
pub fn predict_blr(
    lik: &Likelihood,
    w_star: &DVector<f64>,
    posterior: &GaussianPosterior,
    point: &LinearPoint,
    x: Vec<f64>,
) -> Result<PredictiveSummary> {
    check_dim("posterior dimension", w_star.len(), posterior.dim())?;
    let f = point.f.as_slice();
    let d = lik.surrogate_scale(f)?;
    let c = lik.surrogate_noise(f)?;
    let dj = d.as_matrix() * &point.jac;
    let mean = lik.inv_link(f)? + &dj * (&posterior.mean - w_star);
    let cov = SymMatrix::new(posterior.project_cov(&dj)?.into_inner() + c.as_matrix())?;
    let clipped = is_classification(lik).then(|| mean.map(|v| v.clamp(0.0, 1.0)));
    Ok(PredictiveSummary {
        x,
        method: PredictiveMethod::BlrClosed,
        mean,
        cov,
        clipped,
        sample_count: 0,
        samples: None,
    })
}

pub fn predict_blr_batch(
    lik: &Likelihood,
    w_star: &DVector<f64>,
    posterior: &GaussianPosterior,
    points: &[LinearPoint],
    xs: &DMatrix<f64>,
) -> Result<Vec<PredictiveSummary>> {
    check_dim("test points", xs.nrows(), points.len())?;
    points
        .iter()
        .enumerate()
        .map(|(n, pt)| predict_blr(lik, w_star, posterior, pt, xs.row(n).iter().copied().collect()))
        .collect()
}

/// Entropy in nats of a Bernoulli distribution with success probability `p`.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    h(p) + h(1.0 - p)
}

pub fn mean_binary_entropy(preds: &[PredictiveSummary]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().map(|p| binary_entropy(p.probability())).sum::<f64>() / preds.len() as f64
}

/// Fraction of Bernoulli predictions with `p ≥ 0.5` iff the label is 1.
pub fn binary_accuracy(preds: &[PredictiveSummary], labels: &DMatrix<f64>) -> Result<f64> {
    check_dim("labels", preds.len(), labels.nrows())?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(labels.column(0).iter())
        .filter(|(p, &y)| (p.probability() >= 0.5) == (y >= 0.5))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Writes predictions with columns `x0.., method, mean, var_or_prob, lo2sd,
/// hi2sd`. `var_or_prob` holds the variance for regression families and the
/// class-1 probability for Bernoulli; the band is `mean ± 2 sd` from `cov`
/// (clipped to `[0, 1]` for Bernoulli). Only scalar outputs are supported.
pub fn export_predictive_csv(lik: &Likelihood, preds: &[PredictiveSummary], path: &Path) -> Result<()> {
    let d = preds.first().map_or(0, |p| p.x.len());
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend(["method", "mean", "var_or_prob", "lo2sd", "hi2sd"].map(String::from));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let bernoulli = matches!(lik, Likelihood::Bernoulli);
    let mut rows = Vec::with_capacity(preds.len());
    for p in preds {
        if p.mean.len() != 1 {
            return Err(Error::Unsupported("predictive CSV export needs scalar outputs".into()));
        }
        check_dim("test input width", d, p.x.len())?;
        let m = p.mean[0];
        let sd = p.cov.as_matrix()[(0, 0)].max(0.0).sqrt();
        let (mut lo, mut hi) = (m - 2.0 * sd, m + 2.0 * sd);
        let second = if bernoulli {
            lo = lo.clamp(0.0, 1.0);
            hi = hi.clamp(0.0, 1.0);
            p.probability()
        } else {
            p.cov.as_matrix()[(0, 0)]
        };
        let mut row: Vec<String> = p.x.iter().map(|v| format!("{v}")).collect();
        row.push(p.method.tag().into());
        row.extend([m, second, lo, hi].iter().map(|v| format!("{v}")));
        rows.push(row);
    }
    export_csv(&header_refs, &rows, path)
}
