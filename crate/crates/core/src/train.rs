//! Gaussian priors over parameters and MAP training with full-batch Adam.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::likelihood::Likelihood;
use crate::linalg::{chol, CholFactor, SymMatrix};
use crate::nn::{Network, ParamVector};

#[derive(Debug, Clone)]
pub enum PriorCov {
    /// `Σ₀ = δ⁻¹ I`.
    Isotropic { delta: f64 },
    /// `Σ₀ = diag(σ₀²)`.
    Diagonal { variances: DVector<f64> },
    /// Dense `Σ₀` with its factor and inverse.
    Full {
        cov: SymMatrix,
        factor: CholFactor,
        precision: SymMatrix,
    },
}

/// `N(μ₀, Σ₀)` over the flattened parameters.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub mean: DVector<f64>,
    pub cov: PriorCov,
}

impl PriorSpec {
    pub fn isotropic(p: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Domain(format!("prior precision must be positive, got {delta}")));
        }
        Ok(PriorSpec {
            mean: DVector::zeros(p),
            cov: PriorCov::Isotropic { delta },
        })
    }

    pub fn diagonal(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        check_dim("prior diagonal", mean.len(), variances.len())?;
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("prior variances must be positive".into()));
        }
        Ok(PriorSpec {
            mean,
            cov: PriorCov::Diagonal { variances },
        })
    }

    pub fn full(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        check_dim("prior covariance", mean.len(), cov.dim())?;
        let factor = chol(&cov)?;
        if factor.jitter_used() > 0.0 {
            return Err(Error::Domain("prior covariance is not positive definite".into()));
        }
        let precision = factor.inverse();
        Ok(PriorSpec {
            mean,
            cov: PriorCov::Full { cov, factor, precision },
        })
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        check_dim("prior mean", self.mean.len(), mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Scalar precision δ for isotropic priors.
    pub fn delta(&self) -> Option<f64> {
        match self.cov {
            PriorCov::Isotropic { delta } => Some(delta),
            _ => None,
        }
    }

    pub fn covariance_matrix(&self) -> SymMatrix {
        let p = self.dim();
        match &self.cov {
            PriorCov::Isotropic { delta } => SymMatrix::from_diagonal(&vec![1.0 / delta; p]),
            PriorCov::Diagonal { variances } => SymMatrix::from_diagonal(variances.as_slice()),
            PriorCov::Full { cov, .. } => cov.clone(),
        }
    }

    pub fn precision_matrix(&self) -> SymMatrix {
        let p = self.dim();
        match &self.cov {
            PriorCov::Isotropic { delta } => SymMatrix::from_diagonal(&vec![*delta; p]),
            PriorCov::Diagonal { variances } => {
                SymMatrix::from_diagonal(&variances.iter().map(|v| 1.0 / v).collect::<Vec<_>>())
            }
            PriorCov::Full { precision, .. } => precision.clone(),
        }
    }

    /// `Σ₀⁻¹ v`.
    pub fn precision_times(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.cov {
            PriorCov::Isotropic { delta } => v * *delta,
            PriorCov::Diagonal { variances } => v.component_div(variances),
            PriorCov::Full { precision, .. } => precision.as_matrix() * v,
        }
    }

    /// `Σ₀ M` for a `P × m` matrix.
    pub fn covariance_times(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.cov {
            PriorCov::Isotropic { delta } => m / *delta,
            PriorCov::Diagonal { variances } => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= variances[i];
                }
                out
            }
            PriorCov::Full { cov, .. } => crate::linalg::mul_nn(cov.as_matrix(), m),
        }
    }

    /// `log det Σ₀`.
    pub fn logdet_cov(&self) -> f64 {
        match &self.cov {
            PriorCov::Isotropic { delta } => -(self.dim() as f64) * delta.ln(),
            PriorCov::Diagonal { variances } => variances.iter().map(|v| v.ln()).sum(),
            PriorCov::Full { factor, .. } => factor.logdet(),
        }
    }

    /// `(w − μ₀)ᵀ Σ₀⁻¹ (w − μ₀)`.
    pub fn mahalanobis(&self, w: &DVector<f64>) -> f64 {
        let d = w - &self.mean;
        d.dot(&self.precision_times(&d))
    }

    pub fn log_density(&self, w: &DVector<f64>) -> Result<f64> {
        check_dim("prior log density", self.dim(), w.len())?;
        let p = self.dim() as f64;
        Ok(-0.5 * p * (2.0 * PI).ln() - 0.5 * self.logdet_cov() - 0.5 * self.mahalanobis(w))
    }
}

/// Sum of per-datum log likelihoods for network outputs `f` (`N × K`).
pub fn sum_log_lik(lik: &Likelihood, f: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_dim("label rows", f.nrows(), y.nrows())?;
    let mut s = 0.0;
    for i in 0..f.nrows() {
        let fi: Vec<f64> = f.row(i).iter().cloned().collect();
        let yi: Vec<f64> = y.row(i).iter().cloned().collect();
        s += lik.log_lik(&yi, &fi)?;
    }
    Ok(s)
}

/// Per-datum residuals stacked as `N × K`.
pub fn residual_matrix(lik: &Likelihood, f: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("label rows", f.nrows(), y.nrows())?;
    let mut r = DMatrix::zeros(f.nrows(), f.ncols());
    for i in 0..f.nrows() {
        let fi: Vec<f64> = f.row(i).iter().cloned().collect();
        let yi: Vec<f64> = y.row(i).iter().cloned().collect();
        let ri = lik.residual(&yi, &fi)?;
        for k in 0..f.ncols() {
            r[(i, k)] = ri[k];
        }
    }
    Ok(r)
}

fn check_problem(net: &dyn Network, prior: &PriorSpec, w: &DVector<f64>, data: &Dataset) -> Result<()> {
    check_dim("parameters", net.param_count(), w.len())?;
    check_dim("prior dimension", net.param_count(), prior.dim())?;
    if !data.is_empty() {
        check_dim("input dimension", net.input_dim(), data.x.ncols())?;
        check_dim("label dimension", net.output_dim(), data.y.ncols())?;
    }
    Ok(())
}

/// `Σ_i log p(y_i | f(x_i; w)) + log N(w; μ₀, Σ₀)`.
pub fn log_joint(
    net: &dyn Network,
    lik: &Likelihood,
    prior: &PriorSpec,
    w: &DVector<f64>,
    data: &Dataset,
) -> Result<f64> {
    check_problem(net, prior, w, data)?;
    let f = net.forward_batch(w.as_slice(), &data.x)?;
    Ok(sum_log_lik(lik, &f, &data.y)? + prior.log_density(w)?)
}

/// Gradient of [`log_joint`]: `Σ_i J_iᵀ r_i − Σ₀⁻¹ (w − μ₀)`.
pub fn grad_log_joint(
    net: &dyn Network,
    lik: &Likelihood,
    prior: &PriorSpec,
    w: &DVector<f64>,
    data: &Dataset,
) -> Result<DVector<f64>> {
    Ok(value_and_grad(net, lik, prior, w, data)?.1)
}

/// Log joint and its gradient from a single forward/backward pass.
pub fn value_and_grad(
    net: &dyn Network,
    lik: &Likelihood,
    prior: &PriorSpec,
    w: &DVector<f64>,
    data: &Dataset,
) -> Result<(f64, DVector<f64>)> {
    check_problem(net, prior, w, data)?;
    let mut ll = 0.0;
    let (_, g_lik) = net.forward_vjp_batch(w.as_slice(), &data.x, &mut |f| {
        ll = sum_log_lik(lik, f, &data.y)?;
        residual_matrix(lik, f, &data.y)
    })?;
    let value = ll + prior.log_density(w)?;
    let grad = g_lik - prior.precision_times(&(w - &prior.mean));
    Ok((value, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub grad_tol: f64,
    pub seed: u64,
    /// Record every `trace_every`-th epoch; the first and last are always kept.
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 20000,
            grad_tol: 1e-5,
            seed: 0,
            trace_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.grad_tol >= 0.0) {
            return Err(Error::Config("train.eps must be positive and train.grad_tol non-negative".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("train.trace_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub log_joint: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub w_star: ParamVector,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub epochs: usize,
}

impl MapResult {
    pub fn final_grad_norm(&self) -> f64 {
        self.trace.last().map(|t| t.grad_norm).unwrap_or(f64::NAN)
    }

    /// Writes `<stem>.bin`, `<stem>.json` (layout) and `<stem>.trace.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.w_star.save(stem)?;
        #[derive(Serialize)]
        struct TraceFile<'a> {
            converged: bool,
            epochs: usize,
            trace: &'a [TraceEntry],
        }
        let body = serde_json::to_string_pretty(&TraceFile {
            converged: self.converged,
            epochs: self.epochs,
            trace: &self.trace,
        })?;
        std::fs::write(stem.with_extension("trace.json"), body)?;
        Ok(())
    }
}

/// Full-batch Adam ascent on [`log_joint`], initialized from `seed` (or from
/// `init` when given). Converges once the gradient norm drops below
/// `grad_tol`.
pub fn train_map(
    net: &dyn Network,
    lik: &Likelihood,
    prior: &PriorSpec,
    data: &Dataset,
    config: &TrainConfig,
    init: Option<&DVector<f64>>,
) -> Result<MapResult> {
    config.validate()?;
    let p = net.param_count();
    let mut w = match init {
        Some(w0) => {
            check_dim("initial parameters", p, w0.len())?;
            w0.clone()
        }
        None => net.init_params(&mut ChaCha8Rng::seed_from_u64(config.seed)),
    };
    let mut m = DVector::<f64>::zeros(p);
    let mut v = DVector::<f64>::zeros(p);
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut converged;
    let mut epoch = 0;
    let (mut b1t, mut b2t) = (1.0, 1.0);
    loop {
        let (value, grad) = value_and_grad(net, lik, prior, &w, data)?;
        let gnorm = grad.norm();
        history.push(value);
        if !value.is_finite() || !gnorm.is_finite() {
            return Err(Error::Diverged {
                step: epoch,
                reason: format!("non-finite objective {value} or gradient norm {gnorm}"),
                trace: history,
            });
        }
        converged = gnorm < config.grad_tol;
        let last = converged || epoch == config.max_epochs;
        if epoch % config.trace_every == 0 || last {
            trace.push(TraceEntry {
                epoch,
                log_joint: value,
                grad_norm: gnorm,
            });
        }
        if last {
            break;
        }
        b1t *= config.beta1;
        b2t *= config.beta2;
        let lr_t = config.lr * (1.0 - b2t).sqrt() / (1.0 - b1t);
        // ascent on the log joint
        for i in 0..p {
            let g = grad[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            w[i] += lr_t * m[i] / (v[i].sqrt() + config.eps * (1.0 - b2t).sqrt());
        }
        epoch += 1;
    }
    Ok(MapResult {
        w_star: ParamVector::new(w, net.layout())?,
        trace,
        converged,
        epochs: epoch,
    })
}

/// Mean of `log p(y | f(x; w))` over a dataset.
pub fn avg_test_log_lik(net: &dyn Network, lik: &Likelihood, w: &DVector<f64>, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Domain("test set is empty".into()));
    }
    let f = net.forward_batch(w.as_slice(), &test.x)?;
    Ok(sum_log_lik(lik, &f, &test.y)? / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp, NetworkSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn neuron() -> Mlp {
        Mlp::new(NetworkSpec::new(1, &[], 1, Activation::Identity)).unwrap()
    }

    fn toy_regression(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 1, |i, _| 0.7 * x[(i, 0)] - 0.3 * x[(i, 1)] + 0.2 + 0.1 * rng.sample::<f64, _>(StandardNormal));
        Dataset::new("toy", x, y).unwrap()
    }

    #[test]
    fn log_joint_hand_value() {
        let net = neuron();
        let data = Dataset::new("one", DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let prior = PriorSpec::isotropic(2, 1.0).unwrap();
        let v = log_joint(&net, &Likelihood::Gaussian { sigma2: 1.0 }, &prior, &DVector::zeros(2), &data).unwrap();
        assert!((v + 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 2.756816).abs() < 1e-6);
    }

    #[test]
    fn log_joint_recomposes() {
        let net = Mlp::new(NetworkSpec::new(2, &[3], 1, Activation::Tanh)).unwrap();
        let data = toy_regression(5, 1);
        let lik = Likelihood::Gaussian { sigma2: 0.5 };
        let w = net.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let prior = PriorSpec::isotropic(net.param_count(), 2.0).unwrap();
        let mut ll = 0.0;
        for i in 0..5 {
            let f = net.forward(w.as_slice(), &[data.x[(i, 0)], data.x[(i, 1)]]).unwrap();
            let r: f64 = data.y[(i, 0)] - f[0];
            ll += -0.5 * (2.0 * PI * 0.5).ln() - 0.5 * r * r / 0.5;
        }
        let p = net.param_count() as f64;
        let lp = -0.5 * p * (2.0 * PI / 2.0).ln() - 0.5 * 2.0 * w.norm_squared();
        let v = log_joint(&net, &lik, &prior, &w, &data).unwrap();
        assert!((v - ll - lp).abs() < 1e-10);
    }

    #[test]
    fn larger_delta_lowers_log_joint() {
        let net = neuron();
        let data = toy_regression(3, 1);
        let data = Dataset::new("x", data.x.columns(0, 1).into_owned(), data.y).unwrap();
        // the normalizer grows like (P/2) log δ, so the penalty dominates once δ > P / ‖w‖²
        let w = DVector::from_vec(vec![3.0, -4.0]);
        let lik = Likelihood::Gaussian { sigma2: 1.0 };
        let mut last = f64::INFINITY;
        for delta in [2.0, 5.0, 20.0] {
            let v = log_joint(&net, &lik, &PriorSpec::isotropic(2, delta).unwrap(), &w, &data).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = Mlp::new(NetworkSpec::new(2, &[4], 1, Activation::Tanh)).unwrap();
        let data = toy_regression(6, 3);
        let mut y = data.y.clone();
        y.iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
        let cls = Dataset::new("cls", data.x.clone(), y).unwrap();
        let w = net.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let prior = PriorSpec::diagonal(
            DVector::from_element(net.param_count(), 0.1),
            DVector::from_fn(net.param_count(), |i, _| 0.5 + i as f64 * 0.1),
        )
        .unwrap();
        for (lik, ds) in [(Likelihood::Gaussian { sigma2: 0.3 }, &data), (Likelihood::Bernoulli, &cls)] {
            let g = grad_log_joint(&net, &lik, &prior, &w, ds).unwrap();
            let h = 1e-5;
            for i in 0..w.len() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let d = (log_joint(&net, &lik, &prior, &wp, ds).unwrap()
                    - log_joint(&net, &lik, &prior, &wm, ds).unwrap())
                    / (2.0 * h);
                assert!((d - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{i}: {d} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn gradient_zero_at_hand_stationary_point() {
        // y = w x + b with prior N(0, I); normal equations
        // (Σx² + 1) w + (Σx) b = Σxy and (Σx) w + (n + 1) b = Σy.
        let x = [1.0, 2.0, -1.0];
        let y = [0.5, 1.0, 0.2];
        let (sx, sxx, sy, sxy) = (2.0, 6.0, 1.7, 0.5 + 2.0 - 0.2);
        let (a, b, c, d) = (sxx + 1.0, sx, sx, 4.0);
        let det = a * d - b * c;
        let w = (d * sxy - b * sy) / det;
        let bias = (a * sy - c * sxy) / det;
        let data = Dataset::new("n", DMatrix::from_column_slice(3, 1, &x), DMatrix::from_column_slice(3, 1, &y)).unwrap();
        let g = grad_log_joint(
            &neuron(),
            &Likelihood::Gaussian { sigma2: 1.0 },
            &PriorSpec::isotropic(2, 1.0).unwrap(),
            &DVector::from_vec(vec![w, bias]),
            &data,
        )
        .unwrap();
        assert!(g.amax() < 1e-8);
    }

    #[test]
    fn gradient_without_data_is_prior_term() {
        let net = neuron();
        let data = Dataset::new("empty", DMatrix::zeros(0, 1), DMatrix::zeros(0, 1)).unwrap();
        let prior = PriorSpec::isotropic(2, 3.0).unwrap().with_mean(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let w = DVector::from_vec(vec![0.5, 2.0]);
        let g = grad_log_joint(&net, &Likelihood::Bernoulli, &prior, &w, &data).unwrap();
        assert!((g - DVector::from_vec(vec![1.5, -6.0])).amax() < 1e-14);
    }

    fn ridge_solution(data: &Dataset, sigma2: f64, delta: f64) -> DVector<f64> {
        let n = data.len();
        let mut phi = DMatrix::zeros(n, 3);
        for i in 0..n {
            phi[(i, 0)] = data.x[(i, 0)];
            phi[(i, 1)] = data.x[(i, 1)];
            phi[(i, 2)] = 1.0;
        }
        let a = phi.transpose() * &phi / sigma2 + DMatrix::identity(3, 3) * delta;
        let b = phi.transpose() * data.y.column(0) / sigma2;
        a.cholesky().unwrap().solve(&b)
    }

    #[test]
    fn adam_reaches_ridge_solution() {
        let net = Mlp::new(NetworkSpec::new(2, &[], 1, Activation::Identity)).unwrap();
        let data = toy_regression(40, 5);
        let lik = Likelihood::Gaussian { sigma2: 0.5 };
        let prior = PriorSpec::isotropic(3, 2.0).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            grad_tol: 1e-7,
            ..TrainConfig::default()
        };
        let res = train_map(&net, &lik, &prior, &data, &cfg, None).unwrap();
        assert!(res.converged, "grad {}", res.final_grad_norm());
        let exact = ridge_solution(&data, 0.5, 2.0);
        assert!((&res.w_star.values - exact).amax() < 1e-4);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let net = Mlp::new(NetworkSpec::new(2, &[3], 1, Activation::Tanh)).unwrap();
        let data = toy_regression(4, 6);
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let prior = PriorSpec::isotropic(net.param_count(), 1.0).unwrap();
        let res = train_map(&net, &Likelihood::Gaussian { sigma2: 1.0 }, &prior, &data, &cfg, None).unwrap();
        assert_eq!(res.w_star.values, net.init_params(&mut ChaCha8Rng::seed_from_u64(9)));
        assert!(!res.trace.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let net = neuron();
        let data = Dataset::new("big", DMatrix::from_element(1, 1, 1e200), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let prior = PriorSpec::isotropic(2, 1.0).unwrap();
        let err = train_map(&net, &Likelihood::Gaussian { sigma2: 1.0 }, &prior, &data, &TrainConfig::default(), Some(&DVector::from_vec(vec![1e200, 0.0])));
        assert!(matches!(err, Err(Error::Diverged { .. })));
    }

    #[test]
    fn avg_test_log_lik_values() {
        let net = neuron();
        let lik = Likelihood::Bernoulli;
        let one = Dataset::new("t", DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let v = avg_test_log_lik(&net, &lik, &DVector::from_vec(vec![30.0, 0.0]), &one).unwrap();
        assert!(v.abs() < 1e-10);
        let v = avg_test_log_lik(&net, &lik, &DVector::zeros(2), &one).unwrap();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        let empty = Dataset::new("e", DMatrix::zeros(0, 1), DMatrix::zeros(0, 1)).unwrap();
        assert!(avg_test_log_lik(&net, &lik, &DVector::zeros(2), &empty).is_err());
    }

    #[test]
    fn full_prior_matches_diagonal() {
        let mean = DVector::from_vec(vec![0.1, -0.2]);
        let var = DVector::from_vec(vec![0.5, 2.0]);
        let a = PriorSpec::diagonal(mean.clone(), var.clone()).unwrap();
        let b = PriorSpec::full(mean, SymMatrix::from_diagonal(var.as_slice())).unwrap();
        let w = DVector::from_vec(vec![1.0, 1.5]);
        assert!((a.log_density(&w).unwrap() - b.log_density(&w).unwrap()).abs() < 1e-12);
        assert!((a.precision_times(&w) - b.precision_times(&w)).amax() < 1e-12);
        assert!(PriorSpec::isotropic(2, 0.0).is_err());
    }
}
