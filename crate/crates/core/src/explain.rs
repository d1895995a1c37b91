//! Instance-based explanations: a prediction is split into contributions
//! `a_i κ(x*, x_i)` of the training points, with importances `a_i` given by
//! the likelihood residuals at `w*` and `κ` the prior kernel.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::laplace::{LinearPoint, LinearizedModel};
use crate::train::PriorSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contribution {
    pub index: usize,
    pub importance: f64,
    pub kernel: f64,
    pub product: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub x: Vec<f64>,
    /// Network output `f(x*; w*)`.
    pub prediction: f64,
    /// Sorted by `|kernel|` descending, ties by lower index.
    pub contributions: Vec<Contribution>,
    /// `Σ_i a_i κ(x*, x_i)`.
    pub sum: f64,
    /// `J(x*) Σ₀ Σ_i J(x_i)ᵀ a_i`, computed without the kernel.
    pub direct: f64,
    pub residual: f64,
}

fn require_scalar(model: &LinearizedModel) -> Result<()> {
    if model.k() != 1 {
        return Err(Error::Unsupported(format!(
            "explanations need a scalar-output model, got K={}",
            model.k()
        )));
    }
    Ok(())
}

/// `a_i = r(y_i, f(x_i; w*))`.
pub fn importances(model: &LinearizedModel) -> Result<DVector<f64>> {
    require_scalar(model)?;
    Ok(model.residual_vec())
}

/// `k_i = J(x*) Σ₀ J(x_i)ᵀ`.
pub fn kernel_to_train(model: &LinearizedModel, prior: &PriorSpec, point: &LinearPoint) -> Result<DVector<f64>> {
    require_scalar(model)?;
    check_dim("test jacobian", model.p(), point.jac.ncols())?;
    check_dim("prior dimension", model.p(), prior.dim())?;
    let s = prior.covariance_times(&point.jac.transpose());
    Ok(DVector::from_column_slice((&model.jac * s).as_slice()))
}

pub fn decompose(model: &LinearizedModel, prior: &PriorSpec, point: &LinearPoint, x: Vec<f64>) -> Result<Explanation> {
    decompose_with(model, prior, point, x, &importances(model)?)
}

/// Decomposition with caller-supplied importances.
pub fn decompose_with(
    model: &LinearizedModel,
    prior: &PriorSpec,
    point: &LinearPoint,
    x: Vec<f64>,
    a: &DVector<f64>,
) -> Result<Explanation> {
    check_dim("importances", model.n(), a.len())?;
    let k = kernel_to_train(model, prior, point)?;
    let mut contributions: Vec<Contribution> = (0..model.n())
        .map(|i| Contribution {
            index: i,
            importance: a[i],
            kernel: k[i],
            product: a[i] * k[i],
        })
        .collect();
    let sum = contributions.iter().map(|c| c.product).sum::<f64>();
    contributions.sort_by(|p, q| q.kernel.abs().total_cmp(&p.kernel.abs()).then(p.index.cmp(&q.index)));
    let jta = model.jac.transpose() * a;
    let direct = (&point.jac * prior.covariance_times(&nalgebra::DMatrix::from_column_slice(jta.len(), 1, jta.as_slice())))[0];
    Ok(Explanation {
        x,
        prediction: point.f[0],
        contributions,
        sum,
        direct,
        residual: sum - direct,
    })
}

pub fn top_influencers(explanation: &Explanation, m: usize) -> &[Contribution] {
    &explanation.contributions[..m.min(explanation.contributions.len())]
}

pub fn export_json(explanations: &[Explanation], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(explanations)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::gp::prior_kernel;
    use crate::laplace::{laplace_ggn_posterior, linearize};
    use crate::likelihood::Likelihood;
    use crate::linalg::{chol, SymMatrix};
    use crate::nn::{Activation, Mlp, Network, NetworkSpec};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_point_model(lik: Likelihood, y: f64, f: f64, jac: &[f64]) -> LinearizedModel {
        LinearizedModel::from_parts(
            lik,
            DVector::zeros(jac.len()),
            DMatrix::from_element(1, 1, y),
            DMatrix::from_element(1, 1, f),
            DMatrix::from_row_slice(1, jac.len(), jac),
        )
        .unwrap()
    }

    #[test]
    fn importance_hand_values() {
        let m = one_point_model(Likelihood::Bernoulli, 1.0, 0.0, &[1.0]);
        assert_eq!(importances(&m).unwrap()[0], 0.5);
        let g = one_point_model(Likelihood::Gaussian { sigma2: 0.4 }, 2.0, 2.0, &[1.0]);
        assert_eq!(importances(&g).unwrap()[0], 0.0);
        let cat = LinearizedModel::from_parts(
            Likelihood::Categorical { k: 2 },
            DVector::zeros(1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        assert!(matches!(importances(&cat), Err(Error::Unsupported(_))));
    }

    #[test]
    fn gaussian_importances_scale_inverse_with_noise() {
        let a1 = importances(&one_point_model(Likelihood::Gaussian { sigma2: 0.5 }, 1.0, 0.2, &[1.0])).unwrap()[0];
        let a2 = importances(&one_point_model(Likelihood::Gaussian { sigma2: 2.0 }, 1.0, 0.2, &[1.0])).unwrap()[0];
        assert!((a1 / a2 - 4.0).abs() < 1e-14);
    }

    #[test]
    fn single_contribution_sum() {
        // κ = J* Σ₀ J₁ᵀ = 3 with Σ₀ = I, a = 2 from a Gaussian residual.
        let m = one_point_model(Likelihood::Gaussian { sigma2: 1.0 }, 2.0, 0.0, &[1.0, 1.0]);
        let prior = PriorSpec::isotropic(2, 1.0).unwrap();
        let pt = LinearPoint { f: DVector::from_element(1, 0.0), jac: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]) };
        let e = decompose(&m, &prior, &pt, vec![]).unwrap();
        assert_eq!(e.contributions.len(), 1);
        assert_eq!(e.sum, 6.0);
        let flat = one_point_model(Likelihood::Gaussian { sigma2: 1.0 }, 0.0, 0.0, &[1.0, 1.0]);
        assert_eq!(decompose(&flat, &prior, &pt, vec![]).unwrap().sum, 0.0);
        let zero = LinearPoint { f: DVector::zeros(1), jac: DMatrix::zeros(1, 2) };
        assert_eq!(kernel_to_train(&m, &prior, &zero).unwrap(), DVector::zeros(1));
    }

    fn random_model(seed: u64) -> (Mlp, DVector<f64>, LinearizedModel, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(NetworkSpec::new(2, &[4], 1, Activation::Tanh)).unwrap();
        let w = net.init_params(&mut rng);
        let x = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(7, 1, |i, _| (i % 2) as f64);
        let data = Dataset::new("d", x, y).unwrap();
        let model = linearize(&net, &w, &Likelihood::Bernoulli, &data).unwrap();
        (net, w, model, data)
    }

    #[test]
    fn kernel_matches_prior_kernel_and_is_symmetric() {
        let (net, w, model, data) = random_model(3);
        let prior = PriorSpec::diagonal(DVector::zeros(net.param_count()), DVector::from_fn(net.param_count(), |i, _| 0.5 + 0.1 * i as f64)).unwrap();
        let pt = LinearPoint::at(&net, &w, &[0.3, 0.9]).unwrap();
        let k = kernel_to_train(&model, &prior, &pt).unwrap();
        for i in 0..data.len() {
            let ji = model.jac_i(i);
            assert!((k[i] - prior_kernel(&prior, &pt.jac, &ji)[(0, 0)]).abs() < 1e-12);
            assert!((k[i] - prior_kernel(&prior, &ji, &pt.jac)[(0, 0)]).abs() < 1e-12);
        }
        let train0 = LinearPoint::at(&net, &w, &data.x_row(0)).unwrap();
        let k0 = kernel_to_train(&model, &prior, &train0).unwrap();
        assert!((k0[0] - prior_kernel(&prior, &train0.jac, &train0.jac)[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn bilinear_identity_and_ordering() {
        let (net, w, model, _) = random_model(5);
        let prior = PriorSpec::isotropic(net.param_count(), 0.3).unwrap();
        let pt = LinearPoint::at(&net, &w, &[-0.4, 1.1]).unwrap();
        let e = decompose(&model, &prior, &pt, vec![-0.4, 1.1]).unwrap();
        assert!(e.residual.abs() < 1e-10 * (1.0 + e.direct.abs()));
        assert!(e.contributions.windows(2).all(|c| c[0].kernel.abs() >= c[1].kernel.abs()));
        assert!(top_influencers(&e, 0).is_empty());
        assert_eq!(top_influencers(&e, 100).len(), 7);
        assert_eq!(top_influencers(&e, 3)[0].index, e.contributions[0].index);
        let dir = tempfile::tempdir().unwrap();
        export_json(&[e], &dir.path().join("e.json")).unwrap();
    }

    #[test]
    fn gp_weighted_importances_give_posterior_mean_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(NetworkSpec::new(2, &[], 1, Activation::Identity)).unwrap();
        let p = net.param_count();
        let x = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-1.0..1.0));
        let data = Dataset::new("d", x, y).unwrap();
        let sigma2 = 0.2;
        let lik = Likelihood::Gaussian { sigma2 };
        let w = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let model = linearize(&net, &w, &lik, &data).unwrap();
        let prior = PriorSpec::isotropic(p, 2.0).unwrap().with_mean(DVector::from_element(p, 0.1)).unwrap();
        let post = laplace_ggn_posterior(&model, &prior).unwrap();
        let kmat = &model.jac * prior.covariance_times(&model.jac.transpose());
        let m = &model.jac * &prior.mean;
        let y = DVector::from_column_slice(model.y.as_slice());
        let total = SymMatrix::new(kmat + DMatrix::identity(5, 5) * sigma2).unwrap();
        let a = chol(&total).unwrap().solve_vec(&(y - m)).unwrap();
        let pt = LinearPoint::at(&net, &w, &[0.2, -0.7]).unwrap();
        let e = decompose_with(&model, &prior, &pt, vec![], &a).unwrap();
        let shift = (&pt.jac * (&post.mean - &prior.mean))[0];
        assert!((e.sum - shift).abs() < 1e-10 * (1.0 + shift.abs()));
    }
}
