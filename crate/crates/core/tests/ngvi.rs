use ggn_core::data::Dataset;
use ggn_core::laplace::{ggn_matrix, linearize, rel_frobenius};
use ggn_core::likelihood::{sigmoid, Likelihood};
use ggn_core::linalg::SymMatrix;
use ggn_core::ngvi::{estimate_terms, ngvi_step, run_ngvi, standard_draws, Estimator, NgviConfig, VariationalState};
use ggn_core::nn::{Activation, Mlp, Network, NetworkSpec};
use ggn_core::train::{train_map, PriorSpec, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(hidden: &[usize], n: usize, seed: u64, lik: &Likelihood) -> (Mlp, Dataset) {
    let act = if hidden.is_empty() { Activation::Identity } else { Activation::Tanh };
    let net = Mlp::new(NetworkSpec::new(2, hidden, 1, act)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::<f64>::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
    let y = DMatrix::from_fn(n, 1, |i, _| match lik {
        Likelihood::Gaussian { .. } => (2.0 * x[(i, 0)] as f64).sin() + 0.3 * x[(i, 1)],
        _ => ((x[(i, 0)] + 0.3 * x[(i, 1)] + rng.random_range(-0.5..0.5)) > 0.0) as u8 as f64,
    });
    (net, Dataset::new("toy", x, y).unwrap())
}

fn fd_jacobian(net: &dyn Network, w: &DVector<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let p = w.len();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(x.nrows(), p);
    for j in 0..p {
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[j] += h;
        wm[j] -= h;
        let fp = net.forward_batch(wp.as_slice(), x).unwrap();
        let fm = net.forward_batch(wm.as_slice(), x).unwrap();
        for i in 0..x.nrows() {
            jac[(i, j)] = (fp[(i, 0)] - fm[(i, 0)]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn bernoulli_p3_n4_step_matches_hand_oracle() {
    let lik = Likelihood::Bernoulli;
    let (net, data) = toy(&[], 4, 21, &lik);
    assert_eq!(net.param_count(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mu = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let prec = &a * a.transpose() + DMatrix::identity(3, 3);
    let (delta, gamma) = (0.7, 0.4);
    let prior = PriorSpec::isotropic(3, delta).unwrap();
    let state = VariationalState::new(mu.clone(), SymMatrix::new(prec.clone()).unwrap(), Estimator::Oggn).unwrap();
    let terms = estimate_terms(&state, &net, &lik, &data, &DMatrix::zeros(3, 1)).unwrap();
    let next = ngvi_step(&state, &prior, &terms, gamma).unwrap();

    let f = net.forward_batch(mu.as_slice(), &data.x).unwrap();
    let jac = fd_jacobian(&net, &mu, &data.x);
    let mut ggn = DMatrix::zeros(3, 3);
    let mut grad = DVector::zeros(3);
    for i in 0..4 {
        let s = sigmoid(f[(i, 0)]);
        let j = jac.row(i).transpose();
        grad += &j * (data.y[(i, 0)] - s);
        ggn += &j * j.transpose() * (s * (1.0 - s));
    }
    let want_prec = &prec * (1.0 - gamma) + (DMatrix::identity(3, 3) * delta + &ggn) * gamma;
    let want_eta1 = &prec * &mu * (1.0 - gamma) + (grad + &ggn * &mu) * gamma;
    let want_mu = want_prec.clone().cholesky().unwrap().solve(&want_eta1);
    assert!(rel_frobenius(next.precision().as_matrix(), &want_prec) < 1e-8);
    assert!((&next.q.mean - want_mu).amax() < 1e-8);
}

#[test]
fn oggn_g_mu_vanishes_at_likelihood_maximum() {
    let lik = Likelihood::Gaussian { sigma2: 0.1 };
    let (net, data) = toy(&[3], 12, 3, &lik);
    let p = net.param_count();
    let prior = PriorSpec::isotropic(p, 1e-10).unwrap();
    let cfg = TrainConfig { lr: 2e-3, max_epochs: 300_000, grad_tol: 1e-3, ..TrainConfig::default() };
    let map = train_map(&net, &lik, &prior, &data, &cfg, None).unwrap();
    assert!(map.converged, "grad {}", map.final_grad_norm());
    let w = map.w_star.values.clone();
    let state = VariationalState::new(w.clone(), SymMatrix::identity(p), Estimator::Oggn).unwrap();
    let terms = estimate_terms(&state, &net, &lik, &data, &DMatrix::zeros(p, 1)).unwrap();
    assert!(terms.g_mu.norm() <= 1e-3 + 1e-10 * w.norm() + 1e-12, "{}", terms.g_mu.norm());
}

#[test]
fn oggn_fixed_point_satisfies_gva_stationarity() {
    let lik = Likelihood::Bernoulli;
    let (net, data) = toy(&[3], 10, 8, &lik);
    let p = net.param_count();
    let prior = PriorSpec::isotropic(p, 1.0).unwrap();
    let cfg = NgviConfig {
        estimator: Estimator::Oggn,
        gamma: 0.5,
        max_iters: 2000,
        tol: 1e-14,
        ..NgviConfig::default()
    };
    let res = run_ngvi(&net, &lik, &prior, &data, &cfg, None).unwrap();
    assert!(res.converged);
    let mu = &res.state.q.mean;
    let model = linearize(&net, mu, &lik, &data).unwrap();
    let want = ggn_matrix(&model).as_matrix() + DMatrix::identity(p, p);
    assert!(rel_frobenius(res.state.precision().as_matrix(), &want) < 1e-4);
}

#[test]
fn voggn_frozen_samples_fixed_point_satisfies_sampled_stationarity() {
    let lik = Likelihood::Bernoulli;
    let (net, data) = toy(&[3], 10, 9, &lik);
    let p = net.param_count();
    let prior = PriorSpec::isotropic(p, 2.0).unwrap();
    let z = standard_draws(4, 0, p, 3, false);
    let mean = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let mut state = VariationalState::new(mean, SymMatrix::identity(p), Estimator::Voggn).unwrap();
    let mut samples = state.q.transform_standard(&z).unwrap();
    for _ in 0..3000 {
        let terms = estimate_terms(&state, &net, &lik, &data, &samples).unwrap();
        state = ngvi_step(&state, &prior, &terms, 0.5).unwrap();
        samples = state.q.transform_standard(&z).unwrap();
    }
    let mut want = DMatrix::identity(p, p) * 2.0;
    let mut grad = -(&state.q.mean) * 2.0;
    for s in 0..samples.ncols() {
        let w = samples.column(s).into_owned();
        let model = linearize(&net, &w, &lik, &data).unwrap();
        want += ggn_matrix(&model).as_matrix() / samples.ncols() as f64;
        let f = net.forward_batch(w.as_slice(), &data.x).unwrap();
        let jac = fd_jacobian(&net, &w, &data.x);
        for i in 0..data.len() {
            grad += jac.row(i).transpose() * ((data.y[(i, 0)] - sigmoid(f[(i, 0)])) / samples.ncols() as f64);
        }
    }
    assert!(rel_frobenius(state.precision().as_matrix(), &want) < 1e-4);
    assert!(grad.norm() < 1e-4, "{}", grad.norm());
}

#[test]
fn snelson_voggn_elbo_windows_do_not_decrease() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/snelson.txt");
    let train = ggn_core::data::snelson_train(&ggn_core::data::load_snelson(&path).unwrap(), (1.5, 3.0), 150, 0).unwrap();
    let lik = Likelihood::Gaussian { sigma2: 0.0518 };
    let net = Mlp::new(NetworkSpec::new(1, &[25; 5], 1, Activation::Tanh)).unwrap();
    let prior = PriorSpec::isotropic(net.param_count(), 1.93).unwrap();
    let cfg = NgviConfig { max_iters: 300, tol: 0.0, ..NgviConfig::default() };
    let res = run_ngvi(&net, &lik, &prior, &train, &cfg, None).unwrap();
    let means: Vec<f64> = res.trace.chunks(100).map(|w| w.iter().map(|t| t.elbo).sum::<f64>() / w.len() as f64).collect();
    assert_eq!(means.len(), 3);
    assert!(means.windows(2).all(|m| m[1] >= m[0]), "{means:?}");
}
