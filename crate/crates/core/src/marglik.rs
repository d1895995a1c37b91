//! Laplace-GGN marginal likelihood: the evidence of the surrogate linear
//! regression, the non-Gaussian correction term, and grid search over prior
//! precision and noise variance.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{export_csv, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::laplace::{laplace_ggn_posterior, linearize, GaussianPosterior, LinearizedModel};
use crate::likelihood::{gaussian_logpdf, Likelihood};
use crate::nn::Network;
use crate::train::{avg_test_log_lik, train_map, PriorSpec, TrainConfig};

/// `Σ_i log N(y_i | g⁻¹(f_i) + D_i J_i (μ − w*), C_i) − ½ log(|Σ₀|/|Σ|)
/// − ½ (μ − μ₀)ᵀ Σ₀⁻¹ (μ − μ₀)`, on the reduced label coordinates.
///
/// This is the exact evidence of the surrogate regression when `posterior`
/// is its exact posterior.
pub fn blr_log_marglik(model: &LinearizedModel, prior: &PriorSpec, posterior: &GaussianPosterior) -> Result<f64> {
    check_dim("prior dimension", model.p(), prior.dim())?;
    check_dim("posterior dimension", model.p(), posterior.dim())?;
    if posterior.is_point_mass() {
        return Err(Error::Domain("marginal likelihood needs a non-degenerate posterior".into()));
    }
    let dmu = &posterior.mean - &model.w_star;
    let mut fit = 0.0;
    for i in 0..model.n() {
        let s = model.lik.reduced_surrogate(&model.f_row(i))?;
        let mean = &s.mean + &s.scale * (model.jac_i(i) * &dmu);
        fit += gaussian_logpdf(&model.lik.reduce_label(&model.y_row(i)), &mean, &s.noise);
    }
    Ok(fit - 0.5 * (prior.logdet_cov() - posterior.logdet_cov()) - 0.5 * prior.mahalanobis(&posterior.mean))
}

/// `Σ_i [log p(y_i | f_i) − log N(y_i | g⁻¹(f_i), C_i)]`.
pub fn correction_term(model: &LinearizedModel) -> Result<f64> {
    if model.lik.is_gaussian() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..model.n() {
        let (y, f) = (model.y_row(i), model.f_row(i));
        total += model.lik.log_lik(&y, &f)? - model.lik.surrogate_log_density(&y, &f)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarglikParts {
    pub blr: f64,
    pub correction: f64,
    pub glm: f64,
}

pub fn glm_log_marglik(model: &LinearizedModel, prior: &PriorSpec, posterior: &GaussianPosterior) -> Result<MarglikParts> {
    let blr = blr_log_marglik(model, prior, posterior)?;
    let correction = correction_term(model)?;
    Ok(MarglikParts {
        blr,
        correction,
        glm: blr + correction,
    })
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) || n == 0 {
        return Err(Error::Config(format!("log grid needs 0 < lo <= hi and n >= 1, got [{lo}, {hi}] n={n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub deltas: Vec<f64>,
    /// Gaussian noise variances; `None` keeps the likelihood fixed.
    pub sigma2s: Option<Vec<f64>>,
}

impl SweepGrid {
    fn cells(&self, family: &Likelihood) -> Result<Vec<(f64, Option<f64>)>> {
        if self.deltas.is_empty() {
            return Err(Error::Config("sweep.deltas must be non-empty".into()));
        }
        match &self.sigma2s {
            None => Ok(self.deltas.iter().map(|&d| (d, None)).collect()),
            Some(s) if s.is_empty() => Err(Error::Config("sweep.sigma2s must be non-empty when given".into())),
            Some(_) if !family.is_gaussian() => {
                Err(Error::Config("a noise-variance grid needs the gaussian likelihood".into()))
            }
            Some(s) => Ok(s.iter().flat_map(|&v| self.deltas.iter().map(move |&d| (d, Some(v)))).collect()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub sigma2: Option<f64>,
    pub glm_log_marglik: f64,
    pub blr_log_marglik: f64,
    pub correction: f64,
    pub avg_test_log_lik: f64,
    pub w_checksum: String,
    pub converged: bool,
    pub epochs: usize,
    /// Error message when training or evaluation failed.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub argmax: Option<usize>,
}

/// FNV-1a over the little-endian bytes of `w`.
pub fn checksum(w: &DVector<f64>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in w.iter() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn run_cell(
    net: &dyn Network,
    lik: &Likelihood,
    delta: f64,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<(MarglikParts, f64, DVector<f64>, bool, usize)> {
    let prior = PriorSpec::isotropic(net.param_count(), delta)?;
    let map = train_map(net, lik, &prior, train, config, None)?;
    let w = map.w_star.values.clone();
    let model = linearize(net, &w, lik, train)?;
    let post = laplace_ggn_posterior(&model, &prior)?;
    let parts = glm_log_marglik(&model, &prior, &post)?;
    let ll = avg_test_log_lik(net, lik, &w, test)?;
    Ok((parts, ll, w, map.converged, map.epochs))
}

/// Trains one MAP per grid cell from the same initialization and evaluates
/// the Laplace-GGN marginal likelihood at it. Cells run on a pool of
/// `workers` threads; rows come back in grid order (noise variance outer,
/// prior precision inner). Failed cells are kept with `failure` set and are
/// excluded from the argmax.
pub fn sweep(
    net: &dyn Network,
    family: &Likelihood,
    train: &Dataset,
    test: &Dataset,
    grid: &SweepGrid,
    config: &TrainConfig,
    workers: usize,
) -> Result<SweepResult> {
    let cells = grid.cells(family)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(delta, sigma2)| {
                let lik = match sigma2 {
                    Some(s) => Likelihood::Gaussian { sigma2: s },
                    None => *family,
                };
                match run_cell(net, &lik, delta, train, test, config) {
                    Ok((parts, ll, w, converged, epochs)) => {
                        log::info!("sweep cell delta={delta} sigma2={sigma2:?}: glm={} test_ll={ll}", parts.glm);
                        SweepRow {
                            delta,
                            sigma2,
                            glm_log_marglik: parts.glm,
                            blr_log_marglik: parts.blr,
                            correction: parts.correction,
                            avg_test_log_lik: ll,
                            w_checksum: checksum(&w),
                            converged,
                            epochs,
                            failure: None,
                        }
                    }
                    Err(e) => {
                        log::warn!("sweep cell delta={delta} sigma2={sigma2:?} failed: {e}");
                        SweepRow {
                            delta,
                            sigma2,
                            glm_log_marglik: f64::NAN,
                            blr_log_marglik: f64::NAN,
                            correction: f64::NAN,
                            avg_test_log_lik: f64::NAN,
                            w_checksum: String::new(),
                            converged: false,
                            epochs: 0,
                            failure: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    let argmax = argmax_rows(&rows);
    Ok(SweepResult { rows, argmax })
}

fn argmax_rows(rows: &[SweepRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| r.failure.is_none() && r.glm_log_marglik.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, r)| match best {
            Some((_, v)) if v >= r.glm_log_marglik => best,
            _ => Some((i, r.glm_log_marglik)),
        })
        .map(|(i, _)| i)
}

/// Ranks with ties sharing their average rank (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `NaN` when fewer than two pairs or a constant
/// input.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return f64::NAN;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

impl SweepResult {
    pub fn best(&self) -> Option<&SweepRow> {
        self.argmax.map(|i| &self.rows[i])
    }

    /// Spearman correlation of marginal likelihood and test log-likelihood
    /// over the successful rows.
    pub fn marglik_test_correlation(&self) -> f64 {
        let ok: Vec<&SweepRow> = self
            .rows
            .iter()
            .filter(|r| r.failure.is_none() && r.glm_log_marglik.is_finite() && r.avg_test_log_lik.is_finite())
            .collect();
        let a: Vec<f64> = ok.iter().map(|r| r.glm_log_marglik).collect();
        let b: Vec<f64> = ok.iter().map(|r| r.avg_test_log_lik).collect();
        spearman(&a, &b)
    }

    /// Writes `<stem>.csv` with one row per cell and `<stem>.json` holding
    /// `meta` plus the argmax.
    pub fn save(&self, stem: &Path, meta: serde_json::Value) -> Result<()> {
        let header = [
            "delta",
            "sigma2",
            "glm_log_marglik",
            "blr_log_marglik",
            "correction",
            "avg_test_log_lik",
            "w_checksum",
            "converged",
            "epochs",
            "failure",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    format!("{}", r.delta),
                    r.sigma2.map(|s| format!("{s}")).unwrap_or_default(),
                    format!("{}", r.glm_log_marglik),
                    format!("{}", r.blr_log_marglik),
                    format!("{}", r.correction),
                    format!("{}", r.avg_test_log_lik),
                    r.w_checksum.clone(),
                    r.converged.to_string(),
                    r.epochs.to_string(),
                    r.failure.clone().unwrap_or_default(),
                ]
            })
            .collect();
        export_csv(&header, &rows, &stem.with_extension("csv"))?;
        let body = serde_json::json!({
            "meta": meta,
            "argmax": self.argmax,
            "best": self.best(),
        });
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&body)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::gp_log_marglik;
    use crate::nn::{Activation, Mlp, NetworkSpec};
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn scalar_model(lik: Likelihood, y: f64, f: f64) -> LinearizedModel {
        LinearizedModel::from_parts(
            lik,
            DVector::zeros(1),
            DMatrix::from_element(1, 1, y),
            DMatrix::from_element(1, 1, f),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn scalar_evidence() {
        let model = scalar_model(Likelihood::Gaussian { sigma2: 1.0 }, 0.0, 0.0);
        let prior = PriorSpec::isotropic(1, 1.0).unwrap();
        let post = laplace_ggn_posterior(&model, &prior).unwrap();
        let m = glm_log_marglik(&model, &prior, &post).unwrap();
        assert!((m.blr + 0.5 * (4.0 * PI).ln()).abs() < 1e-14);
        assert!((m.blr + 1.265512).abs() < 1e-6);
        assert_eq!(m.correction, 0.0);
        assert_eq!(m.glm, m.blr + m.correction);
    }

    #[test]
    fn bernoulli_correction_hand_value() {
        let model = scalar_model(Likelihood::Bernoulli, 1.0, 0.0);
        let c = correction_term(&model).unwrap();
        let oracle = 0.5f64.ln() - (-0.5 * (2.0 * PI * 0.25).ln() - 0.5);
        assert!((c - oracle).abs() < 1e-14);
        assert!((c - 0.032644).abs() < 1e-6);
        let empty = LinearizedModel::from_parts(Likelihood::Bernoulli, DVector::zeros(1), DMatrix::zeros(0, 1), DMatrix::zeros(0, 1), DMatrix::zeros(0, 1)).unwrap();
        assert_eq!(correction_term(&empty).unwrap(), 0.0);
    }

    #[test]
    fn matches_gp_route() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for lik in [
            Likelihood::Gaussian { sigma2: 0.3 },
            Likelihood::Bernoulli,
            Likelihood::Poisson,
            Likelihood::Categorical { k: 3 },
        ] {
            let k = lik.output_dim().unwrap_or(1);
            let (n, p) = (5, 4);
            let jac = DMatrix::from_fn(n * k, p, |_, _| rng.random_range(-1.0..1.0));
            let f = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
            let y = DMatrix::from_fn(n, k, |i, j| match lik {
                Likelihood::Categorical { .. } => (j == i % k) as u8 as f64,
                Likelihood::Gaussian { .. } => rng.random_range(-1.0..1.0),
                Likelihood::Poisson => (i % 3) as f64,
                Likelihood::Bernoulli => (i % 2) as f64,
            });
            let w = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let model = LinearizedModel::from_parts(lik, w, y, f, jac).unwrap();
            let prior = PriorSpec::isotropic(p, 0.7).unwrap().with_mean(DVector::from_element(p, 0.1)).unwrap();
            let post = laplace_ggn_posterior(&model, &prior).unwrap();
            let a = blr_log_marglik(&model, &prior, &post).unwrap();
            let b = gp_log_marglik(&model, &prior).unwrap();
            assert!((a - b).abs() < 1e-9 * b.abs(), "{lik}: {a} vs {b}");
        }
    }

    #[test]
    fn tight_prior_limit() {
        let n = 3;
        let jac = DMatrix::from_row_slice(n, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        let f = DMatrix::from_column_slice(n, 1, &[0.2, -0.4, 1.0]);
        let y = DMatrix::from_column_slice(n, 1, &[1.0, 0.0, 1.0]);
        let w = DVector::from_vec(vec![0.3, -0.1]);
        let lik = Likelihood::Bernoulli;
        let model = LinearizedModel::from_parts(lik, w.clone(), y, f, jac).unwrap();
        let prior = PriorSpec::isotropic(2, 1e12).unwrap();
        let post = laplace_ggn_posterior(&model, &prior).unwrap();
        let got = blr_log_marglik(&model, &prior, &post).unwrap();
        let mut oracle = 0.0;
        for i in 0..n {
            let pt = crate::laplace::LinearPoint { f: model.f.row(i).transpose(), jac: model.jac_i(i) };
            let lam = lik.hessian_lambda(pt.f.as_slice()).unwrap();
            let m = lik.inv_link(pt.f.as_slice()).unwrap()[0] - lam.as_matrix()[(0, 0)] * (&pt.jac * &w)[0];
            let v = lam.as_matrix()[(0, 0)];
            let yi = model.y[(i, 0)];
            oracle += -0.5 * (2.0 * PI * v).ln() - 0.5 * (yi - m).powi(2) / v;
        }
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn grid_and_spearman() {
        let g = log_grid(1e-3, 10.0, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[0] - 1e-3).abs() < 1e-18 && (g[4] - 10.0).abs() < 1e-12);
        assert!((g[1] / g[0] - g[2] / g[1]).abs() < 1e-12);
        assert!(log_grid(0.0, 1.0, 3).is_err());
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn single_cell_sweep() {
        let net = Mlp::new(NetworkSpec::new(1, &[3], 1, Activation::Tanh)).unwrap();
        let data = crate::data::gen_snelson_like(20, 0.0, 6.0, 0.09, 1);
        let test = crate::data::gen_snelson_like(10, 0.0, 6.0, 0.09, 2);
        let grid = SweepGrid { deltas: vec![1.0], sigma2s: Some(vec![0.1]) };
        let config = TrainConfig { lr: 1e-2, max_epochs: 300, ..TrainConfig::default() };
        let res = sweep(&net, &Likelihood::Gaussian { sigma2: 1.0 }, &data, &test, &grid, &config, 1).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.argmax, Some(0));
        let r = &res.rows[0];
        assert_eq!(r.correction, 0.0);
        assert_eq!(r.glm_log_marglik, r.blr_log_marglik + r.correction);
        let again = sweep(&net, &Likelihood::Gaussian { sigma2: 1.0 }, &data, &test, &grid, &config, 2).unwrap();
        assert_eq!(again.rows[0].w_checksum, r.w_checksum);
        let dir = tempfile::tempdir().unwrap();
        res.save(&dir.path().join("sweep"), serde_json::json!({"seed": 0})).unwrap();
        let (_, rows) = crate::data::read_csv(&dir.path().join("sweep.csv")).unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn classification_grid_rejects_noise_axis() {
        let grid = SweepGrid { deltas: vec![1.0], sigma2s: Some(vec![0.1]) };
        assert!(grid.cells(&Likelihood::Bernoulli).is_err());
        assert!(SweepGrid { deltas: vec![], sigma2s: None }.cells(&Likelihood::Bernoulli).is_err());
    }
}
