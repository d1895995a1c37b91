use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use ggn_core::data::{
    filter_digits, gen_two_moons, load_mnist_idx, load_snelson, snelson_test, snelson_train, subsample, Dataset,
};
use ggn_core::explain::{decompose, export_json, top_influencers};
use ggn_core::laplace::{laplace_ggn_posterior, linearize, GaussianPosterior, LinearPoint};
use ggn_core::likelihood::{gaussian_logpdf, Likelihood};
use ggn_core::marglik::{glm_log_marglik, log_grid, sweep, SweepGrid};
use ggn_core::ngvi::{run_ngvi, Estimator, NgviResult};
use ggn_core::nn::{ConvNet, ConvNetSpec, Mlp, Network, NetworkSpec};
use ggn_core::predictive::{
    binary_accuracy, export_predictive_csv, mean_binary_entropy, predict_blr_batch, predict_glm_sampling,
    predict_nn_sampling, PredictiveMethod, PredictiveSummary, SamplingOptions,
};
use ggn_core::train::{avg_test_log_lik, train_map, MapResult, PriorSpec};

use crate::config::{DatasetSpec, NetworkConfig, PosteriorMethod, PredictInputs, RunConfig};

pub const WORKERS_ENV: &str = "GGN_WORKERS";

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: ggn_core::Error,
}

type Staged<T> = std::result::Result<T, StageError>;

trait Tag<T> {
    fn stage(self, stage: &'static str) -> Staged<T>;
}

impl<T, E: Into<ggn_core::Error>> Tag<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Staged<T> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

pub struct Run {
    pub config: RunConfig,
    pub resolved: Value,
    pub command: &'static str,
    started: Instant,
    outputs: Vec<PathBuf>,
    summary: serde_json::Map<String, Value>,
}

impl Run {
    pub fn new(config: RunConfig, resolved: Value, command: &'static str) -> Staged<Self> {
        fs::create_dir_all(&config.out).stage("io")?;
        Ok(Run {
            config,
            resolved,
            command,
            started: Instant::now(),
            outputs: Vec::new(),
            summary: Default::default(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.config.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn note(&mut self, key: &str, value: Value) {
        self.summary.insert(key.into(), value);
    }

    /// Writes `manifest.json`: config echo, version, wall time, outputs and
    /// headline numbers. Kept separate from the data outputs so repeated
    /// runs produce byte-identical CSVs.
    pub fn finish(mut self) -> Staged<()> {
        let manifest = self.config.out.join("manifest.json");
        let body = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.resolved,
            "wall_time_secs": self.started.elapsed().as_secs_f64(),
            "outputs": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "summary": Value::Object(std::mem::take(&mut self.summary)),
        });
        fs::write(&manifest, serde_json::to_string_pretty(&body).stage("io")?).stage("io")?;
        Ok(())
    }
}

pub fn workers(config: &RunConfig) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(config.sweep.workers)
}

pub struct Problem {
    pub net: Box<dyn Network>,
    pub lik: Likelihood,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Problem {
    pub fn prior(&self, delta: f64, mean: f64) -> Staged<PriorSpec> {
        let p = self.net.param_count();
        PriorSpec::isotropic(p, delta)
            .and_then(|s| s.with_mean(DVector::from_element(p, mean)))
            .stage("prior")
    }
}

fn load_data(cfg: &RunConfig) -> Staged<(Dataset, Option<Dataset>)> {
    let seed = cfg.seed;
    match &cfg.dataset {
        DatasetSpec::Snelson { path, gap, n_train, n_test } => {
            let full = load_snelson(path).stage("data")?;
            let train = match gap {
                Some(g) => snelson_train(&full, *g, *n_train, seed).stage("data")?,
                None => subsample(&full, *n_train, seed),
            };
            Ok((train, Some(snelson_test(*n_test, seed.wrapping_add(1)))))
        }
        DatasetSpec::TwoMoons { n_train, n_test, noise_sd } => Ok((
            gen_two_moons(*n_train, *noise_sd, seed).stage("data")?,
            Some(gen_two_moons(*n_test, *noise_sd, seed.wrapping_add(1)).stage("data")?),
        )),
        DatasetSpec::Mnist { dir, digits, n_train, n_test } => {
            let train = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))
                .stage("data")?;
            let test = load_mnist_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))
                .stage("data")?;
            let train = subsample(&filter_digits(&train, digits.0, digits.1), *n_train, seed);
            let test = filter_digits(&test, digits.0, digits.1);
            let test = match n_test {
                Some(n) => subsample(&test, *n, seed.wrapping_add(1)),
                None => test,
            };
            Ok((train, Some(test)))
        }
        DatasetSpec::Xy { train, test } => Ok((
            load_snelson(train).stage("data")?,
            test.as_ref().map(|t| load_snelson(t)).transpose().stage("data")?,
        )),
    }
}

pub fn build_problem(cfg: &RunConfig) -> Staged<Problem> {
    let lik: Likelihood = cfg.likelihood.parse().stage("config")?;
    let (train, test) = load_data(cfg)?;
    let out_dim = lik.output_dim().unwrap_or(train.y.ncols());
    let net: Box<dyn Network> = match &cfg.network {
        NetworkConfig::Mlp {
            hidden,
            activation,
            has_bias,
        } => {
            let mut spec = NetworkSpec::new(train.input_dim(), hidden, out_dim, *activation);
            spec.has_bias = *has_bias;
            Box::new(Mlp::new(spec).stage("network")?)
        }
        NetworkConfig::MnistConvnet => Box::new(ConvNet::new(ConvNetSpec::mnist_binary()).stage("network")?),
    };
    log::info!(
        "problem: {} train points, {} parameters, likelihood {lik}",
        train.len(),
        net.param_count()
    );
    Ok(Problem { net, lik, train, test })
}

fn train_stage(run: &mut Run, problem: &Problem, prior: &PriorSpec) -> Staged<MapResult> {
    let map = train_map(problem.net.as_ref(), &problem.lik, prior, &problem.train, &run.config.train, None)
        .stage("train")?;
    let stem = run.path("map");
    map.save(&stem).stage("io")?;
    run.outputs.push(stem.with_extension("json"));
    run.outputs.push(stem.with_extension("trace.json"));
    run.note("param_count", json!(problem.net.param_count()));
    run.note("map_epochs", json!(map.epochs));
    run.note("map_converged", json!(map.converged));
    run.note("map_grad_norm", json!(map.final_grad_norm()));
    if let Some(test) = &problem.test {
        let ll = avg_test_log_lik(problem.net.as_ref(), &problem.lik, &map.w_star.values, test).stage("train")?;
        run.note("map_test_log_lik", json!(ll));
    }
    Ok(map)
}

pub fn cmd_train(mut run: Run) -> Staged<()> {
    let problem = build_problem(&run.config)?;
    let prior = problem.prior(run.config.prior.delta, run.config.prior.mean)?;
    train_stage(&mut run, &problem, &prior)?;
    run.finish()
}

/// Posterior and the point the linearized predictive is expanded at.
struct Inferred {
    posterior: GaussianPosterior,
    expansion: DVector<f64>,
}

fn estimator_for(method: PosteriorMethod) -> Option<Estimator> {
    match method {
        PosteriorMethod::LaplaceGgn => None,
        PosteriorMethod::Voggn => Some(Estimator::Voggn),
        PosteriorMethod::Lgva => Some(Estimator::Lgva),
        PosteriorMethod::Oggn => Some(Estimator::Oggn),
    }
}

fn ngvi_stage(run: &mut Run, problem: &Problem, prior: &PriorSpec, estimator: Estimator) -> Staged<NgviResult> {
    let mut config = run.config.ngvi.clone();
    config.estimator = estimator;
    let init = problem
        .net
        .init_params(&mut ChaCha8Rng::seed_from_u64(run.config.train.seed));
    let res = run_ngvi(problem.net.as_ref(), &problem.lik, prior, &problem.train, &config, Some(&init))
        .stage("ngvi")?;
    let trace = run.path("ngvi_trace.csv");
    res.export_trace_csv(&trace).stage("io")?;
    run.note("ngvi_iterations", json!(res.trace.len()));
    run.note("ngvi_converged", json!(res.converged));
    Ok(res)
}

fn infer(run: &mut Run, problem: &Problem, prior: &PriorSpec) -> Staged<Inferred> {
    let inferred = match estimator_for(run.config.posterior) {
        None => {
            let map = train_stage(run, problem, prior)?;
            let w = map.w_star.values;
            let model = linearize(problem.net.as_ref(), &w, &problem.lik, &problem.train).stage("posterior")?;
            let posterior = laplace_ggn_posterior(&model, prior).stage("posterior")?;
            let parts = glm_log_marglik(&model, prior, &posterior).stage("posterior")?;
            run.note("glm_log_marglik", json!(parts.glm));
            run.note("blr_log_marglik", json!(parts.blr));
            run.note("correction", json!(parts.correction));
            Inferred {
                posterior,
                expansion: w,
            }
        }
        Some(est) => {
            let res = ngvi_stage(run, problem, prior, est)?;
            let posterior = res.state.q;
            Inferred {
                expansion: posterior.mean.clone(),
                posterior,
            }
        }
    };
    let stem = run.path("posterior");
    inferred.posterior.save(&stem).stage("io")?;
    Ok(inferred)
}

pub fn cmd_posterior(mut run: Run) -> Staged<()> {
    let problem = build_problem(&run.config)?;
    let prior = problem.prior(run.config.prior.delta, run.config.prior.mean)?;
    infer(&mut run, &problem, &prior)?;
    run.finish()
}

pub fn cmd_ngvi(mut run: Run) -> Staged<()> {
    let problem = build_problem(&run.config)?;
    let prior = problem.prior(run.config.prior.delta, run.config.prior.mean)?;
    let est = estimator_for(run.config.posterior).unwrap_or(run.config.ngvi.estimator);
    let res = ngvi_stage(&mut run, &problem, &prior, est)?;
    let stem = run.path("posterior");
    res.state.q.save(&stem).stage("io")?;
    run.finish()
}

fn grid_inputs(lo: &[f64], hi: &[f64], n: usize) -> DMatrix<f64> {
    let d = lo.len();
    let axis = |j: usize, i: usize| {
        if n == 1 {
            lo[j]
        } else {
            lo[j] + (hi[j] - lo[j]) * i as f64 / (n - 1) as f64
        }
    };
    let total = n.pow(d as u32);
    DMatrix::from_fn(total, d, |row, j| {
        let stride = n.pow((d - 1 - j) as u32);
        axis(j, (row / stride) % n)
    })
}

fn avg_log_predictive(lik: &Likelihood, preds: &[PredictiveSummary], y: &DMatrix<f64>) -> Option<f64> {
    let n = preds.len();
    if n == 0 || y.nrows() != n {
        return None;
    }
    let total: f64 = preds
        .iter()
        .enumerate()
        .map(|(i, p)| match lik {
            Likelihood::Bernoulli => {
                let q = p.probability().clamp(1e-12, 1.0 - 1e-12);
                if y[(i, 0)] >= 0.5 {
                    q.ln()
                } else {
                    (1.0 - q).ln()
                }
            }
            _ => gaussian_logpdf(&y.row(i).transpose(), &p.mean, &p.cov),
        })
        .sum();
    Some(total / n as f64)
}

pub fn cmd_predict(mut run: Run) -> Staged<()> {
    let problem = build_problem(&run.config)?;
    let prior = problem.prior(run.config.prior.delta, run.config.prior.mean)?;
    let inferred = infer(&mut run, &problem, &prior)?;
    let (xs, labels) = match &run.config.predict.inputs {
        PredictInputs::Test => {
            let test = problem
                .test
                .as_ref()
                .ok_or_else(|| ggn_core::Error::Config("predict.inputs=test needs a test set".into()))
                .stage("predict")?;
            (test.x.clone(), Some(test.y.clone()))
        }
        PredictInputs::Grid { lo, hi, n } => {
            if lo.len() != problem.net.input_dim() {
                return Err(ggn_core::Error::Config(format!(
                    "predict.inputs.grid has {} axes, network expects {}",
                    lo.len(),
                    problem.net.input_dim()
                )))
                .stage("config");
            }
            (grid_inputs(lo, hi, *n), None)
        }
    };
    let net = problem.net.as_ref();
    let opts = SamplingOptions::with_samples(run.config.predict.samples);
    let w = &inferred.expansion;
    let mut all = Vec::new();
    let mut metrics = serde_json::Map::new();
    let points = LinearPoint::batch(net, w, &xs).stage("predict")?;
    for m in run.config.predict.methods.clone() {
        let method: PredictiveMethod = m.parse().stage("config")?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed);
        let preds = match method {
            PredictiveMethod::NnSampling => predict_nn_sampling(net, &problem.lik, &inferred.posterior, &xs, opts, &mut rng),
            PredictiveMethod::GlmSampling => {
                predict_glm_sampling(&problem.lik, w, &inferred.posterior, &points, &xs, opts, &mut rng)
            }
            PredictiveMethod::BlrClosed => predict_blr_batch(&problem.lik, w, &inferred.posterior, &points, &xs),
        }
        .stage("predict")?;
        let mut row = serde_json::Map::new();
        if matches!(problem.lik, Likelihood::Bernoulli) {
            row.insert("mean_entropy".into(), json!(mean_binary_entropy(&preds)));
            if let Some(y) = &labels {
                row.insert("accuracy".into(), json!(binary_accuracy(&preds, y).stage("predict")?));
            }
        }
        if let Some(y) = &labels {
            if let Some(lp) = avg_log_predictive(&problem.lik, &preds, y) {
                row.insert("avg_log_predictive".into(), json!(lp));
            }
        }
        metrics.insert(method.tag().into(), Value::Object(row));
        all.extend(preds);
    }
    let csv = run.path("predictive.csv");
    export_predictive_csv(&problem.lik, &all, &csv).stage("io")?;
    let mpath = run.path("predictive_metrics.json");
    fs::write(&mpath, serde_json::to_string_pretty(&metrics).stage("io")?).stage("io")?;
    run.note("predictive", Value::Object(metrics));
    run.finish()
}

pub fn cmd_sweep(mut run: Run) -> Staged<()> {
    let problem = build_problem(&run.config)?;
    let test = problem
        .test
        .clone()
        .ok_or_else(|| ggn_core::Error::Config("sweep needs a test set".into()))
        .stage("sweep")?;
    let sc = &run.config.sweep;
    let deltas = log_grid(sc.deltas.lo, sc.deltas.hi, sc.deltas.n).stage("config")?;
    let sigma2s = match (&sc.sigma2s, problem.lik.is_gaussian()) {
        (Some(a), true) => Some(log_grid(a.lo, a.hi, a.n).stage("config")?),
        _ => None,
    };
    let grid = SweepGrid { deltas, sigma2s };
    let workers = workers(&run.config);
    log::info!("sweep over {} cells with {workers} workers", grid.deltas.len() * grid.sigma2s.as_ref().map_or(1, Vec::len));
    let res = sweep(
        problem.net.as_ref(),
        &problem.lik,
        &problem.train,
        &test,
        &grid,
        &run.config.train,
        workers,
    )
    .stage("sweep")?;
    let stem = run.path("sweep.csv").with_extension("");
    run.outputs.push(stem.with_extension("json"));
    let meta = json!({
        "seed": run.config.seed,
        "grid": grid,
        "train": run.config.train,
        "likelihood": problem.lik.to_string(),
        "param_count": problem.net.param_count(),
    });
    res.save(&stem, meta).stage("io")?;
    run.note("argmax", json!(res.best()));
    run.note("spearman_marglik_test", json!(res.marglik_test_correlation()));
    run.finish()
}

pub fn cmd_explain(mut run: Run) -> Staged<()> {
    let problem = build_problem(&run.config)?;
    let prior = problem.prior(run.config.prior.delta, run.config.prior.mean)?;
    let test = problem
        .test
        .clone()
        .ok_or_else(|| ggn_core::Error::Config("explain needs a test set".into()))
        .stage("explain")?;
    let map = train_stage(&mut run, &problem, &prior)?;
    let w = map.w_star.values;
    let net = problem.net.as_ref();
    let model = linearize(net, &w, &problem.lik, &problem.train).stage("explain")?;
    let f_test = net.forward_batch(w.as_slice(), &test.x).stage("explain")?;
    let bernoulli = matches!(problem.lik, Likelihood::Bernoulli);
    let correct = |i: usize| (f_test[(i, 0)] >= 0.0) == (test.y[(i, 0)] >= 0.5);
    if bernoulli {
        let acc = (0..test.len()).filter(|&i| correct(i)).count() as f64 / test.len().max(1) as f64;
        run.note("map_test_accuracy", json!(acc));
    }
    let chosen: Vec<usize> = if !run.config.explain.test_indices.is_empty() {
        run.config.explain.test_indices.clone()
    } else if bernoulli {
        (0..test.len())
            .filter(|&i| !correct(i))
            .take(run.config.explain.misclassified)
            .collect()
    } else {
        (0..run.config.explain.misclassified.min(test.len())).collect()
    };
    let a = ggn_core::explain::importances(&model).stage("explain")?;
    run.note("max_abs_importance", json!(a.amax()));
    let mut explanations = Vec::new();
    let mut summaries = Vec::new();
    for &i in &chosen {
        if i >= test.len() {
            return Err(ggn_core::Error::Config(format!("explain.test_indices: {i} out of range"))).stage("config");
        }
        let x = test.x_row(i);
        let pt = LinearPoint::at(net, &w, &x).stage("explain")?;
        let e = decompose(&model, &prior, &pt, x).stage("explain")?;
        let top = top_influencers(&e, run.config.explain.top);
        let label = test.y[(i, 0)];
        let opposite = top.iter().filter(|c| problem.train.y[(c.index, 0)] != label).count();
        summaries.push(json!({
            "test_index": i,
            "label": label,
            "prediction": e.prediction,
            "top_indices": top.iter().map(|c| c.index).collect::<Vec<_>>(),
            "top_train_labels": top.iter().map(|c| problem.train.y[(c.index, 0)]).collect::<Vec<_>>(),
            "opposite_class_in_top": opposite,
        }));
        explanations.push(e);
    }
    let path = run.path("explanations.json");
    export_json(&explanations, &path).stage("io")?;
    run.note("explained", Value::Array(summaries));
    run.finish()
}

pub fn write_snelson(path: &Path) -> Staged<()> {
    use ggn_core::data::{format_xy, gen_snelson_like, SNELSON_FILE_N, SNELSON_FILE_SEED, SNELSON_NOISE_VAR, SNELSON_RANGE};
    let ds = gen_snelson_like(SNELSON_FILE_N, SNELSON_RANGE.0, SNELSON_RANGE.1, SNELSON_NOISE_VAR, SNELSON_FILE_SEED);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).stage("io")?;
    }
    fs::write(path, format_xy(&ds)).stage("io")
}
