use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ggn_core::data::{SNELSON_GAP, SNELSON_TEST_N, SNELSON_TRAIN_N};
use ggn_core::ngvi::NgviConfig;
use ggn_core::nn::Activation;
use ggn_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("reading config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Whitespace `x y` file with a gap removed and a seeded subsample.
    Snelson {
        #[serde(default = "default_snelson_path")]
        path: PathBuf,
        #[serde(default = "default_gap")]
        gap: Option<(f64, f64)>,
        #[serde(default = "default_snelson_n")]
        n_train: usize,
        #[serde(default = "default_snelson_test_n")]
        n_test: usize,
    },
    TwoMoons {
        #[serde(default = "default_moons_n")]
        n_train: usize,
        #[serde(default = "default_moons_test_n")]
        n_test: usize,
        #[serde(default = "default_moons_noise")]
        noise_sd: f64,
    },
    Mnist {
        #[serde(default = "default_mnist_dir")]
        dir: PathBuf,
        #[serde(default = "default_digits")]
        digits: (u8, u8),
        #[serde(default = "default_mnist_n")]
        n_train: usize,
        /// Test-set size after filtering; `None` keeps all.
        #[serde(default)]
        n_test: Option<usize>,
    },
    /// Separate `x y` files for training and test data.
    Xy { train: PathBuf, test: Option<PathBuf> },
}

fn default_snelson_path() -> PathBuf {
    PathBuf::from("data/snelson.txt")
}
fn default_gap() -> Option<(f64, f64)> {
    Some(SNELSON_GAP)
}
fn default_snelson_n() -> usize {
    SNELSON_TRAIN_N
}
fn default_snelson_test_n() -> usize {
    SNELSON_TEST_N
}
fn default_moons_n() -> usize {
    150
}
fn default_moons_test_n() -> usize {
    1000
}
fn default_moons_noise() -> f64 {
    0.2
}
fn default_mnist_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}
fn default_digits() -> (u8, u8) {
    (4, 9)
}
fn default_mnist_n() -> usize {
    3000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkConfig {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "default_true")]
        has_bias: bool,
    },
    /// The fixed two-stage convolutional network for 28×28 binary MNIST.
    MnistConvnet,
}

fn default_hidden() -> Vec<usize> {
    vec![25; 5]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub delta: f64,
    /// Constant prior mean for every parameter.
    #[serde(default)]
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorMethod {
    LaplaceGgn,
    Voggn,
    Lgva,
    Oggn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictInputs {
    Test,
    /// Regular grid: `n` points per input axis between `lo` and `hi`.
    Grid { lo: Vec<f64>, hi: Vec<f64>, n: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub methods: Vec<String>,
    pub samples: usize,
    pub inputs: PredictInputs,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            methods: vec!["nn".into(), "glm".into(), "blr".into()],
            samples: 1000,
            inputs: PredictInputs::Test,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub deltas: AxisConfig,
    pub sigma2s: Option<AxisConfig>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            deltas: AxisConfig { lo: 1e-4, hi: 100.0, n: 8 },
            sigma2s: Some(AxisConfig { lo: 1e-3, hi: 10.0, n: 8 }),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Test indices to explain; when empty, the first `misclassified`
    /// misclassified test points are used.
    pub test_indices: Vec<usize>,
    pub misclassified: usize,
    pub top: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            test_indices: Vec::new(),
            misclassified: 3,
            top: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_network")]
    pub network: NetworkConfig,
    pub likelihood: String,
    pub prior: PriorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_posterior")]
    pub posterior: PosteriorMethod,
    #[serde(default)]
    pub ngvi: NgviConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_network() -> NetworkConfig {
    NetworkConfig::Mlp {
        hidden: default_hidden(),
        activation: default_activation(),
        has_bias: true,
    }
}
fn default_posterior() -> PosteriorMethod {
    PosteriorMethod::LaplaceGgn
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Parses `key=value`; the value is read as JSON when possible and as a
/// plain string otherwise.
fn parse_override(s: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("--set expects key=value, got `{s}`")))?;
    if key.is_empty() {
        return Err(ConfigError::Invalid(format!("--set has an empty key in `{s}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    for (depth, part) in path.iter().enumerate() {
        if !cur.is_object() {
            return Err(ConfigError::Field {
                path: path[..depth].join("."),
                message: "is not an object".into(),
            });
        }
        let obj = cur.as_object_mut().expect("checked object");
        if depth + 1 == path.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        cur = obj.entry(part.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads the JSON config (if any), applies `--set` overrides and the
/// `--seed`/`--out` flags, then validates into a [`RunConfig`].
pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(RunConfig, Value), ConfigError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (key, value) = parse_override(o)?;
        set_path(&mut root, &key, value)?;
    }
    if let Some(s) = seed {
        set_path(&mut root, &["seed".into()], Value::from(s))?;
    }
    if let Some(o) = out {
        set_path(&mut root, &["out".into()], Value::from(o.display().to_string()))?;
    }
    let config: RunConfig = serde_path_to_error::deserialize(root.clone()).map_err(|e| ConfigError::Field {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    config.validate()?;
    let resolved = serde_json::to_value(&config).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok((config, resolved))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |path: &str, message: String| ConfigError::Field {
            path: path.into(),
            message,
        };
        let lik: ggn_core::likelihood::Likelihood =
            self.likelihood.parse().map_err(|e: ggn_core::Error| field("likelihood", e.to_string()))?;
        lik.validate().map_err(|e| field("likelihood", e.to_string()))?;
        if !(self.prior.delta > 0.0 && self.prior.delta.is_finite()) {
            return Err(field("prior.delta", format!("must be positive, got {}", self.prior.delta)));
        }
        self.train.validate().map_err(|e| field("train", e.to_string()))?;
        self.ngvi.validate().map_err(|e| field("ngvi", e.to_string()))?;
        for m in &self.predict.methods {
            m.parse::<ggn_core::predictive::PredictiveMethod>()
                .map_err(|e| field("predict.methods", e.to_string()))?;
        }
        if self.predict.samples == 0 {
            return Err(field("predict.samples", "must be at least 1".into()));
        }
        if let PredictInputs::Grid { lo, hi, n } = &self.predict.inputs {
            if lo.len() != hi.len() || lo.is_empty() || *n == 0 {
                return Err(field("predict.inputs.grid", "needs matching non-empty lo/hi and n >= 1".into()));
            }
        }
        match &self.dataset {
            DatasetSpec::Snelson { path, gap, .. } => {
                if !path.exists() {
                    return Err(field("dataset.path", format!("{} does not exist", path.display())));
                }
                if let Some((a, b)) = gap {
                    if !(a < b) {
                        return Err(field("dataset.gap", format!("needs a < b, got [{a}, {b}]")));
                    }
                }
            }
            DatasetSpec::Mnist { dir, .. } => {
                if !dir.is_dir() {
                    return Err(field("dataset.dir", format!("{} is not a directory", dir.display())));
                }
            }
            DatasetSpec::Xy { train, test } => {
                for p in std::iter::once(train).chain(test.iter()) {
                    if !p.exists() {
                        return Err(field("dataset", format!("{} does not exist", p.display())));
                    }
                }
            }
            DatasetSpec::TwoMoons { n_train, n_test, .. } => {
                if n_train % 2 != 0 || n_test % 2 != 0 {
                    return Err(field("dataset", "two moons sizes must be even".into()));
                }
            }
        }
        if self.sweep.workers == 0 {
            return Err(field("sweep.workers", "must be at least 1".into()));
        }
        Ok(())
    }
}
