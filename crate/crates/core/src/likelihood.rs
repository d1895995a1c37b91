//! Exponential-family likelihoods on the natural parameter `f`.
//!
//! Labels are passed as length-K slices: Gaussian targets, a single 0/1 value
//! for Bernoulli, a one-hot vector for Categorical and a single non-negative
//! integer count for Poisson.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{pseudo_inverse, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian { sigma2: f64 },
    Bernoulli,
    Categorical { k: usize },
    Poisson,
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(f))` without overflow.
pub fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

pub fn logsumexp(f: &[f64]) -> f64 {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let lse = logsumexp(f);
    f.iter().map(|v| (v - lse).exp()).collect()
}

/// Log density of `N(y | m, C)` for a PSD `C`; the pseudo-inverse and
/// pseudo-determinant are used when `C` is singular.
pub fn gaussian_logpdf(y: &DVector<f64>, m: &DVector<f64>, c: &SymMatrix) -> f64 {
    let d = y - m;
    let k = d.len();
    if k == 1 {
        let v = c.as_matrix()[(0, 0)];
        return -0.5 * (2.0 * PI * v).ln() - 0.5 * d[0] * d[0] / v;
    }
    let eig = c.eigenvalues();
    let lam_max = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut logdet = 0.0;
    let mut rank = 0usize;
    for &l in eig.iter() {
        if l > crate::linalg::PINV_RTOL * lam_max && l > 0.0 {
            logdet += l.ln();
            rank += 1;
        }
    }
    let pinv = pseudo_inverse(c);
    let quad = d.dot(&(pinv.as_matrix() * &d));
    -0.5 * rank as f64 * (2.0 * PI).ln() - 0.5 * logdet - 0.5 * quad
}

/// Per-datum surrogate regression pieces on reduced label coordinates:
/// `y_r ≈ mean + scale · J (w − w*)` with noise covariance `noise`.
#[derive(Debug, Clone)]
pub struct SurrogateBlock {
    pub scale: DMatrix<f64>,
    pub noise: SymMatrix,
    pub mean: DVector<f64>,
}

impl Likelihood {
    pub fn output_dim(&self) -> Option<usize> {
        match self {
            Likelihood::Categorical { k } => Some(*k),
            Likelihood::Bernoulli | Likelihood::Poisson => Some(1),
            Likelihood::Gaussian { .. } => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::Gaussian { .. } => "gaussian",
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::Categorical { .. } => "categorical",
            Likelihood::Poisson => "poisson",
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Likelihood::Gaussian { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Likelihood::Gaussian { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => {
                Err(Error::Domain(format!("gaussian sigma2 must be positive, got {sigma2}")))
            }
            Likelihood::Categorical { k } if k < 2 => {
                Err(Error::Domain(format!("categorical needs k >= 2, got {k}")))
            }
            _ => Ok(()),
        }
    }

    fn check_shapes(&self, y: Option<&[f64]>, f: &[f64]) -> Result<()> {
        if let Some(k) = self.output_dim() {
            check_dim("likelihood natural parameter", k, f.len())?;
        }
        if let Some(y) = y {
            check_dim("likelihood label", f.len(), y.len())?;
        }
        Ok(())
    }

    fn check_label(&self, y: &[f64]) -> Result<()> {
        match self {
            Likelihood::Gaussian { .. } => {
                if y.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::Domain("gaussian label must be finite".into()))
                }
            }
            Likelihood::Bernoulli => {
                if y[0] == 0.0 || y[0] == 1.0 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("bernoulli label must be 0 or 1, got {}", y[0])))
                }
            }
            Likelihood::Categorical { .. } => {
                let ones = y.iter().filter(|&&v| v == 1.0).count();
                let zeros = y.iter().filter(|&&v| v == 0.0).count();
                if ones == 1 && ones + zeros == y.len() {
                    Ok(())
                } else {
                    Err(Error::Domain("categorical label must be one-hot".into()))
                }
            }
            Likelihood::Poisson => {
                if y[0] >= 0.0 && y[0].fract() == 0.0 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("poisson label must be a non-negative integer, got {}", y[0])))
                }
            }
        }
    }

    pub fn log_lik(&self, y: &[f64], f: &[f64]) -> Result<f64> {
        self.check_shapes(Some(y), f)?;
        self.check_label(y)?;
        Ok(match *self {
            Likelihood::Gaussian { sigma2 } => {
                let k = f.len() as f64;
                let sq: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                -0.5 * k * (2.0 * PI * sigma2).ln() - 0.5 * sq / sigma2
            }
            Likelihood::Bernoulli => y[0] * f[0] - softplus(f[0]),
            Likelihood::Categorical { .. } => {
                let yf: f64 = y.iter().zip(f).map(|(a, b)| a * b).sum();
                yf - logsumexp(f)
            }
            Likelihood::Poisson => y[0] * f[0] - f[0].exp() - libm::lgamma(y[0] + 1.0),
        })
    }

    pub fn inv_link(&self, f: &[f64]) -> Result<DVector<f64>> {
        self.check_shapes(None, f)?;
        Ok(match self {
            Likelihood::Gaussian { .. } => DVector::from_column_slice(f),
            Likelihood::Bernoulli => DVector::from_element(1, sigmoid(f[0])),
            Likelihood::Categorical { .. } => DVector::from_vec(softmax(f)),
            Likelihood::Poisson => DVector::from_element(1, f[0].exp()),
        })
    }

    /// `∇_f log p(y | f)`.
    pub fn residual(&self, y: &[f64], f: &[f64]) -> Result<DVector<f64>> {
        self.check_shapes(Some(y), f)?;
        self.check_label(y)?;
        Ok(match self {
            Likelihood::Gaussian { sigma2 } => (DVector::from_column_slice(y) - DVector::from_column_slice(f)) / *sigma2,
            // 1 − σ(f) = σ(−f) keeps precision for confident predictions
            Likelihood::Bernoulli if y[0] == 1.0 => DVector::from_element(1, sigmoid(-f[0])),
            _ => DVector::from_column_slice(y) - self.inv_link(f)?,
        })
    }

    /// `−∇²_f log p(y | f)`, which does not depend on `y`.
    pub fn hessian_lambda(&self, f: &[f64]) -> Result<SymMatrix> {
        self.check_shapes(None, f)?;
        let k = f.len();
        let m = match self {
            Likelihood::Gaussian { sigma2 } => DMatrix::identity(k, k) / *sigma2,
            Likelihood::Bernoulli => {
                DMatrix::from_element(1, 1, sigmoid(f[0]) * sigmoid(-f[0]))
            }
            Likelihood::Categorical { .. } => {
                let p = DVector::from_vec(softmax(f));
                DMatrix::from_diagonal(&p) - &p * p.transpose()
            }
            Likelihood::Poisson => DMatrix::from_element(1, 1, f[0].exp()),
        };
        SymMatrix::new(m)
    }

    /// Output-space scaling `D` of the surrogate regression design: the
    /// surrogate observation model is `y ≈ g⁻¹(f*) + D J (w − w*)`.
    ///
    /// For unit-dispersion families `D = Λ(f)`. For the Gaussian the mean is
    /// already linear in `f`, so `D = I`.
    pub fn surrogate_scale(&self, f: &[f64]) -> Result<SymMatrix> {
        match self {
            Likelihood::Gaussian { .. } => Ok(SymMatrix::identity(f.len())),
            _ => self.hessian_lambda(f),
        }
    }

    /// Observation covariance `C` of the surrogate regression: `Λ(f)` for
    /// unit-dispersion families and `σ²I` for the Gaussian.
    pub fn surrogate_noise(&self, f: &[f64]) -> Result<SymMatrix> {
        match self {
            Likelihood::Gaussian { sigma2 } => {
                Ok(SymMatrix::from_diagonal(&vec![*sigma2; f.len()]))
            }
            _ => self.hessian_lambda(f),
        }
    }

    /// Number of label coordinates the surrogate density is defined on.
    ///
    /// Categorical one-hot labels and softmax means both sum to one, and
    /// `Λ(f)` has the all-ones null vector, so the surrogate Gaussian is
    /// degenerate on `R^K`. The last coordinate is then determined by the
    /// others and is dropped; the remaining `(K−1) × (K−1)` block of `Λ` is
    /// positive definite and `Λ[:, r] Λ[r, r]⁻¹ Λ[r, :] = Λ` holds exactly.
    pub fn surrogate_dim(&self, k: usize) -> usize {
        match self {
            Likelihood::Categorical { .. } => k - 1,
            _ => k,
        }
    }

    /// Surrogate design scale, noise and mean restricted to the first
    /// [`surrogate_dim`](Self::surrogate_dim) label coordinates.
    pub fn reduced_surrogate(&self, f: &[f64]) -> Result<SurrogateBlock> {
        let k = f.len();
        let kr = self.surrogate_dim(k);
        let d = self.surrogate_scale(f)?;
        let c = self.surrogate_noise(f)?;
        let mean = self.inv_link(f)?;
        Ok(SurrogateBlock {
            scale: d.as_matrix().rows(0, kr).into_owned(),
            noise: SymMatrix::new(c.as_matrix().view((0, 0), (kr, kr)).into_owned())?,
            mean: mean.rows(0, kr).into_owned(),
        })
    }

    pub fn reduce_label(&self, y: &[f64]) -> DVector<f64> {
        let kr = self.surrogate_dim(y.len());
        DVector::from_column_slice(&y[..kr])
    }

    /// `log N(y | g⁻¹(f), C(f))`, the surrogate density at the expansion
    /// point, on the reduced label coordinates.
    pub fn surrogate_log_density(&self, y: &[f64], f: &[f64]) -> Result<f64> {
        self.check_shapes(Some(y), f)?;
        let s = self.reduced_surrogate(f)?;
        Ok(gaussian_logpdf(&self.reduce_label(y), &s.mean, &s.noise))
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Likelihood::Gaussian { sigma2 } => write!(out, "gaussian:sigma2={sigma2}"),
            Likelihood::Bernoulli => write!(out, "bernoulli"),
            Likelihood::Categorical { k } => write!(out, "categorical:k={k}"),
            Likelihood::Poisson => write!(out, "poisson"),
        }
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    /// Parses `gaussian:sigma2=0.1`, `bernoulli`, `categorical:k=10` or `poisson`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (family, args) = match s.split_once(':') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (s, None),
        };
        let arg = |key: &str| -> Result<String> {
            let args = args.ok_or_else(|| Error::Config(format!("likelihood '{s}' needs {key}=...")))?;
            for part in args.split(',') {
                if let Some((k, v)) = part.split_once('=') {
                    if k.trim() == key {
                        return Ok(v.trim().to_string());
                    }
                }
            }
            Err(Error::Config(format!("likelihood '{s}' needs {key}=...")))
        };
        let lik = match family.to_ascii_lowercase().as_str() {
            "gaussian" => {
                let v = arg("sigma2")?;
                let sigma2 = v
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad sigma2 '{v}'")))?;
                Likelihood::Gaussian { sigma2 }
            }
            "bernoulli" => Likelihood::Bernoulli,
            "categorical" => {
                let v = arg("k")?;
                let k = v.parse::<usize>().map_err(|_| Error::Config(format!("bad k '{v}'")))?;
                Likelihood::Categorical { k }
            }
            "poisson" => Likelihood::Poisson,
            other => return Err(Error::Config(format!("unknown likelihood family '{other}'"))),
        };
        lik.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(lik)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn log_lik_hand_values() {
        let b = Likelihood::Bernoulli.log_lik(&[1.0], &[0.0]).unwrap();
        assert!((b + LN2).abs() < 1e-15);
        let g = Likelihood::Gaussian { sigma2: 1.0 }.log_lik(&[0.0], &[0.0]).unwrap();
        assert!((g + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let p = Likelihood::Poisson.log_lik(&[0.0], &[0.0]).unwrap();
        assert!((p + 1.0).abs() < 1e-15);
    }

    #[test]
    fn inv_link_hand_values() {
        assert_eq!(Likelihood::Bernoulli.inv_link(&[0.0]).unwrap()[0], 0.5);
        let c = Likelihood::Categorical { k: 2 }.inv_link(&[0.0, 0.0]).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
        let p = Likelihood::Poisson.inv_link(&[1.0]).unwrap()[0];
        assert!((p - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn residual_hand_values() {
        let g = Likelihood::Gaussian { sigma2: 1.0 }.residual(&[2.0], &[1.0]).unwrap();
        assert_eq!(g[0], 1.0);
        let b = Likelihood::Bernoulli.residual(&[1.0], &[0.0]).unwrap();
        assert_eq!(b[0], 0.5);
    }

    #[test]
    fn hessian_hand_values() {
        assert_eq!(Likelihood::Bernoulli.hessian_lambda(&[0.0]).unwrap().as_matrix()[(0, 0)], 0.25);
        let c = Likelihood::Categorical { k: 2 }.hessian_lambda(&[0.0, 0.0]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((c.as_matrix() - expected).abs().max() < 1e-15);
        let g = Likelihood::Gaussian { sigma2: 0.1 }.hessian_lambda(&[0.0]).unwrap();
        assert!((g.as_matrix()[(0, 0)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_rows_sum_to_zero() {
        let lam = Likelihood::Categorical { k: 4 }
            .hessian_lambda(&[0.3, -1.0, 2.0, 0.1])
            .unwrap();
        for i in 0..4 {
            assert!(lam.as_matrix().row(i).sum().abs() < 1e-15);
        }
        assert!(lam.min_eigenvalue() > -1e-14);
    }

    #[test]
    fn bernoulli_saturates() {
        for f in [-30.0, 30.0] {
            assert!(Likelihood::Bernoulli.hessian_lambda(&[f]).unwrap().as_matrix()[(0, 0)] < 1e-12);
        }
        let ll = Likelihood::Bernoulli.log_lik(&[1.0], &[30.0]).unwrap();
        assert!(ll.abs() < 1e-10);
        let ll = Likelihood::Bernoulli.log_lik(&[0.0], &[800.0]).unwrap();
        assert!((ll + 800.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_dispersion_scaling() {
        let a = Likelihood::Gaussian { sigma2: 1.0 };
        let b = Likelihood::Gaussian { sigma2: 4.0 };
        let ra = a.residual(&[1.5], &[0.2]).unwrap()[0];
        let rb = b.residual(&[1.5], &[0.2]).unwrap()[0];
        assert!((ra / rb - 4.0).abs() < 1e-12);
        let la = a.hessian_lambda(&[0.2]).unwrap().as_matrix()[(0, 0)];
        let lb = b.hessian_lambda(&[0.2]).unwrap().as_matrix()[(0, 0)];
        assert!((la / lb - 4.0).abs() < 1e-12);
    }

    #[test]
    fn domain_violations_rejected() {
        assert!(Likelihood::Bernoulli.log_lik(&[0.5], &[0.0]).is_err());
        assert!(Likelihood::Poisson.log_lik(&[-1.0], &[0.0]).is_err());
        assert!(Likelihood::Categorical { k: 3 }.log_lik(&[1.0, 1.0, 0.0], &[0.0; 3]).is_err());
        assert!(Likelihood::Bernoulli.log_lik(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn config_strings_parse() {
        assert_eq!(
            "gaussian:sigma2=0.1".parse::<Likelihood>().unwrap(),
            Likelihood::Gaussian { sigma2: 0.1 }
        );
        assert_eq!("bernoulli".parse::<Likelihood>().unwrap(), Likelihood::Bernoulli);
        assert_eq!(
            "categorical:k=10".parse::<Likelihood>().unwrap(),
            Likelihood::Categorical { k: 10 }
        );
        assert_eq!("poisson".parse::<Likelihood>().unwrap(), Likelihood::Poisson);
        assert!("gaussian".parse::<Likelihood>().is_err());
        assert!("gaussian:sigma2=-1".parse::<Likelihood>().is_err());
        assert!("categorical:k=1".parse::<Likelihood>().is_err());
        assert!("student".parse::<Likelihood>().is_err());
        for lik in [
            Likelihood::Gaussian { sigma2: 0.25 },
            Likelihood::Bernoulli,
            Likelihood::Categorical { k: 3 },
            Likelihood::Poisson,
        ] {
            assert_eq!(lik.to_string().parse::<Likelihood>().unwrap(), lik);
        }
    }

    #[test]
    fn surrogate_density_bernoulli_hand_value() {
        let v = Likelihood::Bernoulli.surrogate_log_density(&[1.0], &[0.0]).unwrap();
        let expected = -0.5 * (2.0 * PI * 0.25).ln() - 0.5;
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn stable_bernoulli_tails() {
        let lam = Likelihood::Bernoulli.hessian_lambda(&[40.0]).unwrap().as_matrix()[(0, 0)];
        assert!(lam > 0.0 && (lam / (-40.0_f64).exp() - 1.0).abs() < 1e-12);
        let r = Likelihood::Bernoulli.residual(&[1.0], &[40.0]).unwrap()[0];
        assert!(r > 0.0 && (r / (-40.0_f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn categorical_reduced_surrogate_reproduces_lambda() {
        let lik = Likelihood::Categorical { k: 3 };
        let f = [0.2, -0.7, 1.1];
        let s = lik.reduced_surrogate(&f).unwrap();
        assert_eq!(s.scale.shape(), (2, 3));
        let cinv = s.noise.as_matrix().clone().try_inverse().unwrap();
        let back = s.scale.transpose() * cinv * &s.scale;
        let lam = lik.hessian_lambda(&f).unwrap();
        assert!((back - lam.as_matrix()).abs().max() < 1e-12);
        assert!(lik.surrogate_log_density(&[0.0, 1.0, 0.0], &f).unwrap().is_finite());
    }

    #[test]
    fn surrogate_density_gaussian_matches_log_lik() {
        let lik = Likelihood::Gaussian { sigma2: 0.3 };
        let y = [0.4, -1.2];
        let f = [0.1, 0.5];
        let a = lik.surrogate_log_density(&y, &f).unwrap();
        let b = lik.log_lik(&y, &f).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
