//! Per-task observation models and their variational expectations.
//!
//! Each task picks one of three likelihoods. Gaussian and heteroscedastic
//! Gaussian expectations under a Gaussian `q(f)` come out in closed form;
//! Poisson expectations use Gauss–Hermite quadrature with an exponential
//! link. A task's likelihood determines how many latent parameter functions
//! ("slots") it occupies: one for Gaussian (mean) and Poisson (log rate),
//! two for heteroscedastic Gaussian (mean and log variance).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093454836;
const LN_SQRT_PI: f64 = 0.5723649429247000870;

/// Observation model of one task.
#[derive(Debug, Clone, PartialEq)]
pub enum LikelihoodKind {
    /// Homoscedastic Gaussian noise; the variance is a hyperparameter
    /// optimized in log space.
    Gaussian { noise_variance: f64 },
    /// Poisson counts with rate `exp(f)`.
    Poisson,
    /// Gaussian with latent mean `f` and latent log-variance `g`.
    HetGaussian,
}

/// Expected log-likelihood and its derivatives with respect to the marginal
/// moments of each latent slot.
#[derive(Debug, Clone)]
pub struct ExpectedLogLik {
    pub value: f64,
    pub dmean: Vec<f64>,
    pub dvar: Vec<f64>,
    /// Derivative with respect to `log(noise_variance)` for Gaussian tasks.
    pub dlog_noise: Option<f64>,
}

impl LikelihoodKind {
    /// Number of latent parameter functions this likelihood consumes.
    pub fn slots(&self) -> usize {
        match self {
            LikelihoodKind::HetGaussian => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodKind::Gaussian { .. } => "gaussian",
            LikelihoodKind::Poisson => "poisson",
            LikelihoodKind::HetGaussian => "het_gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LikelihoodKind::Gaussian { noise_variance } = self {
            if !noise_variance.is_finite() || *noise_variance <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "Gaussian noise variance must be positive, got {noise_variance}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that `y` is an admissible observation for this likelihood.
    pub fn validate_observation(&self, y: f64) -> Result<()> {
        self.check_obs(y)
    }

    fn check_obs(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::InvalidObservation("observation not finite".into()));
        }
        if matches!(self, LikelihoodKind::Poisson) && (y < 0.0 || y.fract() != 0.0) {
            return Err(Error::InvalidObservation(format!(
                "Poisson observation must be a non-negative integer, got {y}"
            )));
        }
        Ok(())
    }

    fn check_moments(&self, m: &[f64], v: &[f64]) -> Result<()> {
        let s = self.slots();
        if m.len() != s || v.len() != s {
            return Err(Error::DimensionMismatch {
                expected: s,
                found: m.len().max(v.len()),
            });
        }
        if v.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidParameter(
                "marginal variances must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `E_{q(f)}[log p(y | f)]` with `q(f) = N(m, v)` per slot.
    pub fn expected_loglik(
        &self,
        y: f64,
        m: &[f64],
        v: &[f64],
        gh: &GaussHermiteRule,
    ) -> Result<f64> {
        Ok(self.expected_loglik_with_grads(y, m, v, gh)?.value)
    }

    /// Expected log-likelihood plus derivatives for the training path.
    pub fn expected_loglik_with_grads(
        &self,
        y: f64,
        m: &[f64],
        v: &[f64],
        gh: &GaussHermiteRule,
    ) -> Result<ExpectedLogLik> {
        self.validate()?;
        self.check_obs(y)?;
        self.check_moments(m, v)?;
        match self {
            LikelihoodKind::Gaussian { noise_variance } => {
                let s2 = *noise_variance;
                let r = y - m[0];
                let value = -0.5 * (LN_2PI + s2.ln()) - (r * r + v[0]) / (2.0 * s2);
                Ok(ExpectedLogLik {
                    value,
                    dmean: vec![r / s2],
                    dvar: vec![-0.5 / s2],
                    dlog_noise: Some(-0.5 + (r * r + v[0]) / (2.0 * s2)),
                })
            }
            LikelihoodKind::Poisson => {
                // f_i = m + sqrt(2v) t_i; E[phi] ~ (1/sqrt(pi)) sum w_i phi(f_i)
                // d/dm = E[phi'], d/dv = E[phi'']/2 with phi' = y - e^f, phi'' = -e^f
                let scale = (2.0 * v[0]).sqrt();
                let mut e = 0.0;
                let mut de_dm = 0.0;
                let mut sum_exp = 0.0;
                for (&t, &w) in gh.nodes.iter().zip(&gh.weights) {
                    let f = m[0] + scale * t;
                    let ef = f.exp();
                    e += w * (y * f - ef);
                    de_dm += w * (y - ef);
                    sum_exp += w * ef;
                }
                let inv = 1.0 / crate::kernels::SQRT_PI;
                let value = inv * e - libm::lgamma(y + 1.0);
                Ok(ExpectedLogLik {
                    value,
                    dmean: vec![inv * de_dm],
                    dvar: vec![-0.5 * inv * sum_exp],
                    dlog_noise: None,
                })
            }
            LikelihoodKind::HetGaussian => {
                let (mf, mg) = (m[0], m[1]);
                let (vf, vg) = (v[0], v[1]);
                let prec = (-mg + 0.5 * vg).exp(); // E[exp(-g)]
                let sq = (y - mf) * (y - mf) + vf;
                let value = -0.5 * LN_2PI - 0.5 * mg - 0.5 * sq * prec;
                Ok(ExpectedLogLik {
                    value,
                    dmean: vec![(y - mf) * prec, -0.5 + 0.5 * sq * prec],
                    dvar: vec![-0.5 * prec, -0.25 * sq * prec],
                    dlog_noise: None,
                })
            }
        }
    }

    /// Mean and variance of the predictive distribution of `y` given
    /// `q(f) = N(m, v)` per slot.
    pub fn predictive_y_moments(&self, m: &[f64], v: &[f64]) -> Result<(f64, f64)> {
        self.validate()?;
        self.check_moments(m, v)?;
        Ok(match self {
            LikelihoodKind::Gaussian { noise_variance } => (m[0], v[0] + noise_variance),
            LikelihoodKind::Poisson => {
                // lognormal moments of the rate plus Poisson noise
                let mean = (m[0] + 0.5 * v[0]).exp();
                let var = mean + (2.0 * m[0] + v[0]).exp() * (v[0].exp_m1());
                (mean, var)
            }
            LikelihoodKind::HetGaussian => (m[0], v[0] + (m[1] + 0.5 * v[1]).exp()),
        })
    }

    /// `log ∫ p(y | f) q(f) df`.
    pub fn log_predictive_density(
        &self,
        y: f64,
        m: &[f64],
        v: &[f64],
        gh: &GaussHermiteRule,
    ) -> Result<f64> {
        self.validate()?;
        self.check_obs(y)?;
        self.check_moments(m, v)?;
        Ok(match self {
            LikelihoodKind::Gaussian { noise_variance } => {
                gaussian_log_density(y, m[0], v[0] + noise_variance)
            }
            LikelihoodKind::Poisson => {
                let scale = (2.0 * v[0]).sqrt();
                let lgy = libm::lgamma(y + 1.0);
                let terms: Vec<f64> = gh
                    .nodes
                    .iter()
                    .zip(&gh.weights)
                    .map(|(&t, &w)| {
                        let f = m[0] + scale * t;
                        w.ln() + y * f - f.exp() - lgy
                    })
                    .collect();
                log_sum_exp(&terms) - LN_SQRT_PI
            }
            LikelihoodKind::HetGaussian => {
                let scale = (2.0 * v[1]).sqrt();
                let terms: Vec<f64> = gh
                    .nodes
                    .iter()
                    .zip(&gh.weights)
                    .map(|(&t, &w)| {
                        let g = m[1] + scale * t;
                        w.ln() + gaussian_log_density(y, m[0], v[0] + g.exp())
                    })
                    .collect();
                log_sum_exp(&terms) - LN_SQRT_PI
            }
        })
    }
}

pub fn gaussian_log_density(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + variance.ln()) - r * r / (2.0 * variance)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Gauss–Hermite rule for integrals against `exp(-t^2)`: nodes and weights
/// from the Golub–Welsch eigendecomposition of the Jacobi matrix. Weights
/// sum to `sqrt(pi)` and the rule is exact for polynomials of degree
/// `< 2 * order`.
#[derive(Debug, Clone)]
pub struct GaussHermiteRule {
    pub order: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Default quadrature order used throughout training and prediction.
pub const DEFAULT_GH_ORDER: usize = 20;

impl GaussHermiteRule {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter(
                "Gauss-Hermite order must be positive".into(),
            ));
        }
        let mut jacobi = DMatrix::zeros(order, order);
        for k in 0..order - 1 {
            let b = ((k + 1) as f64 / 2.0).sqrt();
            jacobi[(k, k + 1)] = b;
            jacobi[(k + 1, k)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| {
                let first = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], crate::kernels::SQRT_PI * first * first)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            order,
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gh() -> GaussHermiteRule {
        GaussHermiteRule::new(DEFAULT_GH_ORDER).unwrap()
    }

    #[test]
    fn gauss_hermite_moments() {
        let rule = gh();
        let total: f64 = rule.weights.iter().sum();
        assert!((total - crate::kernels::SQRT_PI).abs() < 1e-12);
        // int t^k exp(-t^2) dt, 40-digit reference
        let reference = [
            1.772453850905516027298,
            0.0,
            0.8862269254527580136491,
            0.0,
            1.329340388179137020474,
            0.0,
            3.323350970447842551184,
        ];
        for (k, want) in reference.iter().enumerate() {
            let got: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&t, &w)| w * t.powi(k as i32))
                .sum();
            assert!((got - want).abs() < 1e-10, "moment {k}: {got} vs {want}");
        }
    }

    #[test]
    fn gaussian_degenerate_q_is_exact_log_density() {
        let kind = LikelihoodKind::Gaussian {
            noise_variance: 0.7,
        };
        let e = kind
            .expected_loglik(1.3, &[0.4], &[0.0], &gh())
            .unwrap();
        assert!((e - gaussian_log_density(1.3, 0.4, 0.7)).abs() < 1e-14);
    }

    #[test]
    fn poisson_rate_one() {
        let e = LikelihoodKind::Poisson
            .expected_loglik(1.0, &[0.0], &[0.0], &gh())
            .unwrap();
        assert!((e - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn poisson_rejects_bad_observations() {
        let kind = LikelihoodKind::Poisson;
        assert!(kind.expected_loglik(-1.0, &[0.0], &[0.0], &gh()).is_err());
        assert!(kind.expected_loglik(1.5, &[0.0], &[0.0], &gh()).is_err());
    }

    #[test]
    fn negative_variance_rejected() {
        let kind = LikelihoodKind::Gaussian {
            noise_variance: 1.0,
        };
        assert!(kind.expected_loglik(0.0, &[0.0], &[-0.1], &gh()).is_err());
    }

    #[test]
    fn gauss_hermite_recovers_gaussian_closed_form() {
        let rule = gh();
        let kind = LikelihoodKind::Gaussian {
            noise_variance: 0.9,
        };
        for (y, m, v) in [(0.3, -4.0, 3.6), (2.0, 5.0, 0.4), (-1.0, 0.0, 4.0)] {
            let closed = kind.expected_loglik(y, &[m], &[v], &rule).unwrap();
            let scale = (2.0 * v).sqrt();
            let quad: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&t, &w)| w * gaussian_log_density(y, m + scale * t, 0.9))
                .sum::<f64>()
                / crate::kernels::SQRT_PI;
            assert!((closed - quad).abs() < 1e-9, "{closed} vs {quad}");
        }
    }

    #[test]
    fn het_gaussian_matches_double_quadrature() {
        let rule = gh();
        let kind = LikelihoodKind::HetGaussian;
        let (y, mf, mg, vf, vg) = (0.7, 0.2, -0.5, 0.6, 0.8);
        let closed = kind
            .expected_loglik(y, &[mf, mg], &[vf, vg], &rule)
            .unwrap();
        let sf = (2.0 * vf).sqrt();
        let sg = (2.0 * vg).sqrt();
        let mut quad = 0.0;
        for (&tf, &wf) in rule.nodes.iter().zip(&rule.weights) {
            for (&tg, &wg) in rule.nodes.iter().zip(&rule.weights) {
                let f = mf + sf * tf;
                let g = mg + sg * tg;
                quad += wf * wg * gaussian_log_density(y, f, g.exp());
            }
        }
        quad /= crate::kernels::SQRT_PI * crate::kernels::SQRT_PI;
        assert!((closed - quad).abs() < 1e-8, "{closed} vs {quad}");
    }

    #[test]
    fn predictive_moments_examples() {
        let g = LikelihoodKind::Gaussian {
            noise_variance: 0.5,
        };
        assert_eq!(g.predictive_y_moments(&[0.0], &[1.0]).unwrap(), (0.0, 1.5));

        let p = LikelihoodKind::Poisson;
        let (mean, var) = p.predictive_y_moments(&[0.0], &[0.0]).unwrap();
        assert_eq!((mean, var), (1.0, 1.0));

        let h = LikelihoodKind::HetGaussian;
        let (mean, var) = h.predictive_y_moments(&[0.3, -1.0], &[0.2, 0.0]).unwrap();
        assert!((mean - 0.3).abs() < 1e-15);
        assert!((var - (0.2 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn predictive_variance_nonnegative() {
        let kinds = [
            LikelihoodKind::Gaussian {
                noise_variance: 0.1,
            },
            LikelihoodKind::Poisson,
            LikelihoodKind::HetGaussian,
        ];
        for kind in kinds {
            let s = kind.slots();
            for m0 in [-2.0, 0.0, 1.5] {
                let m = vec![m0; s];
                let v = vec![0.3; s];
                let (_, var) = kind.predictive_y_moments(&m, &v).unwrap();
                assert!(var >= 0.0);
            }
        }
    }

    #[test]
    fn log_predictive_density_reduces_to_exact_forms() {
        let rule = gh();
        let g = LikelihoodKind::Gaussian {
            noise_variance: 0.4,
        };
        let lpd = g.log_predictive_density(0.9, &[0.1], &[0.6], &rule).unwrap();
        assert!((lpd - gaussian_log_density(0.9, 0.1, 1.0)).abs() < 1e-14);

        // Poisson with v = 0 is the exact pmf
        let p = LikelihoodKind::Poisson;
        let lpd = p.log_predictive_density(3.0, &[0.8], &[0.0], &rule).unwrap();
        let rate: f64 = (0.8f64).exp();
        let exact = 3.0 * rate.ln() - rate - libm::lgamma(4.0);
        assert!((lpd - exact).abs() < 1e-12);
    }

    #[test]
    fn expected_loglik_grads_match_finite_differences() {
        let rule = gh();
        let kinds = [
            LikelihoodKind::Gaussian {
                noise_variance: 0.6,
            },
            LikelihoodKind::Poisson,
            LikelihoodKind::HetGaussian,
        ];
        for kind in kinds {
            let s = kind.slots();
            let y = if matches!(kind, LikelihoodKind::Poisson) {
                2.0
            } else {
                0.7
            };
            let m: Vec<f64> = (0..s).map(|i| 0.3 - 0.2 * i as f64).collect();
            let v: Vec<f64> = (0..s).map(|i| 0.4 + 0.1 * i as f64).collect();
            let res = kind.expected_loglik_with_grads(y, &m, &v, &rule).unwrap();
            let step = 1e-6;
            for slot in 0..s {
                let mut mp = m.clone();
                mp[slot] += step;
                let mut mm = m.clone();
                mm[slot] -= step;
                let fd = (kind.expected_loglik(y, &mp, &v, &rule).unwrap()
                    - kind.expected_loglik(y, &mm, &v, &rule).unwrap())
                    / (2.0 * step);
                assert!((fd - res.dmean[slot]).abs() < 1e-6 + 1e-5 * fd.abs());

                let mut vp = v.clone();
                vp[slot] += step;
                let mut vm = v.clone();
                vm[slot] -= step;
                let fd = (kind.expected_loglik(y, &m, &vp, &rule).unwrap()
                    - kind.expected_loglik(y, &m, &vm, &rule).unwrap())
                    / (2.0 * step);
                assert!((fd - res.dvar[slot]).abs() < 1e-6 + 1e-5 * fd.abs());
            }
            if let LikelihoodKind::Gaussian { noise_variance } = kind {
                let up = LikelihoodKind::Gaussian {
                    noise_variance: (noise_variance.ln() + step).exp(),
                };
                let dn = LikelihoodKind::Gaussian {
                    noise_variance: (noise_variance.ln() - step).exp(),
                };
                let fd = (up.expected_loglik(y, &m, &v, &rule).unwrap()
                    - dn.expected_loglik(y, &m, &v, &rule).unwrap())
                    / (2.0 * step);
                assert!((fd - res.dlog_noise.unwrap()).abs() < 1e-6 + 1e-5 * fd.abs());
            }
        }
    }
}
