//! Monte Carlo estimators for the closed-form loss terms. They use exact
//! log-densities and plain sampling, sharing nothing with the closed forms
//! except the special functions inside the density normalizers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::special::ln_gamma;
use super::{NigField, NigParams};
use crate::error::{Error, Result};
use crate::image::Image;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MIN_SAMPLES: usize = 1000;

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl McEstimate {
    /// Deviation of `value` from the estimate in units of standard error.
    pub fn z_score(&self, value: f64) -> f64 {
        (value - self.estimate) / self.stderr
    }
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    fn finish(&self) -> McEstimate {
        let var = self.m2 / (self.n - 1.0);
        McEstimate {
            estimate: self.mean,
            stderr: (var / self.n).sqrt(),
        }
    }
}

/// `log InvGamma(s; alpha, beta)`.
pub fn log_inv_gamma(s: f64, alpha: f64, beta: f64) -> f64 {
    alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * s.ln() - beta / s
}

/// Joint log-density of `(z, sigma2)` under an NIG element.
pub fn log_nig(z: f64, s: f64, p: &NigParams) -> f64 {
    let var = s / p.lambda;
    let d = z - p.mean;
    -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var) + log_inv_gamma(s, p.alpha, p.beta)
}

fn check(n: usize, params: &[&NigParams]) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::InvalidParameter(format!("Monte Carlo oracles need n >= {MIN_SAMPLES}, got {n}")));
    }
    params.iter().try_for_each(|p| p.validate())
}

fn draw(q: &NigParams, gamma: &Gamma<f64>, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let g = gamma.sample(rng);
    let s = q.beta / g;
    let n: f64 = StandardNormal.sample(rng);
    (q.mean + (s / q.lambda).sqrt() * n, s)
}

/// Estimates `KL(q || p)` by averaging `log q - log p` over draws from `q`.
pub fn mc_kl_scalar(q: &NigParams, p: &NigParams, n: usize, seed: u64) -> Result<McEstimate> {
    check(n, &[q, p])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(q.alpha, 1.0).expect("validated alpha");
    let mut acc = Welford::default();
    for _ in 0..n {
        let (z, s) = draw(q, &gamma, &mut rng);
        acc.push(log_nig(z, s, q) - log_nig(z, s, p));
    }
    Ok(acc.finish())
}

/// Estimates `E_q[log N(x | z, sigma2)]`.
pub fn mc_expectation_scalar(q: &NigParams, x: f64, n: usize, seed: u64) -> Result<McEstimate> {
    check(n, &[q])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(q.alpha, 1.0).expect("validated alpha");
    let mut acc = Welford::default();
    for _ in 0..n {
        let (z, s) = draw(q, &gamma, &mut rng);
        let d = x - z;
        acc.push(-0.5 * (LN_2PI + s.ln()) - d * d / (2.0 * s));
    }
    Ok(acc.finish())
}

fn combine(parts: impl Iterator<Item = Result<McEstimate>>) -> Result<McEstimate> {
    let mut estimate = 0.0;
    let mut var = 0.0;
    for p in parts {
        let p = p?;
        estimate += p.estimate;
        var += p.stderr * p.stderr;
    }
    Ok(McEstimate {
        estimate,
        stderr: var.sqrt(),
    })
}

fn element_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Field version of [`mc_kl_scalar`]: estimate of the summed KL, with
/// `n` independent draws per element.
pub fn mc_kl_oracle(q: &NigField, p: &NigField, n: usize, seed: u64) -> Result<McEstimate> {
    q.ensure_same_shape(p, "mc_kl_oracle")?;
    combine((0..q.len()).map(|i| mc_kl_scalar(&q.at(i), &p.at(i), n, element_seed(seed, i))))
}

/// Field version of [`mc_expectation_scalar`].
pub fn mc_expectation_oracle(q: &NigField, x_tilde: &Image, n: usize, seed: u64) -> Result<McEstimate> {
    q.mean.ensure_same_shape(x_tilde, "mc_expectation_oracle")?;
    combine((0..q.len()).map(|i| mc_expectation_scalar(&q.at(i), x_tilde.data()[i], n, element_seed(seed, i))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nig::{expectation_scalar, kl_scalar, LossVariant};

    fn p(mean: f64, lambda: f64, alpha: f64, beta: f64) -> NigParams {
        NigParams::new(mean, lambda, alpha, beta).unwrap()
    }

    #[test]
    fn log_density_integrates_to_one() {
        // crude quadrature over (z, s) for a well-conditioned element
        let q = p(0.3, 2.0, 4.0, 1.5);
        let (mut total, ds, dz) = (0.0, 0.002, 0.004);
        let mut s = ds / 2.0;
        while s < 12.0 {
            let mut z = -6.0;
            while z < 6.6 {
                total += log_nig(z, s, &q).exp() * ds * dz;
                z += dz;
            }
            s += ds;
        }
        assert!((total - 1.0).abs() < 2e-3, "{total}");
    }

    #[test]
    fn kl_oracle_identical_and_worked_example() {
        let q = p(0.0, 1.0, 2.0, 1.0);
        let e = mc_kl_scalar(&q, &q, 20_000, 1).unwrap();
        assert_eq!(e.estimate, 0.0);
        let prior = p(0.0, 1.0, 2.0, 2.0);
        let e = mc_kl_scalar(&q, &prior, 200_000, 2).unwrap();
        assert!(e.z_score(0.613_705_6).abs() < 3.0, "{e:?}");
        assert!(e.z_score(kl_scalar(&q, &prior)).abs() < 3.0);
    }

    #[test]
    fn stderr_scales_as_inverse_sqrt_n() {
        let q = p(0.1, 1.5, 3.0, 0.7);
        let prior = p(0.4, 2.0, 5.0, 0.3);
        let a = mc_kl_scalar(&q, &prior, 40_000, 3).unwrap();
        let b = mc_kl_scalar(&q, &prior, 160_000, 4).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2.0).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn expectation_oracle_discriminates_variants() {
        let q = p(0.5, 1.0, 3.0, 0.5);
        let e = mc_expectation_scalar(&q, 0.5, 400_000, 5).unwrap();
        let con = expectation_scalar(&q, 0.5, LossVariant::DerivationConsistent);
        let lit = expectation_scalar(&q, 0.5, LossVariant::PaperLiteral);
        assert!(e.z_score(con).abs() < 3.0, "{e:?} vs {con}");
        assert!(e.z_score(lit).abs() > 20.0);
        let large = p(0.5, 1e9, 2.0, 1.0);
        let e = mc_expectation_scalar(&large, 0.5, 100_000, 6).unwrap();
        for v in [LossVariant::PaperLiteral, LossVariant::DerivationConsistent] {
            assert!(e.z_score(expectation_scalar(&large, 0.5, v)).abs() < 3.0);
        }
    }

    #[test]
    fn field_oracle_and_argument_checks() {
        let mean = Image::filled(2, 2, 0.5);
        let q = NigField::uniform(mean.clone(), 1.0, 3.0, 0.5).unwrap();
        assert!(mc_kl_oracle(&q, &q, 10, 1).is_err());
        let e = mc_kl_oracle(&q, &q, 1000, 1).unwrap();
        assert_eq!(e.estimate, 0.0);
        let e = mc_expectation_oracle(&q, &mean, 5000, 2).unwrap();
        let con = 12.0 * expectation_scalar(&q.at(0), 0.5, LossVariant::DerivationConsistent);
        assert!(e.z_score(con).abs() < 3.0);
    }
}
