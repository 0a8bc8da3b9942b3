//! The normal-inverse-gamma (NIG) distribution over a Gaussian's
//! `(mean, variance)` pair, its closed-form variational loss terms and Monte
//! Carlo oracles for them.
//!
//! Parameterization: `sigma2 ~ InvGamma(alpha, beta)` (so
//! `E[sigma2] = beta / (alpha - 1)`) and `z | sigma2 ~ N(mean, sigma2 / lambda)`.

mod loss;
mod oracle;
pub mod special;

pub use loss::{
    elbo_loss, expectation_grad, expectation_scalar, expectation_term, kl_grad, kl_nig, kl_scalar, mse_grad,
    mse_loss, neg_elbo_grad, posterior_estimates, ElboBreakdown, LossVariant, NigGrad, NigGradField, PerPixel,
};
pub use oracle::{
    log_inv_gamma, log_nig, mc_expectation_oracle, mc_expectation_scalar, mc_kl_oracle, mc_kl_scalar, McEstimate,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;

/// Parameters of one NIG element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigParams {
    pub mean: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(mean: f64, lambda: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = NigParams {
            mean,
            lambda,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn is_valid(&self) -> bool {
        self.mean.is_finite()
            && self.lambda.is_finite()
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.lambda > 0.0
            && self.alpha > 1.0
            && self.beta > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "NIG parameters need finite values with lambda > 0, alpha > 1, beta > 0: {self:?}"
            )))
        }
    }

    /// `E[sigma2] = beta / (alpha - 1)`.
    pub fn expected_variance(&self) -> f64 {
        self.beta / (self.alpha - 1.0)
    }

    /// Draws `(z, sigma2)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let g: f64 = Gamma::new(self.alpha, 1.0).expect("alpha > 1").sample(rng);
        let sigma2 = self.beta / g;
        let n: f64 = StandardNormal.sample(rng);
        (self.mean + (sigma2 / self.lambda).sqrt() * n, sigma2)
    }
}

/// Per-pixel, per-channel NIG parameters. Holds both targets built from
/// training data and the network's predicted posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct NigField {
    pub mean: Image,
    pub lambda: Image,
    pub alpha: Image,
    pub beta: Image,
}

impl NigField {
    pub fn new(mean: Image, lambda: Image, alpha: Image, beta: Image) -> Result<Self> {
        let f = NigField {
            mean,
            lambda,
            alpha,
            beta,
        };
        f.validate()?;
        Ok(f)
    }

    /// Field with spatially constant `lambda`, `alpha`, `beta`.
    pub fn uniform(mean: Image, lambda: f64, alpha: f64, beta: f64) -> Result<Self> {
        let (h, w) = (mean.height(), mean.width());
        Self::new(
            mean,
            Image::filled(h, w, lambda),
            Image::filled(h, w, alpha),
            Image::filled(h, w, beta),
        )
    }

    pub fn height(&self) -> usize {
        self.mean.height()
    }

    pub fn width(&self) -> usize {
        self.mean.width()
    }

    pub fn len(&self) -> usize {
        self.mean.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at(&self, i: usize) -> NigParams {
        NigParams {
            mean: self.mean.data()[i],
            lambda: self.lambda.data()[i],
            alpha: self.alpha.data()[i],
            beta: self.beta.data()[i],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in [&self.lambda, &self.alpha, &self.beta] {
            self.mean.ensure_same_shape(f, "NIG field components")?;
        }
        for i in 0..self.len() {
            let p = self.at(i);
            if !p.is_valid() {
                return Err(Error::InvalidParameter(format!("NIG element {i} invalid: {p:?}")));
            }
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &NigField, what: &str) -> Result<()> {
        self.mean.ensure_same_shape(&other.mean, what)
    }

    /// `beta / (alpha - 1)` per element.
    pub fn expected_variance(&self) -> Image {
        self.beta.zip_map(&self.alpha, |b, a| b / (a - 1.0))
    }
}

/// Draws `(z, sigma2)` independently per element, in storage order.
pub fn sample_nig(params: &NigField, seed: u64) -> Result<(Image, Image)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Image::zeros_like(&params.mean);
    let mut s2 = Image::zeros_like(&params.mean);
    for i in 0..params.len() {
        let (zi, si) = params.at(i).sample(&mut rng);
        z.data_mut()[i] = zi;
        s2.data_mut()[i] = si;
    }
    Ok((z, s2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(NigParams::new(0.5, 1.0, 1.5, 0.1).is_ok());
        assert!(NigParams::new(0.5, 0.0, 1.5, 0.1).is_err());
        assert!(NigParams::new(0.5, 1.0, 1.0, 0.1).is_err());
        assert!(NigParams::new(0.5, 1.0, 2.0, 0.0).is_err());
        assert!(NigParams::new(f64::NAN, 1.0, 2.0, 1.0).is_err());
        let img = Image::filled(2, 2, 0.5);
        assert!(NigField::uniform(img.clone(), 1.0, 0.5, 1.0).is_err());
        assert!(NigField::uniform(img, 1.0, 2.0, 1.0).is_ok());
    }

    #[test]
    fn expected_variance_arithmetic() {
        let p = NigParams::new(0.0, 1.0, 2.0, 3.0).unwrap();
        assert_eq!(p.expected_variance(), 3.0);
        let p = NigParams::new(0.0, 1.0, 181.0, 18.0).unwrap();
        assert!((p.expected_variance() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sample_moments() {
        let mean = Image::from_fn(200, 250, |c, _, _| 0.2 + 0.3 * c as f64);
        let f = NigField::uniform(mean, 2.0, 4.0, 0.3).unwrap();
        let (z, s2) = sample_nig(&f, 9).unwrap();
        let n = f.len() as f64;
        // E[sigma2] = 0.1, Var[sigma2] = beta^2 / ((a-1)^2 (a-2)) = 0.005
        let mean_s2 = s2.data().iter().sum::<f64>() / n;
        assert!((mean_s2 - 0.1).abs() < 3.0 * (0.005f64 / n).sqrt(), "{mean_s2}");
        // z - mean has variance E[sigma2]/lambda = 0.05
        let mut dev = 0.0;
        for c in 0..3 {
            let m = 0.2 + 0.3 * c as f64;
            dev += z.channel(c).iter().map(|v| v - m).sum::<f64>();
        }
        let dev = dev / n;
        assert!(dev.abs() < 3.0 * (0.05 / n).sqrt(), "{dev}");
    }

    #[test]
    fn huge_lambda_pins_z_to_mean() {
        let mean = Image::from_fn(4, 4, |c, y, x| (c + y + x) as f64 / 10.0);
        let f = NigField::uniform(mean.clone(), 1e12, 3.0, 0.5).unwrap();
        let (z, _) = sample_nig(&f, 1).unwrap();
        for (a, b) in z.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(sample_nig(&f, 1).unwrap(), sample_nig(&f, 1).unwrap());
    }
}
