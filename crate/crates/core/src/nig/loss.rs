//! Closed-form KL divergence between NIG distributions, the expected Gaussian
//! log-likelihood under an NIG posterior, the resulting ELBO and their
//! analytic gradients with respect to the posterior parameters.

use serde::{Deserialize, Serialize};

use super::special::{digamma, ln_gamma, trigamma};
use super::{NigField, NigParams};
use crate::error::{Error, Result};
use crate::image::Image;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Which form of the `E_q[(x - z)^2 / (2 sigma2)]` variance contribution to use.
///
/// `PaperLiteral` uses `beta / (2 lambda^2 (alpha - 1))`. `DerivationConsistent`
/// uses `1 / (2 lambda)`, the value implied by `Var(z | sigma2) = sigma2 / lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    PaperLiteral,
    DerivationConsistent,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(LossVariant::PaperLiteral),
            "derivation_consistent" => Ok(LossVariant::DerivationConsistent),
            other => Err(Error::InvalidParameter(format!("unknown loss variant {other:?}"))),
        }
    }
}

/// Partial derivatives with respect to `(mean, lambda, alpha, beta)` of `q`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NigGrad {
    pub mean: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl std::ops::Sub for NigGrad {
    type Output = NigGrad;
    fn sub(self, o: NigGrad) -> NigGrad {
        NigGrad {
            mean: self.mean - o.mean,
            lambda: self.lambda - o.lambda,
            alpha: self.alpha - o.alpha,
            beta: self.beta - o.beta,
        }
    }
}

/// `KL(q || p)` for one element.
pub fn kl_scalar(q: &NigParams, p: &NigParams) -> f64 {
    let d = p.mean - q.mean;
    p.lambda * q.alpha / (2.0 * q.beta) * d * d + p.lambda / (2.0 * q.lambda) - 0.5 * (p.lambda / q.lambda).ln() - 0.5
        + p.alpha * (q.beta / p.beta).ln()
        + ln_gamma(p.alpha)
        - ln_gamma(q.alpha)
        + (q.alpha - p.alpha) * digamma(q.alpha)
        - (q.beta - p.beta) * q.alpha / q.beta
}

/// Gradient of [`kl_scalar`] with respect to `q`.
pub fn kl_grad(q: &NigParams, p: &NigParams) -> NigGrad {
    let d = p.mean - q.mean;
    let (lam, a_hat, b_hat) = (q.lambda, q.alpha, q.beta);
    NigGrad {
        mean: -p.lambda * a_hat * d / b_hat,
        lambda: -p.lambda / (2.0 * lam * lam) + 0.5 / lam,
        alpha: p.lambda * d * d / (2.0 * b_hat) + (a_hat - p.alpha) * trigamma(a_hat) - 1.0 + p.beta / b_hat,
        beta: -p.lambda * a_hat * d * d / (2.0 * b_hat * b_hat) + p.alpha / b_hat - p.beta * a_hat / (b_hat * b_hat),
    }
}

fn variance_term(q: &NigParams, variant: LossVariant) -> f64 {
    match variant {
        LossVariant::PaperLiteral => q.beta / (2.0 * q.lambda * q.lambda * (q.alpha - 1.0)),
        LossVariant::DerivationConsistent => 0.5 / q.lambda,
    }
}

/// `E_q[log N(x | z, sigma2)]` for one element.
pub fn expectation_scalar(q: &NigParams, x: f64, variant: LossVariant) -> f64 {
    let e = x - q.mean;
    -HALF_LN_2PI - 0.5 * (q.beta.ln() - digamma(q.alpha)) - variance_term(q, variant) - q.alpha * e * e / (2.0 * q.beta)
}

/// Gradient of [`expectation_scalar`] with respect to `q`.
pub fn expectation_grad(q: &NigParams, x: f64, variant: LossVariant) -> NigGrad {
    let e = x - q.mean;
    let (lam, a, b) = (q.lambda, q.alpha, q.beta);
    let mut g = NigGrad {
        mean: a * e / b,
        lambda: 0.0,
        alpha: 0.5 * trigamma(a) - e * e / (2.0 * b),
        beta: -0.5 / b + a * e * e / (2.0 * b * b),
    };
    match variant {
        LossVariant::PaperLiteral => {
            let am1 = a - 1.0;
            g.lambda = b / (lam * lam * lam * am1);
            g.alpha += b / (2.0 * lam * lam * am1 * am1);
            g.beta -= 1.0 / (2.0 * lam * lam * am1);
        }
        LossVariant::DerivationConsistent => {
            g.lambda = 0.5 / (lam * lam);
        }
    }
    g
}

/// A per-element field together with its sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PerPixel {
    pub field: Image,
    pub sum: f64,
}

impl PerPixel {
    fn from_field(field: Image) -> Self {
        let sum = field.data().iter().sum();
        PerPixel { field, sum }
    }
}

/// Element-wise `KL(q || p)`.
pub fn kl_nig(q: &NigField, p: &NigField) -> Result<PerPixel> {
    q.ensure_same_shape(p, "kl_nig")?;
    let mut field = Image::zeros_like(&q.mean);
    for (i, v) in field.data_mut().iter_mut().enumerate() {
        *v = kl_scalar(&q.at(i), &p.at(i));
    }
    Ok(PerPixel::from_field(field))
}

/// Element-wise expected log-likelihood of `x_tilde` under `q`.
pub fn expectation_term(q: &NigField, x_tilde: &Image, variant: LossVariant) -> Result<PerPixel> {
    q.mean.ensure_same_shape(x_tilde, "expectation_term")?;
    let mut field = Image::zeros_like(&q.mean);
    for (i, v) in field.data_mut().iter_mut().enumerate() {
        *v = expectation_scalar(&q.at(i), x_tilde.data()[i], variant);
    }
    Ok(PerPixel::from_field(field))
}

/// The two ELBO components and their difference, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub kl: f64,
    pub expectation: f64,
    /// `expectation - kl`.
    pub elbo: f64,
    #[serde(skip)]
    pub per_pixel: Option<(Image, Image)>,
}

impl ElboBreakdown {
    /// Negative ELBO, the quantity minimized during training.
    pub fn loss(&self) -> f64 {
        -self.elbo
    }
}

pub fn elbo_loss(
    q: &NigField,
    prior: &NigField,
    x_tilde: &Image,
    variant: LossVariant,
    keep_per_pixel: bool,
) -> Result<ElboBreakdown> {
    let kl = kl_nig(q, prior)?;
    let ex = expectation_term(q, x_tilde, variant)?;
    Ok(ElboBreakdown {
        kl: kl.sum,
        expectation: ex.sum,
        elbo: ex.sum - kl.sum,
        per_pixel: keep_per_pixel.then_some((kl.field, ex.field)),
    })
}

/// Gradient fields of a loss with respect to the four posterior components,
/// laid out like the component images.
#[derive(Debug, Clone, PartialEq)]
pub struct NigGradField {
    pub mean: Vec<f64>,
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NigGradField {
    pub fn zeros(n: usize) -> Self {
        NigGradField {
            mean: vec![0.0; n],
            lambda: vec![0.0; n],
            alpha: vec![0.0; n],
            beta: vec![0.0; n],
        }
    }
}

/// `sum_j w_j (KL_j - E_j)` and its gradient with respect to `q`, where the
/// weights default to one. Masked elements (`w_j = 0`) contribute nothing.
pub fn neg_elbo_grad(
    q: &NigField,
    prior: &NigField,
    x_tilde: &Image,
    variant: LossVariant,
    weights: Option<&[f64]>,
) -> Result<(ElboBreakdown, NigGradField)> {
    q.ensure_same_shape(prior, "neg_elbo_grad")?;
    q.mean.ensure_same_shape(x_tilde, "neg_elbo_grad")?;
    let n = q.len();
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Shape(format!("weights have {} entries, field has {n}", w.len())));
        }
    }
    let mut grad = NigGradField::zeros(n);
    let (mut kl_sum, mut ex_sum) = (0.0, 0.0);
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let (qi, pi, xi) = (q.at(i), prior.at(i), x_tilde.data()[i]);
        kl_sum += w * kl_scalar(&qi, &pi);
        ex_sum += w * expectation_scalar(&qi, xi, variant);
        let g = kl_grad(&qi, &pi) - expectation_grad(&qi, xi, variant);
        grad.mean[i] = w * g.mean;
        grad.lambda[i] = w * g.lambda;
        grad.alpha[i] = w * g.alpha;
        grad.beta[i] = w * g.beta;
    }
    let breakdown = ElboBreakdown {
        kl: kl_sum,
        expectation: ex_sum,
        elbo: ex_sum - kl_sum,
        per_pixel: None,
    };
    Ok((breakdown, grad))
}

/// Posterior point estimates: the mean image clamped to `[0, 1]` and the
/// unclamped noise variance map `beta / (alpha - 1)`.
pub fn posterior_estimates(q: &NigField) -> (Image, Image) {
    (q.mean.clamped(), q.expected_variance())
}

pub fn mse_loss(y_hat: &Image, y: &Image) -> Result<f64> {
    crate::metrics::mse(y_hat, y)
}

/// Mean squared error and its gradient with respect to `y_hat`.
pub fn mse_grad(y_hat: &Image, y: &Image) -> Result<(f64, Vec<f64>)> {
    y_hat.ensure_same_shape(y, "mse_grad")?;
    let n = y_hat.data().len() as f64;
    let mut loss = 0.0;
    let grad = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(mean: f64, lambda: f64, alpha: f64, beta: f64) -> NigParams {
        NigParams::new(mean, lambda, alpha, beta).unwrap()
    }

    fn random_params(rng: &mut impl Rng) -> NigParams {
        p(
            rng.gen_range(-0.5..1.5),
            rng.gen_range(0.1..20.0),
            rng.gen_range(1.05..30.0),
            rng.gen_range(1e-3..2.0),
        )
    }

    #[test]
    fn kl_worked_example() {
        let q = p(0.0, 1.0, 2.0, 1.0);
        let prior = p(0.0, 1.0, 2.0, 2.0);
        let expected = 2.0 - 2.0 * 2f64.ln();
        assert!((kl_scalar(&q, &prior) - expected).abs() < 1e-14);
        assert!((expected - 0.613_705_6).abs() < 1e-7);
    }

    #[test]
    fn kl_of_identical_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = random_params(&mut rng);
            assert_eq!(kl_scalar(&q, &q), 0.0);
        }
    }

    #[test]
    fn kl_nonnegative_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let (q, pr) = (random_params(&mut rng), random_params(&mut rng));
            assert!(kl_scalar(&q, &pr) >= -1e-9, "{q:?} {pr:?}");
        }
    }

    #[test]
    fn expectation_large_lambda_limit() {
        let q = p(0.3, 1e9, 2.0, 1.0);
        let expected = -HALF_LN_2PI + digamma(2.0) / 2.0;
        for v in [LossVariant::PaperLiteral, LossVariant::DerivationConsistent] {
            assert!((expectation_scalar(&q, 0.3, v) - expected).abs() < 1e-9);
        }
        assert!((expected + 0.707_546_365_655).abs() < 1e-10);
    }

    #[test]
    fn variance_term_discrepancy_value() {
        let q = p(0.0, 1.0, 3.0, 0.5);
        let lit = expectation_scalar(&q, 0.0, LossVariant::PaperLiteral);
        let con = expectation_scalar(&q, 0.0, LossVariant::DerivationConsistent);
        assert!((lit - con - 0.375).abs() < 1e-14);
    }

    #[test]
    fn expectation_decreases_with_residual() {
        let q = p(0.5, 2.0, 3.0, 0.2);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let v = expectation_scalar(&q, 0.5 + 0.05 * k as f64, LossVariant::PaperLiteral);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn kl_restoration_coefficient_scales_with_lambda() {
        let q = p(0.2, 3.0, 4.0, 0.5);
        let base = p(0.7, 1.0, 4.0, 0.5);
        let scaled = NigParams { lambda: 10.0, ..base };
        // restoration part isolated by differencing against a zero-residual prior
        let restore = |pr: NigParams| kl_scalar(&q, &pr) - kl_scalar(&q, &NigParams { mean: q.mean, ..pr });
        assert!((restore(scaled) - 10.0 * restore(base)).abs() < 1e-12);
    }

    #[test]
    fn kl_mean_gradient_vanishes_at_prior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let pr = random_params(&mut rng);
            let q = NigParams {
                mean: pr.mean,
                ..random_params(&mut rng)
            };
            assert_eq!(kl_grad(&q, &pr).mean, 0.0);
        }
    }

    fn fd_check(f: impl Fn(&NigParams) -> f64, g: NigGrad, q: NigParams) {
        let h = 1e-6;
        let comps: [(&str, f64, fn(&mut NigParams) -> &mut f64); 4] = [
            ("mean", g.mean, |p| &mut p.mean),
            ("lambda", g.lambda, |p| &mut p.lambda),
            ("alpha", g.alpha, |p| &mut p.alpha),
            ("beta", g.beta, |p| &mut p.beta),
        ];
        for (name, analytic, get) in comps {
            let step = h * get(&mut q.clone()).abs().max(1e-2);
            let mut qp = q;
            *get(&mut qp) += step;
            let mut qm = q;
            *get(&mut qm) -= step;
            let fd = (f(&qp) - f(&qm)) / (2.0 * step);
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
            assert!(err < 1e-5, "{name}: fd {fd} analytic {analytic} at {q:?}");
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = random_params(&mut rng);
            let pr = random_params(&mut rng);
            let x: f64 = rng.gen_range(-0.2..1.2);
            fd_check(|q| kl_scalar(q, &pr), kl_grad(&q, &pr), q);
            for v in [LossVariant::PaperLiteral, LossVariant::DerivationConsistent] {
                fd_check(|q| expectation_scalar(q, x, v), expectation_grad(&q, x, v), q);
            }
        }
    }

    #[test]
    fn elbo_breakdown_and_masked_sum() {
        let mean = Image::from_fn(2, 4, |c, y, x| 0.1 * (c + y + x) as f64);
        let q = NigField::uniform(mean.clone(), 2.0, 3.0, 0.4).unwrap();
        let prior = NigField::uniform(mean.map(|v| v + 0.05), 5.0, 4.0, 0.2).unwrap();
        let x = mean.map(|v| v - 0.02);
        let b = elbo_loss(&q, &prior, &x, LossVariant::PaperLiteral, true).unwrap();
        assert_eq!(b.elbo, b.expectation - b.kl);
        let (klf, exf) = b.per_pixel.clone().unwrap();
        let mut weights = vec![0.0; q.len()];
        weights[5] = 1.0;
        let (masked, grad) = neg_elbo_grad(&q, &prior, &x, LossVariant::PaperLiteral, Some(&weights)).unwrap();
        assert!((masked.loss() - (klf.data()[5] - exf.data()[5])).abs() < 1e-14);
        for i in 0..q.len() {
            if i != 5 {
                assert_eq!(grad.mean[i], 0.0);
            }
        }
        let (full, _) = neg_elbo_grad(&q, &prior, &x, LossVariant::PaperLiteral, None).unwrap();
        assert!((full.loss() - b.loss()).abs() < 1e-12);
    }

    #[test]
    fn mse_values() {
        let a = Image::filled(2, 2, 0.3);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse_loss(&b, &a).unwrap() - 0.01).abs() < 1e-15);
        let (l, g) = mse_grad(&b, &a).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        assert!(g.iter().all(|&v| (v - 0.2 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn posterior_estimates_clamp_mean_only() {
        let mean = Image::filled(2, 2, 1.3);
        let q = NigField::uniform(mean, 1.0, 2.0, 3.0).unwrap();
        let (img, noise) = posterior_estimates(&q);
        assert!(img.data().iter().all(|&v| v == 1.0));
        assert!(noise.data().iter().all(|&v| v == 3.0));
    }
}
