//! Fine-tuning on a single out-of-distribution input, using random
//! neighboring pixels of the input itself as a weak prior and masking
//! neighbors that fall outside a two-sigma interval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayer::{bayer_transform, bilinear_demosaic, DihedralTransform};
use crate::error::{Error, Result};
use crate::image::{Image, Phase, RawMosaic};
use crate::metrics::psnr;
use crate::net::Checkpoint;
use crate::nig::{neg_elbo_grad, ElboBreakdown, LossVariant, NigField, NigGradField};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::prior::{make_prior, PriorConfig};
use crate::seed::derive_seed;
use crate::train::Curve;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lambda: f64,
    /// Odd side length of the neighbor window.
    pub patch: usize,
    pub lr: f64,
    pub iterations: u64,
    /// Smoothing window for the prior's beta.
    pub window: usize,
    pub loss_variant: LossVariant,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda: 1.0,
            patch: 3,
            lr: 2e-6,
            iterations: 50,
            window: 19,
            loss_variant: LossVariant::PaperLiteral,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < 3 || self.patch.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("patch must be odd and >= 3, got {}", self.patch)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be >= 0, got {}", self.lr)));
        }
        self.prior_config().validate()
    }

    fn prior_config(&self) -> PriorConfig {
        PriorConfig::with_lambda(self.lambda, self.window)
    }
}

/// Per-element displacement `(dy, dx)` chosen by [`neighbor_prior`], after
/// clamping to the image.
pub type Offsets = Vec<(i32, i32)>;

/// Replaces every element with a random neighbor from the `p x p` window
/// around it, excluding the element itself; positions outside the image are
/// clamped to the border.
pub fn neighbor_prior(x_tilde: &Image, p: usize, seed: u64) -> Result<(Image, Offsets)> {
    let (h, w) = (x_tilde.height(), x_tilde.width());
    if p < 3 || p.is_multiple_of(2) || p > h.min(w) {
        return Err(Error::InvalidParameter(format!(
            "neighbor patch must be odd, >= 3 and fit the {h}x{w} image, got {p}"
        )));
    }
    let r = (p / 2) as i32;
    let candidates: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&t| t != (0, 0))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Image::zeros_like(x_tilde);
    let mut offsets = Vec::with_capacity(x_tilde.data().len());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = candidates[rng.gen_range(0..candidates.len())];
                let sy = (y as i32 + dy).clamp(0, h as i32 - 1);
                let sx = (x as i32 + dx).clamp(0, w as i32 - 1);
                out.set(c, y, x, x_tilde.get(c, sy as usize, sx as usize));
                offsets.push((sy - y as i32, sx - x as i32));
            }
        }
    }
    Ok((out, offsets))
}

/// `1` where `|prior - x_tilde| < 2 sigma` (strict), else `0`.
pub fn confidence_mask(x_tilde: &Image, prior_image: &Image, sigma: &Image) -> Result<Image> {
    x_tilde.ensure_same_shape(prior_image, "confidence mask")?;
    x_tilde.ensure_same_shape(sigma, "confidence mask")?;
    if sigma.data().iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidParameter("sigma must be >= 0".into()));
    }
    let mut m = Image::zeros_like(x_tilde);
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        let d = (prior_image.data()[i] - x_tilde.data()[i]).abs();
        *v = if d < 2.0 * sigma.data()[i] { 1.0 } else { 0.0 };
    }
    Ok(m)
}

/// Fine-tuning prior: mean `prior_image`, constant `lambda`, and
/// `alpha`/`beta` from the windowed residual between `x_tilde` and
/// `prior_image`.
pub fn finetune_prior(x_tilde: &Image, prior_image: &Image, cfg: &FinetuneConfig) -> Result<NigField> {
    make_prior(x_tilde, prior_image, &cfg.prior_config())
}

/// Negative ELBO summed over unmasked elements, with its gradient (zero at
/// masked elements).
pub fn masked_elbo(
    q: &NigField,
    x_tilde: &Image,
    prior_image: &Image,
    mask: &Image,
    cfg: &FinetuneConfig,
    variant: LossVariant,
) -> Result<(ElboBreakdown, NigGradField)> {
    q.mean.ensure_same_shape(mask, "masked elbo")?;
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::Degenerate("every element is masked".into()));
    }
    let prior = finetune_prior(x_tilde, prior_image, cfg)?;
    neg_elbo_grad(q, &prior, x_tilde, variant, Some(mask.data()))
}

pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub restored: Image,
    /// PSNR after each iteration (iteration 0 is the starting model), when a
    /// reference was given.
    pub curve: Option<Curve>,
    pub masked_fraction: Vec<f64>,
}

/// Adapts a trained model to one input. Each iteration draws a fresh
/// neighbor prior, derives sigma from the current predicted noise map
/// (`sqrt(beta / (alpha - 1))`), masks outliers and takes one Adam step on
/// the mean masked negative ELBO.
pub fn finetune(
    checkpoint: &Checkpoint,
    raw: &RawMosaic,
    cfg: &FinetuneConfig,
    clean: Option<&Image>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if let Some(c) = clean {
        if (c.height(), c.width()) != (raw.height(), raw.width()) {
            return Err(Error::Shape("reference does not match the input".into()));
        }
    }
    let unified = if raw.phase() == Phase::Rggb {
        raw.clone()
    } else {
        bayer_transform(raw, DihedralTransform::IDENTITY)
    };
    let x_tilde = bilinear_demosaic(&unified);
    let mut net = checkpoint.network.clone();
    let mut adam = AdamState::new(net.params());
    let score = |net: &crate::net::Network| -> Result<Option<f64>> {
        clean.map(|c| psnr(&net.restore(raw)?, c, 1.0)).transpose()
    };
    // For RGGB input the forward pass of an iteration already holds the
    // previous iteration's restoration, so it is scored from there.
    let reuse = raw.phase() == Phase::Rggb;
    let mut points = Vec::new();
    if !reuse {
        if let Some(p) = score(&net)? {
            points.push((0, p));
        }
    }
    let mut masked_fraction = Vec::new();
    let n = x_tilde.data().len() as f64;
    for it in 1..=cfg.iterations {
        let (mut fields, cache) = net.forward(std::slice::from_ref(&unified))?;
        let q = fields.remove(0);
        if let (true, Some(c)) = (reuse, clean) {
            points.push((it - 1, psnr(&q.mean.clamped(), c, 1.0)?));
        }
        let sigma = q.expected_variance().map(f64::sqrt);
        let (prior_image, _) = neighbor_prior(&x_tilde, cfg.patch, derive_seed(cfg.seed, &[it]))?;
        let mask = confidence_mask(&x_tilde, &prior_image, &sigma)?;
        masked_fraction.push(1.0 - mask.data().iter().sum::<f64>() / n);
        let (_, mut g) = masked_elbo(&q, &x_tilde, &prior_image, &mask, cfg, cfg.loss_variant)?;
        for v in [&mut g.mean, &mut g.lambda, &mut g.alpha, &mut g.beta] {
            v.iter_mut().for_each(|x| *x /= n);
        }
        let grads = net.backward(&cache, &[g])?;
        adam_step(net.params_mut(), &grads, &mut adam, cfg.lr, AdamConfig::default())?;
        if !reuse {
            if let Some(p) = score(&net)? {
                points.push((it, p));
            }
        }
    }
    if reuse {
        if let Some(p) = score(&net)? {
            points.push((cfg.iterations, p));
        }
    }
    let restored = net.restore(raw)?;
    let mut meta = checkpoint.meta.clone();
    meta.lr = cfg.lr;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint::new(net, meta),
        restored,
        curve: clean.map(|_| Curve { points }),
        masked_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetConfig, Network, TrainingMeta};
    use crate::nig::elbo_loss;

    fn ramp() -> Image {
        Image::from_fn(12, 10, |c, y, x| (c * 100 + y * 10 + x) as f64 / 1000.0)
    }

    #[test]
    fn neighbor_offsets() {
        let img = Image::filled(8, 8, 0.4);
        let (p, _) = neighbor_prior(&img, 3, 1).unwrap();
        assert_eq!(p, img);
        let (p, off) = neighbor_prior(&ramp(), 3, 2).unwrap();
        for (i, &(dy, dx)) in off.iter().enumerate() {
            assert!(dy.abs() <= 1 && dx.abs() <= 1);
            let (c, y, x) = (i / 120, (i % 120) / 10, i % 10);
            let interior = (1..11).contains(&y) && (1..9).contains(&x);
            if interior {
                assert_ne!((dy, dx), (0, 0));
            }
            let v = ramp().get(c, (y as i32 + dy) as usize, (x as i32 + dx) as usize);
            assert_eq!(p.get(c, y, x), v);
        }
        assert!(neighbor_prior(&img, 4, 0).is_err());
        assert!(neighbor_prior(&img, 9, 0).is_err());
        assert_eq!(neighbor_prior(&img, 5, 3).unwrap(), neighbor_prior(&img, 5, 3).unwrap());
    }

    #[test]
    fn mask_boundaries() {
        let x = ramp();
        let s0 = Image::zeros_like(&x);
        let m = confidence_mask(&x, &x, &s0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let big = Image::filled(12, 10, 10.0);
        let other = x.map(|v| 1.0 - v);
        assert!(confidence_mask(&x, &other, &big).unwrap().data().iter().all(|&v| v == 1.0));
        // exactly 2 sigma away is outside the open interval
        let s = Image::filled(12, 10, 0.25);
        let q = x.map(|v| (v * 8.0).round() / 8.0);
        let shifted = q.map(|v| v + 0.5);
        assert!(confidence_mask(&q, &shifted, &s).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(confidence_mask(&x, &x, &Image::filled(12, 10, -1.0)).is_err());
    }

    fn posterior(mean: &Image) -> NigField {
        NigField::new(
            mean.map(|v| v + 0.01),
            Image::filled(mean.height(), mean.width(), 2.0),
            Image::filled(mean.height(), mean.width(), 3.0),
            Image::filled(mean.height(), mean.width(), 0.01),
        )
        .unwrap()
    }

    #[test]
    fn masked_elbo_reductions() {
        let x = ramp();
        let cfg = FinetuneConfig {
            window: 3,
            ..Default::default()
        };
        let q = posterior(&x);
        let (prior_img, _) = neighbor_prior(&x, 3, 4).unwrap();
        let ones = Image::filled(12, 10, 1.0);
        // full mask with prior_image = x_tilde equals the plain ELBO with y = x_tilde
        let (b, _) = masked_elbo(&q, &x, &x, &ones, &cfg, LossVariant::PaperLiteral).unwrap();
        let prior = make_prior(&x, &x, &PriorConfig::with_lambda(1.0, 3)).unwrap();
        let plain = elbo_loss(&q, &prior, &x, LossVariant::PaperLiteral, false).unwrap();
        assert!((b.loss() - plain.loss()).abs() < 1e-9 * plain.loss().abs().max(1.0));

        // singleton mask equals that element's term
        let mut single = Image::zeros_like(&x);
        single.data_mut()[37] = 1.0;
        let (b, g) = masked_elbo(&q, &x, &prior_img, &single, &cfg, LossVariant::PaperLiteral).unwrap();
        let prior = finetune_prior(&x, &prior_img, &cfg).unwrap();
        let full = elbo_loss(&q, &prior, &x, LossVariant::PaperLiteral, true).unwrap();
        let (kl, ex) = full.per_pixel.unwrap();
        assert!((b.loss() - (kl.data()[37] - ex.data()[37])).abs() < 1e-12);
        for (i, &gm) in g.mean.iter().enumerate() {
            if i != 37 {
                assert_eq!(gm, 0.0);
            }
        }
        assert!(masked_elbo(&q, &x, &prior_img, &Image::zeros_like(&x), &cfg, LossVariant::PaperLiteral).is_err());
    }

    fn small_checkpoint() -> Checkpoint {
        let cfg = NetConfig {
            channels: 4,
            grdb_blocks: 1,
            grdb_layers: 1,
            growth: 4,
            ..Default::default()
        };
        let mut net = Network::new(cfg).unwrap();
        net.randomize_head(0.05, 1);
        net.params_mut().round_to_f32();
        Checkpoint::new(net, TrainingMeta::default())
    }

    #[test]
    fn zero_iterations_and_zero_lr() {
        let ck = small_checkpoint();
        let clean = crate::train::procedural_image(16, 16, 3);
        let raw = crate::bayer::mosaic(&clean, Phase::Rggb);
        let cfg = FinetuneConfig {
            iterations: 0,
            window: 3,
            ..Default::default()
        };
        let out = finetune(&ck, &raw, &cfg, Some(&clean)).unwrap();
        assert_eq!(out.restored, ck.network.restore(&raw).unwrap());
        assert_eq!(out.curve.unwrap().points.len(), 1);
        let cfg = FinetuneConfig {
            iterations: 3,
            lr: 0.0,
            window: 3,
            ..Default::default()
        };
        let out = finetune(&ck, &raw, &cfg, None).unwrap();
        assert_eq!(out.checkpoint.network, ck.network);
        assert!(out.curve.is_none());
        let moved = finetune(&ck, &raw, &FinetuneConfig { lr: 1e-3, ..cfg }, None).unwrap();
        assert_ne!(moved.checkpoint.network, ck.network);
    }

    #[test]
    fn curve_scores_each_iterate() {
        let ck = small_checkpoint();
        let clean = crate::train::procedural_image(16, 16, 4);
        for phase in [Phase::Rggb, Phase::Gbrg] {
            let raw = crate::bayer::mosaic(&clean, phase);
            let cfg = FinetuneConfig {
                iterations: 3,
                lr: 1e-3,
                window: 3,
                ..Default::default()
            };
            let curve = finetune(&ck, &raw, &cfg, Some(&clean)).unwrap().curve.unwrap();
            assert_eq!(curve.points.len(), 4);
            for (k, p) in curve.points {
                let part = finetune(&ck, &raw, &FinetuneConfig { iterations: k, ..cfg }, None).unwrap();
                assert_eq!(p, psnr(&part.restored, &clean, 1.0).unwrap(), "{phase:?} iteration {k}");
            }
        }
    }
}
