//! Fitting a fresh network to one corrupted image, recording PSNR against
//! the clean original along the way.

use serde::{Deserialize, Serialize};

use super::{adam_step, batch_gradient, AdamConfig, AdamState, LossKind, TrainingSample};
use crate::bayer::{bilinear_demosaic, mosaic};
use crate::degrade::{add_noise, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::image::{Image, Phase};
use crate::metrics::psnr;
use crate::net::{NetConfig, Network};
use crate::nig::LossVariant;
use crate::prior::{make_prior, PriorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverfitLoss {
    Mse,
    Elbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverfitConfig {
    pub net: NetConfig,
    pub steps: u64,
    pub eval_every: u64,
    pub lr: f64,
    pub noise: NoiseSpec,
    /// Prior confidence for the ELBO run.
    pub lambda: f64,
    /// Smoothing window of the ELBO prior.
    pub window: usize,
    pub loss_variant: LossVariant,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            net: NetConfig {
                residual: false,
                ..NetConfig::default()
            },
            steps: 1500,
            eval_every: 25,
            lr: 1e-3,
            noise: NoiseSpec {
                kind: NoiseKind::GaussianIid { sigma: 25.0 / 255.0 },
                seed: 0,
            },
            lambda: 1.0,
            window: 7,
            loss_variant: LossVariant::PaperLiteral,
        }
    }
}

/// PSNR (dB) against step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<(u64, f64)>,
}

impl Curve {
    pub fn peak(&self) -> Option<(u64, f64)> {
        self.points.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn last(&self) -> Option<(u64, f64)> {
        self.points.last().copied()
    }

    pub fn to_csv(&self, x_label: &str) -> String {
        let mut s = format!("{x_label},psnr\n");
        for (x, p) in &self.points {
            s.push_str(&format!("{x},{p}\n"));
        }
        s
    }
}

/// Corrupts `clean` once (noise in color, then RGGB mosaic), and trains a
/// fresh network on the single pair to reproduce the bilinear demosaic of
/// the corrupted mosaic. The MSE run regresses onto it directly; the ELBO
/// run uses it both as the likelihood target and as the prior mean.
pub fn single_image_overfit(clean: &Image, loss: OverfitLoss, cfg: &OverfitConfig) -> Result<Curve> {
    if cfg.steps > 0 && cfg.eval_every == 0 {
        return Err(Error::InvalidParameter("eval_every must be >= 1".into()));
    }
    let noisy = add_noise(clean, &cfg.noise)?;
    let raw = mosaic(&noisy, Phase::Rggb);
    let x_tilde = bilinear_demosaic(&raw);
    let prior = make_prior(&x_tilde, &x_tilde, &PriorConfig::with_lambda(cfg.lambda, cfg.window))?;
    let sample = TrainingSample {
        raw,
        x_tilde: x_tilde.clone(),
        clean: x_tilde,
        prior,
    };
    let batch = std::slice::from_ref(&sample);
    let mut net = Network::new(cfg.net)?;
    let kind = match loss {
        OverfitLoss::Mse => LossKind::Mse,
        OverfitLoss::Elbo => LossKind::Elbo,
    };
    let mut adam = AdamState::new(net.params());
    let score = |net: &Network| -> Result<f64> { psnr(&net.restore(&sample.raw)?, clean, 1.0) };
    let mut curve = Curve {
        points: vec![(0, score(&net)?)],
    };
    for step in 1..=cfg.steps {
        let (_, grads) = batch_gradient(&net, batch, kind, cfg.loss_variant, None)?;
        adam_step(net.params_mut(), &grads, &mut adam, cfg.lr, AdamConfig::default())?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            curve.points.push((step, score(&net)?));
        }
    }
    Ok(curve)
}
