//! Training: patch sampling with augmentation, the batch objective, the
//! plateau learning-rate schedule, the training loop and the single-image
//! overfitting experiment.

mod dataset;
mod overfit;

pub use crate::optim::{adam_step, AdamConfig, AdamState};
pub use dataset::{cartoon_asset, load_png_dir, procedural_dataset, procedural_image};
pub use overfit::{single_image_overfit, Curve, OverfitConfig, OverfitLoss};

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayer::{bilinear_demosaic, mosaic, transform_image, DihedralTransform};
use crate::degrade::{add_spatial_noise, gen_sigma_field};
use crate::error::{Error, Result};
use crate::image::{Image, Phase, RawMosaic};
use crate::metrics::{evaluate, mean_report, MetricReport};
use crate::net::{Checkpoint, NetConfig, Network, TrainingMeta, BETA_MIN};
use crate::nig::{mse_grad, neg_elbo_grad, LossVariant, NigField, NigGradField};
use crate::prior::{make_prior, PriorConfig};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Elbo,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_decay: f64,
    /// Evaluations without a gain above `plateau_threshold` before decaying.
    pub plateau_patience: usize,
    /// Minimum PSNR gain in dB that counts as improvement.
    pub plateau_threshold: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Upper end of the per-patch peak noise level, 8-bit units.
    pub sigma_max: f64,
    /// Blur length of the spatially variant sigma field, pixels.
    pub sigma_smoothness: f64,
    pub loss: LossKind,
    pub loss_variant: LossVariant,
    pub prior: PriorConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 32,
            batch_size: 8,
            lr_init: 5e-4,
            lr_floor: 1e-4,
            lr_decay: 0.8,
            plateau_patience: 3,
            plateau_threshold: 0.01,
            max_steps: 5000,
            eval_every: 250,
            sigma_max: 20.0,
            sigma_smoothness: 8.0,
            loss: LossKind::Elbo,
            loss_variant: LossVariant::PaperLiteral,
            prior: PriorConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.patch_size < 2 || !self.patch_size.is_multiple_of(2) {
            return bad(format!("patch_size must be even and >= 2, got {}", self.patch_size));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be >= 1".into());
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_init) {
            return bad(format!("need 0 < lr_floor <= lr_init, got {} and {}", self.lr_floor, self.lr_init));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay must be in (0, 1), got {}", self.lr_decay));
        }
        if !(self.sigma_max >= 0.0 && self.sigma_smoothness >= 0.0) {
            return bad("noise range must be non-negative".into());
        }
        self.prior.validate()
    }
}

/// One training example: the network input, the degraded color image used
/// by the likelihood term, the clean target and the NIG prior.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub raw: RawMosaic,
    pub x_tilde: Image,
    pub clean: Image,
    pub prior: NigField,
}

/// Even-aligned random crop, random dihedral transform (in color, before
/// mosaicking), spatially variant Gaussian noise with peak level drawn from
/// `U(0, sigma_max / 255)`, RGGB mosaic, bilinear demosaic and prior.
pub fn sample_training_pair(dataset: &[Image], cfg: &TrainConfig, seed: u64) -> Result<TrainingSample> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let p = cfg.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = &dataset[rng.gen_range(0..dataset.len())];
    if img.height() < p || img.width() < p {
        return Err(Error::Shape(format!(
            "patch {p} does not fit a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let y0 = 2 * rng.gen_range(0..=(img.height() - p) / 2);
    let x0 = 2 * rng.gen_range(0..=(img.width() - p) / 2);
    let t = DihedralTransform::new(rng.gen_range(0..8))?;
    let clean = transform_image(&img.crop(y0, x0, p, p)?, t);
    let sigma_max = rng.gen_range(0.0..=cfg.sigma_max / 255.0);
    let field = gen_sigma_field(p, p, sigma_max, cfg.sigma_smoothness, rng.gen())?;
    let noisy = add_spatial_noise(&clean, &field, rng.gen())?;
    let raw = mosaic(&noisy, Phase::Rggb);
    let x_tilde = bilinear_demosaic(&raw);
    let prior = make_prior(&x_tilde, &clean, &cfg.prior)?;
    Ok(TrainingSample {
        raw,
        x_tilde,
        clean,
        prior,
    })
}

/// Per-element averages of the batch objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLoss {
    pub loss: f64,
    pub kl: f64,
    pub expectation: f64,
}

/// Loss averaged over all output elements of the batch and its gradient.
/// ELBO uses each sample's prior and `x_tilde`; MSE regresses the mean onto
/// `clean`. `weights`, when given, masks or reweights elements per sample.
pub fn batch_gradient(
    net: &Network,
    batch: &[TrainingSample],
    loss: LossKind,
    variant: LossVariant,
    weights: Option<&[Vec<f64>]>,
) -> Result<(StepLoss, crate::net::ParamSet)> {
    let raws: Vec<RawMosaic> = batch.iter().map(|s| s.raw.clone()).collect();
    let (fields, cache) = net.forward(&raws)?;
    let n_total: usize = fields.iter().map(NigField::len).sum();
    let scale = 1.0 / n_total as f64;
    let mut out = StepLoss::default();
    let mut grads = Vec::with_capacity(batch.len());
    for (i, (q, s)) in fields.iter().zip(batch).enumerate() {
        let w = weights.map(|w| w[i].as_slice());
        let mut g = match loss {
            LossKind::Elbo => {
                let (b, g) = neg_elbo_grad(q, &s.prior, &s.x_tilde, variant, w)?;
                out.kl += b.kl * scale;
                out.expectation += b.expectation * scale;
                out.loss += b.loss() * scale;
                g
            }
            LossKind::Mse => {
                let (l, dm) = mse_grad(&q.mean, &s.clean)?;
                // mse_grad is normalized per image
                let per = q.len() as f64 * scale;
                out.loss += l * per;
                let mut g = NigGradField::zeros(q.len());
                g.mean = dm.iter().map(|d| d * per).collect();
                if let Some(w) = w {
                    g.mean.iter_mut().zip(w).for_each(|(d, wi)| *d *= wi);
                }
                g
            }
        };
        if loss == LossKind::Elbo {
            for v in [&mut g.mean, &mut g.lambda, &mut g.alpha, &mut g.beta] {
                v.iter_mut().for_each(|x| *x *= scale);
            }
        }
        grads.push(g);
    }
    Ok((out, net.backward(&cache, &grads)?))
}

/// Reduce-on-plateau state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub floor: f64,
    pub decay: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub wait: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: cfg.lr_init,
            floor: cfg.lr_floor,
            decay: cfg.lr_decay,
            patience: cfg.plateau_patience.max(1),
            threshold: cfg.plateau_threshold,
            best: None,
            wait: 0,
        }
    }

    /// Records one evaluation and returns the learning rate to use next.
    pub fn observe(&mut self, psnr: f64) -> f64 {
        match self.best {
            Some(b) if psnr <= b + self.threshold => {
                self.wait += 1;
                if self.wait >= self.patience {
                    self.lr = (self.lr * self.decay).max(self.floor);
                    self.wait = 0;
                }
            }
            _ => {
                self.best = Some(psnr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying an evaluation history from the start.
pub fn plateau_schedule(history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut s = PlateauSchedule::new(cfg);
    history.iter().for_each(|&p| {
        s.observe(p);
    });
    s.lr
}

/// A fixed validation input: noisy mosaic plus its clean reference.
#[derive(Debug, Clone)]
pub struct ValidationItem {
    pub raw: RawMosaic,
    pub clean: Image,
}

/// Deterministic validation inputs: full images, spatially variant noise
/// with a per-image peak level from the training range.
pub fn validation_set(images: &[Image], cfg: &TrainConfig, seed: u64) -> Result<Vec<ValidationItem>> {
    images
        .iter()
        .enumerate()
        .map(|(i, clean)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let sigma_max = rng.gen_range(0.0..=cfg.sigma_max / 255.0);
            let field = gen_sigma_field(clean.height(), clean.width(), sigma_max, cfg.sigma_smoothness, rng.gen())?;
            let noisy = add_spatial_noise(clean, &field, rng.gen())?;
            Ok(ValidationItem {
                raw: mosaic(&noisy, Phase::Rggb),
                clean: clean.clone(),
            })
        })
        .collect()
}

/// Mean metrics of the clamped mean prediction, optionally with the
/// self-ensemble.
pub fn evaluate_network(net: &Network, items: &[ValidationItem], ensemble: bool) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(items.len());
    for it in items {
        let pred = if ensemble {
            crate::bayer::self_ensemble(|r| net.restore(r), &it.raw)?.clamped()
        } else {
            net.restore(&it.raw)?
        };
        reports.push(evaluate(&pred, &it.clean)?);
    }
    Ok(mean_report(&reports))
}

/// Mean metrics of bilinear demosaicking of the noisy input.
pub fn evaluate_bilinear(items: &[ValidationItem]) -> Result<MetricReport> {
    let reports = items
        .iter()
        .map(|it| evaluate(&bilinear_demosaic(&it.raw).clamped(), &it.clean))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub kl: f64,
    pub expectation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ssim: Option<f64>,
}

pub struct TrainOutcome {
    /// Best checkpoint by validation PSNR (the last one if never evaluated).
    pub best: Checkpoint,
    /// State after the final step, for resuming.
    pub last: Checkpoint,
    pub history: Vec<(u64, MetricReport)>,
}

/// Points the head biases at the posterior a single observation would give
/// under the batch's prior: `lambda + 1`, `alpha + 1/2` and
/// `beta + lambda (x - y)^2 / (2 (lambda + 1))`, averaged over the batch.
/// The network otherwise starts far from the prior's scale, and the KL
/// gradients for those maps swamp the mean's during early training.
pub fn match_head_to_prior(net: &mut Network, batch: &[TrainingSample]) -> Result<()> {
    let (mut lambda, mut alpha, mut beta, mut n) = (0.0, 0.0, 0.0, 0.0);
    for s in batch {
        let p = &s.prior;
        for i in 0..p.len() {
            let e = p.at(i);
            let d = s.x_tilde.data()[i] - e.mean;
            lambda += e.lambda + 1.0;
            alpha += e.alpha + 0.5;
            beta += e.beta + e.lambda * d * d / (2.0 * (e.lambda + 1.0));
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    net.set_head_bias(lambda / n, alpha / n, (beta / n).max(2.0 * BETA_MIN))
}

/// Seed of batch item `i` at `step`.
pub fn sample_seed(base: u64, step: u64, i: usize) -> u64 {
    derive_seed(base, &[step, i as u64])
}

/// Minimizes the mean negative ELBO (or MSE) with Adam. Single-threaded and
/// deterministic: step `s` draws its batch from seeds derived from
/// `(cfg.seed, s)`, so resuming from a checkpoint continues the same stream.
/// Writes one JSON line per step to `log` and, when `checkpoint_path` is
/// given, saves every new best checkpoint there.
pub fn train(
    dataset: &[Image],
    val_images: &[Image],
    net_cfg: NetConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    log: &mut dyn Write,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let val = validation_set(val_images, cfg, derive_seed(cfg.seed, &[u64::MAX]))?;
    let mut sched = PlateauSchedule::new(cfg);
    let (mut net, mut adam, mut step, mut best_psnr) = match resume {
        Some(ck) => {
            sched.lr = ck.meta.lr;
            sched.best = ck.meta.plateau_best;
            sched.wait = ck.meta.plateau_wait;
            let adam = ck.optimizer.unwrap_or_else(|| AdamState::new(ck.network.params()));
            (ck.network, adam, ck.meta.step, ck.meta.best_val_psnr)
        }
        None => {
            let mut net = Network::new(net_cfg)?;
            if cfg.loss == LossKind::Elbo {
                let first = (0..cfg.batch_size)
                    .map(|i| sample_training_pair(dataset, cfg, sample_seed(cfg.seed, 0, i)))
                    .collect::<Result<Vec<_>>>()?;
                match_head_to_prior(&mut net, &first)?;
            }
            let adam = AdamState::new(net.params());
            (net, adam, 0, None)
        }
    };
    let meta_at = |step: u64, sched: &PlateauSchedule, best: Option<f64>| TrainingMeta {
        step,
        lr: sched.lr,
        loss_variant: cfg.loss_variant,
        prior: cfg.prior,
        seed: cfg.seed,
        best_val_psnr: best,
        plateau_best: sched.best,
        plateau_wait: sched.wait,
    };
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let io_err = |e: std::io::Error| Error::io("training log", e);
    while step < cfg.max_steps {
        let batch = (0..cfg.batch_size)
            .map(|i| sample_training_pair(dataset, cfg, sample_seed(cfg.seed, step, i)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = batch_gradient(&net, &batch, cfg.loss, cfg.loss_variant, None)?;
        if !loss.loss.is_finite() {
            return Err(Error::Degenerate(format!("non-finite loss at step {step}")));
        }
        let lr = sched.lr;
        adam_step(net.params_mut(), &grads, &mut adam, lr, AdamConfig::default())?;
        step += 1;
        let mut rec = LogRecord {
            step,
            lr,
            loss: loss.loss,
            kl: loss.kl,
            expectation: loss.expectation,
            val_psnr: None,
            val_ssim: None,
        };
        if (step % cfg.eval_every == 0 || step == cfg.max_steps)
            && !val.is_empty() {
                let r = evaluate_network(&net, &val, false)?;
                rec.val_psnr = Some(r.psnr);
                rec.val_ssim = Some(r.ssim);
                history.push((step, r));
                sched.observe(r.psnr);
                if best_psnr.is_none_or(|b| r.psnr > b) {
                    best_psnr = Some(r.psnr);
                    let mut ck = Checkpoint::new(net.clone(), meta_at(step, &sched, best_psnr));
                    ck.optimizer = Some(adam.clone());
                    if let Some(p) = checkpoint_path {
                        ck.save(p)?;
                    }
                    best = Some(ck);
                }
            }
        serde_json::to_writer(&mut *log, &rec).map_err(|e| Error::io("training log", e.into()))?;
        writeln!(log).map_err(io_err)?;
    }
    log.flush().map_err(io_err)?;
    let mut last = Checkpoint::new(net, meta_at(step, &sched, best_psnr));
    last.optimizer = Some(adam);
    let best = match best {
        Some(b) => b,
        None => {
            if let Some(p) = checkpoint_path {
                last.save(p)?;
            }
            last.clone()
        }
    };
    Ok(TrainOutcome { best, last, history })
}
