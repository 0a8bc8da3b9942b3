use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jdd_core::bayer::{mosaic, self_ensemble};
use jdd_core::degrade::{add_noise, noise_std, NoiseKind, NoiseSpec};
use jdd_core::finetune::finetune as run_finetune;
use jdd_core::io::{encode_gray_png, encode_png, load_png, load_raw_png, BitDepth};
use jdd_core::metrics::{evaluate, mean_report, MetricReport};
use jdd_core::net::{write_container, Checkpoint, NamedArray};
use jdd_core::nig::{
    expectation_scalar, kl_scalar, mc_expectation_scalar, mc_kl_scalar, LossVariant, NigField, NigParams,
};
use jdd_core::seed::derive_seed;
use jdd_core::train::{
    cartoon_asset, evaluate_bilinear, load_png_dir, procedural_dataset, single_image_overfit, train as run_train,
    validation_set, OverfitLoss,
};
use jdd_core::{Image, Phase};

use crate::config::RunConfig;
use crate::output::{stem, Outputs};
use crate::{parse_phase, CliError, Global};

type CmdResult = Result<(), CliError>;

/// Loads and validates the run configuration, applies `overrides`, and
/// returns `None` after printing it when `--print-config` was given.
fn resolve(global: &Global, overrides: impl FnOnce(&mut RunConfig)) -> Result<Option<RunConfig>, CliError> {
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    overrides(&mut cfg);
    cfg.validate()?;
    if global.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(None);
    }
    if global.deterministic {
        eprintln!("deterministic: single-threaded numerics");
    }
    Ok(Some(cfg))
}

fn depth(bits: u32) -> Result<BitDepth, CliError> {
    Ok(BitDepth::from_bits(bits)?)
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Args)]
pub struct DegradeArgs {
    /// Clean input images (PNG).
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output directory (must exist).
    #[arg(long)]
    out: PathBuf,
    /// Noise model, e.g. `gaussian_iid:sigma=10` (sigmas in 8-bit units).
    #[arg(long)]
    noise: Option<NoiseKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// CFA phase of the written mosaics.
    #[arg(long, value_parser = parse_phase)]
    phase: Option<Phase>,
    /// Also write the per-pixel noise std, normalized to its maximum.
    #[arg(long)]
    sigma_map: bool,
}

/// Writes `<stem>_raw.png` (16-bit mosaic of the noisy image),
/// `<stem>_noisy.png` (16-bit color) and optionally `<stem>_sigma.png`.
/// Input `i` uses noise seed `derive(seed, i)`.
pub fn degrade(global: &Global, a: DegradeArgs) -> CmdResult {
    let Some(cfg) = resolve(global, |c| {
        if let Some(n) = a.noise {
            c.degrade.noise = n;
        }
        if let Some(s) = a.seed {
            c.degrade.seed = s;
        }
        if let Some(p) = a.phase {
            c.degrade.phase = p;
        }
    })?
    else {
        return Ok(());
    };
    let d = &cfg.degrade;
    let images = a.inputs.iter().map(load_png).collect::<Result<Vec<_>, _>>()?;
    let mut outputs = Outputs::default();
    let mut report = Vec::new();
    for (i, (path, img)) in a.inputs.iter().zip(&images).enumerate() {
        let seed = derive_seed(d.seed, &[i as u64]);
        let spec = NoiseSpec::new(d.noise, seed)?;
        let noisy = add_noise(img, &spec)?.clamped();
        let raw = mosaic(&noisy, d.phase);
        let name = stem(path);
        outputs.add(
            a.out.join(format!("{name}_raw.png")),
            encode_gray_png(raw.height(), raw.width(), raw.data(), BitDepth::Sixteen)?,
        );
        outputs.add(a.out.join(format!("{name}_noisy.png")), encode_png(&noisy, BitDepth::Sixteen)?);
        let mut line = format!("{} seed={seed}", path.display());
        if a.sigma_map {
            let std = noise_std(img, &spec)?;
            let max = std.data().iter().cloned().fold(0.0, f64::max);
            let vis = if max > 0.0 { std.map(|v| v / max) } else { std.clone() };
            outputs.add(a.out.join(format!("{name}_sigma.png")), encode_png(&vis, BitDepth::Eight)?);
            line.push_str(&format!(" sigma_max={}", max * 255.0));
        }
        report.push(line);
    }
    outputs.commit()?;
    println!("noise {} base_seed={} phase={:?}", d.noise, d.seed, d.phase);
    for l in report {
        println!("{l}");
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Where to write the best checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Also write the final state (with optimizer moments) for resuming.
    #[arg(long)]
    last: Option<PathBuf>,
    /// JSON-lines log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint written with `--last`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_data(cfg: &RunConfig) -> Result<(Vec<Image>, Vec<Image>), CliError> {
    let d = &cfg.data;
    let n = d.procedural_size;
    let train = match &d.train_dir {
        Some(dir) => load_png_dir(dir)?,
        None => procedural_dataset(d.procedural_train, n, n, d.procedural_seed),
    };
    let val = match &d.val_dir {
        Some(dir) => load_png_dir(dir)?,
        None => procedural_dataset(d.procedural_val, n, n, d.procedural_seed.wrapping_add(1)),
    };
    Ok((train, val))
}

pub fn train(global: &Global, a: TrainArgs) -> CmdResult {
    let Some(cfg) = resolve(global, |c| {
        if let Some(s) = a.steps {
            c.train.max_steps = s;
        }
        if let Some(s) = a.seed {
            c.train.seed = s;
        }
    })?
    else {
        return Ok(());
    };
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let (data, val) = load_data(&cfg)?;
    let val_items = validation_set(&val, &cfg.train, derive_seed(cfg.train.seed, &[u64::MAX]))?;
    let baseline = evaluate_bilinear(&val_items)?;
    println!(
        "seed={} steps={} train_images={} val_images={} bilinear_psnr={}",
        cfg.train.seed,
        cfg.train.max_steps,
        data.len(),
        val.len(),
        fmt_db(baseline.psnr)
    );
    let mut log = Vec::new();
    let start = Instant::now();
    let outcome = run_train(&data, &val, cfg.net, &cfg.train, resume, &mut log, None)?;
    for (step, r) in &outcome.history {
        println!("step {step}: val_psnr={} val_ssim={:.4}", fmt_db(r.psnr), r.ssim);
    }
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut outputs = Outputs::default();
    outputs.add(&a.out, outcome.best.to_bytes()?);
    if let Some(last) = &a.last {
        outputs.add(last, outcome.last.to_bytes()?);
    }
    outputs.add(&log_path, log);
    outputs.commit()?;
    println!(
        "best_val_psnr={} at step {} ({:.1}s)",
        outcome.best.meta.best_val_psnr.map_or("n/a".into(), fmt_db),
        outcome.best.meta.step,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw mosaic (grayscale PNG).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_parser = parse_phase, default_value = "RGGB")]
    phase: Phase,
    /// Restored color image.
    #[arg(long)]
    out: PathBuf,
    /// Expected noise variance, min-max normalized.
    #[arg(long)]
    noise_map: Option<PathBuf>,
    /// Average over the eight Bayer-preserving flips and rotations.
    #[arg(long)]
    ensemble: bool,
    /// Exact posterior fields (mean, lambda, alpha, beta, variance) in the
    /// checkpoint container format.
    #[arg(long)]
    dump_float: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    bits: u32,
}

fn dump_field(field: &NigField) -> Result<Vec<u8>, CliError> {
    let (h, w) = (field.height(), field.width());
    let var = field.expected_variance();
    let arrays = [
        ("mean", &field.mean),
        ("lambda", &field.lambda),
        ("alpha", &field.alpha),
        ("beta", &field.beta),
        ("variance", &var),
    ]
    .into_iter()
    .map(|(name, img)| NamedArray {
        name: name.into(),
        shape: vec![3, h, w],
        data: img.data().iter().map(|&v| v as f32).collect(),
    })
    .collect::<Vec<_>>();
    let meta = serde_json::json!({ "kind": "nig_field", "height": h, "width": w });
    Ok(write_container(meta, &arrays)?)
}

pub fn infer(global: &Global, a: InferArgs) -> CmdResult {
    if resolve(global, |_| {})?.is_none() {
        return Ok(());
    }
    let bits = depth(a.bits)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let raw = load_raw_png(&a.input, a.phase)?;
    let net = &ck.network;
    let field = net.predict(&raw)?;
    let restored = if a.ensemble {
        self_ensemble(|r| net.restore(r), &raw)?
    } else {
        field.mean.clamped()
    };
    let mut outputs = Outputs::default();
    outputs.add(&a.out, encode_png(&restored, bits)?);
    if let Some(path) = &a.noise_map {
        let var = field.expected_variance();
        let lo = var.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = var.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let vis = if hi > lo { var.map(|v| (v - lo) / (hi - lo)) } else { Image::zeros_like(&var) };
        outputs.add(path, encode_png(&vis, BitDepth::Eight)?);
        println!("noise map scale: 0 -> {lo:e}, 1 -> {hi:e} (variance)");
    }
    if let Some(path) = &a.dump_float {
        outputs.add(path, dump_field(&field)?);
    }
    outputs.commit()?;
    println!("restored {} ({}x{}, ensemble={})", a.out.display(), raw.height(), raw.width(), a.ensemble);
    Ok(())
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_parser = parse_phase, default_value = "RGGB")]
    phase: Phase,
    /// Clean image, only used to report a PSNR curve.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// PSNR per iteration as CSV; needs `--reference`.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    bits: u32,
}

pub fn finetune(global: &Global, a: FinetuneArgs) -> CmdResult {
    let Some(cfg) = resolve(global, |c| {
        if let Some(v) = a.iterations {
            c.finetune.iterations = v;
        }
        if let Some(v) = a.lr {
            c.finetune.lr = v;
        }
        if let Some(v) = a.seed {
            c.finetune.seed = v;
        }
    })?
    else {
        return Ok(());
    };
    if a.curve.is_some() && a.reference.is_none() {
        return Err(CliError::Usage("--curve needs --reference".into()));
    }
    let bits = depth(a.bits)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let raw = load_raw_png(&a.input, a.phase)?;
    let clean = a.reference.as_ref().map(load_png).transpose()?;
    let out = run_finetune(&ck, &raw, &cfg.finetune, clean.as_ref())?;
    let mut outputs = Outputs::default();
    outputs.add(&a.out_checkpoint, out.checkpoint.to_bytes()?);
    outputs.add(&a.out, encode_png(&out.restored, bits)?);
    if let (Some(path), Some(curve)) = (&a.curve, &out.curve) {
        outputs.add(path, curve.to_csv("iteration").into_bytes());
    }
    outputs.commit()?;
    let masked = out.masked_fraction.iter().sum::<f64>() / out.masked_fraction.len().max(1) as f64;
    println!(
        "seed={} iterations={} lr={:e} mean_masked_fraction={masked:.4}",
        cfg.finetune.seed, cfg.finetune.iterations, cfg.finetune.lr
    );
    if let Some(curve) = &out.curve {
        if let (Some(first), Some((pi, pv)), Some((li, lv))) = (curve.points.first(), curve.peak(), curve.last()) {
            println!(
                "psnr: start={} peak={} (iteration {pi}) final={} (iteration {li})",
                fmt_db(first.1),
                fmt_db(pv),
                fmt_db(lv)
            );
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Predictions: PNG files, or one directory.
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<PathBuf>,
    /// References, paired with `--pred` by position (files) or by file name
    /// (directories).
    #[arg(long = "ref", required = true, num_args = 1..)]
    reference: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn pairs(pred: &[PathBuf], reference: &[PathBuf]) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    if let ([p], [r]) = (pred, reference) {
        if p.is_dir() && r.is_dir() {
            let mut names: Vec<_> = std::fs::read_dir(p)
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .filter_map(|f| f.file_name().map(|n| n.to_owned()))
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(CliError::Usage(format!("no PNG files in {}", p.display())));
            }
            return Ok(names.into_iter().map(|n| (p.join(&n), r.join(&n))).collect());
        }
    }
    if pred.len() != reference.len() {
        return Err(CliError::Usage(format!(
            "{} predictions but {} references",
            pred.len(),
            reference.len()
        )));
    }
    Ok(pred.iter().cloned().zip(reference.iter().cloned()).collect())
}

pub fn eval(global: &Global, a: EvalArgs) -> CmdResult {
    if resolve(global, |_| {})?.is_none() {
        return Ok(());
    }
    let pairs = pairs(&a.pred, &a.reference)?;
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    for (p, r) in &pairs {
        let report = evaluate(&load_png(p)?, &load_png(r)?)?;
        rows.push((p.display().to_string(), report));
    }
    let reports: Vec<_> = rows.iter().map(|r| r.1).collect();
    let mean = mean_report(&reports);
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>9}  {:>7}", "image", "psnr", "ssim");
    for (name, r) in rows.iter().chain(std::iter::once(&("mean".to_string(), mean))) {
        println!("{name:<width$}  {:>9}  {:>7.4}", fmt_db(r.psnr), r.ssim);
    }
    if let Some(path) = &a.csv {
        let mut csv = String::from("image,psnr,ssim\n");
        for (name, r) in rows.iter().chain(std::iter::once(&("mean".to_string(), mean))) {
            csv.push_str(&format!("{name},{},{}\n", r.psnr, r.ssim));
        }
        let mut out = Outputs::default();
        out.add(path, csv.into_bytes());
        out.commit()?;
    }
    Ok(())
}

#[derive(Args)]
pub struct ValidateLossArgs {
    /// Number of random configurations.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Monte Carlo samples per estimate.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Failure threshold in standard errors.
    #[arg(long, default_value_t = 3.0)]
    z_max: f64,
}

fn random_params(rng: &mut ChaCha8Rng) -> NigParams {
    NigParams {
        mean: rng.gen_range(0.0..1.0),
        lambda: rng.gen_range(0.5..10.0),
        alpha: rng.gen_range(1.5..8.0),
        beta: rng.gen_range(0.01..1.0),
    }
}

/// Closed-form KL and the derivation-consistent expectation term against
/// their Monte Carlo oracles on random configurations, plus the size of the
/// paper-literal expectation's offset at one reference point.
pub fn validate_loss(global: &Global, a: ValidateLossArgs) -> CmdResult {
    if resolve(global, |_| {})?.is_none() {
        return Ok(());
    }
    if a.n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (mut max_kl, mut max_ex) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for i in 0..a.n {
        let q = random_params(&mut rng);
        let p = random_params(&mut rng);
        let x: f64 = rng.gen_range(0.0..1.0);
        let kl = mc_kl_scalar(&q, &p, a.samples, derive_seed(a.seed, &[i as u64, 0]))?;
        let ex = mc_expectation_scalar(&q, x, a.samples, derive_seed(a.seed, &[i as u64, 1]))?;
        let zk = kl.z_score(kl_scalar(&q, &p)).abs();
        let ze = ex.z_score(expectation_scalar(&q, x, LossVariant::DerivationConsistent)).abs();
        if zk > a.z_max || ze > a.z_max {
            failures += 1;
            println!("config {i}: q={q:?} p={p:?} x={x} |z_kl|={zk:.2} |z_expectation|={ze:.2}");
        }
        max_kl = max_kl.max(zk);
        max_ex = max_ex.max(ze);
    }
    let q = NigParams { mean: 0.5, lambda: 1.0, alpha: 3.0, beta: 0.5 };
    let mc = mc_expectation_scalar(&q, q.mean, a.samples, derive_seed(a.seed, &[u64::MAX]))?;
    let gap = expectation_scalar(&q, q.mean, LossVariant::PaperLiteral) - mc.estimate;
    println!("configurations: {} samples: {} seed: {}", a.n, a.samples, a.seed);
    println!("max |z| kl: {max_kl:.3}");
    println!("max |z| expectation (derivation_consistent): {max_ex:.3}");
    println!(
        "paper_literal exceeds Monte Carlo at lambda=1 alpha=3 beta=0.5 by {gap:.5} nats (stderr {:.5})",
        mc.stderr
    );
    if failures > 0 {
        println!("FAIL");
        return Err(CliError::Validation(format!(
            "{failures} of {} configurations beyond {} standard errors",
            a.n, a.z_max
        )));
    }
    println!("PASS");
    Ok(())
}

#[derive(Args)]
pub struct OverfitArgs {
    /// Clean image; defaults to the bundled cartoon.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Directory receiving `mse.csv` and `elbo.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
}

pub fn overfit(global: &Global, a: OverfitArgs) -> CmdResult {
    let Some(cfg) = resolve(global, |c| {
        if let Some(s) = a.steps {
            c.overfit.steps = s;
        }
    })?
    else {
        return Ok(());
    };
    let clean = match &a.input {
        Some(p) => load_png(p)?,
        None => cartoon_asset(),
    };
    if !a.out.is_dir() {
        return Err(CliError::Io(format!("output directory {} does not exist", a.out.display())));
    }
    let mut outputs = Outputs::default();
    let mut lines = Vec::new();
    for (loss, name) in [(OverfitLoss::Mse, "mse"), (OverfitLoss::Elbo, "elbo")] {
        let curve = single_image_overfit(&clean, loss, &cfg.overfit)?;
        if let (Some((ps, pv)), Some((ls, lv))) = (curve.peak(), curve.last()) {
            lines.push(format!("{name}: peak={} at step {ps}, final={} at step {ls}", fmt_db(pv), fmt_db(lv)));
        }
        outputs.add(a.out.join(format!("{name}.csv")), curve.to_csv("step").into_bytes());
    }
    outputs.commit()?;
    println!("noise {} seed={}", cfg.overfit.noise.kind, cfg.overfit.noise.seed);
    for l in lines {
        println!("{l}");
    }
    std::io::stdout().flush().ok();
    Ok(())
}
