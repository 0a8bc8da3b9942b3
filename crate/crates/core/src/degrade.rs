//! Noise synthesis: spatially variant sigma fields, the supported noise
//! models, two-stage NIG sampling and multi-shot averaging.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{blurred_noise_std, gaussian_blur};
use crate::image::{Image, Plane, CHANNELS};
use crate::metrics::psnr_from_mse;
use crate::nig::NigField;

/// Per-pixel, per-channel noise standard deviation on the `[0, 1]` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaField(Image);

impl SigmaField {
    pub fn new(sigma: Image) -> Result<Self> {
        if sigma.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("sigma field needs finite values >= 0".into()));
        }
        Ok(SigmaField(sigma))
    }

    pub fn constant(height: usize, width: usize, sigma: f64) -> Result<Self> {
        Self::new(Image::filled(height, width, sigma))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.data().iter().cloned().fold(0.0, f64::max)
    }
}

/// Smooth random sigma field: uniform noise, Gaussian blur of std
/// `smoothness`, min-max rescaled to `[0, sigma_max]`. One spatial map is
/// shared by all three channels.
pub fn gen_sigma_field(h: usize, w: usize, sigma_max: f64, smoothness: f64, seed: u64) -> Result<SigmaField> {
    if !(sigma_max >= 0.0 && sigma_max.is_finite()) || !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma_max and smoothness must be finite and >= 0 (got {sigma_max}, {smoothness})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    let field = gaussian_blur(&raw, h, w, smoothness);
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let plane: Vec<f64> = field
        .iter()
        .map(|v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * sigma_max).clamp(0.0, sigma_max)
            } else {
                sigma_max
            }
        })
        .collect();
    let n = h * w;
    SigmaField::new(Image::from_fn(h, w, |_, y, x| plane[(y * w + x) % n]))
}

/// Noise model parameters, all on the `[0, 1]` intensity scale. Serialized
/// in the text form accepted by `FromStr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseKind {
    GaussianIid { sigma: f64 },
    /// Smooth random sigma field with peak `sigma` and blur std `smoothness` (pixels).
    GaussianSpatial { sigma: f64, smoothness: f64 },
    /// `U(-a, a)`.
    Uniform { a: f64 },
    /// `a * Poisson(x / a) + sigma * N(0, 1)`.
    PoissonGaussian { a: f64, sigma: f64 },
    /// White Gaussian blurred with std `blur`, renormalized to std `sigma`.
    BrownGaussian { sigma: f64, blur: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_POISSON_SCALE: f64 = 0.01;
pub const DEFAULT_SMOOTHNESS: f64 = 8.0;
pub const DEFAULT_BROWN_BLUR: f64 = 1.5;

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let valid = match *self {
            NoiseKind::GaussianIid { sigma } => ok(sigma),
            NoiseKind::GaussianSpatial { sigma, smoothness } => ok(sigma) && ok(smoothness),
            NoiseKind::Uniform { a } => ok(a),
            NoiseKind::PoissonGaussian { a, sigma } => ok(a) && a > 0.0 && ok(sigma),
            NoiseKind::BrownGaussian { sigma, blur } => ok(sigma) && ok(blur),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid noise parameters: {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::GaussianIid { .. } => "gaussian_iid",
            NoiseKind::GaussianSpatial { .. } => "gaussian_spatial",
            NoiseKind::Uniform { .. } => "uniform",
            NoiseKind::PoissonGaussian { .. } => "poisson_gaussian",
            NoiseKind::BrownGaussian { .. } => "brown_gaussian",
        }
    }
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(NoiseSpec { kind, seed })
    }
}

/// Text form `kind:key=value,...`. Sigmas and the uniform half-range are in
/// 8-bit units (`sigma=10` means 10/255); the Poisson scale `a` and blur
/// lengths are given as-is.
impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params = Vec::new();
        for kv in rest.split(',').filter(|t| !t.trim().is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("noise parameter `{kv}` is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("noise parameter `{kv}` is not a number")))?;
            params.push((k.trim().to_string(), v));
        }
        let mut take = |key: &str, default: Option<f64>| -> Result<f64> {
            match params.iter().position(|(k, _)| k == key) {
                Some(i) => Ok(params.remove(i).1),
                None => default.ok_or_else(|| Error::InvalidParameter(format!("{name} noise needs `{key}`"))),
            }
        };
        let kind = match name.trim() {
            "gaussian_iid" => NoiseKind::GaussianIid {
                sigma: take("sigma", None)? / 255.0,
            },
            "gaussian_spatial" => NoiseKind::GaussianSpatial {
                sigma: take("sigma", None)? / 255.0,
                smoothness: take("smoothness", Some(DEFAULT_SMOOTHNESS))?,
            },
            "uniform" => NoiseKind::Uniform {
                a: take("a", None)? / 255.0,
            },
            "poisson_gaussian" => NoiseKind::PoissonGaussian {
                a: take("a", Some(DEFAULT_POISSON_SCALE))?,
                sigma: take("sigma", Some(0.0))? / 255.0,
            },
            "brown_gaussian" => NoiseKind::BrownGaussian {
                sigma: take("sigma", None)? / 255.0,
                blur: take("blur", Some(DEFAULT_BROWN_BLUR))?,
            },
            other => return Err(Error::InvalidParameter(format!("unknown noise kind `{other}`"))),
        };
        if let Some((k, _)) = params.first() {
            return Err(Error::InvalidParameter(format!("unknown parameter `{k}` for {name} noise")));
        }
        kind.validate()?;
        Ok(kind)
    }
}

impl TryFrom<String> for NoiseKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseKind> for String {
    fn from(k: NoiseKind) -> String {
        k.to_string()
    }
}

/// 8-bit value with the scaling round-off trimmed, so that printing and
/// re-parsing gives back the same float.
fn eight_bit(v: f64) -> f64 {
    let scaled = v * 255.0;
    let short: f64 = format!("{scaled:.9}").parse().unwrap_or(scaled);
    if short / 255.0 == v {
        short
    } else {
        scaled
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseKind::GaussianIid { sigma } => write!(f, "gaussian_iid:sigma={}", eight_bit(sigma)),
            NoiseKind::GaussianSpatial { sigma, smoothness } => {
                write!(f, "gaussian_spatial:sigma={},smoothness={smoothness}", eight_bit(sigma))
            }
            NoiseKind::Uniform { a } => write!(f, "uniform:a={}", eight_bit(a)),
            NoiseKind::PoissonGaussian { a, sigma } => {
                write!(f, "poisson_gaussian:a={a},sigma={}", eight_bit(sigma))
            }
            NoiseKind::BrownGaussian { sigma, blur } => {
                write!(f, "brown_gaussian:sigma={},blur={blur}", eight_bit(sigma))
            }
        }
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Adds noise per `spec`. The output is not clamped.
pub fn add_noise(image: &Image, spec: &NoiseSpec) -> Result<Image> {
    spec.kind.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (image.height(), image.width());
    let n = image.data().len();
    let out = match spec.kind {
        NoiseKind::GaussianIid { sigma } => {
            let z = normals(&mut rng, n);
            Image::new(h, w, image.data().iter().zip(&z).map(|(x, z)| x + sigma * z).collect())?
        }
        NoiseKind::GaussianSpatial { sigma, smoothness } => {
            let field = gen_sigma_field(h, w, sigma, smoothness, rng.gen())?;
            add_spatial_noise_with(image, &field, &mut rng)?
        }
        NoiseKind::Uniform { a } => {
            let data = image.data().iter().map(|x| x + a * (2.0 * rng.gen::<f64>() - 1.0)).collect();
            Image::new(h, w, data)?
        }
        NoiseKind::PoissonGaussian { a, sigma } => {
            let mut data = Vec::with_capacity(n);
            for &x in image.data() {
                let rate = (x / a).max(0.0);
                let k = if rate > 0.0 {
                    Poisson::new(rate)
                        .map_err(|e| Error::InvalidParameter(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(a * k + sigma * z);
            }
            Image::new(h, w, data)?
        }
        NoiseKind::BrownGaussian { sigma, blur } => {
            let scale = blurred_noise_std(h, w, blur);
            let mut data = image.data().to_vec();
            for c in 0..CHANNELS {
                let z = normals(&mut rng, h * w);
                let b = gaussian_blur(&z, h, w, blur);
                for (i, v) in data[c * h * w..(c + 1) * h * w].iter_mut().enumerate() {
                    *v += sigma * b[i] / scale[i];
                }
            }
            Image::new(h, w, data)?
        }
    };
    Ok(out)
}

/// Per-element standard deviation of the noise `add_noise` draws for `spec`
/// (for signal-dependent noise, evaluated at `image`).
pub fn noise_std(image: &Image, spec: &NoiseSpec) -> Result<Image> {
    spec.kind.validate()?;
    let (h, w) = (image.height(), image.width());
    Ok(match spec.kind {
        NoiseKind::GaussianIid { sigma } | NoiseKind::BrownGaussian { sigma, .. } => Image::filled(h, w, sigma),
        NoiseKind::GaussianSpatial { sigma, smoothness } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            gen_sigma_field(h, w, sigma, smoothness, rng.gen())?.into_image()
        }
        NoiseKind::Uniform { a } => Image::filled(h, w, a / 3f64.sqrt()),
        NoiseKind::PoissonGaussian { a, sigma } => image.map(|x| (a * x.max(0.0) + sigma * sigma).sqrt()),
    })
}

fn add_spatial_noise_with(image: &Image, sigma: &SigmaField, rng: &mut ChaCha8Rng) -> Result<Image> {
    image.ensure_same_shape(sigma.image(), "sigma field")?;
    let data = image
        .data()
        .iter()
        .zip(sigma.image().data())
        .map(|(x, s)| {
            let z: f64 = StandardNormal.sample(rng);
            x + s * z
        })
        .collect();
    Image::new(image.height(), image.width(), data)
}

/// `x + sigma(j) * N(0, 1)` for a given sigma field.
pub fn add_spatial_noise(image: &Image, sigma: &SigmaField, seed: u64) -> Result<Image> {
    add_spatial_noise_with(image, sigma, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Samples `sigma2 ~ InvGamma(alpha, beta)`, `z ~ N(y, sigma2 / lambda)` and
/// returns `x ~ N(z, sigma2)` per element.
pub fn degrade_two_stage(prior: &NigField, seed: u64) -> Result<Image> {
    prior.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Image::zeros_like(&prior.mean);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (z, s2) = prior.at(i).sample(&mut rng);
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = z + s2.sqrt() * n;
    }
    Ok(out)
}

/// Half-width of the local PSNR window (5x5).
const PSNR_RADIUS: usize = 2;

/// Averages `n_shots` independent spatially variant Gaussian corruptions and
/// maps local PSNR against `clean` over a 5x5 window (all channels pooled,
/// shrinking at borders). Windows with zero error give `+inf`.
pub fn average_shots(clean: &Image, sigma: &SigmaField, n_shots: usize, seed: u64) -> Result<(Image, Plane)> {
    if n_shots == 0 {
        return Err(Error::InvalidParameter("n_shots must be >= 1".into()));
    }
    clean.ensure_same_shape(sigma.image(), "sigma field")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; clean.data().len()];
    for _ in 0..n_shots {
        let shot = add_spatial_noise_with(clean, sigma, &mut rng)?;
        acc.iter_mut().zip(shot.data()).for_each(|(a, s)| *a += s);
    }
    acc.iter_mut().for_each(|a| *a /= n_shots as f64);
    let avg = Image::new(clean.height(), clean.width(), acc)?;
    Ok((avg.clone(), local_psnr(&avg, clean)))
}

pub fn local_psnr(a: &Image, b: &Image) -> Plane {
    let (h, w) = (a.height(), a.width());
    let mut map = Plane::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(PSNR_RADIUS), (y + PSNR_RADIUS + 1).min(h));
            let (x0, x1) = (x.saturating_sub(PSNR_RADIUS), (x + PSNR_RADIUS + 1).min(w));
            let mut sum = 0.0;
            let mut count = 0usize;
            for c in 0..CHANNELS {
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let d = a.get(c, yy, xx) - b.get(c, yy, xx);
                        sum += d * d;
                        count += 1;
                    }
                }
            }
            map.set(y, x, psnr_from_mse(sum / count as f64, 1.0));
        }
    }
    map
}
