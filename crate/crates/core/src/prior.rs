//! Target NIG prior built from a (noisy, clean) training pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::nig::NigField;

pub const BETA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub lambda: f64,
    /// Odd side length `w` of the square smoothing window.
    pub window: usize,
    /// Spatial std in pixels; `w / 4` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_spatial: Option<f64>,
    /// Range std in squared-intensity units; the median of the squared
    /// residual map when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_range: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            lambda: 2e3,
            window: 19,
            sigma_spatial: None,
            sigma_range: None,
        }
    }
}

impl PriorConfig {
    pub fn with_lambda(lambda: f64, window: usize) -> Self {
        PriorConfig {
            lambda,
            window,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "prior window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("prior lambda must be > 0, got {}", self.lambda)));
        }
        for s in [self.sigma_spatial, self.sigma_range].into_iter().flatten() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("bilateral sigmas must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    /// `alpha = w^2 / 2`.
    pub fn alpha(&self) -> f64 {
        (self.window * self.window) as f64 / 2.0
    }

    pub fn spatial_sigma(&self) -> f64 {
        self.sigma_spatial.unwrap_or(self.window as f64 / 4.0)
    }
}

/// Bilateral filter of one `h x w` plane over a `window x window` support
/// that shrinks at the borders.
pub fn bilateral_filter(map: &[f64], h: usize, w: usize, window: usize, sigma_s: f64, sigma_r: f64) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("bilateral window must be odd, got {window}")));
    }
    if map.len() != h * w {
        return Err(Error::Shape(format!("map has {} values, expected {h}x{w}", map.len())));
    }
    let r = (window / 2) as isize;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_s * sigma_s)).exp())
        .collect();
    let inv_r = -1.0 / (2.0 * sigma_r * sigma_r);
    let side = window as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = map[(y * w as isize + x) as usize];
            let (mut num, mut den) = (0.0, 0.0);
            for dy in (-r).max(-y)..=r.min(h as isize - 1 - y) {
                let row = ((y + dy) * w as isize) as usize;
                let srow = ((dy + r) * side + r) as usize;
                for dx in (-r).max(-x)..=r.min(w as isize - 1 - x) {
                    let v = map[row + (x + dx) as usize];
                    let d = v - center;
                    let wt = spatial[(srow as isize + dx) as usize] * (d * d * inv_r).exp();
                    num += wt * v;
                    den += wt;
                }
            }
            out[(y * w as isize + x) as usize] = (num / den).max(0.0);
        }
    }
    Ok(out)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Smoothed squared residual `B((x_tilde - y)^2)` per channel.
pub fn smoothed_residual(x_tilde: &Image, y: &Image, cfg: &PriorConfig) -> Result<Image> {
    cfg.validate()?;
    x_tilde.ensure_same_shape(y, "prior inputs")?;
    let (h, w) = (y.height(), y.width());
    let sq = x_tilde.zip_map(y, |a, b| (a - b) * (a - b));
    let sigma_r = match cfg.sigma_range {
        Some(s) => s,
        None => {
            let m = median(sq.data());
            if m > 0.0 {
                m
            } else {
                sq.data().iter().sum::<f64>() / sq.data().len() as f64
            }
        }
    };
    if sigma_r <= 0.0 {
        // zero residual everywhere
        return Ok(Image::zeros(h, w));
    }
    let mut out = Vec::with_capacity(sq.data().len());
    for c in 0..CHANNELS {
        out.extend(bilateral_filter(sq.channel(c), h, w, cfg.window, cfg.spatial_sigma(), sigma_r)?);
    }
    Image::new(h, w, out)
}

/// Prior with mean `y`, constant `lambda` and `alpha = w^2 / 2`, and
/// `beta = alpha * B((x_tilde - y)^2)` floored at [`BETA_FLOOR`].
pub fn make_prior(x_tilde: &Image, y: &Image, cfg: &PriorConfig) -> Result<NigField> {
    let smooth = smoothed_residual(x_tilde, y, cfg)?;
    let alpha = cfg.alpha();
    let beta = smooth.map(|v| (alpha * v).max(BETA_FLOOR));
    let (h, w) = (y.height(), y.width());
    NigField::new(y.clone(), Image::filled(h, w, cfg.lambda), Image::filled(h, w, alpha), beta)
}
