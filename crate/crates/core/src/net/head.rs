//! Constraint map from the 12 raw head outputs to a valid NIG field.

use crate::bayer::bilinear_demosaic;
use crate::error::{Error, Result};
use crate::image::{Image, RawMosaic, CHANNELS};
use crate::nig::NigField;

pub const LAMBDA_MIN: f64 = 1e-3;
/// `alpha` is kept at least `1 + ALPHA_EPS`.
pub const ALPHA_EPS: f64 = 1e-3;
pub const BETA_MIN: f64 = 1e-8;

/// `log(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `mean = base + u[0..3]`, `lambda = softplus(u[3..6]) + LAMBDA_MIN`,
/// `alpha = 1 + ALPHA_EPS + softplus(u[6..9])`,
/// `beta = softplus(u[9..12]) + BETA_MIN`. `raw12` holds 12 planes of the
/// base image's size.
pub fn head_map_with_base(raw12: &[f64], base: &Image) -> Result<NigField> {
    let n = CHANNELS * base.pixels();
    if raw12.len() != 4 * n {
        return Err(Error::Shape(format!(
            "head expects {} values, got {}",
            4 * n,
            raw12.len()
        )));
    }
    let (h, w) = (base.height(), base.width());
    let part = |k: usize| &raw12[k * n..(k + 1) * n];
    let mean: Vec<f64> = part(0).iter().zip(base.data()).map(|(u, b)| b + u).collect();
    let lambda = part(1).iter().map(|&u| softplus(u) + LAMBDA_MIN).collect();
    let alpha = part(2).iter().map(|&u| 1.0 + ALPHA_EPS + softplus(u)).collect();
    let beta = part(3).iter().map(|&u| softplus(u) + BETA_MIN).collect();
    NigField::new(
        Image::new(h, w, mean)?,
        Image::new(h, w, lambda)?,
        Image::new(h, w, alpha)?,
        Image::new(h, w, beta)?,
    )
}

/// [`head_map_with_base`] over the bilinear demosaic of `raw`.
pub fn head_map(raw12: &[f64], raw: &RawMosaic) -> Result<NigField> {
    head_map_with_base(raw12, &bilinear_demosaic(raw))
}
