//! Image containers and pixel conventions.
//!
//! Intensities are `f64` on the `[0, 1]` scale. Color images are stored
//! planar (`channel, row, column`), which is also the layout used by the
//! network. Quantization happens only at file boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

pub(crate) fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::Dimensions {
            height,
            width,
            reason: "both dimensions must be at least 2",
        });
    }
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::Dimensions {
            height,
            width,
            reason: "both dimensions must be even for Bayer packing",
        });
    }
    Ok(())
}

/// Single-channel field of `f64` values (raw readings, per-pixel maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Three-channel color image, `height x width x 3`, stored planar.
///
/// Constructors enforce even dimensions of at least 2. Values are not
/// clamped on construction: loss inputs and noisy observations may leave
/// `[0, 1]`; use [`Image::clamped`] where a displayable image is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Constant image. Panics on invalid dimensions.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        check_dims(height, width).expect("invalid image dimensions");
        Image {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn zeros_like(other: &Image) -> Self {
        Self::filled(other.height, other.width, 0.0)
    }

    /// Builds an image from `f(channel, y, x)`. Panics on invalid dimensions.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        check_dims(height, width).expect("invalid image dimensions");
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(other), "zip_map on mismatched shapes");
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        check_dims(h, w)?;
        Ok(Image::from_fn(h, w, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }
}

/// The 2x2 arrangement of a Bayer color filter array, named by its
/// first row then second row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Rggb,
    Grbg,
    Gbrg,
    Bggr,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Rggb, Phase::Grbg, Phase::Gbrg, Phase::Bggr];

    /// Channel index (0 = R, 1 = G, 2 = B) sampled at `(y, x)`.
    #[inline]
    pub fn channel_at(self, y: usize, x: usize) -> usize {
        let tile = match self {
            Phase::Rggb => [0, 1, 1, 2],
            Phase::Grbg => [1, 0, 2, 1],
            Phase::Gbrg => [1, 2, 0, 1],
            Phase::Bggr => [2, 1, 1, 0],
        };
        tile[(y % 2) * 2 + (x % 2)]
    }

    /// Row and column offset of the red site inside the 2x2 tile.
    pub fn red_offset(self) -> (usize, usize) {
        match self {
            Phase::Rggb => (0, 0),
            Phase::Grbg => (0, 1),
            Phase::Gbrg => (1, 0),
            Phase::Bggr => (1, 1),
        }
    }

    pub fn from_red_offset(dy: usize, dx: usize) -> Phase {
        match (dy % 2, dx % 2) {
            (0, 0) => Phase::Rggb,
            (0, 1) => Phase::Grbg,
            (1, 0) => Phase::Gbrg,
            _ => Phase::Bggr,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(Phase::Rggb),
            "GRBG" => Ok(Phase::Grbg),
            "GBRG" => Ok(Phase::Gbrg),
            "BGGR" => Ok(Phase::Bggr),
            other => Err(Error::InvalidParameter(format!("unknown CFA phase {other:?}"))),
        }
    }
}

/// Single-channel Bayer readings together with their CFA phase.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMosaic {
    plane: Plane,
    phase: Phase,
}

impl RawMosaic {
    pub fn new(height: usize, width: usize, data: Vec<f64>, phase: Phase) -> Result<Self> {
        check_dims(height, width)?;
        Ok(RawMosaic {
            plane: Plane::new(height, width, data)?,
            phase,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, phase: Phase) -> Self {
        check_dims(height, width).expect("invalid raw dimensions");
        RawMosaic {
            plane: Plane::filled(height, width, value),
            phase,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.plane.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.plane.width
    }

    #[inline]
    pub fn phase(&self) -> Phase {
        self.phase
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.plane.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.plane.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.plane.get(y, x)
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.plane.set(y, x, v)
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    /// Crops to the canonical RGGB phase, dropping one leading row and/or
    /// column plus the matching trailing ones so dimensions stay even.
    pub fn to_rggb(&self) -> Result<RawMosaic> {
        let (dy, dx) = self.phase.red_offset();
        if (dy, dx) == (0, 0) {
            return Ok(self.clone());
        }
        let h = self.height() - 2 * dy;
        let w = self.width() - 2 * dx;
        check_dims(h, w)?;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y + dy, x + dx));
            }
        }
        RawMosaic::new(h, w, data, Phase::Rggb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_dimensions() {
        assert!(Image::new(3, 4, vec![0.0; 36]).is_err());
        assert!(Image::new(4, 4, vec![0.0; 47]).is_err());
        assert!(RawMosaic::new(2, 1, vec![0.0; 2], Phase::Rggb).is_err());
        assert!(Image::new(2, 2, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn phase_tiles() {
        assert_eq!(Phase::Rggb.channel_at(0, 0), 0);
        assert_eq!(Phase::Rggb.channel_at(0, 1), 1);
        assert_eq!(Phase::Rggb.channel_at(1, 0), 1);
        assert_eq!(Phase::Rggb.channel_at(1, 1), 2);
        for p in Phase::ALL {
            let (dy, dx) = p.red_offset();
            assert_eq!(p.channel_at(dy, dx), 0);
            assert_eq!(p.channel_at(dy + 1, dx + 1), 2);
            assert_eq!(Phase::from_red_offset(dy, dx), p);
        }
    }

    #[test]
    fn to_rggb_crops_to_red_origin() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let raw = RawMosaic::new(4, 4, data, Phase::Bggr).unwrap();
        let r = raw.to_rggb().unwrap();
        assert_eq!((r.height(), r.width()), (2, 2));
        assert_eq!(r.data(), &[5.0, 6.0, 9.0, 10.0]);
    }
}
