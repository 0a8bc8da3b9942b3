//! Bayer mosaicking, bilinear demosaicking, 2x2 space-to-depth packing and
//! phase-preserving dihedral transforms for the self-ensemble.

use crate::error::{Error, Result};
use crate::image::{Image, Phase, RawMosaic, CHANNELS};

/// Samples one channel per pixel according to the CFA phase.
pub fn mosaic(image: &Image, phase: Phase) -> RawMosaic {
    let (h, w) = (image.height(), image.width());
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(image.get(phase.channel_at(y, x), y, x));
        }
    }
    RawMosaic::new(h, w, data, phase).expect("image dimensions are valid")
}

const AXIAL: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const DIAGONAL: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Bilinear demosaicking with shrinking support at the borders.
///
/// Known samples pass through unchanged. A missing channel is the mean of the
/// in-bounds 4-connected neighbors carrying it (green everywhere, red/blue
/// on the same row or column); when no 4-neighbor carries it (red at a blue
/// site and vice versa) the diagonal neighbors are used.
pub fn bilinear_demosaic(raw: &RawMosaic) -> Image {
    let (h, w) = (raw.height() as isize, raw.width() as isize);
    let phase = raw.phase();
    let mut out = Image::zeros(raw.height(), raw.width());
    let neighbor_mean = |y: isize, x: isize, c: usize, offsets: &[(isize, isize)]| -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(dy, dx) in offsets {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h || nx >= w {
                continue;
            }
            if phase.channel_at(ny as usize, nx as usize) == c {
                sum += raw.get(ny as usize, nx as usize);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    };
    for y in 0..h {
        for x in 0..w {
            let (uy, ux) = (y as usize, x as usize);
            let site = phase.channel_at(uy, ux);
            for c in 0..CHANNELS {
                let v = if c == site {
                    raw.get(uy, ux)
                } else {
                    neighbor_mean(y, x, c, &AXIAL)
                        .or_else(|| neighbor_mean(y, x, c, &DIAGONAL))
                        .expect("every site of a 2x2-or-larger Bayer raster has a neighbor of each color")
                };
                out.set(c, uy, ux, v);
            }
        }
    }
    out
}

/// Quarter-resolution four-plane field. Plane `k` holds tile offset
/// `(k / 2, k % 2)`, i.e. `(0,0), (0,1), (1,0), (1,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed4 {
    pub half_height: usize,
    pub half_width: usize,
    /// Planar: `plane * half_height * half_width + y * half_width + x`.
    pub data: Vec<f64>,
}

impl Packed4 {
    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.half_height * self.half_width;
        &self.data[k * n..(k + 1) * n]
    }
}

pub fn pack4(raw: &RawMosaic) -> Packed4 {
    let (hh, hw) = (raw.height() / 2, raw.width() / 2);
    let n = hh * hw;
    let mut data = vec![0.0; 4 * n];
    for y in 0..hh {
        for x in 0..hw {
            for k in 0..4 {
                data[k * n + y * hw + x] = raw.get(2 * y + k / 2, 2 * x + k % 2);
            }
        }
    }
    Packed4 {
        half_height: hh,
        half_width: hw,
        data,
    }
}

pub fn unpack4(packed: &Packed4, phase: Phase) -> RawMosaic {
    let (hh, hw) = (packed.half_height, packed.half_width);
    let n = hh * hw;
    let mut raw = RawMosaic::filled(2 * hh, 2 * hw, 0.0, phase);
    for y in 0..hh {
        for x in 0..hw {
            for k in 0..4 {
                raw.set(2 * y + k / 2, 2 * x + k % 2, packed.data[k * n + y * hw + x]);
            }
        }
    }
    raw
}

/// One of the eight symmetries of the square: an optional horizontal flip
/// followed by `index % 4` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DihedralTransform(u8);

impl DihedralTransform {
    pub const IDENTITY: DihedralTransform = DihedralTransform(0);

    pub fn new(index: usize) -> Result<Self> {
        if index >= 8 {
            return Err(Error::InvalidParameter(format!("dihedral index {index} not in [0, 8)")));
        }
        Ok(DihedralTransform(index as u8))
    }

    pub fn all() -> impl Iterator<Item = DihedralTransform> {
        (0..8).map(DihedralTransform)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn quarter_turns(self) -> usize {
        (self.0 % 4) as usize
    }

    pub fn flipped(self) -> bool {
        self.0 >= 4
    }

    /// Dimensions after the transform.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns() % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Where source pixel `(y, x)` of an `h x w` raster lands.
    #[inline]
    pub fn map(self, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, if self.flipped() { w - 1 - x } else { x });
        let (mut ch, mut cw) = (h, w);
        for _ in 0..self.quarter_turns() {
            // counter-clockwise: (y, x) on ch x cw -> (cw - 1 - x, y) on cw x ch
            let ny = cw - 1 - x;
            x = y;
            y = ny;
            std::mem::swap(&mut ch, &mut cw);
        }
        (y, x)
    }

    /// The transform that undoes this one.
    pub fn inverse(self) -> DihedralTransform {
        if self.flipped() {
            // every flip-then-rotate element is a reflection, hence an involution
            self
        } else {
            DihedralTransform((4 - self.0) % 4)
        }
    }
}

/// Applies `t` to a single plane.
pub fn transform_plane(src: &[f64], h: usize, w: usize, t: DihedralTransform) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = t.output_dims(h, w);
    let mut dst = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = t.map(h, w, y, x);
            dst[ty * ow + tx] = src[y * w + x];
        }
    }
    (dst, oh, ow)
}

/// Undoes `t` on a plane that was produced from an `h x w` source.
pub fn untransform_plane(src: &[f64], h: usize, w: usize, t: DihedralTransform) -> Vec<f64> {
    let (_, ow) = t.output_dims(h, w);
    let mut dst = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = t.map(h, w, y, x);
            dst[y * w + x] = src[ty * ow + tx];
        }
    }
    dst
}

/// Applies a dihedral transform to every channel of a color image.
pub fn transform_image(image: &Image, t: DihedralTransform) -> Image {
    let (h, w) = (image.height(), image.width());
    let (oh, ow) = t.output_dims(h, w);
    let mut data = Vec::with_capacity(image.data().len());
    for c in 0..CHANNELS {
        data.extend(transform_plane(image.channel(c), h, w, t).0);
    }
    Image::new(oh, ow, data).expect("dihedral transforms keep even dimensions")
}

/// Shift `(dy, dx)` that brings the red site of a transformed raster back to
/// the origin.
pub fn unification_shift(phase: Phase, h: usize, w: usize, t: DihedralTransform) -> (usize, usize) {
    let (ry, rx) = phase.red_offset();
    let (ty, tx) = t.map(h, w, ry, rx);
    (ty % 2, tx % 2)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// Dihedral transform of a Bayer raster that keeps the RGGB phase: when the
/// geometric transform moves the red site, the raster is reflect-padded by
/// one pixel on the top/left and cropped by one on the bottom/right.
pub fn bayer_transform(raw: &RawMosaic, t: DihedralTransform) -> RawMosaic {
    let (h, w) = (raw.height(), raw.width());
    let (moved, oh, ow) = transform_plane(raw.data(), h, w, t);
    let (dy, dx) = unification_shift(raw.phase(), h, w, t);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let sy = reflect(y as isize - dy as isize, oh);
            let sx = reflect(x as isize - dx as isize, ow);
            data.push(moved[sy * ow + sx]);
        }
    }
    RawMosaic::new(oh, ow, data, Phase::Rggb).expect("dimensions stay even")
}

/// Undoes the pad/crop shift on a plane aligned with a unified raster.
/// Rows/columns lost to the crop are filled by edge replication.
fn unshift_plane(src: &[f64], oh: usize, ow: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut dst = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let sy = (y + dy).min(oh - 1);
            let sx = (x + dx).min(ow - 1);
            dst[y * ow + x] = src[sy * ow + sx];
        }
    }
    dst
}

/// Inverse of [`bayer_transform`] for a raster produced from an `h x w`
/// source of the given phase. Exact away from the padded/cropped edges.
pub fn inverse_bayer_transform(raw: &RawMosaic, t: DihedralTransform, phase: Phase, h: usize, w: usize) -> RawMosaic {
    let (oh, ow) = t.output_dims(h, w);
    assert_eq!((raw.height(), raw.width()), (oh, ow), "raster does not match transform dimensions");
    let (dy, dx) = unification_shift(phase, h, w, t);
    let moved = unshift_plane(raw.data(), oh, ow, dy, dx);
    RawMosaic::new(h, w, untransform_plane(&moved, h, w, t), phase).expect("dimensions stay even")
}

/// Maps a color output computed on `bayer_transform(raw, t)` back onto the
/// geometry of the `h x w` source raster.
pub fn inverse_transform_image(image: &Image, t: DihedralTransform, phase: Phase, h: usize, w: usize) -> Image {
    let (oh, ow) = t.output_dims(h, w);
    assert_eq!((image.height(), image.width()), (oh, ow), "image does not match transform dimensions");
    let (dy, dx) = unification_shift(phase, h, w, t);
    let mut data = Vec::with_capacity(image.data().len());
    for c in 0..CHANNELS {
        let moved = unshift_plane(image.channel(c), oh, ow, dy, dx);
        data.extend(untransform_plane(&moved, h, w, t));
    }
    Image::new(h, w, data).expect("dimensions stay even")
}

/// Averages `infer` over the eight Bayer-preserving dihedral transforms of
/// `raw`. Branches are accumulated in transform-index order.
pub fn self_ensemble<F>(mut infer: F, raw: &RawMosaic) -> Result<Image>
where
    F: FnMut(&RawMosaic) -> Result<Image>,
{
    let (h, w) = (raw.height(), raw.width());
    let mut acc = Image::zeros(h, w);
    for t in DihedralTransform::all() {
        let branch = bayer_transform(raw, t);
        let out = infer(&branch)?;
        let back = inverse_transform_image(&out, t, raw.phase(), h, w);
        for (a, b) in acc.data_mut().iter_mut().zip(back.data()) {
            *a += b;
        }
    }
    Ok(acc.map(|v| v / 8.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raw(h: usize, w: usize, seed: u64) -> RawMosaic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        RawMosaic::new(h, w, data, Phase::Rggb).unwrap()
    }

    #[test]
    fn mosaic_selects_channels() {
        let gray = Image::filled(4, 4, 0.4);
        assert!(mosaic(&gray, Phase::Rggb).data().iter().all(|&v| v == 0.4));
        let red = Image::from_fn(4, 6, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let raw = mosaic(&red, Phase::Rggb);
        for y in 0..4 {
            for x in 0..6 {
                let expect = if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(raw.get(y, x), expect);
            }
        }
    }

    #[test]
    fn demosaic_constant_and_fixed_point() {
        let raw = RawMosaic::filled(6, 8, 0.4, Phase::Rggb);
        assert!(bilinear_demosaic(&raw).data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        for seed in 0..20 {
            for phase in Phase::ALL {
                let mut raw = random_raw(8, 8, seed);
                raw = RawMosaic::new(8, 8, raw.data().to_vec(), phase).unwrap();
                let back = mosaic(&bilinear_demosaic(&raw), phase);
                assert_eq!(back, raw);
            }
        }
    }

    #[test]
    fn demosaic_reproduces_horizontal_ramp_in_interior() {
        let img = Image::from_fn(8, 10, |_, _, x| 0.1 + 0.05 * x as f64);
        let out = bilinear_demosaic(&mosaic(&img, Phase::Rggb));
        for c in 0..3 {
            for y in 1..7 {
                for x in 1..9 {
                    assert!((out.get(c, y, x) - img.get(c, y, x)).abs() < 1e-12, "c{c} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn demosaic_blue_impulse_stencil() {
        // Hand trace on 4x4 RGGB with a single blue sample at (1,1).
        let mut raw = RawMosaic::filled(4, 4, 0.0, Phase::Rggb);
        raw.set(1, 1, 1.0);
        let out = bilinear_demosaic(&raw);
        let blue = [
            [1.0, 1.0, 0.5, 0.0],
            [1.0, 1.0, 0.5, 0.0],
            [0.5, 0.5, 0.25, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ];
        for y in 0..4 {
            for x in 0..4 {
                assert!((out.get(2, y, x) - blue[y][x]).abs() < 1e-15, "B ({y},{x})");
                assert_eq!(out.get(0, y, x), 0.0);
                assert_eq!(out.get(1, y, x), 0.0);
            }
        }
    }

    #[test]
    fn demosaic_green_stencil_at_red_site() {
        // Green at an interior red site averages its four green neighbors.
        let mut raw = RawMosaic::filled(6, 6, 0.0, Phase::Rggb);
        raw.set(1, 2, 0.4);
        raw.set(3, 2, 0.8);
        raw.set(2, 1, 0.2);
        raw.set(2, 3, 0.6);
        let out = bilinear_demosaic(&raw);
        assert!((out.get(1, 2, 2) - 0.5).abs() < 1e-15);
        // corner red site: two in-bounds greens
        raw.set(0, 1, 0.3);
        raw.set(1, 0, 0.9);
        let out = bilinear_demosaic(&raw);
        assert!((out.get(1, 0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn pack_small_tile() {
        let raw = RawMosaic::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Phase::Rggb).unwrap();
        let p = pack4(&raw);
        assert_eq!(p.data, vec![1.0, 2.0, 3.0, 4.0]);
        let c = pack4(&RawMosaic::filled(4, 6, 0.7, Phase::Rggb));
        assert!(c.data.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn dihedral_maps_are_bijections_with_inverses() {
        let (h, w) = (4, 6);
        for t in DihedralTransform::all() {
            let src: Vec<f64> = (0..h * w).map(|v| v as f64).collect();
            let (dst, oh, ow) = transform_plane(&src, h, w, t);
            let mut sorted = dst.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(sorted, src);
            assert_eq!(untransform_plane(&dst, h, w, t), src);
            // applying the inverse element as a forward transform also undoes t
            let (back, bh, bw) = transform_plane(&dst, oh, ow, t.inverse());
            assert_eq!((bh, bw), (h, w));
            assert_eq!(back, src, "transform {}", t.index());
        }
    }

    #[test]
    fn flip_phase_trace() {
        // Horizontal flip of RGGB with even width puts G at the origin (GRBG).
        let flip = DihedralTransform::new(4).unwrap();
        assert_eq!(unification_shift(Phase::Rggb, 4, 4, flip), (0, 1));
        let rot180 = DihedralTransform::new(2).unwrap();
        assert_eq!(unification_shift(Phase::Rggb, 4, 4, rot180), (1, 1));
        assert_eq!(unification_shift(Phase::Rggb, 4, 4, DihedralTransform::IDENTITY), (0, 0));
    }

    #[test]
    fn bayer_transforms_preserve_phase() {
        let img = Image::from_fn(8, 6, |c, y, x| [0.9, 0.5, 0.1][c] + 0.001 * (y * 6 + x) as f64);
        let raw = mosaic(&img, Phase::Rggb);
        for t in DihedralTransform::all() {
            let out = bayer_transform(&raw, t);
            assert_eq!(out.phase(), Phase::Rggb);
            for y in 0..out.height() {
                for x in 0..out.width() {
                    let v = out.get(y, x);
                    let channel = if v > 0.85 { 0 } else if v > 0.45 { 1 } else { 2 };
                    assert_eq!(channel, Phase::Rggb.channel_at(y, x), "t{} ({y},{x})", t.index());
                }
            }
        }
    }

    #[test]
    fn identity_transform_is_noop() {
        let raw = random_raw(6, 4, 3);
        assert_eq!(bayer_transform(&raw, DihedralTransform::IDENTITY), raw);
    }

    #[test]
    fn inverse_bayer_transform_recovers_interior() {
        let raw = random_raw(8, 10, 11);
        for t in DihedralTransform::all() {
            let fwd = bayer_transform(&raw, t);
            let back = inverse_bayer_transform(&fwd, t, Phase::Rggb, 8, 10);
            for y in 1..7 {
                for x in 1..9 {
                    assert_eq!(back.get(y, x), raw.get(y, x), "t{} ({y},{x})", t.index());
                }
            }
        }
    }

    #[test]
    fn self_ensemble_constant_and_invariant() {
        let raw = RawMosaic::filled(8, 8, 0.3, Phase::Rggb);
        let out = self_ensemble(|r| Ok(bilinear_demosaic(r)), &raw).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let raw = random_raw(8, 8, 5);
        let pointwise = |r: &RawMosaic| -> Result<Image> { Ok(Image::filled(r.height(), r.width(), 0.25)) };
        let ens = self_ensemble(pointwise, &raw).unwrap();
        assert!(ens.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(seed in 0u64..10_000, hh in 1usize..6, hw in 1usize..6) {
            let raw = random_raw(2 * hh, 2 * hw, seed);
            prop_assert_eq!(unpack4(&pack4(&raw), Phase::Rggb), raw);
        }
    }
}
