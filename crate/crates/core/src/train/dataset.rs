//! Bundled procedural training images and the cartoon test asset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::io::load_png;
use crate::seed::derive_seed;

type Rgb = [f64; 3];

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Color as a function of position in `[0, 1]^2`.
enum Fill {
    Flat(Rgb),
    Ramp { a: Rgb, b: Rgb, dir: (f64, f64) },
    Sine { a: Rgb, b: Rgb, freq: (f64, f64), phase: f64 },
}

impl Fill {
    fn random(rng: &mut ChaCha8Rng) -> Fill {
        match rng.gen_range(0..3) {
            0 => Fill::Flat(color(rng)),
            1 => {
                let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Fill::Ramp {
                    a: color(rng),
                    b: color(rng),
                    dir: (t.cos(), t.sin()),
                }
            }
            _ => {
                let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let f = rng.gen_range(2.0..14.0);
                Fill::Sine {
                    a: color(rng),
                    b: color(rng),
                    freq: (f * t.cos(), f * t.sin()),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            }
        }
    }

    fn at(&self, u: f64, v: f64) -> Rgb {
        let mix = |a: &Rgb, b: &Rgb, t: f64| [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t);
        match self {
            Fill::Flat(c) => *c,
            Fill::Ramp { a, b, dir } => {
                let t = (0.5 + (u - 0.5) * dir.0 + (v - 0.5) * dir.1).clamp(0.0, 1.0);
                mix(a, b, t)
            }
            Fill::Sine { a, b, freq, phase } => {
                let t = 0.5 + 0.5 * (std::f64::consts::TAU * (u * freq.0 + v * freq.1) + phase).sin();
                mix(a, b, t)
            }
        }
    }
}

enum Shape {
    Polygon(Vec<(f64, f64)>),
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Shape {
        let (cx, cy) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
        let r = rng.gen_range(0.1..0.4);
        if rng.gen_bool(0.3) {
            return Shape::Disc { cx, cy, r };
        }
        let n = rng.gen_range(3..8);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        Shape::Polygon(
            angles
                .into_iter()
                .map(|a| {
                    let rr = r * rng.gen_range(0.5..1.0);
                    (cx + rr * a.cos(), cy + rr * a.sin())
                })
                .collect(),
        )
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Disc { cx, cy, r } => (u - cx).powi(2) + (v - cy).powi(2) <= r * r,
            Shape::Polygon(pts) => {
                // even-odd rule
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
                    if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

/// Renders layers with 2x2 supersampling so edges carry partial coverage.
fn render(h: usize, w: usize, background: &Fill, layers: &[(Shape, Fill)]) -> Image {
    let mut img = Image::zeros(h, w);
    let scale = h.max(w) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for s in 0..4 {
                let u = (x as f64 + 0.25 + 0.5 * (s % 2) as f64) / scale;
                let v = (y as f64 + 0.25 + 0.5 * (s / 2) as f64) / scale;
                let mut c = background.at(u, v);
                for (shape, fill) in layers {
                    if shape.contains(u, v) {
                        c = fill.at(u, v);
                    }
                }
                (0..3).for_each(|k| acc[k] += c[k] / 4.0);
            }
            (0..CHANNELS).for_each(|c| img.set(c, y, x, acc[c]));
        }
    }
    img
}

/// One random scene: a flat, ramp or sinusoidal background under 2 to 6
/// polygons and discs with their own fills.
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Fill::random(&mut rng);
    let n = rng.gen_range(2..=6);
    let layers: Vec<(Shape, Fill)> = (0..n)
        .map(|_| (Shape::random(&mut rng), Fill::random(&mut rng)))
        .collect();
    render(h, w, &background, &layers)
}

pub fn procedural_dataset(count: usize, h: usize, w: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| procedural_image(h, w, derive_seed(seed, &[i as u64])))
        .collect()
}

/// A flat-shaded cartoon face with dark outlines, 64x64.
pub fn cartoon_asset() -> Image {
    const S: usize = 64;
    let ellipse = |u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
    let mut img = Image::zeros(S, S);
    for y in 0..S {
        for x in 0..S {
            let mut acc = [0.0; 3];
            for s in 0..4 {
                let u = (x as f64 + 0.25 + 0.5 * (s % 2) as f64) / S as f64;
                let v = (y as f64 + 0.25 + 0.5 * (s / 2) as f64) / S as f64;
                let outline = [0.12, 0.08, 0.08];
                let mut c = [0.55, 0.78, 0.92];
                let face = ellipse(u, v, 0.5, 0.55, 0.3, 0.36);
                let hair = ellipse(u, v, 0.5, 0.32, 0.34, 0.2);
                if hair <= 1.0 && v < 0.42 {
                    c = [0.45, 0.25, 0.12];
                }
                if face <= 1.0 && !(hair <= 1.0 && v < 0.3) {
                    c = if face > 0.88 { outline } else { [0.96, 0.80, 0.66] };
                }
                for ex in [0.38, 0.62] {
                    let e = ellipse(u, v, ex, 0.52, 0.06, 0.045);
                    if e <= 1.0 {
                        c = if e > 0.6 { outline } else { [1.0, 1.0, 1.0] };
                    }
                    if ellipse(u, v, ex + 0.01, 0.525, 0.025, 0.025) <= 1.0 {
                        c = [0.2, 0.35, 0.6];
                    }
                }
                let m = ellipse(u, v, 0.5, 0.7, 0.12, 0.06);
                if m <= 1.0 && v > 0.7 {
                    c = if m > 0.55 { outline } else { [0.8, 0.3, 0.3] };
                }
                if (0.82..0.86).contains(&v) && (0.25..0.75).contains(&u) && face > 1.0 {
                    c = [0.3, 0.5, 0.3];
                }
                (0..3).for_each(|k| acc[k] += c[k] / 4.0);
            }
            (0..CHANNELS).for_each(|c| img.set(c, y, x, acc[c]));
        }
    }
    img
}

/// Loads every `.png` in a directory, sorted by file name.
pub fn load_png_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidParameter(format!("no PNG images in {}", dir.display())));
    }
    paths.iter().map(load_png).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = procedural_dataset(5, 32, 32, 7);
        let b = procedural_dataset(5, 32, 32, 7);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for img in &a {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn images_have_structure() {
        for img in procedural_dataset(10, 48, 48, 1) {
            let d = img.channel(1);
            let m = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64;
            assert!(var > 1e-5);
        }
    }

    #[test]
    fn cartoon_is_fixed() {
        let c = cartoon_asset();
        assert_eq!((c.height(), c.width()), (64, 64));
        assert_eq!(c, cartoon_asset());
        // background top-left, skin at the cheek
        assert!((c.get(2, 0, 0) - 0.92).abs() < 1e-12);
        assert!((c.get(0, 40, 24) - 0.96).abs() < 1e-12);
    }

    #[test]
    fn png_dir_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_png_dir(dir.path()).is_err());
        let img = procedural_image(8, 8, 1);
        crate::io::save_png(&img, dir.path().join("b.png"), crate::io::BitDepth::Sixteen).unwrap();
        crate::io::save_png(&img, dir.path().join("a.png"), crate::io::BitDepth::Eight).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        assert_eq!(load_png_dir(dir.path()).unwrap().len(), 2);
    }
}
