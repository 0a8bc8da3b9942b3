//! Separable Gaussian filtering with shrinking support at the borders.

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`; `[1]` for `sigma == 0`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Per-position normalizers: the sum of taps that land inside `[0, n)`.
fn edge_norms(n: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    (0..n as isize)
        .map(|i| {
            (-r..=r)
                .filter(|t| (0..n as isize).contains(&(i + t)))
                .map(|t| k[(t + r) as usize])
                .sum()
        })
        .collect()
}

fn blur_axis(src: &[f64], h: usize, w: usize, k: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let n = if horizontal { w } else { h };
    let norms = edge_norms(n, k);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = if horizontal { x } else { y } as isize;
            let mut acc = 0.0;
            for t in -r..=r {
                let j = i + t;
                if j < 0 || j >= n as isize {
                    continue;
                }
                let v = if horizontal {
                    src[y * w + j as usize]
                } else {
                    src[j as usize * w + x]
                };
                acc += k[(t + r) as usize] * v;
            }
            out[y * w + x] = acc / norms[i as usize];
        }
    }
    out
}

/// Gaussian blur of one `h x w` plane; taps falling outside are dropped and
/// the remaining weights renormalized.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let tmp = blur_axis(src, h, w, &k, true);
    blur_axis(&tmp, h, w, &k, false)
}

/// Standard deviation, per position, of [`gaussian_blur`] applied to unit
/// white noise.
pub fn blurred_noise_std(h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0; h * w];
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let axis = |n: usize| -> Vec<f64> {
        let norms = edge_norms(n, &k);
        (0..n as isize)
            .map(|i| {
                let s2: f64 = (-r..=r)
                    .filter(|t| (0..n as isize).contains(&(i + t)))
                    .map(|t| k[(t + r) as usize].powi(2))
                    .sum();
                s2 / (norms[i as usize] * norms[i as usize])
            })
            .collect()
    };
    let (vy, vx) = (axis(h), axis(w));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push((vy[y] * vx[x]).sqrt());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized() {
        for s in [0.5, 1.0, 2.7, 8.0] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert_eq!(k.len() % 2, 1);
        }
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn blur_preserves_constants() {
        let src = vec![0.7; 9 * 13];
        let out = gaussian_blur(&src, 9, 13, 2.0);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-14));
    }

    #[test]
    fn interior_noise_std_matches_tap_energy() {
        let k = gaussian_kernel(1.5);
        let e: f64 = k.iter().map(|v| v * v).sum();
        let s = blurred_noise_std(40, 40, 1.5);
        assert!((s[20 * 40 + 20] - e).abs() < 1e-14);
        assert!(s[0] > s[20 * 40 + 20]);
    }
}
