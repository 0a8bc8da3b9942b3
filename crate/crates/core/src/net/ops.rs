//! Dense kernels on channel-major activations laid out `[C][N][H][W]`, so the
//! batch folds into the column dimension of every convolution GEMM.

/// `c = a * b + beta * c` with explicit strides (row, column) for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one activation tensor: `n` images of `h x w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Unfolds 3x3 zero-padded neighborhoods: row `ci * 9 + ky * 3 + kx`.
fn im2col3(input: &[f64], cin: usize, g: Geom, col: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let cols = g.cols();
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * cols..][..cols];
                for img in 0..g.n {
                    let src = &input[ci * cols + img * hw..][..hw];
                    let dst = &mut row[img * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let drow = &mut dst[y * w..][..w];
                        if sy < 0 || sy >= h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        match kx {
                            0 => {
                                drow[0] = 0.0;
                                drow[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            1 => drow.copy_from_slice(srow),
                            _ => {
                                drow[..w - 1].copy_from_slice(&srow[1..]);
                                drow[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates columns back into `out`.
fn col2im3(col: &[f64], cin: usize, g: Geom, out: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let cols = g.cols();
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * cols..][..cols];
                for img in 0..g.n {
                    let src = &row[img * hw..][..hw];
                    let dst = &mut out[ci * cols + img * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let crow = &src[y * w..][..w];
                        let orow = &mut dst[sy as usize * w..][..w];
                        match kx {
                            0 => orow[..w - 1].iter_mut().zip(&crow[1..]).for_each(|(o, c)| *o += c),
                            1 => orow.iter_mut().zip(crow).for_each(|(o, c)| *o += c),
                            _ => orow[1..].iter_mut().zip(&crow[..w - 1]).for_each(|(o, c)| *o += c),
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with zero padding; `k` is 1 or 3. Weights are
/// `[cout][cin * k * k]`.
pub fn conv_forward(input: &[f64], cin: usize, g: Geom, weight: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
    let cout = bias.len();
    let cols = g.cols();
    let kk = cin * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut out = vec![0.0; cout * cols];
    for (co, b) in bias.iter().enumerate() {
        out[co * cols..(co + 1) * cols].fill(*b);
    }
    if k == 1 {
        gemm(cout, kk, cols, weight, kk, 1, input, cols, 1, 1.0, &mut out);
    } else {
        let mut col = vec![0.0; kk * cols];
        im2col3(input, cin, g, &mut col);
        gemm(cout, kk, cols, weight, kk, 1, &col, cols, 1, 1.0, &mut out);
    }
    out
}

/// Backward of [`conv_forward`] given the gradient at its (pre-activation)
/// output. Accumulates into `dweight`, `dbias` and, when given, `dinput`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    cin: usize,
    g: Geom,
    weight: &[f64],
    k: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let cout = dbias.len();
    let cols = g.cols();
    let kk = cin * k * k;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dout[co * cols..(co + 1) * cols].iter().sum::<f64>();
    }
    let col_buf;
    let col: &[f64] = if k == 1 {
        input
    } else {
        let mut c = vec![0.0; kk * cols];
        im2col3(input, cin, g, &mut c);
        col_buf = c;
        &col_buf
    };
    // dW += dout * col^T
    gemm(cout, cols, kk, dout, cols, 1, col, 1, cols, 1.0, dweight);
    if let Some(dinput) = dinput {
        if k == 1 {
            gemm(kk, cout, cols, weight, 1, kk, dout, cols, 1, 1.0, dinput);
        } else {
            let mut dcol = vec![0.0; kk * cols];
            gemm(kk, cout, cols, weight, 1, kk, dout, cols, 1, 0.0, &mut dcol);
            col2im3(&dcol, cin, g, dinput);
        }
    }
}

pub const LRELU_SLOPE: f64 = 0.1;

pub fn lrelu_inplace(v: &mut [f64]) {
    v.iter_mut().filter(|x| **x < 0.0).for_each(|x| *x *= LRELU_SLOPE);
}

/// Turns the gradient at a leaky-ReLU output into the gradient at its input.
/// The output sign equals the input sign, so the output suffices.
pub fn lrelu_backward_inplace(out: &[f64], grad: &mut [f64]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o < 0.0 {
            *g *= LRELU_SLOPE;
        }
    }
}

/// `[4C][N][h][w]` to `[C][N][2h][2w]`; input channel `c * 4 + dy * 2 + dx`
/// lands at `(2y + dy, 2x + dx)` of output channel `c`.
pub fn depth_to_space(input: &[f64], c: usize, g: Geom) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * g.n * oh * ow];
    for ch in 0..c {
        for s in 0..4 {
            let (dy, dx) = (s / 2, s % 2);
            for img in 0..g.n {
                let src = &input[(ch * 4 + s) * g.cols() + img * h * w..][..h * w];
                let dst = &mut out[ch * g.n * oh * ow + img * oh * ow..][..oh * ow];
                for y in 0..h {
                    for x in 0..w {
                        dst[(2 * y + dy) * ow + 2 * x + dx] = src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint (and inverse) of [`depth_to_space`]; `g` is the low-resolution geometry.
pub fn space_to_depth(input: &[f64], c: usize, g: Geom) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; 4 * c * g.cols()];
    for ch in 0..c {
        for s in 0..4 {
            let (dy, dx) = (s / 2, s % 2);
            for img in 0..g.n {
                let src = &input[ch * g.n * oh * ow + img * oh * ow..][..oh * ow];
                let dst = &mut out[(ch * 4 + s) * g.cols() + img * h * w..][..h * w];
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[(2 * y + dy) * ow + 2 * x + dx];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Naive direct convolution.
    fn naive(input: &[f64], cin: usize, g: Geom, weight: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
        let cout = bias.len();
        let r = (k / 2) as isize;
        let mut out = vec![0.0; cout * g.cols()];
        for co in 0..cout {
            for img in 0..g.n {
                for y in 0..g.h as isize {
                    for x in 0..g.w as isize {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let (sy, sx) = (y + ky - r, x + kx - r);
                                    if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                        continue;
                                    }
                                    let wv = weight[co * cin * k * k + ci * k * k + (ky * k as isize + kx) as usize];
                                    acc += wv * input[ci * g.cols() + img * g.h * g.w + (sy * g.w as isize + sx) as usize];
                                }
                            }
                        }
                        out[co * g.cols() + img * g.h * g.w + (y * g.w as isize + x) as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Geom { n: 2, h: 5, w: 7 };
        for k in [1, 3] {
            let (cin, cout) = (3, 4);
            let input = rand_vec(cin * g.cols(), &mut rng);
            let weight = rand_vec(cout * cin * k * k, &mut rng);
            let bias = rand_vec(cout, &mut rng);
            let a = conv_forward(&input, cin, g, &weight, &bias, k);
            let b = naive(&input, cin, g, &weight, &bias, k);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dout, conv(x)> is linear in x and W, so backward must reproduce
        // the inner products exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Geom { n: 2, h: 4, w: 6 };
        for k in [1, 3] {
            let (cin, cout) = (3, 2);
            let input = rand_vec(cin * g.cols(), &mut rng);
            let weight = rand_vec(cout * cin * k * k, &mut rng);
            let zero_b = vec![0.0; cout];
            let dout = rand_vec(cout * g.cols(), &mut rng);
            let y = conv_forward(&input, cin, g, &weight, &zero_b, k);
            let lhs: f64 = y.iter().zip(&dout).map(|(a, b)| a * b).sum();
            let mut dw = vec![0.0; weight.len()];
            let mut db = vec![0.0; cout];
            let mut dx = vec![0.0; input.len()];
            conv_backward(&input, cin, g, &weight, k, &dout, &mut dw, &mut db, Some(&mut dx));
            let via_x: f64 = dx.iter().zip(&input).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.iter().zip(&weight).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
            for co in 0..cout {
                let s: f64 = dout[co * g.cols()..(co + 1) * g.cols()].iter().sum();
                assert!((db[co] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_to_space_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geom { n: 3, h: 2, w: 3 };
        let v = rand_vec(4 * 2 * g.cols(), &mut rng);
        let up = depth_to_space(&v, 2, g);
        assert_eq!(space_to_depth(&up, 2, g), v);
        // sub-positions (0, 1) and (1, 0) of channel 0, image 0
        assert_eq!(up[1], v[g.cols()]);
        assert_eq!(up[6], v[2 * g.cols()]);
    }

    #[test]
    fn lrelu_round() {
        let mut v = vec![-2.0, 0.0, 3.0];
        lrelu_inplace(&mut v);
        assert_eq!(v, vec![-0.2, 0.0, 3.0]);
        let mut g = vec![1.0, 1.0, 1.0];
        lrelu_backward_inplace(&v, &mut g);
        assert_eq!(g, vec![0.1, 1.0, 1.0]);
    }
}
