//! Raw numeric kernels behind the tape primitives (NHWC layout).

use alloc::vec;
use alloc::vec::Vec;

/// Matrix operand: row-major storage, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Same storage read as its transpose.
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b + beta · out` with `out` row-major of shape (m, n).
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], beta: f64) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the strides describe in-bounds views of the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad_h + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad_w + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let mut col = vec![0.0; g.rows() * patch];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox + kx) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let dst = row + (ky * g.kw + kx) * g.c_in;
                        col[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox + kx) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let src = row + (ky * g.kw + kx) * g.c_in;
                        for (d, s) in dx[dst..dst + g.c_in].iter_mut().zip(&col[src..src + g.c_in]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation; kernel laid out `[kh, kw, c_in, c_out]`.
pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let rows = g.rows();
    let mut out = vec![0.0; rows * g.c_out];
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(g.c_out) {
            row.copy_from_slice(bias);
        }
    }
    let kmat = Mat::new(kernel, g.patch(), g.c_out);
    if g.is_pointwise() {
        gemm(Mat::new(x, rows, g.c_in), kmat, &mut out, 1.0);
    } else {
        let col = im2col(x, g);
        gemm(Mat::new(&col, rows, g.patch()), kmat, &mut out, 1.0);
    }
    out
}

/// Gradients of a conv2d with respect to (input, kernel, bias).
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_k: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = g.rows();
    let patch = g.patch();
    let gy = Mat::new(grad_out, rows, g.c_out);
    let col_storage;
    let col: &[f64] = if g.is_pointwise() {
        x
    } else if need_k {
        col_storage = im2col(x, g);
        &col_storage
    } else {
        &[]
    };
    let dk = need_k.then(|| {
        let mut dk = vec![0.0; patch * g.c_out];
        gemm(Mat::new(col, rows, patch).t(), gy, &mut dk, 0.0);
        dk
    });
    let db = need_b.then(|| {
        let mut db = vec![0.0; g.c_out];
        for row in grad_out.chunks_exact(g.c_out) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    let dx = need_x.then(|| {
        let kmat = Mat::new(kernel, patch, g.c_out).t();
        if g.is_pointwise() {
            let mut dx = vec![0.0; rows * g.c_in];
            gemm(gy, kmat, &mut dx, 0.0);
            dx
        } else {
            let mut dcol = vec![0.0; rows * patch];
            gemm(gy, kmat, &mut dcol, 0.0);
            let mut dx = vec![0.0; g.batch * g.h * g.w * g.c_in];
            col2im(&dcol, g, &mut dx);
            dx
        }
    });
    (dx, dk, db)
}

/// Numerically stable softmax of `xs` written into `out`.
pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = libm::exp(x - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Vector-Jacobian product of softmax: `y ⊙ (g − ⟨g, y⟩)`.
pub(crate) fn softmax_vjp(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - dot);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), &mut out, 0.0);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 2), &mut out, 0.0);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2).t(), &mut out, 0.0);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            batch: 2,
            h: 4,
            w: 5,
            c_in: 3,
            kh: 3,
            kw: 3,
            c_out: 2,
            pad_h: 1,
            pad_w: 1,
        };
        let x: Vec<f64> = (0..2 * 4 * 5 * 3).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..3 * 3 * 3 * 2).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let out = conv2d_forward(&x, &k, Some(&[0.5, -0.5]), &g);
        for b in 0..2 {
            for oy in 0..4 {
                for ox in 0..5 {
                    for co in 0..2 {
                        let mut acc = if co == 0 { 0.5 } else { -0.5 };
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || iy >= 4 || ix < 0 || ix >= 5 {
                                    continue;
                                }
                                for ci in 0..3 {
                                    let xv = x[((b * 4 + iy as usize) * 5 + ix as usize) * 3 + ci];
                                    let kv = k[((ky * 3 + kx) * 3 + ci) * 2 + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        let got = out[((b * 4 + oy) * 5 + ox) * 2 + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite());
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }
}
