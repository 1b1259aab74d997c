//! Dense f64 tensors and the convolution kernels the network is built from.
//!
//! Activations are `[channels, height, width]`, row-major. Convolution
//! weights use the `[out, in, k, k]` layout; transposed-convolution weights
//! use `[in, out, k, k]`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C,H,W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    /// Channel-wise concatenation of rank-3 tensors with equal spatial dims.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let (_, h, w) = parts[0].chw();
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.chw();
            assert_eq!((ph, pw), (h, w), "spatial mismatch in concat");
            channels += c;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[channels, h, w], data)
    }

    pub fn channel_range(&self, start: usize, end: usize) -> Tensor {
        let (_, h, w) = self.chw();
        Tensor::new(&[end - start, h, w], self.data[start * h * w..end * h * w].to_vec())
    }

    /// Top-left spatial crop.
    pub fn crop(&self, height: usize, width: usize) -> Tensor {
        let (c, h, w) = self.chw();
        assert!(height <= h && width <= w, "crop larger than tensor");
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in 0..height {
                let row = (ch * h + y) * w;
                out.extend_from_slice(&self.data[row..row + width]);
            }
        }
        Tensor::new(&[c, height, width], out)
    }

    /// Bottom/right zero extension; the adjoint of [`Tensor::crop`].
    pub fn zero_extend(&self, height: usize, width: usize) -> Tensor {
        let (c, h, w) = self.chw();
        let mut out = Tensor::zeros(&[c, height, width]);
        for ch in 0..c {
            for y in 0..h {
                let src = (ch * h + y) * w;
                let dst = (ch * height + y) * width;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}

/// Output extent of a `k`-tap convolution with stride `s` and padding `p`.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, overwriting `c`.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, 0.0);
}

/// `c = beta·c + a · b` with explicit (row, column) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies inside the slices, checked by
    // the extents below for the strides used in this module.
    debug_assert!(a.len() >= max_index(m, k, a_strides));
    debug_assert!(b.len() >= max_index(k, n, b_strides));
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_index(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

/// Unfold `[C,H,W]` into a `(C·k·k) × (Ho·Wo)` patch matrix with zero padding.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = x.chw();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let cols = ho * wo;
    let mut out = vec![0.0; c * k * k * cols];
    let src = x.data();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst + ox] = src[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `[C,H,W]`.
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let n = ho * wo;
    let mut out = Tensor::zeros(&[c, h, w]);
    let dst = out.data_mut();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Plain 2-D convolution with "same" padding `k/2`.
///
/// Returns the output together with the patch matrix, which the autograd
/// layer keeps for the weight gradient.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> (Tensor, Vec<f64>) {
    let (ci, _, _) = x.chw();
    let ws = weight.shape();
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], ci, "conv input channels {} != weight {}", ci, ws[1]);
    let (col, ho, wo) = im2col(x, k, stride, k / 2);
    let p = ho * wo;
    let mut out = vec![0.0; co * p];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(p.max(1)).enumerate().take(co) {
            row.fill(b.data()[o]);
        }
    }
    gemm(co, ci * k * k, p, weight.data(), ((ci * k * k) as isize, 1), &col, (p as isize, 1), &mut out, 1.0);
    (Tensor::new(&[co, ho, wo], out), col)
}

/// Gradients of [`conv2d_forward`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    grad: &Tensor,
    col: &[f64],
    x_shape: (usize, usize, usize),
    weight: &Tensor,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, w) = x_shape;
    let ws = weight.shape();
    let (co, k) = (ws[0], ws[2]);
    let kk = ci * k * k;
    let (_, ho, wo) = grad.chw();
    let p = ho * wo;
    let g = grad.data();

    let mut dw = vec![0.0; co * kk];
    // dW = G · colᵀ
    gemm(co, p, kk, g, (p as isize, 1), col, (1, p as isize), &mut dw, 0.0);
    let db: Vec<f64> = g.chunks(p.max(1)).take(co).map(|r| r.iter().sum()).collect();
    // dcol = Wᵀ · G
    let mut dcol = vec![0.0; kk * p];
    gemm(kk, co, p, weight.data(), (1, kk as isize), g, (p as isize, 1), &mut dcol, 0.0);
    let dx = col2im(&dcol, ci, h, w, k, stride, k / 2);
    (dx, Tensor::new(ws, dw), Tensor::new(&[co], db))
}

/// Transposed convolution producing a `[out, height, width]` map whose
/// forward convolution (same `k`, `stride`, padding `k/2`) has the input's
/// spatial dims.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    out_hw: (usize, usize),
) -> Tensor {
    let (ci, h, w) = x.chw();
    let ws = weight.shape();
    assert_eq!(ws[0], ci, "transposed conv input channels mismatch");
    let (co, k) = (ws[1], ws[2]);
    assert_eq!(conv_out_dim(out_hw.0, k, stride, k / 2), h);
    assert_eq!(conv_out_dim(out_hw.1, k, stride, k / 2), w);
    let kk = co * k * k;
    let p = h * w;
    let mut col = vec![0.0; kk * p];
    gemm(kk, ci, p, weight.data(), (1, kk as isize), x.data(), (p as isize, 1), &mut col, 0.0);
    let mut out = col2im(&col, co, out_hw.0, out_hw.1, k, stride, k / 2);
    if let Some(b) = bias {
        let plane = out_hw.0 * out_hw.1;
        for (o, row) in out.data_mut().chunks_mut(plane.max(1)).enumerate().take(co) {
            for v in row {
                *v += b.data()[o];
            }
        }
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`]: `(dx, dweight, dbias)`.
pub fn conv_transpose2d_backward(
    grad: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, w) = x.chw();
    let ws = weight.shape();
    let (co, k) = (ws[1], ws[2]);
    let kk = co * k * k;
    let p = h * w;
    let (dcol, _, _) = im2col(grad, k, stride, k / 2);
    let mut dx = vec![0.0; ci * p];
    gemm(ci, kk, p, weight.data(), (kk as isize, 1), &dcol, (p as isize, 1), &mut dx, 0.0);
    let mut dw = vec![0.0; ci * kk];
    gemm(ci, p, kk, x.data(), (p as isize, 1), &dcol, (1, p as isize), &mut dw, 0.0);
    let (_, gh, gw) = grad.chw();
    let plane = gh * gw;
    let db: Vec<f64> = grad.data().chunks(plane.max(1)).take(co).map(|r| r.iter().sum()).collect();
    (Tensor::new(&[ci, h, w], dx), Tensor::new(ws, dw), Tensor::new(&[co], db))
}

/// Sub-pixel rearrangement with factor 2: channel `4c + 2i + j` at `(y, x)`
/// moves to channel `c` at `(2y + i, 2x + j)`.
pub fn pixel_shuffle(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(c % 4, 0, "pixel shuffle needs a multiple of 4 channels");
    let co = c / 4;
    let mut out = Tensor::zeros(&[co, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..co {
        for i in 0..2 {
            for j in 0..2 {
                let ci = 4 * o + 2 * i + j;
                for y in 0..h {
                    for xx in 0..w {
                        dst[(o * 2 * h + 2 * y + i) * 2 * w + 2 * xx + j] = src[(ci * h + y) * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Inverse (and adjoint) of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor) -> Tensor {
    let (co, h2, w2) = x.chw();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[co * 4, h, w]);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..co {
        for i in 0..2 {
            for j in 0..2 {
                let ci = 4 * o + 2 * i + j;
                for y in 0..h {
                    for xx in 0..w {
                        dst[(ci * h + y) * w + xx] = src[(o * h2 + 2 * y + i) * w2 + 2 * xx + j];
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

    /// Direct nested-loop convolution with zero padding.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
        let (ci, h, wd) = x.chw();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let pad = k / 2;
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(c, iy as usize, ix as usize)
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect())
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let (y, _) = conv2d_forward(&x, &w, None, 1);
        assert_eq!(y.at(0, 2, 2), 9.0);
        assert_eq!(y.at(0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2), 6.0);
    }

    #[test]
    fn stride_two_uses_ceil() {
        let x = Tensor::zeros(&[2, 7, 7]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let (y, _) = conv2d_forward(&x, &w, None, 2);
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn gemm_conv_matches_naive() {
        for &(k, s) in &[(1, 1), (3, 1), (3, 2), (5, 2), (1, 2)] {
            let x = ramp(&[3, 7, 6], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let (fast, _) = conv2d_forward(&x, &w, None, s);
            let slow = naive_conv(&x, &w, s);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={s}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        // <conv(a), b> == <a, convT(b)> for matching geometry.
        let a = ramp(&[2, 8, 6], 0.3);
        let b = ramp(&[3, 4, 3], 0.7);
        let w = ramp(&[3, 2, 5, 5], 0.11);
        let (ca, _) = conv2d_forward(&a, &w, None, 2);
        let lhs: f64 = ca.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let wt = {
            // [out,in,k,k] -> [in(=3),out(=2),k,k] where conv-transpose "in" is conv "out".
            w.clone()
        };
        let ctb = conv_transpose2d_forward(&b, &wt, None, 2, (8, 6));
        let rhs: f64 = a.data().iter().zip(ctb.data()).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn pixel_shuffle_places_channels() {
        let x = Tensor::new(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x);
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_unshuffle(&y), x);
    }

    #[test]
    fn crop_and_extend_are_adjoint() {
        let x = ramp(&[2, 3, 4], 1.0);
        let big = x.zero_extend(5, 6);
        assert_eq!(big.crop(3, 4), x);
    }
}
