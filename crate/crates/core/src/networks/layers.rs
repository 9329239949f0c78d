//! Forward and backward passes of the few layer types the two networks use.
//! Convolutions are lowered to a matrix product over an im2col buffer, one
//! sample at a time, so results never depend on the batch composition.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView4, Axis};

use crate::tensor::BatchTensor;

/// Geometry of a square-kernel 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const SAME3: ConvGeometry = ConvGeometry {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    pub const DOWN4: ConvGeometry = ConvGeometry {
        kernel: 4,
        stride: 2,
        pad: 1,
    };

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }
}

/// Writes the patches of one sample into columns `[offset, offset + oh·ow)`
/// of a row-major matrix with `stride` columns.
#[allow(clippy::too_many_arguments)]
fn im2col_into(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, oh: usize, ow: usize, cols: &mut [f64], stride: usize, offset: usize) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * stride + offset..row * stride + offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// All samples side by side: `C·k² × N·oh·ow`.
fn im2col_batch(xs: &[f64], n: usize, c: usize, h: usize, w: usize, g: ConvGeometry, oh: usize, ow: usize) -> Array2<f64> {
    let stride = n * oh * ow;
    let mut col = Array2::zeros((c * g.kernel * g.kernel, stride));
    let cols = col.as_slice_mut().expect("fresh array is contiguous");
    for i in 0..n {
        im2col_into(&xs[i * c * h * w..(i + 1) * c * h * w], c, h, w, g, oh, ow, cols, stride, i * oh * ow);
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], stride: usize, offset: usize, dx: &mut [f64], c: usize, h: usize, w: usize, g: ConvGeometry, oh: usize, ow: usize) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * stride + offset..row * stride + offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn weight_matrix(weight: ArrayView4<f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = weight.dim();
    weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("weight reshape")
}

/// `weight` is `C_out × C_in × k × k`.
pub fn conv2d(x: &BatchTensor, weight: ArrayView4<f64>, bias: ArrayView1<f64>, g: ConvGeometry) -> BatchTensor {
    let (n, c, h, w) = x.dim();
    let co = weight.dim().0;
    debug_assert_eq!(weight.dim().1, c);
    let (oh, ow) = g.output_size(h, w);
    let wm = weight_matrix(weight);
    let x = x.as_standard_layout();
    let col = im2col_batch(x.as_slice().expect("standard layout"), n, c, h, w, g, oh, ow);
    let mut res = Array2::from_shape_fn((co, n * oh * ow), |(o, _)| bias[o]);
    general_mat_mul(1.0, &wm, &col, 1.0, &mut res);
    // C_out × N·P  →  N × C_out × P
    res.into_shape_with_order((co, n, oh, ow))
        .expect("output reshape")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// Gradients of a convolution: `(d weight, d bias, d input)`. The input
/// gradient is only formed when requested.
pub fn conv2d_backward(
    x: &BatchTensor,
    weight: ArrayView4<f64>,
    grad_out: &BatchTensor,
    g: ConvGeometry,
    need_input_grad: bool,
) -> (Array4<f64>, Array1<f64>, Option<BatchTensor>) {
    let (n, c, h, w) = x.dim();
    let (co, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = grad_out.dim();
    let x = x.as_standard_layout();
    let col = im2col_batch(x.as_slice().expect("standard layout"), n, c, h, w, g, oh, ow);
    // N × C_out × P  →  C_out × N·P
    let go = grad_out
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, n * oh * ow))
        .expect("grad reshape");
    let mut dw = Array2::zeros((co, c * kh * kw));
    general_mat_mul(1.0, &go, &col.t(), 0.0, &mut dw);
    let db = go.sum_axis(Axis(1));
    let dx = need_input_grad.then(|| {
        let wm = weight_matrix(weight);
        let mut dcol = Array2::zeros((c * kh * kw, n * oh * ow));
        general_mat_mul(1.0, &wm.t(), &go, 0.0, &mut dcol);
        let dcols = dcol.as_slice().expect("contiguous");
        let mut dx = Array4::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        for i in 0..n {
            col2im_add(dcols, n * oh * ow, i * oh * ow, &mut dxs[i * c * h * w..(i + 1) * c * h * w], c, h, w, g, oh, ow);
        }
        dx
    });
    let dw = dw.into_shape_with_order((co, c, kh, kw)).expect("dw reshape");
    (dw, db, dx)
}

pub fn relu(x: &BatchTensor) -> BatchTensor {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its input.
pub fn relu_backward(pre: &BatchTensor, grad: &BatchTensor) -> BatchTensor {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &BatchTensor) -> BatchTensor {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(pre: &BatchTensor, grad: &BatchTensor) -> BatchTensor {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE
        }
    });
    out
}

/// Sub-pixel rearrangement `N × C·r² × H × W → N × C × rH × rW`.
pub fn pixel_shuffle(x: &BatchTensor, r: usize) -> BatchTensor {
    let (n, cr, h, w) = x.dim();
    let c = cr / (r * r);
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, c, h * r, w * r));
    let dst = out.as_slice_mut().expect("fresh array");
    let (oh, ow) = (h * r, w * r);
    for i in 0..n {
        for ch in 0..c {
            for sub in 0..r * r {
                let (dy, dx) = (sub / r, sub % r);
                let plane = &src[((i * cr) + ch * r * r + sub) * h * w..][..h * w];
                let base = (i * c + ch) * oh * ow;
                for y in 0..h {
                    let row = &mut dst[base + (y * r + dy) * ow..][..ow];
                    for (xx, v) in plane[y * w..(y + 1) * w].iter().enumerate() {
                        row[xx * r + dx] = *v;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]; also its adjoint, as the shuffle is a
/// permutation.
pub fn pixel_unshuffle(x: &BatchTensor, r: usize) -> BatchTensor {
    let (n, c, oh, ow) = x.dim();
    let (h, w) = (oh / r, ow / r);
    let cr = c * r * r;
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, cr, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * oh * ow;
            for sub in 0..r * r {
                let (dy, dx) = (sub / r, sub % r);
                let plane = &mut dst[((i * cr) + ch * r * r + sub) * h * w..][..h * w];
                for y in 0..h {
                    let row = &src[base + (y * r + dy) * ow..][..ow];
                    for (xx, v) in plane[y * w..(y + 1) * w].iter_mut().enumerate() {
                        *v = row[xx * r + dx];
                    }
                }
            }
        }
    }
    out
}
