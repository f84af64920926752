//! Convolution primitives: im2col / col2im_add and the Conv2d / ConvT2d
//! layers built on them.
//!
//! `im2col` and `col2im_add` are exact adjoints of each other, which is what
//! lets one matmul pair serve all four directions (conv forward/backward,
//! transposed-conv forward/backward).

use ndarray::{Array1, Array2, Array4};

/// Unfold x:(n,c,h,w) into (n*oh*ow, c*kh*kw) patches for a conv with
/// (kh,kw,stride,pad). Out-of-bounds taps read as 0.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::zeros((n * oh * ow, c * kh * kw));
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (i * oh + oy) * ow + ox;
                for ci in 0..c {
                    for u in 0..kh {
                        let iy = oy * stride + u;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let ix = ox * stride + v;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            cols[(row, (ci * kh + u) * kw + v)] =
                                x[(i, ci, iy - pad, ix - pad)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add patch columns back into an (n,c,h,w)
/// image. Overlapping taps accumulate.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(cols.dim(), (n * oh * ow, c * kh * kw));
    let mut x = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (i * oh + oy) * ow + ox;
                for ci in 0..c {
                    for u in 0..kh {
                        let iy = oy * stride + u;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let ix = ox * stride + v;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            x[(i, ci, iy - pad, ix - pad)] +=
                                cols[(row, (ci * kh + u) * kw + v)];
                        }
                    }
                }
            }
        }
    }
    x
}

/// (n*oh*ow, oc) row-major matrix → (n, oc, oh, ow) feature map.
fn mat_to_nchw(m: &Array2<f64>, n: usize, oc: usize, oh: usize, ow: usize) -> Array4<f64> {
    let mut out = Array4::zeros((n, oc, oh, ow));
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (i * oh + oy) * ow + ox;
                for co in 0..oc {
                    out[(i, co, oy, ox)] = m[(row, co)];
                }
            }
        }
    }
    out
}

/// (n, oc, oh, ow) feature map → (n*oh*ow, oc) row-major matrix.
fn nchw_to_mat(x: &Array4<f64>) -> Array2<f64> {
    let (n, oc, oh, ow) = x.dim();
    let mut m = Array2::zeros((n * oh * ow, oc));
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (i * oh + oy) * ow + ox;
                for co in 0..oc {
                    m[(row, co)] = x[(i, co, oy, ox)];
                }
            }
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_c, in_c, kh, kw)
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    cols: Option<Array2<f64>>,
    in_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(w: Array4<f64>, b: Array1<f64>, stride: usize, pad: usize) -> Self {
        let gw = Array4::zeros(w.dim());
        let gb = Array1::zeros(b.dim());
        Conv2d { w, b, stride, pad, gw, gb, cols: None, in_dim: (0, 0, 0, 0) }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.w.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, keep: bool) -> Array4<f64> {
        let (n, _c, h, w) = x.dim();
        let (oc, ic, kh, kw) = self.w.dim();
        debug_assert_eq!(_c, ic, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, kh, kw, self.stride, self.pad);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("conv weight reshape");
        let mut out_mat = cols.dot(&w_mat.t());
        for mut row in out_mat.rows_mut() {
            row += &self.b;
        }
        if keep {
            self.cols = Some(cols);
            self.in_dim = x.dim();
        }
        mat_to_nchw(&out_mat, n, oc, oh, ow)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cols = self.cols.take().expect("conv backward without forward");
        let (n, c, h, w) = self.in_dim;
        let (oc, ic, kh, kw) = self.w.dim();
        let dy_mat = nchw_to_mat(dy);
        let dw_mat = dy_mat.t().dot(&cols); // (oc, ic*kh*kw)
        let dw = dw_mat
            .into_shape_with_order((oc, ic, kh, kw))
            .expect("conv grad reshape");
        self.gw += &dw;
        self.gb += &dy_mat.sum_axis(ndarray::Axis(0));
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("conv weight reshape");
        let dcols = dy_mat.dot(&w_mat);
        col2im_add(&dcols, n, c, h, w, kh, kw, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvT2d {
    /// (in_c, out_c, kh, kw) — adjoint of a conv mapping out→in.
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    x_mat: Option<Array2<f64>>,
    in_dim: (usize, usize, usize, usize),
}

impl ConvT2d {
    pub fn new(w: Array4<f64>, b: Array1<f64>, stride: usize, pad: usize) -> Self {
        let gw = Array4::zeros(w.dim());
        let gb = Array1::zeros(b.dim());
        ConvT2d { w, b, stride, pad, gw, gb, x_mat: None, in_dim: (0, 0, 0, 0) }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.w.dim();
        (
            (h - 1) * self.stride + kh - 2 * self.pad,
            (w - 1) * self.stride + kw - 2 * self.pad,
        )
    }

    /// convT(x) = col2im(x_mat · W_mat): the adjoint of the conv that maps
    /// the (larger) output plane back onto the input plane.
    pub fn forward(&mut self, x: &Array4<f64>, keep: bool) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        let (wi, co, kh, kw) = self.w.dim();
        debug_assert_eq!(ci, wi, "convT input channels");
        let (out_h, out_w) = self.out_hw(h, w);
        let x_mat = nchw_to_mat(x); // (n*h*w, ci)
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((ci, co * kh * kw))
            .expect("convT weight reshape");
        let cols = x_mat.dot(&w_mat); // (n*h*w, co*kh*kw)
        let mut out = col2im_add(&cols, n, co, out_h, out_w, kh, kw, self.stride, self.pad);
        for co_i in 0..co {
            let mut view = out.index_axis_mut(ndarray::Axis(1), co_i);
            view += self.b[co_i];
        }
        if keep {
            self.x_mat = Some(x_mat);
            self.in_dim = x.dim();
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x_mat = self.x_mat.take().expect("convT backward without forward");
        let (n, ci, h, w) = self.in_dim;
        let (_, co, kh, kw) = self.w.dim();
        let dcols = im2col(dy, kh, kw, self.stride, self.pad); // (n*h*w, co*kh*kw)
        let dw_mat = x_mat.t().dot(&dcols); // (ci, co*kh*kw)
        self.gw += &dw_mat
            .into_shape_with_order((ci, co, kh, kw))
            .expect("convT grad reshape");
        for co_i in 0..co {
            self.gb[co_i] += dy.index_axis(ndarray::Axis(1), co_i).sum();
        }
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((ci, co * kh * kw))
            .expect("convT weight reshape");
        let dx_mat = dcols.dot(&w_mat.t()); // (n*h*w, ci)
        let mut dx = Array4::zeros((n, ci, h, w));
        for i in 0..n {
            for y in 0..h {
                for x_i in 0..w {
                    let row = (i * h + y) * w + x_i;
                    for c_i in 0..ci {
                        dx[(i, c_i, y, x_i)] = dx_mat[(row, c_i)];
                    }
                }
            }
        }
        dx
    }
}
