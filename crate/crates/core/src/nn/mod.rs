//! Layer-wise neural network kernels with hand-written adjoints.
//!
//! Every layer owns its parameters, parameter gradients, and the forward
//! caches needed for its backward pass. `forward(x, keep)` with
//! `keep = false` is evaluation mode: no caches are written. Gradients
//! accumulate across `backward` calls until `zero_grads`.

pub mod conv;
pub mod norm;

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis, Dimension, IxDyn};

pub use conv::{Conv2d, ConvT2d};
pub use norm::GroupNorm;

use crate::Tensor;

#[derive(Debug, Clone)]
pub struct Dense {
    /// (in, out)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    x: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(w: Array2<f64>, b: Array1<f64>) -> Self {
        let gw = Array2::zeros(w.dim());
        let gb = Array1::zeros(b.dim());
        Dense { w, b, gw, gb, x: None }
    }

    pub fn forward(&mut self, x: &Array2<f64>, keep: bool) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        if keep {
            self.x = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.x.take().expect("dense backward without forward");
        self.gw += &x.t().dot(dy);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    ConvT(ConvT2d),
    Gn(GroupNorm),
    Relu { y: Option<Tensor> },
    Sigmoid { y: Option<Tensor> },
    MaxPool2x2 { arg: Option<(Vec<usize>, (usize, usize, usize, usize))> },
    GlobalAvgPool { in_dim: Option<(usize, usize, usize, usize)> },
    Flatten { in_dim: Option<(usize, usize, usize, usize)> },
    /// Per-sample reshape (n, d) -> (n, c, h, w).
    Reshape { to: (usize, usize, usize) },
    Residual { body: Vec<(String, Layer)>, shortcut: Vec<(String, Layer)> },
}

fn as2(x: Tensor) -> Array2<f64> {
    x.into_dimensionality().expect("expected rank-2 tensor")
}
fn as4(x: Tensor) -> Array4<f64> {
    x.into_dimensionality().expect("expected rank-4 tensor")
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu { y: None }
    }
    pub fn sigmoid() -> Self {
        Layer::Sigmoid { y: None }
    }
    pub fn maxpool() -> Self {
        Layer::MaxPool2x2 { arg: None }
    }
    pub fn gap() -> Self {
        Layer::GlobalAvgPool { in_dim: None }
    }
    pub fn flatten() -> Self {
        Layer::Flatten { in_dim: None }
    }

    pub fn forward(&mut self, x: Tensor, keep: bool) -> Tensor {
        match self {
            Layer::Dense(d) => d.forward(&as2(x), keep).into_dyn(),
            Layer::Conv(c) => c.forward(&as4(x), keep).into_dyn(),
            Layer::ConvT(c) => c.forward(&as4(x), keep).into_dyn(),
            Layer::Gn(g) => g.forward(&as4(x), keep).into_dyn(),
            Layer::Relu { y } => {
                let out = x.mapv(|v| if v > 0.0 { v } else { 0.0 });
                if keep {
                    *y = Some(out.clone());
                }
                out
            }
            Layer::Sigmoid { y } => {
                let out = x.mapv(stable_sigmoid);
                if keep {
                    *y = Some(out.clone());
                }
                out
            }
            Layer::MaxPool2x2 { arg } => {
                let x = as4(x);
                let (n, c, h, w) = x.dim();
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Array4::zeros((n, c, oh, ow));
                let mut idx = vec![0usize; n * c * oh * ow];
                let mut flat = 0;
                for i in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut besto = 0usize;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = x[(i, ci, oy * 2 + dy, ox * 2 + dx)];
                                        if v > best {
                                            best = v;
                                            besto = dy * 2 + dx;
                                        }
                                    }
                                }
                                out[(i, ci, oy, ox)] = best;
                                idx[flat] = besto;
                                flat += 1;
                            }
                        }
                    }
                }
                if keep {
                    *arg = Some((idx, x.dim()));
                }
                out.into_dyn()
            }
            Layer::GlobalAvgPool { in_dim } => {
                let x = as4(x);
                let (n, c, h, w) = x.dim();
                let mut out = Array2::zeros((n, c));
                for i in 0..n {
                    for ci in 0..c {
                        out[(i, ci)] =
                            x.index_axis(Axis(0), i).index_axis(Axis(0), ci).sum()
                                / (h * w) as f64;
                    }
                }
                if keep {
                    *in_dim = Some(x.dim());
                }
                out.into_dyn()
            }
            Layer::Flatten { in_dim } => {
                let x = as4(x);
                let (n, c, h, w) = x.dim();
                if keep {
                    *in_dim = Some(x.dim());
                }
                x.into_shape_with_order((n, c * h * w))
                    .expect("flatten")
                    .into_dyn()
            }
            Layer::Reshape { to } => {
                let x = as2(x);
                let n = x.nrows();
                let (c, h, w) = *to;
                x.into_shape_with_order((n, c, h, w))
                    .expect("reshape")
                    .into_dyn()
            }
            Layer::Residual { body, shortcut } => {
                let y_body = forward_seq(body, x.clone(), keep);
                let y_short = forward_seq(shortcut, x, keep);
                y_body + y_short
            }
        }
    }

    pub fn backward(&mut self, dy: Tensor) -> Tensor {
        match self {
            Layer::Dense(d) => d.backward(&as2(dy)).into_dyn(),
            Layer::Conv(c) => c.backward(&as4(dy)).into_dyn(),
            Layer::ConvT(c) => c.backward(&as4(dy)).into_dyn(),
            Layer::Gn(g) => g.backward(&as4(dy)).into_dyn(),
            Layer::Relu { y } => {
                let y = y.take().expect("relu backward without forward");
                let mut dx = dy;
                dx.zip_mut_with(&y, |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                dx
            }
            Layer::Sigmoid { y } => {
                let y = y.take().expect("sigmoid backward without forward");
                let mut dx = dy;
                dx.zip_mut_with(&y, |d, &v| *d *= v * (1.0 - v));
                dx
            }
            Layer::MaxPool2x2 { arg } => {
                let (idx, in_dim) = arg.take().expect("maxpool backward without forward");
                let dy = as4(dy);
                let (n, c, oh, ow) = dy.dim();
                let mut dx = Array4::zeros(in_dim);
                let mut flat = 0;
                for i in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let o = idx[flat];
                                flat += 1;
                                dx[(i, ci, oy * 2 + o / 2, ox * 2 + o % 2)] +=
                                    dy[(i, ci, oy, ox)];
                            }
                        }
                    }
                }
                dx.into_dyn()
            }
            Layer::GlobalAvgPool { in_dim } => {
                let dims = in_dim.take().expect("gap backward without forward");
                let dy = as2(dy);
                let (n, c, h, w) = dims;
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Array4::zeros(dims);
                for i in 0..n {
                    for ci in 0..c {
                        let g = dy[(i, ci)] * scale;
                        let mut view = dx.index_axis_mut(Axis(0), i);
                        let mut view = view.index_axis_mut(Axis(0), ci);
                        view.mapv_inplace(|_| g);
                    }
                }
                dx.into_dyn()
            }
            Layer::Flatten { in_dim } => {
                let dims = in_dim.take().expect("flatten backward without forward");
                let dy = as2(dy);
                dy.into_shape_with_order(dims).expect("unflatten").into_dyn()
            }
            Layer::Reshape { .. } => {
                let dy = as4(dy);
                let (n, c, h, w) = dy.dim();
                dy.into_shape_with_order((n, c * h * w))
                    .expect("unreshape")
                    .into_dyn()
            }
            Layer::Residual { body, shortcut } => {
                let dx_body = backward_seq(body, dy.clone());
                let dx_short = backward_seq(shortcut, dy);
                dx_body + dx_short
            }
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Layer::Dense(d) => {
                d.gw.fill(0.0);
                d.gb.fill(0.0);
            }
            Layer::Conv(c) => {
                c.gw.fill(0.0);
                c.gb.fill(0.0);
            }
            Layer::ConvT(c) => {
                c.gw.fill(0.0);
                c.gb.fill(0.0);
            }
            Layer::Gn(g) => {
                g.ggamma.fill(0.0);
                g.gbeta.fill(0.0);
            }
            Layer::Residual { body, shortcut } => {
                for (_, l) in body.iter_mut().chain(shortcut.iter_mut()) {
                    l.zero_grads();
                }
            }
            _ => {}
        }
    }

    /// Visit (name, param view) pairs in deterministic order.
    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        match self {
            Layer::Dense(d) => {
                f(format!("{prefix}.w"), d.w.view().into_dyn());
                f(format!("{prefix}.b"), d.b.view().into_dyn());
            }
            Layer::Conv(c) => {
                f(format!("{prefix}.w"), c.w.view().into_dyn());
                f(format!("{prefix}.b"), c.b.view().into_dyn());
            }
            Layer::ConvT(c) => {
                f(format!("{prefix}.w"), c.w.view().into_dyn());
                f(format!("{prefix}.b"), c.b.view().into_dyn());
            }
            Layer::Gn(g) => {
                f(format!("{prefix}.gamma"), g.gamma.view().into_dyn());
                f(format!("{prefix}.beta"), g.beta.view().into_dyn());
            }
            Layer::Residual { body, shortcut } => {
                for (name, l) in body {
                    l.for_each_param(&format!("{prefix}.body.{name}"), f);
                }
                for (name, l) in shortcut {
                    l.for_each_param(&format!("{prefix}.short.{name}"), f);
                }
            }
            _ => {}
        }
    }

    /// Visit (name, param, grad) triples mutably, in the same order as
    /// `for_each_param`.
    pub fn for_each_param_grad_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        match self {
            Layer::Dense(d) => {
                f(format!("{prefix}.w"), d.w.view_mut().into_dyn(), d.gw.view().into_dyn());
                f(format!("{prefix}.b"), d.b.view_mut().into_dyn(), d.gb.view().into_dyn());
            }
            Layer::Conv(c) => {
                f(format!("{prefix}.w"), c.w.view_mut().into_dyn(), c.gw.view().into_dyn());
                f(format!("{prefix}.b"), c.b.view_mut().into_dyn(), c.gb.view().into_dyn());
            }
            Layer::ConvT(c) => {
                f(format!("{prefix}.w"), c.w.view_mut().into_dyn(), c.gw.view().into_dyn());
                f(format!("{prefix}.b"), c.b.view_mut().into_dyn(), c.gb.view().into_dyn());
            }
            Layer::Gn(g) => {
                f(
                    format!("{prefix}.gamma"),
                    g.gamma.view_mut().into_dyn(),
                    g.ggamma.view().into_dyn(),
                );
                f(
                    format!("{prefix}.beta"),
                    g.beta.view_mut().into_dyn(),
                    g.gbeta.view().into_dyn(),
                );
            }
            Layer::Residual { body, shortcut } => {
                for (name, l) in body {
                    l.for_each_param_grad_mut(&format!("{prefix}.body.{name}"), f);
                }
                for (name, l) in shortcut {
                    l.for_each_param_grad_mut(&format!("{prefix}.short.{name}"), f);
                }
            }
            _ => {}
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn forward_seq(layers: &mut [(String, Layer)], x: Tensor, keep: bool) -> Tensor {
    let mut cur = x;
    for (_, l) in layers.iter_mut() {
        cur = l.forward(cur, keep);
    }
    cur
}

pub fn backward_seq(layers: &mut [(String, Layer)], dy: Tensor) -> Tensor {
    let mut cur = dy;
    for (_, l) in layers.iter_mut().rev() {
        cur = l.backward(cur);
    }
    cur
}

/// An ordered pipeline of named layers.
#[derive(Debug, Clone, Default)]
pub struct Network {
    pub layers: Vec<(String, Layer)>,
}

impl Network {
    pub fn new(layers: Vec<(String, Layer)>) -> Self {
        Network { layers }
    }

    pub fn forward(&mut self, x: Tensor, keep: bool) -> Tensor {
        forward_seq(&mut self.layers, x, keep)
    }

    pub fn backward(&mut self, dy: Tensor) -> Tensor {
        backward_seq(&mut self.layers, dy)
    }

    pub fn zero_grads(&mut self) {
        for (_, l) in &mut self.layers {
            l.zero_grads();
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        for (name, l) in &self.layers {
            l.for_each_param(name, f);
        }
    }

    pub fn for_each_param_grad_mut(
        &mut self,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        for (name, l) in &mut self.layers {
            l.for_each_param_grad_mut(name, f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, v| n += v.len());
        n
    }
}

/// Flat index helper for FD tests over IxDyn arrays.
pub fn dyn_index(dim: &IxDyn, flat: usize) -> Vec<usize> {
    let ndim = dim.ndim();
    let mut rem = flat;
    let mut idx = vec![0; ndim];
    for ax in (0..ndim).rev() {
        idx[ax] = rem % dim[ax];
        rem /= dim[ax];
    }
    idx
}
