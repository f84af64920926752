//! First-order optimizers over visitable parameter sets.
//!
//! Optimizer state (momentum/Adam moments) is kept per parameter in visit
//! order, so a given optimizer instance must always be stepped against the
//! same model value.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::models::{Classifier, Generator};
use crate::nn::Network;
use crate::Tensor;

/// Anything exposing (param, grad) pairs in a stable order.
pub trait Parameterized {
    fn visit_params_grads(
        &mut self,
        f: &mut dyn FnMut(ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    );
}

impl Parameterized for Network {
    fn visit_params_grads(
        &mut self,
        f: &mut dyn FnMut(ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        self.for_each_param_grad_mut(&mut |_n, p, g| f(p, g));
    }
}

impl Parameterized for Classifier {
    fn visit_params_grads(
        &mut self,
        f: &mut dyn FnMut(ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        self.trunk.for_each_param_grad_mut(&mut |_n, p, g| f(p, g));
        self.head.for_each_param_grad_mut(&mut |_n, p, g| f(p, g));
    }
}

impl Parameterized for Generator {
    fn visit_params_grads(
        &mut self,
        f: &mut dyn FnMut(ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>),
    ) {
        self.net.for_each_param_grad_mut(&mut |_n, p, g| f(p, g));
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Tensor>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: usize,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// Adam with the usual DCGAN betas (0.5, 0.999).
    pub fn adam_gan(lr: f64) -> Self {
        Optimizer::adam(lr, 0.5, 0.999)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Optimizer::Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, target: &mut dyn Parameterized) {
        match self {
            Optimizer::Sgd { lr, momentum, velocity } => {
                let lr = *lr;
                let mu = *momentum;
                if mu == 0.0 {
                    target.visit_params_grads(&mut |mut p, g| {
                        p.zip_mut_with(&g, |pv, &gv| *pv -= lr * gv);
                    });
                    return;
                }
                let mut i = 0usize;
                target.visit_params_grads(&mut |mut p, g| {
                    if velocity.len() <= i {
                        velocity.push(Tensor::zeros(g.raw_dim()));
                    }
                    let v = &mut velocity[i];
                    v.zip_mut_with(&g, |vv, &gv| *vv = mu * *vv + gv);
                    p.zip_mut_with(v, |pv, &vv| *pv -= lr * vv);
                    i += 1;
                });
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m, v } => {
                *t += 1;
                let (lr, b1, b2, eps) = (*lr, *beta1, *beta2, *eps);
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                let mut i = 0usize;
                target.visit_params_grads(&mut |mut p, g| {
                    if m.len() <= i {
                        m.push(Tensor::zeros(g.raw_dim()));
                        v.push(Tensor::zeros(g.raw_dim()));
                    }
                    let (mi, vi) = (&mut m[i], &mut v[i]);
                    mi.zip_mut_with(&g, |mv, &gv| *mv = b1 * *mv + (1.0 - b1) * gv);
                    vi.zip_mut_with(&g, |vv, &gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
                    ndarray::Zip::from(&mut p).and(&*mi).and(&*vi).for_each(
                        |pv, &mv, &vv| {
                            let mhat = mv / bc1;
                            let vhat = vv / bc2;
                            *pv -= lr * mhat / (vhat.sqrt() + eps);
                        },
                    );
                    i += 1;
                });
            }
        }
    }
}
