//! Group normalization. The zoo always uses group size 1 (one channel per
//! group), which keeps normalization free of batch statistics — each sample
//! normalizes over its own channel's spatial extent.

use ndarray::{Array1, Array4};

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub num_groups: usize,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
    // caches
    xhat: Option<Array4<f64>>,
    inv_std: Option<ndarray::Array2<f64>>, // (n, groups)
}

impl GroupNorm {
    pub fn new(num_groups: usize, channels: usize) -> Self {
        assert!(channels % num_groups == 0, "channels divisible by groups");
        GroupNorm {
            num_groups,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            xhat: None,
            inv_std: None,
        }
    }

    /// Per group size 1: one group per channel.
    pub fn per_channel(channels: usize) -> Self {
        GroupNorm::new(channels, channels)
    }

    pub fn forward(&mut self, x: &Array4<f64>, keep: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let g = self.num_groups;
        let cs = c / g; // channels per group
        let m = (cs * h * w) as f64;
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = ndarray::Array2::zeros((n, g));
        for i in 0..n {
            for gi in 0..g {
                let c0 = gi * cs;
                let mut mean = 0.0;
                for ci in c0..c0 + cs {
                    for y in 0..h {
                        for xx in 0..w {
                            mean += x[(i, ci, y, xx)];
                        }
                    }
                }
                mean /= m;
                let mut var = 0.0;
                for ci in c0..c0 + cs {
                    for y in 0..h {
                        for xx in 0..w {
                            let d = x[(i, ci, y, xx)] - mean;
                            var += d * d;
                        }
                    }
                }
                var /= m;
                let istd = 1.0 / (var + GN_EPS).sqrt();
                inv_std[(i, gi)] = istd;
                for ci in c0..c0 + cs {
                    for y in 0..h {
                        for xx in 0..w {
                            xhat[(i, ci, y, xx)] = (x[(i, ci, y, xx)] - mean) * istd;
                        }
                    }
                }
            }
        }
        let mut out = xhat.clone();
        for ci in 0..c {
            let mut view = out.index_axis_mut(ndarray::Axis(1), ci);
            view.mapv_inplace(|v| v * self.gamma[ci]);
            view += self.beta[ci];
        }
        if keep {
            self.xhat = Some(xhat);
            self.inv_std = Some(inv_std);
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let xhat = self.xhat.take().expect("groupnorm backward without forward");
        let inv_std = self.inv_std.take().expect("groupnorm cache");
        let (n, c, h, w) = dy.dim();
        let g = self.num_groups;
        let cs = c / g;
        let m = (cs * h * w) as f64;

        for ci in 0..c {
            let dy_c = dy.index_axis(ndarray::Axis(1), ci);
            let xh_c = xhat.index_axis(ndarray::Axis(1), ci);
            self.gbeta[ci] += dy_c.sum();
            self.ggamma[ci] += (&dy_c * &xh_c).sum();
        }

        // dxhat = dy * gamma; then the standard normalization backward per group:
        // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for gi in 0..g {
                let c0 = gi * cs;
                let mut s1 = 0.0; // Σ dxhat
                let mut s2 = 0.0; // Σ dxhat ⊙ xhat
                for ci in c0..c0 + cs {
                    for y in 0..h {
                        for xx in 0..w {
                            let dxh = dy[(i, ci, y, xx)] * self.gamma[ci];
                            s1 += dxh;
                            s2 += dxh * xhat[(i, ci, y, xx)];
                        }
                    }
                }
                let istd = inv_std[(i, gi)];
                for ci in c0..c0 + cs {
                    for y in 0..h {
                        for xx in 0..w {
                            let dxh = dy[(i, ci, y, xx)] * self.gamma[ci];
                            dx[(i, ci, y, xx)] =
                                istd * (dxh - s1 / m - xhat[(i, ci, y, xx)] * s2 / m);
                        }
                    }
                }
            }
        }
        dx
    }
}
