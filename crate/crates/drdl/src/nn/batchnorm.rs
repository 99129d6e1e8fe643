//! Batch normalization over the channel axis, for (N, C) feature vectors
//! and (N, C, H, W) maps.
//!
//! Train-mode normalization uses batch statistics (biased variance) and
//! the backward pass differentiates through them. Running statistics are
//! updated with momentum 0.1, using the unbiased batch variance when more
//! than one element per channel is available (framework convention).

use super::{Param, Phase};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    used_batch_stats: bool,
    n: usize,
    spatial: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn dims(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        let ok = (s.len() == 2 || s.len() == 4) && s.get(1) == Some(&self.channels);
        if !ok {
            return Err(Error::ShapeMismatch {
                context: "batch_norm input".into(),
                expected: vec![0, self.channels],
                got: s.to_vec(),
            });
        }
        let spatial = if s.len() == 4 { s[2] * s[3] } else { 1 };
        Ok((s[0], spatial))
    }

    pub fn forward(&mut self, x: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, BnCache<T>)> {
        let (n, spatial) = self.dims(x)?;
        let c = self.channels;
        let m = n * spatial;
        let eps = T::from_f64(self.eps);

        let (mean, var) = if phase.uses_batch_stats() {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let xd = x.data();
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * spatial;
                    for v in &xd[base..base + spatial] {
                        s += *v;
                    }
                }
                mean[ci] = s / T::from_f64(m as f64);
            }
            for ci in 0..c {
                let mu = mean[ci];
                let mut s = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * spatial;
                    for v in &xd[base..base + spatial] {
                        let d = *v - mu;
                        s += d * d;
                    }
                }
                var[ci] = s / T::from_f64(m as f64);
            }
            if phase.updates_running_stats() {
                let mom = T::from_f64(self.momentum);
                let one_m = T::one() - mom;
                let bessel = if m > 1 {
                    T::from_f64(m as f64 / (m as f64 - 1.0))
                } else {
                    T::one()
                };
                for ci in 0..c {
                    let rm = self.running_mean.data_mut();
                    rm[ci] = one_m * rm[ci] + mom * mean[ci];
                    let rv = self.running_var.data_mut();
                    rv[ci] = one_m * rv[ci] + mom * var[ci] * bessel;
                }
            }
            (mean, var)
        } else {
            (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            )
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        {
            let xd = x.data();
            let xh = x_hat.data_mut();
            let yd = y.data_mut();
            let g = self.gamma.value.data();
            let b = self.beta.value.data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    let mu = mean[ci];
                    let is = inv_std[ci];
                    for s in 0..spatial {
                        let h = (xd[base + s] - mu) * is;
                        xh[base + s] = h;
                        yd[base + s] = g[ci] * h + b[ci];
                    }
                }
            }
        }
        Ok((
            y,
            BnCache {
                x_hat,
                inv_std,
                used_batch_stats: phase.uses_batch_stats(),
                n,
                spatial,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        acc_params: bool,
    ) -> Result<Tensor<T>> {
        dy.expect_shape(cache.x_hat.shape(), "batch_norm grad")?;
        let c = self.channels;
        let n = cache.n;
        let spatial = cache.spatial;
        let m = n * spatial;
        let dyd = dy.data();
        let xh = cache.x_hat.data();

        // Per-channel sums of dy and dy*x_hat.
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let mut a = T::zero();
                let mut b = T::zero();
                for s in 0..spatial {
                    a += dyd[base + s];
                    b += dyd[base + s] * xh[base + s];
                }
                sum_dy[ci] += a;
                sum_dy_xh[ci] += b;
            }
        }

        if acc_params {
            let dg = self.gamma.grad.data_mut();
            let db = self.beta.grad.data_mut();
            for ci in 0..c {
                dg[ci] += sum_dy_xh[ci];
                db[ci] += sum_dy[ci];
            }
        }

        let g = self.gamma.value.data();
        let mut dx = Tensor::zeros(cache.x_hat.shape());
        let dxd = dx.data_mut();
        if cache.used_batch_stats {
            let inv_m = T::from_f64(1.0 / m as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    let k = g[ci] * cache.inv_std[ci];
                    let mdy = sum_dy[ci] * inv_m;
                    let mdyxh = sum_dy_xh[ci] * inv_m;
                    for s in 0..spatial {
                        dxd[base + s] = k * (dyd[base + s] - mdy - xh[base + s] * mdyxh);
                    }
                }
            }
        } else {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    let k = g[ci] * cache.inv_std[ci];
                    for s in 0..spatial {
                        dxd[base + s] = k * dyd[base + s];
                    }
                }
            }
        }
        Ok(dx)
    }
}
