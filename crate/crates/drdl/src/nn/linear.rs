//! Fully connected layer, torch weight layout (out, in).

use super::linalg::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use super::{kaiming_uniform, Param};
use crate::tensor::{Scalar, Tensor};
use crate::Result;
use rand::Rng;

pub struct Linear<T> {
    pub weight: Param<T>, // (out, in)
    /// Absent when the layer feeds a normalization layer; see `Conv2d`.
    pub bias: Option<Param<T>>,
    pub in_features: usize,
    pub out_features: usize,
}

pub struct LinearCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        prefix: &str,
        in_features: usize,
        out_features: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: Param::new(
                format!("{prefix}.weight"),
                kaiming_uniform(&[out_features, in_features], in_features, rng),
            ),
            bias: with_bias
                .then(|| Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_features]))),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        x.expect_rank(2, "linear input")?;
        let n = x.shape()[0];
        x.expect_shape(&[n, self.in_features], "linear input")?;
        let mut y = Tensor::zeros(&[n, self.out_features]);
        matmul_abt_acc(
            x.data(),
            self.weight.value.data(),
            y.data_mut(),
            n,
            self.in_features,
            self.out_features,
        );
        if let Some(bias) = &self.bias {
            let b = bias.value.data();
            let yd = y.data_mut();
            for i in 0..n {
                for (o, bv) in b.iter().enumerate() {
                    yd[i * self.out_features + o] += *bv;
                }
            }
        }
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(
        &mut self,
        cache: &LinearCache<T>,
        dy: &Tensor<T>,
        acc_params: bool,
    ) -> Result<Tensor<T>> {
        let n = cache.input.shape()[0];
        dy.expect_shape(&[n, self.out_features], "linear grad")?;
        if acc_params {
            // dW[o,j] = sum_i dy[i,o] * x[i,j]
            matmul_atb_acc(
                dy.data(),
                cache.input.data(),
                self.weight.grad.data_mut(),
                self.out_features,
                n,
                self.in_features,
            );
            if let Some(bias) = &mut self.bias {
                let db = bias.grad.data_mut();
                let dyd = dy.data();
                for i in 0..n {
                    for (o, dbo) in db.iter_mut().enumerate() {
                        *dbo += dyd[i * self.out_features + o];
                    }
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_features]);
        matmul_acc(
            dy.data(),
            self.weight.value.data(),
            dx.data_mut(),
            n,
            self.out_features,
            self.in_features,
        );
        Ok(dx)
    }
}
