//! 3x3 convolution with padding 1 and stride 1 or 2, via im2col.

use super::linalg::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use super::{kaiming_uniform, Param};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use rand::Rng;

const K: usize = 3;
const PAD: usize = 1;

pub struct Conv2d<T> {
    pub weight: Param<T>, // (cout, cin, 3, 3)
    /// Absent when the conv feeds a normalization layer: a per-channel
    /// constant is cancelled by the normalizer, leaving the parameter
    /// with an identically-zero gradient.
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Forward cache: the unfolded input patches, reused for both the weight
/// gradient and the input gradient.
pub struct ConvCache<T> {
    cols: Vec<T>, // (n, cin*9, oh*ow) flattened
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!(
                "conv stride must be 1 or 2, got {stride}"
            )));
        }
        let fan_in = in_channels * K * K;
        let weight = Param::new(
            format!("{prefix}.weight"),
            kaiming_uniform(&[out_channels, in_channels, K, K], fan_in, rng),
        );
        let bias = with_bias
            .then(|| Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])));
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * PAD - K) / self.stride + 1, (w + 2 * PAD - K) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        x.expect_rank(4, "conv2d input")?;
        let [n, cin, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if cin != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "conv2d input channels".into(),
                expected: vec![self.in_channels],
                got: vec![cin],
            });
        }
        let (oh, ow) = self.out_hw(h, w);
        let ohw = oh * ow;
        let ck = cin * K * K;
        let mut cols = vec![T::zero(); n * ck * ohw];
        let xd = x.data();
        for ni in 0..n {
            let col = &mut cols[ni * ck * ohw..(ni + 1) * ck * ohw];
            for c in 0..cin {
                let plane = &xd[(ni * cin + c) * h * w..(ni * cin + c + 1) * h * w];
                for ky in 0..K {
                    for kx in 0..K {
                        let row = &mut col[(c * K * K + ky * K + kx) * ohw
                            ..(c * K * K + ky * K + kx + 1) * ohw];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                row[oy * ow + ox] = plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }

        let cout = self.out_channels;
        let mut y = Tensor::zeros(&[n, cout, oh, ow]);
        let wd = self.weight.value.data();
        {
            let yd = y.data_mut();
            for ni in 0..n {
                let col = &cols[ni * ck * ohw..(ni + 1) * ck * ohw];
                let out = &mut yd[ni * cout * ohw..(ni + 1) * cout * ohw];
                matmul_acc(wd, col, out, cout, ck, ohw);
                if let Some(bias) = &self.bias {
                    let bd = bias.value.data();
                    for co in 0..cout {
                        let b = bd[co];
                        for v in &mut out[co * ohw..(co + 1) * ohw] {
                            *v += b;
                        }
                    }
                }
            }
        }
        Ok((
            y,
            ConvCache {
                cols,
                in_shape: [n, cin, h, w],
                out_hw: (oh, ow),
            },
        ))
    }

    /// Accumulates weight/bias gradients when `acc_params` is set, and
    /// returns the input gradient when `need_dx` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        acc_params: bool,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let [n, cin, h, w] = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let ohw = oh * ow;
        let ck = cin * K * K;
        let cout = self.out_channels;
        dy.expect_shape(&[n, cout, oh, ow], "conv2d grad")?;
        let dyd = dy.data();

        if acc_params {
            let dwd = self.weight.grad.data_mut();
            for ni in 0..n {
                let col = &cache.cols[ni * ck * ohw..(ni + 1) * ck * ohw];
                let g = &dyd[ni * cout * ohw..(ni + 1) * cout * ohw];
                matmul_abt_acc(g, col, dwd, cout, ohw, ck);
            }
            if let Some(bias) = &mut self.bias {
                let dbd = bias.grad.data_mut();
                for ni in 0..n {
                    let g = &dyd[ni * cout * ohw..(ni + 1) * cout * ohw];
                    for co in 0..cout {
                        let mut s = T::zero();
                        for v in &g[co * ohw..(co + 1) * ohw] {
                            s += *v;
                        }
                        dbd[co] += s;
                    }
                }
            }
        }

        if !need_dx {
            return Ok(None);
        }

        let mut dx = Tensor::zeros(&[n, cin, h, w]);
        let wd = self.weight.value.data();
        let mut dcol = vec![T::zero(); ck * ohw];
        let dxd = dx.data_mut();
        for ni in 0..n {
            dcol.iter_mut().for_each(|v| *v = T::zero());
            let g = &dyd[ni * cout * ohw..(ni + 1) * cout * ohw];
            matmul_atb_acc(wd, g, &mut dcol, ck, cout, ohw);
            // col2im scatter-add.
            for c in 0..cin {
                let plane = &mut dxd[(ni * cin + c) * h * w..(ni * cin + c + 1) * h * w];
                for ky in 0..K {
                    for kx in 0..K {
                        let row = &dcol[(c * K * K + ky * K + kx) * ohw
                            ..(c * K * K + ky * K + kx + 1) * ohw];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        Ok(Some(dx))
    }
}
