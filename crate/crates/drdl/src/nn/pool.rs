//! Global spatial pooling: (N, C, H, W) -> (N, C).

use crate::tensor::{Scalar, Tensor};
use crate::Result;

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(4, "global_avg_pool input")?;
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hw = h * w;
    let inv = T::from_f64(1.0 / hw as f64);
    let mut y = Tensor::zeros(&[n, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..n * c {
        let mut s = T::zero();
        for v in &xd[i * hw..(i + 1) * hw] {
            s += *v;
        }
        yd[i] = s * inv;
    }
    Ok(y)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, map_shape: &[usize]) -> Tensor<T> {
    let hw = map_shape[2] * map_shape[3];
    let inv = T::from_f64(1.0 / hw as f64);
    let mut dx = Tensor::zeros(map_shape);
    let dxd = dx.data_mut();
    for (i, g) in dy.data().iter().enumerate() {
        let v = *g * inv;
        for d in &mut dxd[i * hw..(i + 1) * hw] {
            *d = v;
        }
    }
    dx
}

/// Returns pooled values and the flat spatial argmax per (n, c). Ties are
/// broken toward the lowest flat index.
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    x.expect_rank(4, "global_max_pool input")?;
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hw = h * w;
    let mut y = Tensor::zeros(&[n, c]);
    let mut arg = vec![0usize; n * c];
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..n * c {
        let plane = &xd[i * hw..(i + 1) * hw];
        let mut best = plane[0];
        let mut bi = 0usize;
        for (j, v) in plane.iter().enumerate().skip(1) {
            if *v > best {
                best = *v;
                bi = j;
            }
        }
        yd[i] = best;
        arg[i] = bi;
    }
    Ok((y, arg))
}

/// Routes each channel's gradient entirely to the recorded argmax.
pub fn global_max_pool_backward<T: Scalar>(
    dy: &Tensor<T>,
    argmax: &[usize],
    map_shape: &[usize],
) -> Tensor<T> {
    let hw = map_shape[2] * map_shape[3];
    let mut dx = Tensor::zeros(map_shape);
    let dxd = dx.data_mut();
    for (i, g) in dy.data().iter().enumerate() {
        dxd[i * hw + argmax[i]] += *g;
    }
    dx
}
