//! Per-channel batch normalization over NCHW activations.

// Channel loops walk several parallel buffers by flat index.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Cached quantities from a train-mode forward, reused by the backward pass.
pub struct BnTrainCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

fn check(x: &Tensor, params: &[(&str, &Tensor)]) -> Result<[usize; 4]> {
    if x.rank() != 4 && x.rank() != 2 {
        return Err(Error::shape("batchnorm2d", "input rank", "2 or 4", x.rank()));
    }
    let d = if x.rank() == 2 {
        [x.dims()[0], x.dims()[1], 1, 1]
    } else {
        x.nchw()
    };
    for (name, p) in params {
        if p.numel() != d[1] {
            return Err(Error::shape("batchnorm2d", *name, d[1], p.numel()));
        }
    }
    Ok(d)
}

pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, BnTrainCache)> {
    let [n, c, h, w] = check(x, &[("gamma", gamma), ("beta", beta)])?;
    let hw = h * w;
    let count = n * hw;
    if count == 0 {
        return Err(Error::Param("batchnorm2d on an empty batch".into()));
    }
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += xd[(b * c + ch) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count as f64;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += xd[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
    let mut xhat = vec![0.0f32; xd.len()];
    let mut y = vec![0.0f32; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let g = gamma.data()[ch] as f64;
            let be = beta.data()[ch] as f64;
            for i in base..base + hw {
                let xh = (xd[i] as f64 - mean[ch]) * inv_std[ch];
                xhat[i] = xh as f32;
                y[i] = (xh * g + be) as f32;
            }
        }
    }
    Ok((
        Tensor::new(x.dims(), y)?,
        BnTrainCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_train_backward(
    dy: &Tensor,
    gamma: &Tensor,
    cache: &BnTrainCache,
) -> (Tensor, Tensor, Tensor) {
    let d = if dy.rank() == 2 {
        [dy.dims()[0], dy.dims()[1], 1, 1]
    } else {
        dy.nchw()
    };
    let [n, c, h, w] = d;
    let hw = h * w;
    let m = cache.count as f64;
    let dyd = dy.data();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = vec![0.0f32; dyd.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sum_dy += dyd[i] as f64;
                sum_dy_xhat += dyd[i] as f64 * cache.xhat[i] as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let k = gamma.data()[ch] as f64 * cache.inv_std[ch] / m;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = (k * (m * dyd[i] as f64 - sum_dy - cache.xhat[i] as f64 * sum_dy_xhat))
                    as f32;
            }
        }
    }
    (
        Tensor::new(dy.dims(), dx).expect("dims preserved"),
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    )
}

/// Per-channel affine coefficients `y = x·scale + shift` equivalent to eval-mode BN.
pub fn eval_affine(
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> (Vec<f64>, Vec<f64>) {
    let c = gamma.numel();
    let mut scale = vec![0.0; c];
    let mut shift = vec![0.0; c];
    for ch in 0..c {
        let s = gamma.data()[ch] as f64 / (var.data()[ch] as f64 + eps as f64).sqrt();
        scale[ch] = s;
        shift[ch] = beta.data()[ch] as f64 - mean.data()[ch] as f64 * s;
    }
    (scale, shift)
}

pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let [n, c, h, w] = check(
        x,
        &[("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)],
    )?;
    if n == 0 {
        return Err(Error::Param("batchnorm2d on an empty batch".into()));
    }
    let hw = h * w;
    let (scale, shift) = eval_affine(gamma, beta, mean, var, eps);
    let mut y = vec![0.0f32; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                y[i] = (x.data()[i] as f64 * scale[ch] + shift[ch]) as f32;
            }
        }
    }
    Tensor::new(x.dims(), y)
}

/// Returns (dx, dgamma, dbeta) for eval-mode BN.
pub fn batchnorm_eval_backward(
    dy: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> (Tensor, Tensor, Tensor) {
    let d = if dy.rank() == 2 {
        [dy.dims()[0], dy.dims()[1], 1, 1]
    } else {
        dy.nchw()
    };
    let [n, c, h, w] = d;
    let hw = h * w;
    let mut dx = vec![0.0f32; dy.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var.data()[ch] as f64 + eps as f64).sqrt();
            let g = gamma.data()[ch] as f64;
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let g_out = dy.data()[i] as f64;
                dx[i] = (g_out * g * inv) as f32;
                dgamma[ch] += g_out * (x.data()[i] as f64 - mean.data()[ch] as f64) * inv;
                dbeta[ch] += g_out;
            }
        }
    }
    (
        Tensor::new(dy.dims(), dx).expect("dims preserved"),
        Tensor::from_vec(dgamma.into_iter().map(|v| v as f32).collect()),
        Tensor::from_vec(dbeta.into_iter().map(|v| v as f32).collect()),
    )
}

/// Exponential moving update of running statistics (unbiased variance).
pub fn update_running(running_mean: &mut Tensor, running_var: &mut Tensor, cache: &BnTrainCache) {
    update_running_stats(running_mean, running_var, &cache.mean, &cache.var, cache.count);
}

/// Same as [`update_running`] from raw batch statistics; `var` is the biased batch variance.
pub fn update_running_stats(
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    mean: &[f64],
    var: &[f64],
    count: usize,
) {
    let m = count as f64;
    let unbias = if count > 1 { m / (m - 1.0) } else { 1.0 };
    for ch in 0..running_mean.numel() {
        let rm = &mut running_mean.data_mut()[ch];
        *rm = ((1.0 - BN_MOMENTUM) * *rm as f64 + BN_MOMENTUM * mean[ch]) as f32;
        let rv = &mut running_var.data_mut()[ch];
        *rv = ((1.0 - BN_MOMENTUM) * *rv as f64 + BN_MOMENTUM * var[ch] * unbias) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor {
        Tensor::full(&[c], 1.0)
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = Tensor::new(&[2, 2, 1, 2], vec![1.0, -2.0, 3.5, 0.25, 7.0, 8.0, -9.0, 1e-3]).unwrap();
        let y = batchnorm_eval(&x, &ones(2), &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &ones(2), 0.0)
            .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full(&[4, 2, 3, 3], 2.5);
        let beta = Tensor::from_vec(vec![0.3, -0.7]);
        let (y, cache) = batchnorm_train(&x, &ones(2), &beta, BN_EPS).unwrap();
        for b in 0..4 {
            for ch in 0..2 {
                for i in 0..9 {
                    assert!((y.data()[(b * 2 + ch) * 9 + i] - beta.data()[ch]).abs() < 1e-6);
                }
            }
        }
        assert_eq!(cache.var, vec![0.0, 0.0]);
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (_, cache) = batchnorm_train(&x, &ones(1), &Tensor::zeros(&[1]), BN_EPS).unwrap();
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = ones(1);
        update_running(&mut rm, &mut rv, &cache);
        // batch mean 2, unbiased variance 2
        assert!((rm.item() - 0.2).abs() < 1e-7);
        assert!((rv.item() - (0.9 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(batchnorm_train(&x, &ones(2), &Tensor::zeros(&[2]), BN_EPS).is_err());
    }
}
