//! Per-channel batch normalization over `[batch, channel, ...]`.

use super::Tensor;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics used in evaluation mode. Not learnable.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels] }
    }

    /// Exponential update with the batch mean and unbiased batch variance.
    pub fn update(&mut self, cache: &BnCache<T>) {
        let m = T::lit(BN_MOMENTUM);
        let n = T::from_usize(cache.count).unwrap_or_else(T::one);
        let unbias = if cache.count > 1 { n / (n - T::one()) } else { T::one() };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * cache.var[c] * unbias;
        }
    }
}

/// Batch statistics saved by the training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

const LANES: usize = 16;

/// Sum of `f(a[i], b[i])` over independent lanes so the loop vectorises.
#[inline]
fn lane_sum<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += f(x[l], y[l]);
        }
    }
    let mut total = ar.iter().zip(br).fold(T::zero(), |s, (&x, &y)| s + f(x, y));
    for v in acc {
        total += v;
    }
    total
}

fn layout<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(AadError::invalid("batchnorm expects [batch, channel, ...]"));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if gamma.numel() != c {
        return Err(AadError::ShapeMismatch { expected: vec![c], actual: gamma.shape().to_vec() });
    }
    Ok((b, c, x.numel() / (b * c)))
}

pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (b, c, spatial) = layout(x, gamma)?;
    if b < 2 {
        return Err(AadError::invalid("batchnorm in training mode needs a batch of at least 2"));
    }
    let count = b * spatial;
    let n = T::from_usize(count).unwrap();
    let eps = T::lit(BN_EPS);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let xs = &xd[base..base + spatial];
            mean[ch] += lane_sum(xs, xs, |v, _| v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let m = mean[ch];
            let xs = &xd[base..base + spatial];
            var[ch] += lane_sum(xs, xs, |v, _| (v - m) * (v - m));
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.numel()];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let scale = inv_std[ch] * gamma.data()[ch];
            let shift = beta.data()[ch] - mean[ch] * scale;
            for (o, &v) in y[base..base + spatial].iter_mut().zip(&xd[base..base + spatial]) {
                *o = v * scale + shift;
            }
        }
    }
    Ok((Tensor::from_vec(x.shape(), y)?, BnCache { mean, var, inv_std, count }))
}

pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BatchNormStats<T>,
) -> Result<Tensor<T>> {
    let (b, c, spatial) = layout(x, gamma)?;
    let eps = T::lit(BN_EPS);
    let mut y = x.clone();
    let yd = y.data_mut();
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let k = T::one() / (stats.running_var[ch] + eps).sqrt();
            let (m, g, bt) = (stats.running_mean[ch], gamma.data()[ch], beta.data()[ch]);
            for v in &mut yd[base..base + spatial] {
                *v = (*v - m) * k * g + bt;
            }
        }
    }
    Ok(y)
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn batchnorm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    gy: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (b, c, spatial) = layout(x, gamma)?;
    let n = T::from_usize(cache.count).unwrap();
    let (xd, gd) = (x.data(), gy.data());
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let (m, k) = (cache.mean[ch], cache.inv_std[ch]);
            let (xs, gs) = (&xd[base..base + spatial], &gd[base..base + spatial]);
            sum_g[ch] += lane_sum(gs, gs, |g, _| g);
            sum_gx[ch] += lane_sum(xs, gs, |v, g| g * (v - m)) * k;
        }
    }
    let mut dx = vec![T::zero(); x.numel()];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let (m, k, g) = (cache.mean[ch], cache.inv_std[ch], gamma.data()[ch]);
            // dx = scale * (n g - sum_g - xhat sum_gx), expanded to a * g + b * x + c
            let scale = g * k / n;
            let a = scale * n;
            let bx = -scale * k * sum_gx[ch];
            let c0 = -scale * sum_g[ch] - bx * m;
            for ((o, &v), &gv) in dx[base..base + spatial].iter_mut().zip(&xd[base..base + spatial]).zip(&gd[base..base + spatial]) {
                *o = a * gv + bx * v + c0;
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dgamma: Tensor::from_vec(gamma.shape(), sum_gx)?,
        dbeta: Tensor::from_vec(gamma.shape(), sum_g)?,
    })
}

pub fn batchnorm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchNormStats<T>,
    gy: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (b, c, spatial) = layout(x, gamma)?;
    let eps = T::lit(BN_EPS);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..b {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let k = T::one() / (stats.running_var[ch] + eps).sqrt();
            let m = stats.running_mean[ch];
            for i in base..base + spatial {
                let g = gy.data()[i];
                dx[i] = g * gamma.data()[ch] * k;
                dgamma[ch] += g * (x.data()[i] - m) * k;
                dbeta[ch] += g;
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dgamma: Tensor::from_vec(gamma.shape(), dgamma)?,
        dbeta: Tensor::from_vec(gamma.shape(), dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_moments(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (b, c) = (y.shape()[0], y.shape()[1]);
        let spatial = y.numel() / (b * c);
        let vals: Vec<f64> = (0..b)
            .flat_map(|s| y.data()[(s * c + ch) * spatial..(s * c + ch + 1) * spatial].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn normalizes_channel_to_zero_mean_unit_variance() {
        // channel mean 5, variance 4
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![3.0f64, 7.0, 3.0, 7.0]).unwrap();
        let (y, cache) = batchnorm_train_forward(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1])).unwrap();
        assert!((cache.mean[0] - 5.0).abs() < 1e-12 && (cache.var[0] - 4.0).abs() < 1e-12);
        let (m, v) = channel_moments(&y, 0);
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn affine_law() {
        let x = Tensor::from_fn(&[3, 2, 2, 3], |i| ((i * 37) % 11) as f64);
        let (y, _) = batchnorm_train_forward(&x, &Tensor::full(&[2], 2.0), &Tensor::full(&[2], 1.0)).unwrap();
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!((m - 1.0).abs() < 1e-9);
            assert!((v - 4.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let stats = BatchNormStats { running_mean: vec![3.0], running_var: vec![1.0] };
        let x = Tensor::full(&[1, 1, 1, 1], 3.0);
        let y = batchnorm_eval_forward(&x, &Tensor::full(&[1], 1.7), &Tensor::full(&[1], 0.25), &stats).unwrap();
        assert_eq!(y.data(), &[0.25]);
    }

    #[test]
    fn single_sample_batch_rejected_in_training() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        assert!(batchnorm_train_forward(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let mut stats = BatchNormStats::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (_, cache) = batchnorm_train_forward(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1])).unwrap();
        stats.update(&cache);
        assert!((stats.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((stats.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
