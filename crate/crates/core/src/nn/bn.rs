//! Per-channel batch normalization over `(N, H, W)`.

use super::{Real, Tensor};

pub const EPS: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.1;

pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Normalized with fixed running statistics, so they carry no gradient.
    pub frozen: bool,
}

/// Batch statistics for one forward pass: mean and unbiased variance.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn for_channel<T: Real>(n: usize, c: usize, hw: usize, ch: usize, mut f: impl FnMut(usize)) {
    for b in 0..n {
        let base = (b * c + ch) * hw;
        for i in base..base + hw {
            f(i);
        }
    }
}

pub fn forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut y = x.clone();
    let eps = T::of(EPS);
    let d = y.data_mut();
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for_channel::<T>(n, c, hw, ch, |i| d[i] = d[i] * scale + shift);
    }
    y
}

pub fn forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BnCache<T>, BnStats<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = n * hw;
    let eps = T::of(EPS);
    let xs = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); c];
    let mut stats = BnStats {
        mean: vec![T::zero(); c],
        var_unbiased: vec![T::zero(); c],
    };
    for ch in 0..c {
        let mut sum = T::zero();
        for_channel::<T>(n, c, hw, ch, |i| sum += xs[i]);
        let mean = sum / T::of(m as f64);
        let mut sq = T::zero();
        for_channel::<T>(n, c, hw, ch, |i| {
            let d = xs[i] - mean;
            sq += d * d;
        });
        let var = sq / T::of(m as f64);
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        stats.mean[ch] = mean;
        stats.var_unbiased[ch] = if m > 1 { sq / T::of((m - 1) as f64) } else { var };
        let xh = xhat.data_mut();
        let ys = y.data_mut();
        for_channel::<T>(n, c, hw, ch, |i| {
            let v = (xs[i] - mean) * is;
            xh[i] = v;
            ys[i] = v * gamma[ch] + beta[ch];
        });
    }
    (y, BnCache { xhat, inv_std, frozen: false }, stats)
}

/// Training-mode pass that normalizes with the running statistics.
pub fn forward_frozen<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Tensor<T>, BnCache<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let eps = T::of(EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    let (xh, ys) = (xhat.data_mut(), y.data_mut());
    for ch in 0..c {
        for_channel::<T>(n, c, hw, ch, |i| {
            xh[i] = (xh[i] - running_mean[ch]) * inv_std[ch];
            ys[i] = xh[i] * gamma[ch] + beta[ch];
        });
    }
    (y, BnCache { xhat, inv_std, frozen: true })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn backward<T: Real>(cache: &BnCache<T>, gamma: &[T], dy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let dys = dy.data();
    let xh = cache.xhat.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for_channel::<T>(n, c, hw, ch, |i| {
            sdy += dys[i];
            sdyx += dys[i] * xh[i];
        });
        dgamma[ch] = sdyx;
        dbeta[ch] = sdy;
        let d = dx.data_mut();
        if cache.frozen {
            let k = gamma[ch] * cache.inv_std[ch];
            for_channel::<T>(n, c, hw, ch, |i| d[i] = k * dys[i]);
            continue;
        }
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for_channel::<T>(n, c, hw, ch, |i| {
            d[i] = k * (m * dys[i] - sdy - xh[i] * sdyx);
        });
    }
    (dx, dgamma, dbeta)
}

pub fn update_running<T: Real>(running_mean: &mut [T], running_var: &mut [T], stats: &BnStats<T>) {
    let mo = T::of(MOMENTUM);
    for ((rm, rv), (m, v)) in running_mean
        .iter_mut()
        .zip(running_var.iter_mut())
        .zip(stats.mean.iter().zip(&stats.var_unbiased))
    {
        *rm = (T::one() - mo) * *rm + mo * *m;
        *rv = (T::one() - mo) * *rv + mo * *v;
    }
}
