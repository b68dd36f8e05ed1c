//! 3x3 / stride 2 / pad 1 max pooling and global average pooling.

use super::{Real, Tensor};

pub fn maxpool_out(h: usize) -> usize {
    (h + 2 - 3) / 2 + 1
}

/// Returns the pooled map and, per output cell, the flat input index it came from.
pub fn maxpool3s2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (maxpool_out(h), maxpool_out(w));
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xs = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                od[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool3s2_backward<T: Real>(input_shape: &[usize], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dy.data()) {
        d[i as usize] += g;
    }
    dx
}

/// `(n, c, h, w) -> (n, c)` spatial mean.
pub fn global_avg<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    x.data()
        .chunks(hw)
        .take(n * c)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}
