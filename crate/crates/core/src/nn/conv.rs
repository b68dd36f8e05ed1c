//! 2-D convolution via im2col + GEMM, NCHW layout, no bias.

use super::{gemm, MatRef, Real, Tensor};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// `cols[(c*k + ky)*k + kx][oy*wo + ox]`
    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        dx.fill(T::zero());
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(geom: &ConvGeom, x: &Tensor<T>, weight: &[T]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, geom.in_ch, "conv input channels");
    assert_eq!(weight.len(), geom.out_ch * geom.patch_len());
    let (ho, wo) = geom.out_size(h, w);
    let mut out = Tensor::zeros(&[n, geom.out_ch, ho, wo]);
    let per_in = c * h * w;
    let per_out = geom.out_ch * ho * wo;
    let wmat = MatRef::new(weight, geom.out_ch, geom.patch_len());
    par::for_each_chunk_mut(out.data_mut(), per_out.max(1), |i, y| {
        let xi = &x.data()[i * per_in..(i + 1) * per_in];
        if geom.is_pointwise() {
            gemm(T::one(), wmat, MatRef::new(xi, c, h * w), T::zero(), y);
        } else {
            let mut cols = vec![T::zero(); geom.patch_len() * ho * wo];
            geom.im2col(xi, h, w, &mut cols);
            gemm(T::one(), wmat, MatRef::new(&cols, geom.patch_len(), ho * wo), T::zero(), y);
        }
    });
    out
}

/// Returns `(dx, dweight)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward<T: Real>(
    geom: &ConvGeom,
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let (_, o, ho, wo) = dy.dims4();
    let per_in = c * h * w;
    let per_out = o * ho * wo;
    let plen = geom.patch_len();
    let wmat = MatRef::new(weight, o, plen);
    let parts = par::map(n, |i| {
        let xi = &x.data()[i * per_in..(i + 1) * per_in];
        let dyi = MatRef::new(&dy.data()[i * per_out..(i + 1) * per_out], o, ho * wo);
        let mut dw = vec![T::zero(); o * plen];
        let mut dx = None;
        if geom.is_pointwise() {
            gemm(T::one(), dyi, MatRef::new(xi, c, h * w).t(), T::zero(), &mut dw);
            if need_dx {
                let mut d = vec![T::zero(); per_in];
                gemm(T::one(), wmat.t(), dyi, T::zero(), &mut d);
                dx = Some(d);
            }
        } else {
            let mut cols = vec![T::zero(); plen * ho * wo];
            geom.im2col(xi, h, w, &mut cols);
            gemm(T::one(), dyi, MatRef::new(&cols, plen, ho * wo).t(), T::zero(), &mut dw);
            if need_dx {
                gemm(T::one(), wmat.t(), dyi, T::zero(), &mut cols);
                let mut d = vec![T::zero(); per_in];
                geom.col2im(&cols, h, w, &mut d);
                dx = Some(d);
            }
        }
        (dx, dw)
    });
    let mut dweight = vec![T::zero(); o * plen];
    let mut dx = need_dx.then(|| Vec::with_capacity(n * per_in));
    for (dxi, dwi) in parts {
        for (a, b) in dweight.iter_mut().zip(dwi) {
            *a += b;
        }
        if let (Some(all), Some(d)) = (dx.as_mut(), dxi) {
            all.extend(d);
        }
    }
    (
        dx.map(|d| Tensor::from_vec(&[n, c, h, w], d).expect("shape")),
        dweight,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    fn direct(geom: &ConvGeom, x: &Tensor<f64>, wt: &[f64]) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = geom.out_size(h, w);
        let k = geom.kernel;
        let mut out = Tensor::zeros(&[n, geom.out_ch, ho, wo]);
        for b in 0..n {
            for o in 0..geom.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * c + ci) * k + ky) * k + kx]
                                        * x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * geom.out_ch + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        for geom in [
            ConvGeom { in_ch: 3, out_ch: 4, kernel: 7, stride: 2, pad: 3 },
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, pad: 1 },
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 1, stride: 2, pad: 0 },
            ConvGeom { in_ch: 2, out_ch: 3, kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = Tensor::from_vec(&[2, geom.in_ch, 9, 8], lcg(2 * geom.in_ch * 72, 1)).unwrap();
            let wt = lcg(geom.out_ch * geom.patch_len(), 2);
            let a = conv2d_forward(&geom, &x, &wt);
            let b = direct(&geom, &x, &wt);
            assert!(a.max_abs_diff(&b) < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let geom = ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let x = Tensor::from_vec(&[2, 2, 7, 6], lcg(2 * 2 * 42, 3)).unwrap();
        let wt = lcg(3 * 18, 4);
        let dy_v = lcg(2 * 3 * 4 * 3, 5);
        let dy = Tensor::from_vec(&[2, 3, 4, 3], dy_v.clone()).unwrap();
        let loss = |x: &Tensor<f64>, w: &[f64]| -> f64 {
            conv2d_forward(&geom, x, w).data().iter().zip(&dy_v).map(|(a, b)| a * b).sum()
        };
        let (dx, dw) = conv2d_backward(&geom, &x, &wt, &dy, true);
        let dx = dx.unwrap();
        let eps = 1e-6;
        for i in [0, 7, 20, 53] {
            let mut wp = wt.clone();
            wp[i] += eps;
            let mut wm = wt.clone();
            wm[i] -= eps;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
        for i in [0, 13, 40, 167] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp, &wt) - loss(&xm, &wt)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
    }
}
