//! Full-reference metrics and their normalization into `[0, 1]` quality scores
//! where 1 means "indistinguishable from the reference".

use serde::{Deserialize, Serialize};

use crate::dataio::Frame;
use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_forward, ConvGeom};
use crate::nn::{relu_inplace, Tensor};
use crate::rng::{self, Stream};

pub const PSNR_FLOOR_DB: f64 = 10.0;
pub const PSNR_CEIL_DB: f64 = 50.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 1.0;

/// Normalized `(lpips_q, psnr_q, ssim_q)`, each in `[0, 1]`, higher is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityTriplet {
    pub lpips_q: f64,
    pub psnr_q: f64,
    pub ssim_q: f64,
}

impl QualityTriplet {
    pub const PERFECT: QualityTriplet = QualityTriplet {
        lpips_q: 1.0,
        psnr_q: 1.0,
        ssim_q: 1.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.lpips_q, self.psnr_q, self.ssim_q]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            lpips_q: a[0],
            psnr_q: a[1],
            ssim_q: a[2],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

fn check_dims(a: &Frame, b: &Frame) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Param(format!(
            "frame dimensions differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(reference: &Frame, degraded: &Frame) -> Result<f64> {
    check_dims(reference, degraded)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(degraded.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.data().len() as f64)
}

/// Peak is 1.0. Identical frames give `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr_db(reference: &Frame, degraded: &Frame) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, degraded)?))
}

/// Clamps to `[10, 50]` dB and maps linearly onto `[0, 1]`.
pub fn normalize_psnr(db: f64) -> f64 {
    if db.is_nan() {
        return 0.0;
    }
    (db.clamp(PSNR_FLOOR_DB, PSNR_CEIL_DB) - PSNR_FLOOR_DB) / (PSNR_CEIL_DB - PSNR_FLOOR_DB)
}

/// Normalized 1-D taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-region separable filter of a plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let taps = ssim_taps();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM over all valid 11x11 Gaussian windows, averaged over RGB.
pub fn ssim(reference: &Frame, degraded: &Frame) -> Result<f64> {
    check_dims(reference, degraded)?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Param(format!(
            "frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let s: f64 = (0..3)
        .map(|c| ssim_plane(reference.channel(c), degraded.channel(c), h, w))
        .sum();
    Ok(s / 3.0)
}

pub fn ssim_quality(s: f64) -> f64 {
    s.clamp(0.0, 1.0)
}

pub fn lpips_quality(d: f64) -> f64 {
    (1.0 - d).clamp(0.0, 1.0)
}

const INPUT_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const INPUT_SCALE: [f64; 3] = [0.458, 0.448, 0.450];

/// Fixed random-weight convolutional feature stack used as the built-in
/// perceptual distance.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    layers: Vec<(ConvGeom, Vec<f64>)>,
    weight_seed: u64,
}

impl PerceptualExtractor {
    pub const DEFAULT_SEED: u64 = 0x1f_2e_3d;

    /// Three 3x3 stride-2 stages, 3 -> 16 -> 32 -> 64 channels, unit-variance weights.
    pub fn new(weight_seed: u64) -> Self {
        Self::with_channels(&[3, 16, 32, 64], weight_seed)
    }

    pub fn with_channels(channels: &[usize], weight_seed: u64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let layers = channels
            .windows(2)
            .enumerate()
            .map(|(l, io)| {
                let geom = ConvGeom {
                    in_ch: io[0],
                    out_ch: io[1],
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                };
                let mut r = rng::keyed_u64(weight_seed, Stream::ExtractorWeights, &[l as u64]);
                let w = (0..geom.out_ch * geom.patch_len())
                    .map(|_| StandardNormal.sample(&mut r))
                    .collect();
                (geom, w)
            })
            .collect();
        Self { layers, weight_seed }
    }

    pub fn weight_seed(&self) -> u64 {
        self.weight_seed
    }

    pub fn describe(&self) -> String {
        let stages: Vec<String> = self
            .layers
            .iter()
            .map(|(g, _)| format!("{}->{}", g.in_ch, g.out_ch))
            .collect();
        format!("random-conv3x3s2[{}]/seed={}", stages.join(","), self.weight_seed)
    }

    /// Per-stage activations of a frame. Inputs are mapped to `[-1, 1]` and
    /// then through the fixed per-channel scaling layer used by LPIPS.
    pub fn features(&self, frame: &Frame) -> Vec<Tensor<f64>> {
        let n = frame.height() * frame.width();
        let data = frame
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / n;
                (2.0 * v as f64 - 1.0 - INPUT_SHIFT[c]) / INPUT_SCALE[c]
            })
            .collect();
        let mut x = Tensor::from_vec(&[1, 3, frame.height(), frame.width()], data).expect("frame shape");
        let mut out = Vec::with_capacity(self.layers.len());
        for (geom, w) in &self.layers {
            x = conv2d_forward(geom, &x, w);
            relu_inplace(x.data_mut());
            out.push(x.clone());
        }
        out
    }
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

fn unit_normalize_channels(t: &Tensor<f64>) -> Vec<f64> {
    let (_, c, h, w) = t.dims4();
    let hw = h * w;
    let d = t.data();
    let mut out = d.to_vec();
    for p in 0..hw {
        let norm = (0..c).map(|ch| d[ch * hw + p].powi(2)).sum::<f64>().sqrt();
        for ch in 0..c {
            out[ch * hw + p] = d[ch * hw + p] / (norm + 1e-10);
        }
    }
    out
}

/// Sum over stages of the position-averaged squared distance between
/// channel-normalized activations.
pub fn perceptual_distance(reference: &Frame, degraded: &Frame, extractor: &PerceptualExtractor) -> Result<f64> {
    check_dims(reference, degraded)?;
    let fa = extractor.features(reference);
    let fb = extractor.features(degraded);
    Ok(fa
        .iter()
        .zip(&fb)
        .map(|(a, b)| {
            let (_, _, h, w) = a.dims4();
            let hw = h * w;
            let na = unit_normalize_channels(a);
            let nb = unit_normalize_channels(b);
            let sq: f64 = na.iter().zip(&nb).map(|(p, q)| (p - q).powi(2)).sum();
            sq / hw as f64
        })
        .sum())
}

pub fn quality_triplet(reference: &Frame, degraded: &Frame, extractor: &PerceptualExtractor) -> Result<QualityTriplet> {
    Ok(QualityTriplet {
        lpips_q: lpips_quality(perceptual_distance(reference, degraded, extractor)?),
        psnr_q: normalize_psnr(psnr_db(reference, degraded)?),
        ssim_q: ssim_quality(ssim(reference, degraded)?),
    })
}
