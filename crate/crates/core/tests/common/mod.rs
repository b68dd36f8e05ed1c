#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvq::dataio::{load_clip, scan_dataset, Clip, DatasetManifest, Frame, Layout};
use streamvq::degrade::DegradationKind;
use streamvq::labels::{generate_labels, LabelOptions, LabelTable};

/// Two synthetic clips (`scene00`, `scene01`) of 8 frames at 96x96, as PNG.
pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/clips")
}

pub fn fixture_manifest() -> DatasetManifest {
    scan_dataset(&fixture_root(), Layout::DavisStyle).unwrap()
}

pub fn fixture_clips() -> Vec<Clip> {
    let m = fixture_manifest();
    m.clip_ids().map(|id| load_clip(&m, id, None).unwrap()).collect()
}

pub fn fixture_labels(kinds: &[DegradationKind], grid: &[f64]) -> LabelTable {
    let opts = LabelOptions {
        resize_to: Some((96, 96)),
        ..LabelOptions::default()
    };
    generate_labels(&fixture_manifest(), kinds, grid, 0, &opts).unwrap().0
}

pub fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
    Frame::new("r", 0, h, w, data).unwrap()
}

/// Random frame pair: `b` is `a` plus bounded noise, so SSIM is far from 0.
pub fn random_pair(seed: u64, h: usize, w: usize) -> (Frame, Frame) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_frame(&mut rng, h, w);
    let amp = rng.random_range(0.05f32..0.5);
    let data = a.data().iter().map(|&v| (v + amp * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
    let b = Frame::new("r", 0, h, w, data).unwrap();
    (a, b)
}

pub fn psnr_oracle(a: &Frame, b: &Frame) -> f64 {
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    -10.0 * mse.log10()
}

/// Windowed SSIM evaluated window by window with an explicit 2-D kernel.
pub fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
    let (h, w) = (a.height(), a.width());
    let (k, sigma) = (11usize, 1.5f64);
    let r = (k / 2) as f64;
    let mut kern = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            kern[i * k + j] = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for c in 0..3 {
        let (pa, pb) = (a.channel(c), b.channel(c));
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let at = |p: &[f32], i: usize, j: usize| p[(y + i) * w + x + j] as f64;
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += kern[i * k + j] * at(pa, i, j);
                        my += kern[i * k + j] * at(pb, i, j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (dx, dy) = (at(pa, i, j) - mx, at(pb, i, j) - my);
                        vx += kern[i * k + j] * dx * dx;
                        vy += kern[i * k + j] * dy * dy;
                        cxy += kern[i * k + j] * dx * dy;
                    }
                }
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc += sum / count;
    }
    acc / 3.0
}
