//! Deterministic synthetic degradations parameterized by an amplitude in `[0, 1]`.
//!
//! Training uses blur, JPEG and brightness; validation uses noise, saturation
//! and color jitter. Amplitude 0 is the exact identity for every kind.
//!
//! | kind               | amplitude `a` maps to                                  |
//! |--------------------|--------------------------------------------------------|
//! | `gaussian_blur`    | sigma = 5a, radius ceil(3 sigma), edge replicate       |
//! | `jpeg_compression` | quality = round(95 - 85a)                              |
//! | `brightness`       | offset = +/-0.5a, sign drawn once per clip             |
//! | `gaussian_noise`   | i.i.d. N(0, (0.3a)^2), fresh per frame                 |
//! | `saturation`       | out = gray + (1 - a)(in - gray), Rec.601 luma          |
//! | `color_jitter`     | per-channel gains in [1 - 0.5a, 1 + 0.5a], once per clip |

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Clip, Frame};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    JpegCompression,
    Brightness,
    GaussianNoise,
    Saturation,
    ColorJitter,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 6] = [
        DegradationKind::GaussianBlur,
        DegradationKind::JpegCompression,
        DegradationKind::Brightness,
        DegradationKind::GaussianNoise,
        DegradationKind::Saturation,
        DegradationKind::ColorJitter,
    ];

    pub const TRAIN: [DegradationKind; 3] = [
        DegradationKind::GaussianBlur,
        DegradationKind::JpegCompression,
        DegradationKind::Brightness,
    ];

    pub const VALIDATION: [DegradationKind; 3] = [
        DegradationKind::GaussianNoise,
        DegradationKind::Saturation,
        DegradationKind::ColorJitter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::JpegCompression => "jpeg_compression",
            DegradationKind::Brightness => "brightness",
            DegradationKind::GaussianNoise => "gaussian_noise",
            DegradationKind::Saturation => "saturation",
            DegradationKind::ColorJitter => "color_jitter",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown degradation kind `{s}`")))
    }
}

/// Parses a comma-separated kind list.
pub fn parse_kinds(s: &str) -> Result<Vec<DegradationKind>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub amplitude: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, amplitude: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            amplitude,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Param(format!(
                "amplitude {} outside [0, 1]",
                self.amplitude
            )));
        }
        Ok(())
    }
}

pub fn blur_sigma(amplitude: f64) -> f64 {
    5.0 * amplitude
}

pub fn jpeg_quality(amplitude: f64) -> u8 {
    (95.0 - 85.0 * amplitude).round() as u8
}

pub fn noise_sigma(amplitude: f64) -> f64 {
    0.30 * amplitude
}

pub fn brightness_offset(amplitude: f64, seed: u64, clip_id: &str) -> f64 {
    let positive: bool = rng::keyed(seed, Stream::BrightnessSign, clip_id, 0).random();
    if positive {
        0.5 * amplitude
    } else {
        -0.5 * amplitude
    }
}

pub fn color_gains(amplitude: f64, seed: u64, clip_id: &str) -> [f64; 3] {
    let mut r = rng::keyed(seed, Stream::ColorGains, clip_id, 0);
    let half = 0.5 * amplitude;
    std::array::from_fn(|_| 1.0 + half * (2.0 * r.random::<f64>() - 1.0))
}

/// Normalized 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn blur_plane(src: &[f32], h: usize, w: usize, taps: &[f64], dst: &mut [f32]) {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += t * row[xx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += t * tmp[yy * w + x];
            }
            dst[y * w + x] = acc as f32;
        }
    }
}

pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let taps = gaussian_taps(sigma);
    let (h, w) = (frame.height(), frame.width());
    let mut out = vec![0f32; 3 * h * w];
    for c in 0..3 {
        blur_plane(frame.channel(c), h, w, &taps, &mut out[c * h * w..(c + 1) * h * w]);
    }
    frame.with_data(out)
}

pub fn jpeg_roundtrip(frame: &Frame, quality: u8) -> Result<Frame> {
    let img = frame.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100))
        .encode_image(&img)
        .map_err(|e| Error::Numeric(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)
        .map_err(|e| Error::Numeric(format!("jpeg decode: {e}")))?
        .to_rgb8();
    Frame::from_rgb8(frame.clip_id().to_owned(), frame.frame_idx(), &decoded)
}

fn map_pixels(frame: &Frame, f: impl Fn([f32; 3]) -> [f32; 3]) -> Frame {
    let n = frame.height() * frame.width();
    let d = frame.data();
    let mut out = vec![0f32; 3 * n];
    for i in 0..n {
        let px = f([d[i], d[n + i], d[2 * n + i]]);
        out[i] = px[0];
        out[n + i] = px[1];
        out[2 * n + i] = px[2];
    }
    frame.with_data(out)
}

fn degrade_frame(frame: &Frame, spec: &DegradationSpec) -> Result<Frame> {
    let a = spec.amplitude;
    Ok(match spec.kind {
        DegradationKind::GaussianBlur => gaussian_blur(frame, blur_sigma(a)),
        DegradationKind::JpegCompression => jpeg_roundtrip(frame, jpeg_quality(a))?,
        DegradationKind::Brightness => {
            let b = brightness_offset(a, spec.seed, frame.clip_id()) as f32;
            map_pixels(frame, |p| p.map(|v| v + b))
        }
        DegradationKind::GaussianNoise => {
            let normal = Normal::new(0.0, noise_sigma(a)).map_err(|e| Error::Param(e.to_string()))?;
            let mut r = rng::keyed(spec.seed, Stream::Noise, frame.clip_id(), frame.frame_idx() as u64);
            let data = frame
                .data()
                .iter()
                .map(|&v| (v as f64 + normal.sample(&mut r)) as f32)
                .collect();
            frame.with_data(data)
        }
        DegradationKind::Saturation => {
            let keep = (1.0 - a) as f32;
            map_pixels(frame, |[r, g, b]| {
                let gray = 0.299 * r + 0.587 * g + 0.114 * b;
                [r, g, b].map(|v| gray + keep * (v - gray))
            })
        }
        DegradationKind::ColorJitter => {
            let g = color_gains(a, spec.seed, frame.clip_id()).map(|x| x as f32);
            map_pixels(frame, |[r, gg, b]| [r * g[0], gg * g[1], b * g[2]])
        }
    })
}

pub fn apply_degradation(clip: &Clip, spec: &DegradationSpec) -> Result<Clip> {
    spec.validate()?;
    if spec.amplitude == 0.0 {
        return Ok(clip.clone());
    }
    if spec.kind == DegradationKind::JpegCompression {
        let frames = crate::par::try_map(clip.len(), |i| degrade_frame(&clip.frames()[i], spec))?;
        return Clip::new(clip.clip_id().to_owned(), frames);
    }
    Ok(clip.map_frames(|f| degrade_frame(f, spec).expect("infallible for non-codec kinds")))
}

/// One degraded copy per grid amplitude; the grid must be ascending.
pub fn amplitude_sweep(
    clip: &Clip,
    kind: DegradationKind,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<(f64, Clip)>> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Param("amplitude grid must be ascending".into()));
    }
    grid.iter()
        .map(|&a| Ok((a, apply_degradation(clip, &DegradationSpec::new(kind, a, seed)?)?)))
        .collect()
}

/// `<out>/<kind>/<amplitude>/<clip_id>/`
pub fn degraded_dir(out: &Path, kind: DegradationKind, amplitude: f64, clip_id: &str) -> PathBuf {
    out.join(kind.name()).join(sig9(amplitude)).join(clip_id)
}

pub fn save_degraded(out: &Path, spec: &DegradationSpec, clip: &Clip) -> Result<PathBuf> {
    let dir = degraded_dir(out, spec.kind, spec.amplitude, clip.clip_id());
    clip.save_frames(&dir)?;
    Ok(dir)
}
