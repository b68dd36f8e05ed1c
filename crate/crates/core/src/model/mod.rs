//! Quality network: residual encoder, per-scale temporal LSTMs, pooled MLP head.

mod checkpoint;
mod config;
mod forward;
mod network;

pub use checkpoint::{Container, FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use forward::{BnMode, TrainTape};
pub use network::{EncoderFeatures, Network, ScaleState, TemporalOutput, TemporalState};

use crate::dataio::Clip;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Stacks equally sized clips into a `(b, t, 3, H, W)` tensor.
pub fn clip_batch<T: Real>(clips: &[&Clip]) -> Result<Tensor<T>> {
    let first = clips.first().ok_or_else(|| Error::Param("empty clip batch".into()))?;
    let (t, h, w) = (first.len(), first.height(), first.width());
    let mut data = Vec::with_capacity(clips.len() * t * 3 * h * w);
    for c in clips {
        if c.len() != t || c.height() != h || c.width() != w {
            return Err(Error::Shape(format!(
                "clip `{}` is {}x{}x{}, batch expects {t}x{h}x{w}",
                c.clip_id(),
                c.len(),
                c.height(),
                c.width()
            )));
        }
        for f in c.frames() {
            data.extend(f.data().iter().map(|&v| T::of(v as f64)));
        }
    }
    Tensor::from_vec(&[clips.len(), t, 3, h, w], data)
}
