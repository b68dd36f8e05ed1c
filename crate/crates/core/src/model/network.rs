use rand_distr::{Distribution, StandardNormal, Uniform};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::conv::ConvGeom;
use crate::nn::{ParamId, ParamStore, Real, Tensor};
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    pub geom: ConvGeom,
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// running statistics, ids into the buffer store
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub a: ConvBn,
    pub b: ConvBn,
    pub down: Option<ConvBn>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub stem: ConvBn,
    /// three stages of two blocks each
    pub stages: Vec<Vec<Block>>,
    pub lstms: Vec<LstmIds>,
    pub head: [LinearIds; 3],
}

enum Init {
    He(usize),
    Uniform(f64),
    Const(f64),
}

struct Builder<T> {
    params: ParamStore<T>,
    buffers: ParamStore<T>,
    seed: u64,
}

impl<T: Real> Builder<T> {
    fn tensor(&mut self, shape: &[usize], init: Init) -> Tensor<T> {
        let idx = (self.params.len() + self.buffers.len()) as u64;
        let mut r = rng::keyed_u64(self.seed, Stream::ModelInit, &[idx]);
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::He(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::of(std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)))
                    .collect()
            }
            Init::Uniform(bound) => {
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| T::of(u.sample(&mut r))).collect()
            }
            Init::Const(v) => vec![T::of(v); n],
        };
        Tensor::from_vec(shape, data).expect("shape")
    }

    fn param(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let t = self.tensor(shape, init);
        self.params.add(name, t)
    }

    fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        let t = self.tensor(shape, Init::Const(value));
        self.buffers.add(name, t)
    }

    fn conv_bn(&mut self, name: &str, geom: ConvGeom) -> ConvBn {
        let c = geom.out_ch;
        ConvBn {
            w: self.param(format!("{name}.w"), &geom.weight_shape(), Init::He(geom.patch_len())),
            gamma: self.param(format!("{name}.bn.gamma"), &[c], Init::Const(1.0)),
            beta: self.param(format!("{name}.bn.beta"), &[c], Init::Const(0.0)),
            mean: self.buffer(format!("{name}.bn.running_mean"), &[c], 0.0),
            var: self.buffer(format!("{name}.bn.running_var"), &[c], 1.0),
            geom,
        }
    }

    fn block(&mut self, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Block {
        let conv3 = |i, o, s| ConvGeom {
            in_ch: i,
            out_ch: o,
            kernel: 3,
            stride: s,
            pad: 1,
        };
        let a = self.conv_bn(&format!("{name}.conv1"), conv3(in_ch, out_ch, stride));
        let b = self.conv_bn(&format!("{name}.conv2"), conv3(out_ch, out_ch, 1));
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            self.conv_bn(
                &format!("{name}.down"),
                ConvGeom {
                    in_ch,
                    out_ch,
                    kernel: 1,
                    stride,
                    pad: 0,
                },
            )
        });
        Block { a, b, down }
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearIds {
        LinearIds {
            w: self.param(format!("{name}.w"), &[out, inp], Init::He(inp)),
            b: self.param(format!("{name}.b"), &[out], Init::Const(0.0)),
            inp,
            out,
        }
    }

    fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> LstmIds {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmIds {
            w_ih: self.param(format!("{name}.w_ih"), &[4 * hidden, input], Init::Uniform(bound)),
            w_hh: self.param(format!("{name}.w_hh"), &[4 * hidden, hidden], Init::Uniform(bound)),
            bias: self.param(format!("{name}.bias"), &[4 * hidden], Init::Uniform(bound)),
            input,
            hidden,
        }
    }
}

/// Multiscale residual encoder, per-scale LSTMs and the quality head.
#[derive(Debug, Clone)]
pub struct Network<T: Real = f32> {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamStore<T>,
    pub(crate) buffers: ParamStore<T>,
    pub(crate) layout: Layout,
}

impl<T: Real> Network<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::default(),
            buffers: ParamStore::default(),
            seed: config.init_seed,
        };
        let [w1, w2, w3] = config.encoder_widths;
        let stem = b.conv_bn(
            "stem.conv",
            ConvGeom {
                in_ch: 3,
                out_ch: w1,
                kernel: 7,
                stride: 2,
                pad: 3,
            },
        );
        let mut stages = Vec::new();
        for (s, (inp, out, stride)) in [(w1, w1, 1), (w1, w2, 2), (w2, w3, 2)].into_iter().enumerate() {
            stages.push(vec![
                b.block(&format!("layer{}.0", s + 1), inp, out, stride),
                b.block(&format!("layer{}.1", s + 1), out, out, 1),
            ]);
        }
        let mut lstms = Vec::new();
        if config.temporal_enabled {
            for (s, input) in [w1, w1, w2].into_iter().enumerate() {
                lstms.push(b.lstm(&format!("lstm{}", s + 1), input, config.lstm_hidden[s]));
            }
        }
        let [m1, m2] = config.mlp_hidden;
        let head = [
            b.linear("head.fc1", config.mlp_in, m1),
            b.linear("head.fc2", m1, m2),
            b.linear("head.fc3", m2, 3),
        ];
        Ok(Self {
            config,
            params: b.params,
            buffers: b.buffers,
            layout: Layout {
                stem,
                stages,
                lstms,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.buffers
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Changes the LSTM work-group size (no numerical effect).
    pub fn set_group_size(&mut self, group_size: usize) {
        self.config.group_size = group_size.max(1);
    }

    /// Spatial size of the subsampled LSTM inputs for each scale.
    pub fn temporal_grid(&self, height: usize, width: usize) -> [(usize, usize); 3] {
        let f = self.config.subsample;
        let (h4, w4) = (height / 4, width / 4);
        let (h8, w8) = (height / 8, width / 8);
        [h4, h4, h8]
            .into_iter()
            .zip([w4, w4, w8])
            .map(|(h, w)| (h.div_ceil(f), w.div_ceil(f)))
            .collect::<Vec<_>>()
            .try_into()
            .expect("three scales")
    }

    pub(crate) fn check_input_dims(height: usize, width: usize) -> Result<()> {
        if height % 16 != 0 || width % 16 != 0 || height < 32 || width < 32 {
            return Err(Error::Shape(format!(
                "frame size {height}x{width} must be divisible by 16 and at least 32"
            )));
        }
        Ok(())
    }
}

/// Final `(h, c)` for every sequence of one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleState<T> {
    pub batch: usize,
    /// spatial positions per clip after subsampling
    pub positions: usize,
    pub hidden: usize,
    /// `(batch * positions, hidden)`
    pub h: Vec<T>,
    pub c: Vec<T>,
}

/// Recurrent state carried between chunks of a stream. Empty for the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalState<T> {
    pub scales: Vec<ScaleState<T>>,
}

impl<T: Real> TemporalState<T> {
    pub fn zeros(net: &Network<T>, batch: usize, height: usize, width: usize) -> Self {
        if !net.config.temporal_enabled {
            return Self { scales: Vec::new() };
        }
        let grid = net.temporal_grid(height, width);
        let scales = (0..3)
            .map(|s| {
                let positions = grid[s].0 * grid[s].1;
                let hidden = net.config.lstm_hidden[s];
                ScaleState {
                    batch,
                    positions,
                    hidden,
                    h: vec![T::zero(); batch * positions * hidden],
                    c: vec![T::zero(); batch * positions * hidden],
                }
            })
            .collect();
        Self { scales }
    }

    pub fn all_finite(&self) -> bool {
        self.scales
            .iter()
            .all(|s| s.h.iter().chain(&s.c).all(|v| v.is_finite()))
    }
}

/// Encoder outputs for `N = b * t` frames, ordered clip-major.
#[derive(Debug, Clone)]
pub struct EncoderFeatures<T> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub x3: Tensor<T>,
    pub x4: Tensor<T>,
}

/// Per-scale maps fed to pooling: LSTM outputs `(N, hidden, H', W')`, or the
/// subsampled encoder maps for the baseline.
#[derive(Debug, Clone)]
pub struct TemporalOutput<T> {
    pub maps: [Tensor<T>; 3],
}
