//! Inference and training passes. Training passes record a tape consumed by
//! [`Network::backward`]; batch-norm statistics are returned on the tape and
//! folded into the running buffers by [`Network::apply_bn_updates`].

use rand::Rng;

use super::network::{Block, ConvBn, EncoderFeatures, LinearIds, Network, ScaleState, TemporalOutput, TemporalState};
use crate::error::{Error, Result};
use crate::nn::bn::{self, BnCache, BnStats};
use crate::nn::lstm::{self, LstmCache, LstmWeights};
use crate::nn::{conv, linear, pool, relu_backward_inplace, relu_inplace, sigmoid, Grads, ParamId, Real, Tensor};
use crate::rng::{self, Stream};

struct BnUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BnStats<T>,
}

struct Ctx<T> {
    train: bool,
    bn: BnMode,
    updates: Vec<BnUpdate<T>>,
}

/// Statistics batch normalization uses during a training pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    #[default]
    Batch,
    /// Normalize with the running statistics, as inference does.
    Frozen,
}

struct ConvBnTape<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    /// post-activation output when the layer ends in a ReLU
    out: Option<Tensor<T>>,
}

struct BlockTape<T> {
    a: ConvBnTape<T>,
    b: ConvBnTape<T>,
    down: Option<ConvBnTape<T>>,
    out: Tensor<T>,
}

struct EncoderTape<T> {
    stem: ConvBnTape<T>,
    pool_arg: Vec<u32>,
    pool_in_shape: Vec<usize>,
    stages: Vec<Vec<BlockTape<T>>>,
}

struct TemporalTape<T> {
    full_shapes: [Vec<usize>; 3],
    sub_shapes: [Vec<usize>; 3],
    lstm: Vec<LstmCache<T>>,
}

struct HeadTape<T> {
    z: Vec<T>,
    a1: Vec<T>,
    m1: Option<Vec<T>>,
    d1: Vec<T>,
    a2: Vec<T>,
    m2: Option<Vec<T>>,
    d2: Vec<T>,
    y: Vec<T>,
    pooled_shapes: [Vec<usize>; 4],
}

/// Everything a training pass must remember for the backward pass.
pub struct TrainTape<T> {
    batch: usize,
    steps: usize,
    encoder: EncoderTape<T>,
    temporal: TemporalTape<T>,
    head: HeadTape<T>,
    updates: Vec<BnUpdate<T>>,
}

impl<T> TrainTape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

fn subsample<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    if f == 1 {
        return x.clone();
    }
    let (hs, ws) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = Vec::with_capacity(n * c * hs * ws);
    let d = x.data();
    for plane in 0..n * c {
        for y in 0..hs {
            let row = plane * h * w + y * f * w;
            out.extend((0..ws).map(|xx| d[row + xx * f]));
        }
    }
    Tensor::from_vec(&[n, c, hs, ws], out).expect("shape")
}

fn subsample_backward<T: Real>(dy: &Tensor<T>, full: &[usize], f: usize) -> Tensor<T> {
    if f == 1 {
        return dy.clone();
    }
    let (n, c, h, w) = (full[0], full[1], full[2], full[3]);
    let (_, _, hs, ws) = dy.dims4();
    let mut dx = Tensor::zeros(full);
    let d = dx.data_mut();
    let g = dy.data();
    for plane in 0..n * c {
        for y in 0..hs {
            for xx in 0..ws {
                d[plane * h * w + y * f * w + xx * f] = g[(plane * hs + y) * ws + xx];
            }
        }
    }
    dx
}

/// `(b*t, C, P)` maps to time-major LSTM rows `(t, b*P, C)`.
fn maps_to_rows<T: Real>(x: &[T], b: usize, t: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ti in 0..t {
            let src = &x[(bi * t + ti) * c * p..(bi * t + ti + 1) * c * p];
            for ch in 0..c {
                for pi in 0..p {
                    out[(ti * b * p + bi * p + pi) * c + ch] = src[ch * p + pi];
                }
            }
        }
    }
    out
}

fn rows_to_maps<T: Real>(rows: &[T], b: usize, t: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len()];
    for bi in 0..b {
        for ti in 0..t {
            let dst = (bi * t + ti) * c * p;
            for pi in 0..p {
                let src = &rows[(ti * b * p + bi * p + pi) * c..][..c];
                for ch in 0..c {
                    out[dst + ch * p + pi] = src[ch];
                }
            }
        }
    }
    out
}

fn dropout_mask<T: Real>(key: u64, layer: u64, len: usize, p: f64) -> Vec<T> {
    let mut r = rng::keyed_u64(key, Stream::Dropout, &[layer]);
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if r.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

impl<T: Real> Network<T> {
    fn conv_bn(&self, cb: &ConvBn, x: &Tensor<T>, relu: bool, ctx: &mut Ctx<T>) -> (Tensor<T>, Option<ConvBnTape<T>>) {
        let z = conv::conv2d_forward(&cb.geom, x, self.params.data(cb.w));
        let gamma = self.params.data(cb.gamma);
        let beta = self.params.data(cb.beta);
        if !ctx.train {
            let mut y = bn::forward_eval(&z, gamma, beta, self.buffers.data(cb.mean), self.buffers.data(cb.var));
            if relu {
                relu_inplace(y.data_mut());
            }
            return (y, None);
        }
        let (mut y, cache) = match ctx.bn {
            BnMode::Batch => {
                let (y, cache, stats) = bn::forward_train(&z, gamma, beta);
                ctx.updates.push(BnUpdate {
                    mean: cb.mean,
                    var: cb.var,
                    stats,
                });
                (y, cache)
            }
            BnMode::Frozen => bn::forward_frozen(&z, gamma, beta, self.buffers.data(cb.mean), self.buffers.data(cb.var)),
        };
        if relu {
            relu_inplace(y.data_mut());
        }
        let tape = ConvBnTape {
            input: x.clone(),
            bn: cache,
            out: relu.then(|| y.clone()),
        };
        (y, Some(tape))
    }

    fn conv_bn_backward(
        &self,
        cb: &ConvBn,
        tape: &ConvBnTape<T>,
        mut dy: Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        if let Some(out) = &tape.out {
            relu_backward_inplace(dy.data_mut(), out.data());
        }
        let (dz, dgamma, dbeta) = bn::backward(&tape.bn, self.params.data(cb.gamma), &dy);
        grads.accumulate(cb.gamma, &dgamma);
        grads.accumulate(cb.beta, &dbeta);
        let (dx, dw) = conv::conv2d_backward(&cb.geom, &tape.input, self.params.data(cb.w), &dz, need_dx);
        grads.accumulate(cb.w, &dw);
        dx
    }

    fn block(&self, blk: &Block, x: &Tensor<T>, ctx: &mut Ctx<T>) -> (Tensor<T>, Option<BlockTape<T>>) {
        let (a, ta) = self.conv_bn(&blk.a, x, true, ctx);
        let (mut y, tb) = self.conv_bn(&blk.b, &a, false, ctx);
        let td = match &blk.down {
            Some(d) => {
                let (s, td) = self.conv_bn(d, x, false, ctx);
                y.add_assign(&s);
                td
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        relu_inplace(y.data_mut());
        let tape = ctx.train.then(|| BlockTape {
            a: ta.expect("train tape"),
            b: tb.expect("train tape"),
            down: td,
            out: y.clone(),
        });
        (y, tape)
    }

    fn block_backward(&self, blk: &Block, tape: &BlockTape<T>, mut dy: Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        relu_backward_inplace(dy.data_mut(), tape.out.data());
        let da = self.conv_bn_backward(&blk.b, &tape.b, dy.clone(), grads, true).expect("dx");
        let mut dx = self.conv_bn_backward(&blk.a, &tape.a, da, grads, true).expect("dx");
        match (&blk.down, &tape.down) {
            (Some(d), Some(td)) => dx.add_assign(&self.conv_bn_backward(d, td, dy, grads, true).expect("dx")),
            _ => dx.add_assign(&dy),
        }
        dx
    }

    fn run_encoder(&self, x: &Tensor<T>, ctx: &mut Ctx<T>) -> (EncoderFeatures<T>, Option<EncoderTape<T>>) {
        let (s, stem_tape) = self.conv_bn(&self.layout.stem, x, true, ctx);
        let (x1, pool_arg) = pool::maxpool3s2_forward(&s);
        let mut outs = Vec::with_capacity(3);
        let mut stage_tapes = Vec::with_capacity(3);
        let mut cur = x1.clone();
        for stage in &self.layout.stages {
            let mut tapes = Vec::new();
            for blk in stage {
                let (y, t) = self.block(blk, &cur, ctx);
                cur = y;
                tapes.extend(t);
            }
            outs.push(cur.clone());
            stage_tapes.push(tapes);
        }
        let x4 = outs.pop().expect("stage");
        let x3 = outs.pop().expect("stage");
        let x2 = outs.pop().expect("stage");
        let tape = stem_tape.map(|stem| EncoderTape {
            stem,
            pool_arg,
            pool_in_shape: s.shape().to_vec(),
            stages: stage_tapes,
        });
        (EncoderFeatures { x1, x2, x3, x4 }, tape)
    }

    fn encoder_backward(&self, tape: &EncoderTape<T>, d: [Tensor<T>; 4], grads: &mut Grads<T>) {
        let [dx1, dx2, dx3, dx4] = d;
        let adds = [dx1, dx2, dx3];
        let mut g = dx4;
        for s in (0..3).rev() {
            for (blk, bt) in self.layout.stages[s].iter().zip(&tape.stages[s]).rev() {
                g = self.block_backward(blk, bt, g, grads);
            }
            g.add_assign(&adds[s]);
        }
        let ds = pool::maxpool3s2_backward(&tape.pool_in_shape, &tape.pool_arg, &g);
        self.conv_bn_backward(&self.layout.stem, &tape.stem, ds, grads, false);
    }

    fn check_state(&self, state: &TemporalState<T>, batch: usize, positions: [usize; 3]) -> Result<()> {
        if !self.config.temporal_enabled {
            return Ok(());
        }
        if state.scales.len() != 3 {
            return Err(Error::Shape(format!("temporal state has {} scales, expected 3", state.scales.len())));
        }
        for (s, st) in state.scales.iter().enumerate() {
            let hidden = self.config.lstm_hidden[s];
            let want = batch * positions[s] * hidden;
            if st.batch != batch || st.positions != positions[s] || st.hidden != hidden || st.h.len() != want || st.c.len() != want {
                return Err(Error::Shape(format!(
                    "scale {} state is (batch {}, positions {}, hidden {}); features need ({batch}, {}, {hidden})",
                    s + 1,
                    st.batch,
                    st.positions,
                    st.hidden,
                    positions[s]
                )));
            }
        }
        Ok(())
    }

    fn run_temporal(
        &self,
        feats: &EncoderFeatures<T>,
        batch: usize,
        state: &TemporalState<T>,
    ) -> Result<(TemporalOutput<T>, TemporalState<T>, TemporalTape<T>)> {
        let xs = [&feats.x1, &feats.x2, &feats.x3];
        let n = feats.x1.dims4().0;
        if batch == 0 || n % batch != 0 {
            return Err(Error::Shape(format!("{n} frames do not split into {batch} clips")));
        }
        let steps = n / batch;
        let [w1, w2, _] = self.config.encoder_widths;
        for (s, (x, c)) in xs.iter().zip([w1, w1, w2]).enumerate() {
            let (xn, xc, _, _) = x.dims4();
            if xn != n || xc != c {
                return Err(Error::Shape(format!("x{} has shape {:?}", s + 1, x.shape())));
            }
        }
        let f = self.config.subsample;
        let subs: Vec<Tensor<T>> = xs.iter().map(|x| subsample(x, f)).collect();
        let full_shapes = xs.map(|x| x.shape().to_vec());
        let sub_shapes: [Vec<usize>; 3] = std::array::from_fn(|s| subs[s].shape().to_vec());
        if !self.config.temporal_enabled {
            let mut it = subs.into_iter();
            let maps = std::array::from_fn(|_| it.next().expect("three scales"));
            let tape = TemporalTape {
                full_shapes,
                sub_shapes,
                lstm: Vec::new(),
            };
            return Ok((TemporalOutput { maps }, TemporalState { scales: Vec::new() }, tape));
        }
        let positions: [usize; 3] = std::array::from_fn(|s| sub_shapes[s][2] * sub_shapes[s][3]);
        self.check_state(state, batch, positions)?;
        let mut maps = Vec::with_capacity(3);
        let mut scales = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for s in 0..3 {
            let ids = self.layout.lstms[s];
            let p = positions[s];
            let rows = maps_to_rows(subs[s].data(), batch, steps, ids.input, p);
            let st = &state.scales[s];
            let (out, cache) = lstm::forward(
                self.lstm_weights(s),
                &rows,
                steps,
                batch * p,
                &st.h,
                &st.c,
                self.config.group_size,
            );
            let m = rows_to_maps(&out.hs, batch, steps, ids.hidden, p);
            let shape = [n, ids.hidden, sub_shapes[s][2], sub_shapes[s][3]];
            maps.push(Tensor::from_vec(&shape, m)?);
            scales.push(ScaleState {
                batch,
                positions: p,
                hidden: ids.hidden,
                h: out.h_last,
                c: out.c_last,
            });
            caches.push(cache);
        }
        let mut it = maps.into_iter();
        let out = TemporalOutput {
            maps: std::array::from_fn(|_| it.next().expect("three scales")),
        };
        let tape = TemporalTape {
            full_shapes,
            sub_shapes,
            lstm: caches,
        };
        Ok((out, TemporalState { scales }, tape))
    }

    fn lstm_weights(&self, s: usize) -> LstmWeights<'_, T> {
        let ids = self.layout.lstms[s];
        LstmWeights {
            w_ih: self.params.data(ids.w_ih),
            w_hh: self.params.data(ids.w_hh),
            bias: self.params.data(ids.bias),
            input: ids.input,
            hidden: ids.hidden,
        }
    }

    fn temporal_backward(&self, tape: &TemporalTape<T>, batch: usize, steps: usize, dmaps: [Tensor<T>; 3], grads: &mut Grads<T>) -> [Tensor<T>; 3] {
        let f = self.config.subsample;
        let mut it = dmaps.into_iter();
        std::array::from_fn(|s| {
            let dmap = it.next().expect("three scales");
            let dsub = if self.config.temporal_enabled {
                let ids = self.layout.lstms[s];
                let sub = &tape.sub_shapes[s];
                let p = sub[2] * sub[3];
                let dhs = maps_to_rows(dmap.data(), batch, steps, ids.hidden, p);
                let g = lstm::backward(self.lstm_weights(s), &tape.lstm[s], &dhs);
                grads.accumulate(ids.w_ih, &g.dw_ih);
                grads.accumulate(ids.w_hh, &g.dw_hh);
                grads.accumulate(ids.bias, &g.dbias);
                Tensor::from_vec(sub, rows_to_maps(&g.dx, batch, steps, ids.input, p)).expect("shape")
            } else {
                dmap
            };
            subsample_backward(&dsub, &tape.full_shapes[s], f)
        })
    }

    fn check_pooled(&self, maps: [&Tensor<T>; 4], n: usize) -> Result<()> {
        let want = self.config.pooled_channels();
        for (g, (m, c)) in maps.iter().zip(want).enumerate() {
            if m.shape().len() != 4 || m.shape()[0] != n || m.shape()[1] != c {
                return Err(Error::Shape(format!(
                    "pooled group {} has shape {:?}, expected ({n}, {c}, _, _)",
                    g + 1,
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    fn linear(&self, l: &LinearIds, x: &[T], rows: usize) -> Vec<T> {
        linear::forward(x, rows, l.inp, self.params.data(l.w), self.params.data(l.b))
    }

    fn run_head(&self, maps: [&Tensor<T>; 4], batch: usize, dropout_key: Option<u64>) -> Result<(Tensor<T>, HeadTape<T>)> {
        let n = maps[0].shape().first().copied().unwrap_or(0);
        if batch == 0 || n % batch != 0 {
            return Err(Error::Shape(format!("{n} frames do not split into {batch} clips")));
        }
        self.check_pooled(maps, n)?;
        let width = self.config.mlp_in;
        let mut z = vec![T::zero(); n * width];
        let mut off = 0;
        for m in maps {
            let c = m.shape()[1];
            let pooled = pool::global_avg(m);
            for row in 0..n {
                z[row * width + off..row * width + off + c].copy_from_slice(&pooled[row * c..(row + 1) * c]);
            }
            off += c;
        }
        let [l1, l2, l3] = &self.layout.head;
        let p = self.config.dropout;
        let drop = |a: &[T], layer: u64| -> (Option<Vec<T>>, Vec<T>) {
            match dropout_key {
                Some(key) if p > 0.0 => {
                    let m = dropout_mask::<T>(key, layer, a.len(), p);
                    let d = a.iter().zip(&m).map(|(&x, &k)| x * k).collect();
                    (Some(m), d)
                }
                _ => (None, a.to_vec()),
            }
        };
        let mut a1 = self.linear(l1, &z, n);
        relu_inplace(&mut a1);
        let (m1, d1) = drop(&a1, 0);
        let mut a2 = self.linear(l2, &d1, n);
        relu_inplace(&mut a2);
        let (m2, d2) = drop(&a2, 1);
        let y: Vec<T> = self.linear(l3, &d2, n).into_iter().map(sigmoid).collect();
        let out = Tensor::from_vec(&[batch, n / batch, 3], y.clone())?;
        let tape = HeadTape {
            z,
            a1,
            m1,
            d1,
            a2,
            m2,
            d2,
            y,
            pooled_shapes: maps.map(|m| m.shape().to_vec()),
        };
        Ok((out, tape))
    }

    fn head_backward(&self, tape: &HeadTape<T>, dy: &[T], grads: &mut Grads<T>) -> [Tensor<T>; 4] {
        let n = tape.y.len() / 3;
        let [l1, l2, l3] = &self.layout.head;
        let dpre3: Vec<T> = dy.iter().zip(&tape.y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
        let (mut dd2, dw, db) = linear::backward(&tape.d2, n, l3.inp, self.params.data(l3.w), l3.out, &dpre3);
        grads.accumulate(l3.w, &dw);
        grads.accumulate(l3.b, &db);
        if let Some(m) = &tape.m2 {
            dd2.iter_mut().zip(m).for_each(|(g, &k)| *g *= k);
        }
        relu_backward_inplace(&mut dd2, &tape.a2);
        let (mut dd1, dw, db) = linear::backward(&tape.d1, n, l2.inp, self.params.data(l2.w), l2.out, &dd2);
        grads.accumulate(l2.w, &dw);
        grads.accumulate(l2.b, &db);
        if let Some(m) = &tape.m1 {
            dd1.iter_mut().zip(m).for_each(|(g, &k)| *g *= k);
        }
        relu_backward_inplace(&mut dd1, &tape.a1);
        let (dz, dw, db) = linear::backward(&tape.z, n, l1.inp, self.params.data(l1.w), l1.out, &dd1);
        grads.accumulate(l1.w, &dw);
        grads.accumulate(l1.b, &db);
        let width = self.config.mlp_in;
        let mut off = 0;
        tape.pooled_shapes.clone().map(|shape| {
            let (c, hw) = (shape[1], shape[2] * shape[3]);
            let inv = T::one() / T::of(hw as f64);
            let mut d = Vec::with_capacity(n * c * hw);
            for row in 0..n {
                for ch in 0..c {
                    let g = dz[row * width + off + ch] * inv;
                    d.extend(std::iter::repeat_n(g, hw));
                }
            }
            off += c;
            Tensor::from_vec(&shape, d).expect("shape")
        })
    }

    fn check_clip_tensor(clips: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let s = clips.shape();
        if s.len() != 5 || s[2] != 3 {
            return Err(Error::Shape(format!("expected (b, t, 3, H, W), got {s:?}")));
        }
        if s[0] == 0 || s[1] == 0 {
            return Err(Error::Shape(format!("empty batch {s:?}")));
        }
        Self::check_input_dims(s[3], s[4])?;
        Ok((s[0], s[1], s[3], s[4]))
    }

    /// Per-frame encoder features in inference mode. `frames: (N, 3, H, W)`.
    pub fn encode(&self, frames: &Tensor<T>) -> Result<EncoderFeatures<T>> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected (N, 3, H, W), got {s:?}")));
        }
        Self::check_input_dims(s[2], s[3])?;
        let mut ctx = Ctx {
            train: false,
            bn: BnMode::Batch,
            updates: Vec::new(),
        };
        Ok(self.run_encoder(frames, &mut ctx).0)
    }

    /// Runs the per-scale recurrences over `feats` (clip-major, `batch` clips)
    /// starting from `state`. The baseline passes subsampled maps through.
    pub fn temporal_forward(
        &self,
        feats: &EncoderFeatures<T>,
        batch: usize,
        state: &TemporalState<T>,
    ) -> Result<(TemporalOutput<T>, TemporalState<T>)> {
        let (out, st, _) = self.run_temporal(feats, batch, state)?;
        Ok((out, st))
    }

    /// Pools and maps per-frame features to `(b, t, 3)` qualities.
    pub fn predict(&self, temporal: &TemporalOutput<T>, x4: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let [a, b, c] = &temporal.maps;
        Ok(self.run_head([a, b, c, x4], batch, None)?.0)
    }

    /// Inference pass over `clips: (b, t, 3, H, W)`; `state` defaults to zeros.
    pub fn forward(&self, clips: &Tensor<T>, state: Option<&TemporalState<T>>) -> Result<(Tensor<T>, TemporalState<T>)> {
        let (b, t, h, w) = Self::check_clip_tensor(clips)?;
        let frames = clips.clone().reshape(&[b * t, 3, h, w])?;
        let feats = self.encode(&frames)?;
        let zero;
        let state = match state {
            Some(s) => s,
            None => {
                zero = TemporalState::zeros(self, b, h, w);
                &zero
            }
        };
        let (tout, st) = self.temporal_forward(&feats, b, state)?;
        let y = self.predict(&tout, &feats.x4, b)?;
        Ok((y, st))
    }

    /// Training pass from zero state: batch statistics and dropout keyed by `dropout_key`.
    pub fn forward_train(&self, clips: &Tensor<T>, dropout_key: u64) -> Result<(Tensor<T>, TrainTape<T>)> {
        self.forward_train_with(clips, dropout_key, BnMode::Batch)
    }

    pub fn forward_train_with(&self, clips: &Tensor<T>, dropout_key: u64, bn: BnMode) -> Result<(Tensor<T>, TrainTape<T>)> {
        let (b, t, h, w) = Self::check_clip_tensor(clips)?;
        let frames = clips.clone().reshape(&[b * t, 3, h, w])?;
        let mut ctx = Ctx {
            train: true,
            bn,
            updates: Vec::new(),
        };
        let (feats, enc_tape) = self.run_encoder(&frames, &mut ctx);
        let zero = TemporalState::zeros(self, b, h, w);
        let (tout, _, temporal) = self.run_temporal(&feats, b, &zero)?;
        let [m1, m2, m3] = &tout.maps;
        let (y, head) = self.run_head([m1, m2, m3, &feats.x4], b, Some(dropout_key))?;
        Ok((
            y,
            TrainTape {
                batch: b,
                steps: t,
                encoder: enc_tape.expect("train tape"),
                temporal,
                head,
                updates: ctx.updates,
            },
        ))
    }

    /// Gradients of `sum(dout * output)` with respect to every parameter.
    pub fn backward(&self, tape: &TrainTape<T>, dout: &Tensor<T>) -> Result<Grads<T>> {
        if dout.shape() != [tape.batch, tape.steps, 3] {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match ({}, {}, 3)",
                dout.shape(),
                tape.batch,
                tape.steps
            )));
        }
        let mut grads = Grads::zeros_like(&self.params);
        let [d1, d2, d3, d4] = self.head_backward(&tape.head, dout.data(), &mut grads);
        let [g1, g2, g3] = self.temporal_backward(&tape.temporal, tape.batch, tape.steps, [d1, d2, d3], &mut grads);
        self.encoder_backward(&tape.encoder, [g1, g2, g3, d4], &mut grads);
        Ok(grads)
    }

    /// Folds the tape's batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, tape: &TrainTape<T>) {
        for u in &tape.updates {
            let mut mean = self.buffers.get(u.mean).data().to_vec();
            let mut var = self.buffers.get(u.var).data().to_vec();
            bn::update_running(&mut mean, &mut var, &u.stats);
            self.buffers.get_mut(u.mean).data_mut().copy_from_slice(&mean);
            self.buffers.get_mut(u.var).data_mut().copy_from_slice(&var);
        }
    }

    /// Replaces the running buffers with the tape's batch statistics.
    pub fn set_bn_stats(&mut self, tape: &TrainTape<T>) {
        for u in &tape.updates {
            self.buffers.get_mut(u.mean).data_mut().copy_from_slice(&u.stats.mean);
            self.buffers.get_mut(u.var).data_mut().copy_from_slice(&u.stats.var_unbiased);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_layout_round_trips() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 5).map(|v| v as f64).collect();
        let rows = maps_to_rows(&x, 2, 3, 4, 5);
        assert_eq!(rows_to_maps(&rows, 2, 3, 4, 5), x);
        // row (t=1, clip=1, pos=2), channel 3 comes from frame 1*3+1
        assert_eq!(rows[(2 * 5 + 5 + 2) * 4 + 3], x[(4 * 4 + 3) * 5 + 2]);
    }

    #[test]
    fn subsample_picks_strided_positions() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let s = subsample(&x, 2);
        assert_eq!(s.shape(), &[1, 1, 2, 2]);
        assert_eq!(s.data(), &[0.0, 2.0, 6.0, 8.0]);
        let d = subsample_backward(&s, x.shape(), 2);
        assert_eq!(d.data(), &[0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 6.0, 0.0, 8.0]);
    }
}
