//! MAE training over the augmentation-split label table.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataio::{load_clip, Clip, DatasetManifest};
use crate::degrade::{apply_degradation, parse_kinds, DegradationKind};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::kvfile;
use crate::labels::{LabelTable, VariantKey};
use crate::metrics::QualityTriplet;
use crate::model::{clip_batch, BnMode, Container, ModelConfig, Network};
use crate::nn::{Grads, ParamStore, Real, Tensor};
use crate::par;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub train_kinds: Vec<DegradationKind>,
    pub val_kinds: Vec<DegradationKind>,
    pub clip_len: usize,
    /// `(height, width)` frames are resized to before training.
    pub resolution: (usize, usize),
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Stops early once this many optimizer steps ran; 0 means no limit.
    pub max_steps: usize,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
    /// `Frozen` seeds the normalization statistics from the training data
    /// before the first step and keeps them fixed; `Batch` normalizes with
    /// per-batch statistics and tracks running averages.
    pub batch_norm: BnMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_kinds: DegradationKind::TRAIN.to_vec(),
            val_kinds: DegradationKind::VALIDATION.to_vec(),
            clip_len: 8,
            resolution: (96, 96),
            batch_size: 2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            max_steps: 0,
            val_every: 1,
            batch_norm: BnMode::Frozen,
            seed: 0,
        }
    }
}

fn kinds_str(k: &[DegradationKind]) -> String {
    k.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "train_kinds",
        "val_kinds",
        "clip_len",
        "resolution",
        "batch_size",
        "learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
        "max_epochs",
        "max_steps",
        "val_every",
        "batch_norm",
        "seed",
        "model",
    ];

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.train_kinds.iter().find(|k| self.val_kinds.contains(k)) {
            return Err(Error::Config(format!("{k} is both a training and a validation kind")));
        }
        if self.train_kinds.is_empty() || self.val_kinds.is_empty() {
            return Err(Error::Config("train_kinds and val_kinds must be non-empty".into()));
        }
        if self.clip_len == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.val_every == 0 {
            return Err(Error::Config("clip_len, batch_size, max_epochs and val_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning rate must be positive and betas in [0, 1)".into()));
        }
        let (h, w) = self.resolution;
        if h % 16 != 0 || w % 16 != 0 || h < 32 || w < 32 {
            return Err(Error::Config(format!("resolution {h}x{w} must be divisible by 16 and at least 32")));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("train_kinds".into(), kinds_str(&self.train_kinds));
        m.insert("val_kinds".into(), kinds_str(&self.val_kinds));
        m.insert("clip_len".into(), self.clip_len.to_string());
        m.insert("resolution".into(), format!("{}x{}", self.resolution.0, self.resolution.1));
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("learning_rate".into(), self.learning_rate.to_string());
        m.insert("beta1".into(), self.beta1.to_string());
        m.insert("beta2".into(), self.beta2.to_string());
        m.insert("adam_eps".into(), self.adam_eps.to_string());
        m.insert("max_epochs".into(), self.max_epochs.to_string());
        m.insert("max_steps".into(), self.max_steps.to_string());
        m.insert("val_every".into(), self.val_every.to_string());
        m.insert("batch_norm".into(), bn_mode_str(self.batch_norm).into());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    /// Applies one override; false when the key belongs to someone else.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |what: &str| Error::Config(format!("{key}: `{value}` is not {what}"));
        match key {
            "train_kinds" => self.train_kinds = parse_kinds(value).map_err(|e| Error::Config(e.to_string()))?,
            "val_kinds" => self.val_kinds = parse_kinds(value).map_err(|e| Error::Config(e.to_string()))?,
            "clip_len" => self.clip_len = value.parse().map_err(|_| num("an integer"))?,
            "resolution" => self.resolution = parse_resolution(value)?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| num("an integer"))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| num("a number"))?,
            "beta1" => self.beta1 = value.parse().map_err(|_| num("a number"))?,
            "beta2" => self.beta2 = value.parse().map_err(|_| num("a number"))?,
            "adam_eps" => self.adam_eps = value.parse().map_err(|_| num("a number"))?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| num("an integer"))?,
            "max_steps" => self.max_steps = value.parse().map_err(|_| num("an integer"))?,
            "val_every" => self.val_every = value.parse().map_err(|_| num("an integer"))?,
            "batch_norm" => {
                self.batch_norm = match value {
                    "batch" => BnMode::Batch,
                    "frozen" => BnMode::Frozen,
                    _ => return Err(num("`batch` or `frozen`")),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| num("an integer"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn bn_mode_str(m: BnMode) -> &'static str {
    match m {
        BnMode::Batch => "batch",
        BnMode::Frozen => "frozen",
    }
}

/// Parses `HxW` (or a single side for square frames).
pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("resolution `{s}` is not HxW"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    Ok((h, w))
}

/// Mean absolute error per metric channel and their average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeLoss {
    pub total: f64,
    /// `[lpips, psnr, ssim]`
    pub per_metric: [f64; 3],
}

fn check_pair<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() || pred.shape().last() != Some(&3) || pred.is_empty() {
        return Err(Error::Param(format!(
            "prediction {:?} and target {:?} must share a (..., 3) shape",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub fn mae_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<MaeLoss> {
    check_pair(pred, target)?;
    let rows = pred.len() / 3;
    let mut per = [0.0f64; 3];
    for (p, t) in pred.data().chunks(3).zip(target.data().chunks(3)) {
        for m in 0..3 {
            per[m] += (p[m] - t[m]).abs().to_f64().unwrap_or(f64::NAN);
        }
    }
    let per_metric = per.map(|s| s / rows as f64);
    Ok(MaeLoss {
        total: per_metric.iter().sum::<f64>() / 3.0,
        per_metric,
    })
}

/// Gradient of [`MaeLoss::total`] with respect to `pred` (sign(0) = 0).
pub fn mae_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(pred, target)?;
    let scale = T::of(1.0 / pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}

/// Partitions rows by degradation kind. Returns `(train, val, warnings)`.
pub fn make_split(table: &LabelTable, cfg: &TrainConfig) -> Result<(LabelTable, LabelTable, Vec<String>)> {
    cfg.validate()?;
    let train = table.filter_kinds(|k| cfg.train_kinds.contains(&k));
    let val = table.filter_kinds(|k| cfg.val_kinds.contains(&k));
    if train.is_empty() {
        return Err(Error::Config(format!("no label rows of training kinds {}", kinds_str(&cfg.train_kinds))));
    }
    if val.is_empty() {
        return Err(Error::Config(format!("no label rows of validation kinds {}", kinds_str(&cfg.val_kinds))));
    }
    let present = table.kinds();
    let warnings = cfg
        .train_kinds
        .iter()
        .chain(&cfg.val_kinds)
        .filter(|k| !present.contains(k))
        .map(|k| format!("label table has no {k} rows"))
        .collect();
    Ok((train, val, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: usize,
    pub split: SplitName,
    pub loss: MaeLoss,
}

pub const HISTORY_HEADER: &str = "epoch,step,split,loss_total,mae_lpips,mae_psnr,mae_ssim";

pub fn history_csv(records: &[HistoryRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in records {
        let [l, p, q] = r.loss.per_metric;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            r.split.as_str(),
            sig9(r.loss.total),
            sig9(l),
            sig9(p),
            sig9(q)
        ));
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRecord>> {
    let bad = |line: usize, m: &str| Error::Csv {
        path: "history.csv".into(),
        line,
        message: m.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => return Err(bad(1, "missing history header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, "expected 7 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        let split = match f[2] {
            "train" => SplitName::Train,
            "val" => SplitName::Val,
            _ => return Err(bad(i + 1, "split must be train or val")),
        };
        out.push(HistoryRecord {
            epoch: f[0].parse().map_err(|_| bad(i + 1, "bad epoch"))?,
            step: f[1].parse().map_err(|_| bad(i + 1, "bad step"))?,
            split,
            loss: MaeLoss {
                total: num(f[3])?,
                per_metric: [num(f[4])?, num(f[5])?, num(f[6])?],
            },
        });
    }
    Ok(out)
}

type Targets = Vec<(usize, QualityTriplet)>;

/// Pristine clips at training resolution plus the split label rows.
pub struct TrainData {
    clips: BTreeMap<String, Clip>,
    train: BTreeMap<String, Vec<(VariantKey, Targets)>>,
    val: Vec<(VariantKey, Targets)>,
    window: usize,
    pub warnings: Vec<String>,
    cache: Mutex<HashMap<VariantKey, Arc<Clip>>>,
}

impl TrainData {
    /// Loads every clip referenced by the label table from the manifest.
    pub fn load(manifest: &DatasetManifest, table: &LabelTable, cfg: &TrainConfig) -> Result<Self> {
        let ids: Vec<String> = table
            .variants()
            .keys()
            .map(|v| v.clip_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let clips = par::try_map(ids.len(), |i| load_clip(manifest, &ids[i], Some(cfg.resolution)))?;
        Self::from_clips(clips, table, cfg)
    }

    pub fn from_clips(clips: Vec<Clip>, table: &LabelTable, cfg: &TrainConfig) -> Result<Self> {
        let (train_t, val_t, mut warnings) = make_split(table, cfg)?;
        if let Some(res) = table.meta.get("resolution") {
            let want = format!("{}x{}", cfg.resolution.0, cfg.resolution.1);
            if res != &want {
                warnings.push(format!("labels were computed at {res}, training runs at {want}"));
            }
        }
        let mut clip_map = BTreeMap::new();
        for c in clips {
            if (c.height(), c.width()) != cfg.resolution {
                return Err(Error::Param(format!(
                    "clip `{}` is {}x{}, training resolution is {}x{}",
                    c.clip_id(),
                    c.height(),
                    c.width(),
                    cfg.resolution.0,
                    cfg.resolution.1
                )));
            }
            clip_map.insert(c.clip_id().to_string(), c);
        }
        let check = |v: &VariantKey, rows: &Targets| -> Result<()> {
            let clip = clip_map.get(&v.clip_id).ok_or_else(|| Error::UnknownClip(v.clip_id.clone()))?;
            let complete = rows.len() == clip.len() && rows.iter().enumerate().all(|(i, r)| r.0 == i);
            if !complete {
                return Err(Error::Param(format!(
                    "labels for {v} cover {} of {} frames",
                    rows.len(),
                    clip.len()
                )));
            }
            Ok(())
        };
        let mut train: BTreeMap<String, Vec<(VariantKey, Targets)>> = BTreeMap::new();
        for (v, rows) in train_t.variants() {
            check(&v, &rows)?;
            train.entry(v.clip_id.clone()).or_default().push((v, rows));
        }
        let mut val = Vec::new();
        for (v, rows) in val_t.variants() {
            check(&v, &rows)?;
            val.push((v, rows));
        }
        let shortest = train.keys().map(|id| clip_map[id].len()).min().unwrap_or(0);
        let window = cfg.clip_len.min(shortest);
        Ok(Self {
            clips: clip_map,
            train,
            val,
            window,
            warnings,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn train_clip_ids(&self) -> Vec<&str> {
        self.train.keys().map(String::as_str).collect()
    }

    pub fn train_variants(&self) -> impl Iterator<Item = &VariantKey> {
        self.train.values().flatten().map(|(v, _)| v)
    }

    pub fn val_variants(&self) -> impl Iterator<Item = &VariantKey> {
        self.val.iter().map(|(v, _)| v)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn pristine(&self, clip_id: &str) -> Option<&Clip> {
        self.clips.get(clip_id)
    }

    /// Degraded full clip for a variant, computed once.
    pub fn degraded(&self, v: &VariantKey) -> Result<Arc<Clip>> {
        if let Some(c) = self.cache.lock().expect("cache lock").get(v) {
            return Ok(c.clone());
        }
        let clip = self.clips.get(&v.clip_id).ok_or_else(|| Error::UnknownClip(v.clip_id.clone()))?;
        let d = Arc::new(apply_degradation(clip, &v.spec())?);
        self.cache.lock().expect("cache lock").insert(v.clone(), d.clone());
        Ok(d)
    }

    /// Mean training-split label per metric (the constant predictor).
    pub fn train_label_mean(&self) -> QualityTriplet {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for rows in self.train.values().flatten().map(|(_, r)| r) {
            for (_, t) in rows {
                for (s, v) in sum.iter_mut().zip(t.as_array()) {
                    *s += v;
                }
                n += 1;
            }
        }
        QualityTriplet::from_array(sum.map(|s| s / n.max(1) as f64))
    }

    /// Validation targets `(variant, per-frame triplets)`.
    pub fn val_targets(&self) -> impl Iterator<Item = (&VariantKey, Vec<QualityTriplet>)> {
        self.val.iter().map(|(v, r)| (v, r.iter().map(|x| x.1).collect()))
    }
}

/// One clip window of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub variant: VariantKey,
    pub start: usize,
}

impl std::fmt::Display for Sample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.variant, self.start)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gi), mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *p -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }

    fn to_container(&self, names: &ParamStore<f32>) -> Container {
        let mut tensors = Vec::new();
        for (k, (name, t)) in names.iter().enumerate() {
            tensors.push((format!("m.{name}"), Tensor::from_vec(t.shape(), self.m[k].clone()).expect("shape")));
            tensors.push((format!("v.{name}"), Tensor::from_vec(t.shape(), self.v[k].clone()).expect("shape")));
        }
        let mut meta = BTreeMap::new();
        meta.insert("adam_t".into(), self.t.to_string());
        Container { meta, tensors }
    }

    fn restore(&mut self, c: &Container, names: &ParamStore<f32>) -> Result<()> {
        let t = c
            .meta
            .get("adam_t")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Integrity("optimizer state lacks adam_t".into()))?;
        let lookup: HashMap<&str, &Tensor<f32>> = c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (k, (name, p)) in names.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("{prefix}.{name}");
                let stored = lookup
                    .get(key.as_str())
                    .ok_or_else(|| Error::Integrity(format!("optimizer state lacks {key}")))?;
                if stored.shape() != p.shape() {
                    return Err(Error::Integrity(format!("optimizer tensor {key} has wrong shape")));
                }
                slot.copy_from_slice(stored.data());
            }
        }
        self.t = t;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub loss: MaeLoss,
}

/// Best validation result seen so far.
#[derive(Debug, Clone)]
pub struct BestModel {
    pub epoch: usize,
    pub step: usize,
    pub val_loss: f64,
    pub net: Network<f32>,
}

const CALIBRATION_WINDOWS: usize = 8;

pub struct Trainer<'a> {
    data: &'a TrainData,
    cfg: TrainConfig,
    net: Network<f32>,
    adam: Adam,
    step: usize,
    epoch_sum: [f64; 4],
    epoch_steps: usize,
    history: Vec<HistoryRecord>,
    best: Option<BestModel>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainData, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::Config("no training clips".into()));
        }
        let net = Network::new(model_cfg)?;
        let adam = Adam::new(net.params(), &cfg);
        let mut t = Self {
            data,
            cfg,
            net,
            adam,
            step: 0,
            epoch_sum: [0.0; 4],
            epoch_steps: 0,
            history: Vec::new(),
            best: None,
        };
        if t.cfg.batch_norm == BnMode::Frozen {
            t.calibrate_bn()?;
        }
        Ok(t)
    }

    /// Seeds the running statistics from one batch-statistics pass over the
    /// windows of the first epochs.
    fn calibrate_bn(&mut self) -> Result<()> {
        let mut all: Vec<Sample> = Vec::new();
        let mut epoch = 0;
        while all.len() < CALIBRATION_WINDOWS && epoch < CALIBRATION_WINDOWS {
            all.extend(self.epoch_plan(epoch).into_iter().flatten());
            epoch += 1;
        }
        all.truncate(CALIBRATION_WINDOWS);
        let (x, _) = self.batch_tensors(&all)?;
        let (_, tape) = self.net.forward_train(&x, 0)?;
        self.net.set_bn_stats(&tape);
        Ok(())
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }

    pub fn best(&self) -> Option<&BestModel> {
        self.best.as_ref()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let all = self.steps_per_epoch() * self.cfg.max_epochs;
        if self.cfg.max_steps > 0 {
            all.min(self.cfg.max_steps)
        } else {
            all
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Batches of one epoch: clip order shuffled, one (kind, amplitude) and
    /// window start drawn per clip.
    pub fn epoch_plan(&self, epoch: usize) -> Vec<Vec<Sample>> {
        let mut ids: Vec<&String> = self.data.train.keys().collect();
        ids.shuffle(&mut rng::keyed_u64(self.cfg.seed, Stream::Sampling, &[epoch as u64]));
        let window = self.data.window;
        let samples: Vec<Sample> = ids
            .into_iter()
            .map(|id| {
                let mut r = rng::keyed(self.cfg.seed, Stream::Sampling, id, epoch as u64);
                let variants = &self.data.train[id];
                let (v, _) = &variants[r.random_range(0..variants.len())];
                let len = self.data.clips[id].len();
                Sample {
                    variant: v.clone(),
                    start: r.random_range(0..=len - window),
                }
            })
            .collect();
        samples.chunks(self.cfg.batch_size).map(<[Sample]>::to_vec).collect()
    }

    fn batch_tensors(&self, batch: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let w = self.data.window;
        let mut windows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * w * 3);
        for s in batch {
            if self.cfg.val_kinds.contains(&s.variant.kind) {
                return Err(Error::Config(format!("validation kind in a gradient batch: {s}")));
            }
            let d = self.data.degraded(&s.variant)?;
            windows.push(d.slice(s.start..s.start + w)?);
            let rows = self.data.train[&s.variant.clip_id]
                .iter()
                .find(|(v, _)| v == &s.variant)
                .map(|(_, r)| r)
                .expect("sampled from the table");
            for (_, t) in &rows[s.start..s.start + w] {
                targets.extend(t.as_array().map(|v| v as f32));
            }
        }
        let x = clip_batch(&windows.iter().collect::<Vec<_>>())?;
        let y = Tensor::from_vec(&[batch.len(), w, 3], targets)?;
        Ok((x, y))
    }

    /// Loss of the next scheduled batch without updating anything.
    pub fn peek_loss(&self) -> Result<MaeLoss> {
        let spe = self.steps_per_epoch();
        let plan = self.epoch_plan(self.step / spe);
        let (x, y) = self.batch_tensors(&plan[self.step % spe])?;
        let (pred, _) = self.net.forward_train_with(&x, rng::mix(&[self.cfg.seed, self.step as u64]), self.cfg.batch_norm)?;
        mae_loss(&pred, &y)
    }

    /// One optimizer step on the next scheduled batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let plan = self.epoch_plan(epoch);
        let batch = &plan[self.step % spe];
        let (x, y) = self.batch_tensors(batch)?;
        let key = rng::mix(&[self.cfg.seed, self.step as u64]);
        let (pred, tape) = self.net.forward_train_with(&x, key, self.cfg.batch_norm)?;
        let loss = mae_loss(&pred, &y)?;
        let keys = || batch.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {} on batch [{}]", self.step, keys())));
        }
        let grads = self.net.backward(&tape, &mae_loss_grad(&pred, &y)?)?;
        if !grads.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at step {} on batch [{}]", self.step, keys())));
        }
        self.adam.update(self.net.params_mut(), &grads);
        if self.cfg.batch_norm == BnMode::Batch {
            self.net.apply_bn_updates(&tape);
        }
        let report = StepReport {
            epoch,
            step: self.step,
            loss,
        };
        self.step += 1;
        self.epoch_sum[0] += loss.total;
        for m in 0..3 {
            self.epoch_sum[m + 1] += loss.per_metric[m];
        }
        self.epoch_steps += 1;
        Ok(report)
    }

    /// Inference-mode MAE over every validation variant (whole clips, pooled frames).
    pub fn validate(&self) -> Result<MaeLoss> {
        evaluate_variants(&self.net, self.data, self.data.val.iter().map(|(v, _)| v))
    }

    fn close_epoch(&mut self, epoch: usize, validate: bool) -> Result<()> {
        if self.epoch_steps > 0 {
            let n = self.epoch_steps as f64;
            self.history.push(HistoryRecord {
                epoch,
                step: self.step,
                split: SplitName::Train,
                loss: MaeLoss {
                    total: self.epoch_sum[0] / n,
                    per_metric: [self.epoch_sum[1] / n, self.epoch_sum[2] / n, self.epoch_sum[3] / n],
                },
            });
        }
        self.epoch_sum = [0.0; 4];
        self.epoch_steps = 0;
        if validate {
            let loss = self.validate()?;
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation loss after epoch {epoch}")));
            }
            log::info!("epoch {epoch} step {} val loss {}", self.step, sig9(loss.total));
            self.history.push(HistoryRecord {
                epoch,
                step: self.step,
                split: SplitName::Val,
                loss,
            });
            if self.best.as_ref().is_none_or(|b| loss.total < b.val_loss) {
                self.best = Some(BestModel {
                    epoch,
                    step: self.step,
                    val_loss: loss.total,
                    net: self.net.clone(),
                });
            }
        }
        Ok(())
    }

    /// Trains until the step or epoch budget is spent. `on_step` sees every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        while self.step < total {
            let r = self.train_step()?;
            on_step(&r);
            let end_of_epoch = self.step % spe == 0 || self.step == total;
            if end_of_epoch {
                let last = self.step == total;
                let due = (r.epoch + 1) % self.cfg.val_every == 0;
                self.close_epoch(r.epoch, due || last)?;
            }
        }
        Ok(())
    }

    /// Writes `last.nvq`, `best.nvq`, `optimizer.nvq`, `history.csv` and `config.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.save_checkpoint(&dir.join("last.nvq"))?;
        if let Some(b) = &self.best {
            b.net.save_checkpoint(&dir.join("best.nvq"))?;
        }
        let mut opt = self.adam.to_container(self.net.params());
        opt.meta.insert("step".into(), self.step.to_string());
        opt.meta.insert("epoch_steps".into(), self.epoch_steps.to_string());
        opt.meta.insert(
            "epoch_sum".into(),
            self.epoch_sum.iter().map(|v| format!("{:e}", v)).collect::<Vec<_>>().join(","),
        );
        if let Some(b) = &self.best {
            opt.meta.insert("best".into(), format!("{},{},{:e}", b.epoch, b.step, b.val_loss));
        }
        opt.save(&dir.join("optimizer.nvq"))?;
        let hist = dir.join("history.csv");
        std::fs::write(&hist, history_csv(&self.history)).map_err(|e| Error::io(&hist, e))?;
        let mut snapshot = self.cfg.to_pairs();
        snapshot.extend(self.net.config().to_pairs());
        snapshot.insert(
            "model".into(),
            if self.net.config().temporal_enabled { "temporal" } else { "baseline" }.into(),
        );
        kvfile::save(&dir.join("config.txt"), &snapshot)
    }

    /// Continues a run saved by [`Trainer::save`].
    pub fn resume(data: &'a TrainData, dir: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::<f32>::load_checkpoint(&dir.join("last.nvq"))?;
        let opt = Container::load(&dir.join("optimizer.nvq"))?;
        let mut adam = Adam::new(net.params(), &cfg);
        adam.restore(&opt, net.params())?;
        let get = |k: &str| {
            opt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("optimizer state lacks {k}")))
        };
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| Error::Integrity(format!("bad number `{s}`")));
        let step: usize = get("step")?.parse().map_err(|_| Error::Integrity("bad step".into()))?;
        let epoch_steps: usize = get("epoch_steps")?.parse().map_err(|_| Error::Integrity("bad epoch_steps".into()))?;
        let sums: Vec<f64> = get("epoch_sum")?.split(',').map(parse_f).collect::<Result<_>>()?;
        let epoch_sum: [f64; 4] = sums.try_into().map_err(|_| Error::Integrity("bad epoch_sum".into()))?;
        let hist_path = dir.join("history.csv");
        let history = parse_history(&std::fs::read_to_string(&hist_path).map_err(|e| Error::io(&hist_path, e))?)?;
        let best = match opt.meta.get("best") {
            Some(b) => {
                let f: Vec<&str> = b.split(',').collect();
                if f.len() != 3 {
                    return Err(Error::Integrity("bad best record".into()));
                }
                Some(BestModel {
                    epoch: f[0].parse().map_err(|_| Error::Integrity("bad best epoch".into()))?,
                    step: f[1].parse().map_err(|_| Error::Integrity("bad best step".into()))?,
                    val_loss: parse_f(f[2])?,
                    net: Network::<f32>::load_checkpoint(&dir.join("best.nvq"))?,
                })
            }
            None => None,
        };
        Ok(Self {
            data,
            cfg,
            net,
            adam,
            step,
            epoch_sum,
            epoch_steps,
            history,
            best,
        })
    }
}

/// Inference-mode MAE pooled over all frames of the given variants.
pub fn evaluate_variants<'v>(
    net: &Network<f32>,
    data: &TrainData,
    variants: impl Iterator<Item = &'v VariantKey>,
) -> Result<MaeLoss> {
    let variants: Vec<&VariantKey> = variants.collect();
    let lookup: HashMap<&VariantKey, &Targets> = data
        .val
        .iter()
        .map(|(v, r)| (v, r))
        .chain(data.train.values().flatten().map(|(v, r)| (v, r)))
        .collect();
    let parts = par::try_map(variants.len(), |i| -> Result<(f64, [f64; 3], usize)> {
        let v = variants[i];
        let rows = lookup.get(v).ok_or_else(|| Error::Param(format!("no labels for {v}")))?;
        let d = data.degraded(v)?;
        let x = clip_batch::<f32>(&[d.as_ref()])?;
        let (pred, _) = net.forward(&x, None)?;
        let target: Vec<f32> = rows.iter().flat_map(|(_, t)| t.as_array().map(|v| v as f32)).collect();
        let loss = mae_loss(&pred, &Tensor::from_vec(pred.shape(), target)?)?;
        Ok((loss.total, loss.per_metric, rows.len()))
    })?;
    let frames: usize = parts.iter().map(|p| p.2).sum();
    let mut per = [0.0; 3];
    for (_, m, n) in &parts {
        for k in 0..3 {
            per[k] += m[k] * *n as f64;
        }
    }
    let per_metric = per.map(|s| s / frames.max(1) as f64);
    Ok(MaeLoss {
        total: per_metric.iter().sum::<f64>() / 3.0,
        per_metric,
    })
}
