use std::collections::BTreeMap;
use std::path::Path;

use streamvq::kvfile;
use streamvq::model::ModelConfig;
use streamvq::train::TrainConfig;
use streamvq::{Error, Result};

use crate::TrainArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
    Derived,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
            Source::Derived => "derived",
        }
    }
}

/// Fully resolved training run: both configs plus where every value came from.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sources: BTreeMap<String, Source>,
}

impl RunConfig {
    pub fn pairs(&self) -> BTreeMap<String, String> {
        let mut m = self.train.to_pairs();
        m.extend(self.model.to_pairs());
        m.insert("model".into(), if self.model.temporal_enabled { "temporal" } else { "baseline" }.into());
        m
    }

    pub fn log(&self) {
        for (k, v) in self.pairs() {
            let src = self.sources.get(&k).copied().unwrap_or(Source::Default);
            log::info!("config {k}={v} ({})", src.as_str());
        }
    }
}

pub fn flag_pairs(a: &TrainArgs) -> BTreeMap<String, String> {
    let fields: [(&str, &Option<String>); 24] = [
        ("model", &a.model),
        ("train_kinds", &a.train_kinds),
        ("val_kinds", &a.val_kinds),
        ("clip_len", &a.clip_len),
        ("resolution", &a.resolution),
        ("batch_size", &a.batch_size),
        ("learning_rate", &a.learning_rate),
        ("beta1", &a.beta1),
        ("beta2", &a.beta2),
        ("adam_eps", &a.adam_eps),
        ("max_epochs", &a.max_epochs),
        ("max_steps", &a.max_steps),
        ("val_every", &a.val_every),
        ("batch_norm", &a.batch_norm),
        ("seed", &a.seed),
        ("encoder_widths", &a.encoder_widths),
        ("lstm_hidden", &a.lstm_hidden),
        ("mlp_hidden", &a.mlp_hidden),
        ("mlp_in", &a.mlp_in),
        ("dropout", &a.dropout),
        ("subsample", &a.subsample),
        ("temporal_enabled", &a.temporal_enabled),
        ("init_seed", &a.init_seed),
        ("group_size", &a.group_size),
    ];
    fields
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect()
}

fn model_preset(name: &str) -> Result<ModelConfig> {
    match name {
        "temporal" => Ok(ModelConfig::default()),
        "baseline" => Ok(ModelConfig::baseline()),
        other => Err(Error::Config(format!("model: `{other}` is not `temporal` or `baseline`"))),
    }
}

/// Layers defaults, then `file`, then `flags`. `random_seed` is only called
/// when neither layer names a seed.
pub fn resolve(
    file: &BTreeMap<String, String>,
    flags: &BTreeMap<String, String>,
    random_seed: impl FnOnce() -> u64,
) -> Result<RunConfig> {
    let mut sources = BTreeMap::new();
    let preset = match (flags.get("model"), file.get("model")) {
        (Some(m), _) => {
            sources.insert("model".to_string(), Source::Flag);
            m.as_str()
        }
        (None, Some(m)) => {
            sources.insert("model".to_string(), Source::File);
            m.as_str()
        }
        (None, None) => "temporal",
    };
    let mut model = model_preset(preset)?;
    let mut train = TrainConfig::default();
    for (layer, src) in [(file, Source::File), (flags, Source::Flag)] {
        for (k, v) in layer {
            if k == "model" {
                continue;
            }
            if !train.set(k, v)? && !model.set(k, v)? {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            sources.insert(k.clone(), src);
        }
    }
    if !sources.contains_key("seed") {
        train.seed = random_seed();
        sources.insert("seed".into(), Source::Derived);
        log::info!("no seed given; using random seed {}", train.seed);
    }
    if !sources.contains_key("init_seed") {
        model.init_seed = train.seed;
        sources.insert("init_seed".into(), Source::Derived);
    }
    train.validate()?;
    model.validate()?;
    Ok(RunConfig { train, model, sources })
}

pub fn load_file(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    match path {
        Some(p) => kvfile::load(p),
        None => Ok(BTreeMap::new()),
    }
}
