use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channels of the three residual stages.
    pub encoder_widths: [usize; 3],
    /// LSTM hidden units for the x1, x2 and x3 scales.
    pub lstm_hidden: [usize; 3],
    pub mlp_hidden: [usize; 2],
    /// Width of the pooled concatenation; must equal [`ModelConfig::pooled_width`].
    pub mlp_in: usize,
    pub dropout: f64,
    /// Spatial stride applied to feature maps before the recurrent stage.
    pub subsample: usize,
    pub temporal_enabled: bool,
    pub init_seed: u64,
    /// Rows per LSTM work group. Affects memory and scheduling only.
    pub group_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [32, 64, 128],
            lstm_hidden: [32, 32, 64],
            mlp_hidden: [256, 128],
            mlp_in: 256,
            dropout: 0.1,
            subsample: 2,
            temporal_enabled: true,
            init_seed: 0,
            group_size: 256,
        }
    }
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a list of integers")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} values, got `{v}`")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Baseline with recurrence bypassed.
    pub fn baseline() -> Self {
        Self {
            temporal_enabled: false,
            ..Self::default()
        }
    }

    /// Channel counts of the four pooled feature groups in concatenation order.
    pub fn pooled_channels(&self) -> [usize; 4] {
        let [w1, w2, w3] = self.encoder_widths;
        if self.temporal_enabled {
            [self.lstm_hidden[0], self.lstm_hidden[1], self.lstm_hidden[2], w3]
        } else {
            [w1, w1, w2, w3]
        }
    }

    pub fn pooled_width(&self) -> usize {
        self.pooled_channels().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlp_in != self.pooled_width() {
            return Err(Error::Config(format!(
                "mlp_in = {} but the pooled features concatenate to {} channels",
                self.mlp_in,
                self.pooled_width()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.subsample == 0 || self.group_size == 0 {
            return Err(Error::Config("subsample and group_size must be positive".into()));
        }
        if self.encoder_widths.contains(&0) || self.lstm_hidden.contains(&0) || self.mlp_hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("encoder_widths".into(), join(&self.encoder_widths));
        m.insert("lstm_hidden".into(), join(&self.lstm_hidden));
        m.insert("mlp_hidden".into(), join(&self.mlp_hidden));
        m.insert("mlp_in".into(), self.mlp_in.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("subsample".into(), self.subsample.to_string());
        m.insert("temporal_enabled".into(), self.temporal_enabled.to_string());
        m.insert("init_seed".into(), self.init_seed.to_string());
        m.insert("group_size".into(), self.group_size.to_string());
        m
    }

    pub const KEYS: [&'static str; 9] = [
        "encoder_widths",
        "lstm_hidden",
        "mlp_hidden",
        "mlp_in",
        "dropout",
        "subsample",
        "temporal_enabled",
        "init_seed",
        "group_size",
    ];

    /// Applies one `key=value` override; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("{key}: `{value}` is not {what}"));
        match key {
            "encoder_widths" => self.encoder_widths = parse_list(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse_list(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_list(key, value)?,
            "mlp_in" => self.mlp_in = value.parse().map_err(|_| bad("an integer"))?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad("a number"))?,
            "subsample" => self.subsample = value.parse().map_err(|_| bad("an integer"))?,
            "temporal_enabled" => self.temporal_enabled = value.parse().map_err(|_| bad("true/false"))?,
            "init_seed" => self.init_seed = value.parse().map_err(|_| bad("an integer"))?,
            "group_size" => self.group_size = value.parse().map_err(|_| bad("an integer"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            if !c.set(k, v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Differences that change the computed function (`group_size` excluded).
    pub fn mismatch(&self, other: &ModelConfig) -> Option<String> {
        let a = self.to_pairs();
        let b = other.to_pairs();
        let diffs: Vec<String> = a
            .iter()
            .filter(|(k, _)| k.as_str() != "group_size")
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: expected {v}, found {}", b.get(k).map_or("-", |s| s.as_str())))
            .collect();
        (!diffs.is_empty()).then(|| diffs.join("; "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths_are_consistent() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::baseline().validate().unwrap();
        assert_eq!(ModelConfig::default().pooled_width(), 256);
    }

    #[test]
    fn wide_head_requires_matching_widths() {
        let mut c = ModelConfig { mlp_in: 512, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c.encoder_widths = [64, 128, 256];
        c.lstm_hidden = [64, 64, 128];
        c.validate().unwrap();
    }

    #[test]
    fn pairs_round_trip() {
        let c = ModelConfig { temporal_enabled: false, init_seed: 9, ..ModelConfig::default() };
        assert_eq!(ModelConfig::from_pairs(&c.to_pairs()).unwrap(), c);
        assert!(c.mismatch(&ModelConfig { group_size: 3, ..c.clone() }).is_none());
        assert!(c.mismatch(&ModelConfig::default()).unwrap().contains("temporal_enabled"));
    }
}
