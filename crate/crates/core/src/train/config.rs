use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

const KEYS: [&str; 17] = [
    "scales",
    "base_channels",
    "input_channels",
    "input_size",
    "margin",
    "threshold",
    "variant",
    "attention_cap",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "beta1",
    "beta2",
    "eps",
    "data_root",
    "out_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }

    /// Parses flat `key = value` text. Blank lines and `#` comments are
    /// ignored; unset keys keep their defaults; unknown or repeated keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line_no}: unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line_no}: `{key}` set twice")));
            }
            let m = &mut cfg.model;
            match key {
                "scales" => m.scales = parse_value(key, value, line_no)?,
                "base_channels" => m.base_channels = parse_value(key, value, line_no)?,
                "input_channels" => m.input_channels = parse_value(key, value, line_no)?,
                "input_size" => m.input_size = parse_value(key, value, line_no)?,
                "margin" => m.margin = parse_value(key, value, line_no)?,
                "threshold" => m.threshold = parse_value(key, value, line_no)?,
                "variant" => m.variant = value.parse()?,
                "attention_cap" => m.attention_cap = parse_value(key, value, line_no)?,
                "lr" => cfg.lr = parse_value(key, value, line_no)?,
                "epochs" => cfg.epochs = parse_value(key, value, line_no)?,
                "batch_size" => cfg.batch_size = parse_value(key, value, line_no)?,
                "seed" => cfg.seed = parse_value(key, value, line_no)?,
                "beta1" => cfg.beta1 = parse_value(key, value, line_no)?,
                "beta2" => cfg.beta2 = parse_value(key, value, line_no)?,
                "eps" => cfg.eps = parse_value(key, value, line_no)?,
                "data_root" => cfg.data_root = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form listing every key; `parse(to_text())` restores the
    /// config exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("scales", m.scales.to_string());
        put("base_channels", m.base_channels.to_string());
        put("input_channels", m.input_channels.to_string());
        put("input_size", m.input_size.to_string());
        put("margin", m.margin.to_string());
        put("threshold", m.threshold.to_string());
        put("variant", m.variant.to_string());
        put("attention_cap", m.attention_cap.to_string());
        put("lr", self.lr.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("eps", self.eps.to_string());
        put("data_root", self.data_root.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }
}
