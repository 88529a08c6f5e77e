//! `key = value` run configuration. `#` starts a comment; unknown and
//! repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::net::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn key_values(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)));
        };
        let (key, value) = (k.trim().to_string(), v.trim().to_string());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!("line {}: {key:?} already set on line {}", n + 1, prev.line)));
        }
        out.push(Entry { line: n + 1, key, value });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    /// Scheduler period, in epochs.
    pub t_max: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr_init: 1e-3,
            lr_min: 1e-5,
            t_max: 50,
            weight_decay: 1e-2,
            seed: 42,
            max_steps: None,
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_init, got lr_min = {}, lr_init = {}",
                self.lr_min, self.lr_init
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Where samples come from: a saved dataset directory or the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Train split directory; `val_path` must then be set too.
    pub path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, val_path: None, train_samples: 160, val_samples: 40, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_num<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| Error::Config(format!("line {}: bad value for {}: {:?}", e.line, e.key, e.value)))
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("line {}: {} expects true/false, got {:?}", e.line, e.key, e.value))),
    }
}

fn parse_size(e: &Entry) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("line {}: input_size expects N or HxW, got {:?}", e.line, e.value));
    match e.value.split_once('x') {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let n = e.value.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn parse_depths(e: &Entry) -> Result<[usize; 4]> {
    let v: Vec<usize> = e
        .value
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("line {}: bad depths {:?}", e.line, e.value)))?;
    v.try_into()
        .map_err(|_| Error::Config(format!("line {}: depths needs four entries, got {:?}", e.line, e.value)))
}

pub fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "full" => Some(ModelConfig::full()),
        "desk" => Some(ModelConfig::desk()),
        "micro" => Some(ModelConfig::micro()),
        _ => None,
    }
}

impl RunConfig {
    /// `preset` is applied before every other key regardless of its position.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = key_values(text)?;
        let mut cfg = RunConfig::default();
        if let Some(e) = entries.iter().find(|e| e.key == "preset") {
            cfg.model = preset(&e.value)
                .ok_or_else(|| Error::Config(format!("line {}: unknown preset {:?}", e.line, e.value)))?;
        }
        let (m, t, d) = (&mut cfg.model, &mut cfg.train, &mut cfg.data);
        for e in &entries {
            match e.key.as_str() {
                "preset" => {}
                "in_channels" => m.in_channels = parse_num(e)?,
                "base_channels" => m.base_channels = parse_num(e)?,
                "depths" => m.depths = parse_depths(e)?,
                "state_dim" => m.state_dim = parse_num(e)?,
                "sdi_channels" => m.sdi_channels = parse_num(e)?,
                "input_size" => m.input_size = parse_size(e)?,
                "deep_supervision" => m.deep_supervision = parse_bool(e)?,
                "ssm_ratio" => m.ssm_ratio = parse_num(e)?,
                "epochs" => t.epochs = parse_num(e)?,
                "batch_size" => t.batch_size = parse_num(e)?,
                "lr_init" => t.lr_init = parse_num(e)?,
                "lr_min" => t.lr_min = parse_num(e)?,
                "t_max" => t.t_max = parse_num(e)?,
                "weight_decay" => t.weight_decay = parse_num(e)?,
                "seed" => t.seed = parse_num(e)?,
                "max_steps" => t.max_steps = Some(parse_num(e)?),
                "hflip" => t.augment.hflip = parse_bool(e)?,
                "vflip" => t.augment.vflip = parse_bool(e)?,
                "rotate" => t.augment.rotate = parse_bool(e)?,
                "bce_weight" => t.loss.bce = parse_num(e)?,
                "dice_weight" => t.loss.dice = parse_num(e)?,
                "data" => d.path = Some(PathBuf::from(&e.value)),
                "val_data" => d.val_path = Some(PathBuf::from(&e.value)),
                "train_samples" => d.train_samples = parse_num(e)?,
                "val_samples" => d.val_samples = parse_num(e)?,
                "data_seed" => d.seed = parse_num(e)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", e.line))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| e.tagged(path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.path.is_some() != self.data.val_path.is_some() {
            return Err(Error::Config("data and val_data must be given together".into()));
        }
        Ok(())
    }

    /// Canonical text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let mut s = String::new();
        let dep = m.depths.map(|x| x.to_string()).join(",");
        let _ = writeln!(s, "# model");
        let _ = writeln!(s, "in_channels = {}", m.in_channels);
        let _ = writeln!(s, "base_channels = {}", m.base_channels);
        let _ = writeln!(s, "depths = {dep}");
        let _ = writeln!(s, "state_dim = {}", m.state_dim);
        let _ = writeln!(s, "sdi_channels = {}", m.sdi_channels);
        let _ = writeln!(s, "input_size = {}x{}", m.input_size.0, m.input_size.1);
        let _ = writeln!(s, "deep_supervision = {}", m.deep_supervision);
        let _ = writeln!(s, "ssm_ratio = {}", m.ssm_ratio);
        let _ = writeln!(s, "\n# optimization");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "lr_init = {}", t.lr_init);
        let _ = writeln!(s, "lr_min = {}", t.lr_min);
        let _ = writeln!(s, "t_max = {}", t.t_max);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "seed = {}", t.seed);
        if let Some(n) = t.max_steps {
            let _ = writeln!(s, "max_steps = {n}");
        }
        let _ = writeln!(s, "hflip = {}", t.augment.hflip);
        let _ = writeln!(s, "vflip = {}", t.augment.vflip);
        let _ = writeln!(s, "rotate = {}", t.augment.rotate);
        let _ = writeln!(s, "bce_weight = {}", t.loss.bce);
        let _ = writeln!(s, "dice_weight = {}", t.loss.dice);
        let _ = writeln!(s, "\n# data");
        if let (Some(p), Some(v)) = (&d.path, &d.val_path) {
            let _ = writeln!(s, "data = {}", p.display());
            let _ = writeln!(s, "val_data = {}", v.display());
        }
        let _ = writeln!(s, "train_samples = {}", d.train_samples);
        let _ = writeln!(s, "val_samples = {}", d.val_samples);
        let _ = writeln!(s, "data_seed = {}", d.seed);
        s
    }
}
