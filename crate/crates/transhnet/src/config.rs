//! Run configuration: flat `key = value` text, `#` starts a comment.
//!
//! A `preset = toy|full` line selects the starting values; every other key
//! overrides one field, whatever its position in the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use transhnet_core::nn::layers::HeadUpsample;
use transhnet_core::nn::ModelConfig;
use transhnet_core::optim::AdamConfig;
use transhnet_core::trainer::EarlyStop;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Directory with `images/` and `masks/`; synthetic data when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub synth_samples: usize,
    /// Write `epoch_NNNN.ckpt` every this many epochs.
    pub checkpoint_every: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: AdamConfig::default().lr,
            lambda: 1.0,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            synth_samples: 8,
            checkpoint_every: 1,
            early_stop: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}, expected true or false"))),
    }
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<Vec<usize>>>()?;
    items.try_into().map_err(|_| Error::Config(format!("{key} needs {N} comma-separated values")))
}

fn list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Desk-scale preset: 64×64 synthetic images, depth-2 encoder.
    pub fn toy() -> Self {
        Self { model: ModelConfig::toy(), lr: 2e-3, epochs: 300, checkpoint_every: 50, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset {name:?}, expected toy or full"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let mut cfg = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, name)) => Self::preset(name)?,
            None => Self::default(),
        };
        for (key, value) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.encoder.patch_size = parse(key, value)?,
            "depth" => m.encoder.depth = parse(key, value)?,
            "d_model" => m.encoder.d_model = parse(key, value)?,
            "heads" => m.encoder.heads = parse(key, value)?,
            "mlp_ratio" => m.encoder.mlp_ratio = parse(key, value)?,
            "transformer_channels" => m.transformer_channels = parse_list(key, value)?,
            "cnn_stem_channels" => m.cnn.stem_channels = parse(key, value)?,
            "cnn_tap_channels" => m.cnn.tap_channels = parse_list(key, value)?,
            "cnn_units_per_stage" => m.cnn.units_per_stage = parse(key, value)?,
            "fusion_channels" => m.fusion_channels = parse_list(key, value)?,
            "cbam_reduction" => m.cbam_reduction = parse(key, value)?,
            "glff" => m.glff = parse_bool(key, value)?,
            "dfm" => m.dfm = parse_bool(key, value)?,
            "head_upsample" => {
                m.head_upsample = match value {
                    "nearest" => HeadUpsample::Nearest,
                    "bilinear" => HeadUpsample::Bilinear,
                    _ => return Err(Error::Config(format!("invalid head_upsample {value:?}"))),
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "synth_samples" => self.synth_samples = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "early_stop_patience" => {
                let patience: usize = parse(key, value)?;
                let min_delta = self.early_stop.map_or(0.0, |e| e.min_delta);
                self.early_stop = (patience > 0).then_some(EarlyStop { patience, min_delta });
            }
            "early_stop_min_delta" => {
                let min_delta = parse(key, value)?;
                let patience = self.early_stop.map_or(0, |e| e.patience);
                self.early_stop = Some(EarlyStop { patience, min_delta });
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model.encoder.patch_size != 16 {
            return bad(format!("patch_size must be 16 so branch scales line up, got {}", self.model.encoder.patch_size));
        }
        self.model.validate()?;
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.synth_samples == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, synth_samples and checkpoint_every must be at least 1".into());
        }
        if self.early_stop.is_some_and(|e| e.patience == 0) {
            return bad("early_stop_min_delta needs early_stop_patience ≥ 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    /// Canonical text form; `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("image_size", m.image_size.to_string());
        kv("patch_size", e.patch_size.to_string());
        kv("depth", e.depth.to_string());
        kv("d_model", e.d_model.to_string());
        kv("heads", e.heads.to_string());
        kv("mlp_ratio", e.mlp_ratio.to_string());
        kv("transformer_channels", list(&m.transformer_channels));
        kv("cnn_stem_channels", m.cnn.stem_channels.to_string());
        kv("cnn_tap_channels", list(&m.cnn.tap_channels));
        kv("cnn_units_per_stage", m.cnn.units_per_stage.to_string());
        kv("fusion_channels", list(&m.fusion_channels));
        kv("cbam_reduction", m.cbam_reduction.to_string());
        kv("glff", m.glff.to_string());
        kv("dfm", m.dfm.to_string());
        let head = match m.head_upsample {
            HeadUpsample::Nearest => "nearest",
            HeadUpsample::Bilinear => "bilinear",
        };
        kv("head_upsample", head.into());
        kv("lr", self.lr.to_string());
        kv("lambda", self.lambda.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        if let Some(dir) = &self.data_dir {
            kv("data_dir", dir.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        kv("synth_samples", self.synth_samples.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        if let Some(es) = self.early_stop {
            kv("early_stop_patience", es.patience.to_string());
            kv("early_stop_min_delta", es.min_delta.to_string());
        }
        s
    }
}
