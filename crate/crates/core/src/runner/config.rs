//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::d2n::D2NConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Supervision};
use crate::net::{EmbedKind, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    /// Checkpoints and logs go here when set.
    pub out: Option<PathBuf>,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Hard cap on optimizer steps; `0` means none.
    pub max_steps: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub supervision: Supervision,
    pub loss: LossWeights,
    pub perceptual_seed: u64,
    pub model: ModelConfig,
    pub d2n: D2NConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: None,
            batch_size: 2,
            lr0: 1e-4,
            lr_step_epochs: 15,
            lr_gamma: 0.5,
            max_epochs: 110,
            patience: 15,
            max_steps: 0,
            seed: 0,
            bn_momentum: 0.1,
            supervision: Supervision::AllScales,
            loss: LossWeights::default(),
            perceptual_seed: 0x5eed,
            model: ModelConfig::default(),
            d2n: D2NConfig::default(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key}: expected a number"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("{key}: expected a non-negative integer"))),
    }
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Config(format!("{key}: expected a string")))
}

impl TrainConfig {
    /// Parses `key = value` lines; dotted keys address nested fields.
    /// Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        let mut cfg = Self::default();
        let mut width_set = false;
        for (key, v) in &pairs {
            let k = key.as_str();
            match k {
                "data" => cfg.data = base.join(as_str(k, v)?),
                "out" => cfg.out = Some(base.join(as_str(k, v)?)),
                "batch_size" => cfg.batch_size = as_usize(k, v)?,
                "lr0" => cfg.lr0 = as_f64(k, v)?,
                "lr_step_epochs" => cfg.lr_step_epochs = as_usize(k, v)?,
                "lr_gamma" => cfg.lr_gamma = as_f64(k, v)?,
                "max_epochs" => cfg.max_epochs = as_usize(k, v)?,
                "patience" => cfg.patience = as_usize(k, v)?,
                "max_steps" => cfg.max_steps = as_usize(k, v)?,
                "seed" => cfg.seed = as_usize(k, v)? as u64,
                "bn_momentum" => cfg.bn_momentum = as_f64(k, v)?,
                "supervision" => {
                    cfg.supervision = match as_str(k, v)? {
                        "all" => Supervision::AllScales,
                        "finest" => Supervision::FinestOnly,
                        s => return Err(Error::Config(format!("supervision: unknown value {s:?}"))),
                    }
                }
                "loss.lambda_m" => cfg.loss.lambda_m = as_f64(k, v)?,
                "loss.lambda_q" => cfg.loss.lambda_q = as_f64(k, v)?,
                "loss.lambda_p" => cfg.loss.lambda_p = as_f64(k, v)?,
                "loss.lambda_s" => cfg.loss.lambda_s = as_f64(k, v)?,
                "loss.perceptual_seed" => cfg.perceptual_seed = as_usize(k, v)? as u64,
                "model.height" => cfg.model.height = as_usize(k, v)?,
                "model.width" => {
                    cfg.model.width = as_usize(k, v)?;
                    width_set = true;
                }
                "model.levels" => cfg.model.levels = as_usize(k, v)?,
                "model.base_channels" => cfg.model.base_channels = as_usize(k, v)?,
                "model.num_heads" => cfg.model.num_heads = as_usize(k, v)?,
                "model.k_samples" => cfg.model.k_samples = as_usize(k, v)?,
                "model.lattice_spacing" => cfg.model.lattice_spacing = as_f64(k, v)?,
                "model.ffn_expansion" => cfg.model.ffn_expansion = as_usize(k, v)?,
                "model.embed" => {
                    cfg.model.embed = match as_str(k, v)? {
                        "conv_stack" => EmbedKind::ConvStack,
                        "single" => EmbedKind::Single,
                        s => return Err(Error::Config(format!("model.embed: unknown value {s:?}"))),
                    }
                }
                "d2n.num_triangles" => cfg.d2n.num_triangles = as_usize(k, v)?,
                "d2n.neighborhood_radius" => cfg.d2n.neighborhood_radius = as_usize(k, v)?,
                "d2n.seed" => cfg.d2n.seed = as_usize(k, v)? as u64,
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        if !width_set {
            cfg.model.width = 2 * cfg.model.height;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.lr_step_epochs == 0 {
            return bad("lr_step_epochs must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr_gamma > 0.0) {
            return bad("learning rate and decay must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        if self.model.levels == 0 {
            return bad("model.levels must be >= 1 for training");
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.d2n.validate()
    }

    /// `lr0 · γ^⌊epoch / step⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }
}
