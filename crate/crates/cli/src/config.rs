//! Run configuration: defaults, the flat `key = value` file, and CLI
//! overrides, with precedence flag > file > default.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Result};
use carrnn_core::cells::CellKind;
use carrnn_core::dataset::FillMode;
use carrnn_core::numerics::Activation;
use carrnn_core::train::TrainConfig;

/// Nominal-step specification: an explicit grid (raw time units) or
/// data-derived candidates (mean gap and gap IQR of the training series).
#[derive(Clone, Debug, PartialEq)]
pub enum TauSpec {
    Auto,
    Values(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub cell: CellKind,
    pub fill: Option<FillMode>,
    pub tau: TauSpec,
    pub hidden_multiplier: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_fraction: f64,
    pub seed: u64,
    pub peepholes: bool,
    pub act_h: Activation,
    pub clip_norm: Option<f64>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub n_context: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            data: None,
            out: None,
            model: None,
            cell: CellKind::CarGru,
            fill: None,
            tau: TauSpec::Auto,
            hidden_multiplier: t.hidden_multiplier,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            weight_decay: t.weight_decay,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_fraction: t.batch_fraction,
            seed: t.seed,
            peepholes: t.peepholes,
            act_h: t.act_h,
            clip_norm: t.clip_norm,
            val_fraction: 0.2,
            test_fraction: 0.2,
            n_context: 1,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "on" => Ok(true),
        "0" | "false" | "off" => Ok(false),
        _ => bail!("config key '{key}': expected a boolean, got '{value}'"),
    }
}

impl RunConfig {
    /// Applies a `key = value` file on top of the current values. Unknown
    /// keys are rejected by name; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected 'key = value'", idx + 1))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "data" => self.data = Some(PathBuf::from(value)),
                "out" => self.out = Some(PathBuf::from(value)),
                "model" => self.model = Some(PathBuf::from(value)),
                "cell" => {
                    self.cell = CellKind::parse(value)
                        .ok_or_else(|| anyhow!("config key 'cell': unknown cell '{value}'"))?
                }
                "fill" => {
                    self.fill = match value {
                        "none" => None,
                        _ => Some(FillMode::parse(value).ok_or_else(|| {
                            anyhow!("config key 'fill': unknown fill mode '{value}'")
                        })?),
                    }
                }
                "tau" => self.tau = parse_tau(value)?,
                "hidden_multiplier" => self.hidden_multiplier = value.parse()?,
                "learning_rate" => self.learning_rate = value.parse()?,
                "beta1" => self.beta1 = value.parse()?,
                "beta2" => self.beta2 = value.parse()?,
                "epsilon" => self.epsilon = value.parse()?,
                "weight_decay" => self.weight_decay = value.parse()?,
                "max_epochs" => self.max_epochs = value.parse()?,
                "patience" => self.patience = value.parse()?,
                "batch_fraction" => self.batch_fraction = value.parse()?,
                "seed" => self.seed = value.parse()?,
                "peepholes" => self.peepholes = parse_bool(key, value)?,
                "act_h" => {
                    self.act_h = Activation::parse(value)
                        .ok_or_else(|| anyhow!("config key 'act_h': unknown activation '{value}'"))?
                }
                "clip_norm" => {
                    self.clip_norm = match value {
                        "none" => None,
                        _ => Some(value.parse()?),
                    }
                }
                "val_fraction" => self.val_fraction = value.parse()?,
                "test_fraction" => self.test_fraction = value.parse()?,
                "n_context" => self.n_context = value.parse()?,
                other => bail!("config: unknown key '{other}'"),
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            cell: self.cell,
            hidden_multiplier: self.hidden_multiplier,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_fraction: self.batch_fraction,
            seed: self.seed,
            peepholes: self.peepholes,
            act_h: self.act_h,
            clip_norm: self.clip_norm,
        }
    }
}

pub fn parse_tau(value: &str) -> Result<TauSpec> {
    if value == "auto" {
        return Ok(TauSpec::Auto);
    }
    let vals: Vec<f64> = value
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!("tau: expected 'auto' or a comma-separated float list, got '{value}'"))?;
    if vals.iter().any(|&t| t <= 0.0) {
        bail!("tau: candidates must be positive");
    }
    Ok(TauSpec::Values(vals))
}
