//! Flat `key = value` run configuration. Keys mirror the training, loss and
//! model fields; `#` starts a comment.

use rspu_core::model::{ModelConfig, Placement};
use rspu_core::train::TrainConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Self::Desk),
            "paper" => Some(Self::Paper),
            _ => None,
        }
    }

    pub fn config(self) -> TrainConfig {
        match self {
            Self::Desk => TrainConfig::desk(),
            Self::Paper => TrainConfig {
                model: ModelConfig::paper(),
                ..TrainConfig::default()
            },
        }
    }
}

pub const KEYS: [&str; 19] = [
    "learning_rate",
    "batch_size",
    "steps",
    "seed",
    "checkpoint_every",
    "log_every",
    "lambda_a",
    "delta",
    "lambda_c",
    "lambda_s",
    "lambda_f",
    "height",
    "width",
    "base_channels",
    "depth",
    "rspu_channels",
    "prototype_count",
    "placement",
    "model_seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {value:?}")))
}

pub fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> CliResult<()> {
    let m = &mut cfg.model;
    let l = &mut cfg.loss;
    match key {
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "steps" => cfg.steps = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse(key, value)?,
        "log_every" => cfg.log_every = parse(key, value)?,
        "lambda_a" => l.lambda_a = parse(key, value)?,
        "delta" => l.delta = parse(key, value)?,
        "lambda_c" => l.lambda_c = parse(key, value)?,
        "lambda_s" => l.lambda_s = parse(key, value)?,
        "lambda_f" => l.lambda_f = parse(key, value)?,
        "height" => m.height = parse(key, value)?,
        "width" => m.width = parse(key, value)?,
        "base_channels" => m.base_channels = parse(key, value)?,
        "depth" => m.depth = parse(key, value)?,
        "rspu_channels" => m.rspu_channels = parse(key, value)?,
        "prototype_count" => m.prototype_count = parse(key, value)?,
        "placement" => {
            m.placement = Placement::parse(value)
                .ok_or_else(|| CliError::Usage(format!("config key placement: unknown value {value:?}")))?
        }
        "model_seed" => m.seed = parse(key, value)?,
        _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Every key with its current value; floats use the shortest exact form.
pub fn entries(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let (m, l) = (&cfg.model, &cfg.loss);
    let values = [
        format!("{:?}", cfg.learning_rate),
        cfg.batch_size.to_string(),
        cfg.steps.to_string(),
        cfg.seed.to_string(),
        cfg.checkpoint_every.to_string(),
        cfg.log_every.to_string(),
        format!("{:?}", l.lambda_a),
        format!("{:?}", l.delta),
        format!("{:?}", l.lambda_c),
        format!("{:?}", l.lambda_s),
        format!("{:?}", l.lambda_f),
        m.height.to_string(),
        m.width.to_string(),
        m.base_channels.to_string(),
        m.depth.to_string(),
        m.rspu_channels.to_string(),
        m.prototype_count.to_string(),
        m.placement.as_str().to_string(),
        m.seed.to_string(),
    ];
    KEYS.into_iter().zip(values).collect()
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_lines(text: &str) -> CliResult<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter_map(|(n, raw)| {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                return None;
            }
            Some(match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
                _ => Err(CliError::Usage(format!("config line {}: expected `key = value`", n + 1))),
            })
        })
        .collect()
}

pub fn apply_text(cfg: &mut TrainConfig, text: &str) -> CliResult<()> {
    for (k, v) in parse_lines(text)? {
        set(cfg, &k, &v)?;
    }
    Ok(())
}
