//! Key-value configuration files and their merge with command-line flags.
//!
//! Format: one `key = value` per line, `#` starts a comment. Unknown keys
//! are rejected. Command-line flags override file values.

use hcd_core::cdm::BaseModel;
use hcd_core::error::{HcdError, Result};
use hcd_core::hierarchy::{Ablation, CeaAttention, RsaMode};
use hcd_core::train::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;

const KNOWN_KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "base",
    "heads",
    "kernel_widths",
    "rsa_mode",
    "ablation",
    "plain",
    "hidden1",
    "hidden2",
    "attention",
    "disc_scale",
    "folds",
];

pub fn load_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HcdError::Config(format!(
                "{}:{}: expected `key = value`, found `{line}`",
                path.display(),
                idx + 1
            ))
        })?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(HcdError::Config(format!(
                "{}:{}: unknown configuration key `{key}`",
                path.display(),
                idx + 1
            )));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HcdError::Config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_kernel_widths(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|w| parse::<usize>("kernel_widths", w.trim()))
        .collect()
}

/// Typed view of the settable options, used for both file entries and flags.
#[derive(Default)]
pub struct Overrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub base: Option<BaseModel>,
    pub heads: Option<usize>,
    pub kernel_widths: Option<Vec<usize>>,
    pub rsa_mode: Option<RsaMode>,
    pub ablation: Option<Ablation>,
    pub plain: Option<bool>,
    pub hidden1: Option<usize>,
    pub hidden2: Option<usize>,
    pub attention: Option<CeaAttention>,
    pub disc_scale: Option<f64>,
    pub folds: Option<usize>,
}

impl Overrides {
    pub fn from_file(path: &Path) -> Result<Overrides> {
        let map = load_file(path)?;
        let mut o = Overrides::default();
        for (key, value) in &map {
            match key.as_str() {
                "learning_rate" => o.learning_rate = Some(parse(key, value)?),
                "batch_size" => o.batch_size = Some(parse(key, value)?),
                "max_epochs" => o.max_epochs = Some(parse(key, value)?),
                "patience" => o.patience = Some(parse(key, value)?),
                "seed" => o.seed = Some(parse(key, value)?),
                "base" => o.base = Some(value.parse()?),
                "heads" => o.heads = Some(parse(key, value)?),
                "kernel_widths" => o.kernel_widths = Some(parse_kernel_widths(value)?),
                "rsa_mode" => o.rsa_mode = Some(value.parse()?),
                "ablation" => o.ablation = Some(value.parse()?),
                "plain" => o.plain = Some(parse(key, value)?),
                "hidden1" => o.hidden1 = Some(parse(key, value)?),
                "hidden2" => o.hidden2 = Some(parse(key, value)?),
                "attention" => o.attention = Some(value.parse()?),
                "disc_scale" => o.disc_scale = Some(parse(key, value)?),
                "folds" => o.folds = Some(parse(key, value)?),
                _ => unreachable!("filtered by KNOWN_KEYS"),
            }
        }
        Ok(o)
    }

    /// Applies the entries onto a config; `None` leaves the field alone.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.base {
            cfg.base = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = &self.kernel_widths {
            cfg.kernel_widths = v.clone();
        }
        if let Some(v) = self.rsa_mode {
            cfg.rsa_mode = v;
        }
        if let Some(v) = self.ablation {
            cfg.ablation = v;
        }
        if let Some(v) = self.plain {
            cfg.plain = v;
        }
        if let Some(v) = self.hidden1 {
            cfg.hidden1 = v;
        }
        if let Some(v) = self.hidden2 {
            cfg.hidden2 = v;
        }
        if let Some(v) = self.attention {
            cfg.attention = v;
        }
        if let Some(v) = self.disc_scale {
            cfg.disc_scale = v;
        }
    }
}

/// Seed precedence: explicit flag, then config file, then the HCD_SEED
/// environment variable, then 42.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var("HCD_SEED") {
        Ok(raw) => raw
            .parse()
            .map_err(|_| HcdError::Config(format!("HCD_SEED `{raw}` is not an integer"))),
        Err(_) => Ok(42),
    }
}
