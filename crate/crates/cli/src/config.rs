//! Flat `key=value` run configuration. Every key is documented below;
//! unknown keys are rejected. Parsing is order-independent and flags win
//! over file values.

use std::fmt::Write as _;

use iml_net::{ModelConfig};
use iml_train::TrainConfig;

/// The complete run configuration with defaults matching the trained
/// protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub train_data: Option<String>,
    pub val_data: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            train_data: None,
            val_data: None,
        }
    }
}

pub const KEY_DOC: &[(&str, &str)] = &[
    ("epochs", "training epochs (default 100)"),
    ("batch_size", "samples per optimizer step (default 32)"),
    ("lr_init", "initial learning rate (default 1e-4)"),
    ("plateau_factor", "rate multiplier on plateau (default 0.9)"),
    ("plateau_patience", "stale epochs before decay (default 5)"),
    ("weight_decay", "decoupled weight decay (default 0.01)"),
    ("seed", "run seed (default 0)"),
    ("alpha", "detection loss weight (default 0.04)"),
    ("beta", "segmentation loss weight (default 0.16)"),
    ("gamma", "graph-metric loss weight (default 0.001)"),
    ("margin", "triplet margin (default 10)"),
    ("patch_size", "backbone patch size (default 4)"),
    ("stage_dims", "four comma-separated channel counts (default 16,32,64,128)"),
    ("stage_depths", "four comma-separated block counts (default 1,1,2,1)"),
    ("state_dim", "state-space dimension (default 8)"),
    ("fpn_dim", "pyramid width (default 64)"),
    ("ppm_out", "pyramid-pooling output channels (default 64)"),
    ("knn_k", "graph neighbor count (default 9)"),
    ("bayar_filters", "noise filter count (default 3)"),
    ("bayar_kernel", "noise kernel extent (default 5)"),
    ("max_anchors", "metric-loss anchor budget per level (default 1024)"),
    ("train_data", "training dataset directory"),
    ("val_data", "validation dataset directory"),
];

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub what: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config line {}: {}", self.line, self.what)
    }
}

impl std::error::Error for ConfigError {}

fn parse_four(value: &str, line: usize) -> Result<[usize; 4], ConfigError> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 4 {
        return Err(ConfigError {
            line,
            what: format!("expected 4 comma-separated values, got {}", parts.len()),
        });
    }
    let mut out = [0usize; 4];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p.trim().parse().map_err(|_| ConfigError {
            line,
            what: format!("bad integer {p:?}"),
        })?;
    }
    Ok(out)
}

impl RunConfig {
    /// Parse a config file body over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    line: line_no,
                    what: format!("expected key=value, got {line:?}"),
                });
            };
            cfg.set(key.trim(), value.trim(), line_no)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |what: String| ConfigError { line, what };
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(format!("bad value {value:?} for {key}")))?
            };
        }
        match key {
            "epochs" => self.train.epochs = num!(usize),
            "batch_size" => self.train.batch_size = num!(usize),
            "lr_init" => self.train.lr_init = num!(f64),
            "plateau_factor" => self.train.plateau_factor = num!(f64),
            "plateau_patience" => self.train.plateau_patience = num!(usize),
            "weight_decay" => self.train.weight_decay = num!(f64),
            "seed" => self.train.seed = num!(u64),
            "alpha" => self.model.loss.alpha = num!(f64),
            "beta" => self.model.loss.beta = num!(f64),
            "gamma" => self.model.loss.gamma = num!(f64),
            "margin" => self.model.loss.margin = num!(f64),
            "patch_size" => self.model.backbone.patch_size = num!(usize),
            "stage_dims" => self.model.backbone.stage_dims = parse_four(value, line)?,
            "stage_depths" => self.model.backbone.stage_depths = parse_four(value, line)?,
            "state_dim" => self.model.backbone.state_dim = num!(usize),
            "fpn_dim" => self.model.fpn_dim = num!(usize),
            "ppm_out" => self.model.ppm_out = num!(usize),
            "knn_k" => self.model.knn_k = num!(usize),
            "bayar_filters" => self.model.bayar_filters = num!(usize),
            "bayar_kernel" => self.model.bayar_kernel = num!(usize),
            "max_anchors" => self.model.max_anchors = num!(usize),
            "train_data" => self.train_data = Some(value.to_string()),
            "val_data" => self.val_data = Some(value.to_string()),
            other => {
                return Err(bad(format!("unknown key {other:?}")));
            }
        }
        self.train.loss = self.model.loss;
        Ok(())
    }

    pub fn documented_keys() -> String {
        let mut out = String::new();
        for (key, doc) in KEY_DOC {
            let _ = writeln!(out, "  {key:18} {doc}");
        }
        out
    }
}
