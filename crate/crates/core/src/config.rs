//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. List values are comma
//! separated; an empty list value clears the default. Unknown keys and
//! repeated keys are errors.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Every accepted key with a one-line description, for `--help` output.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("train_fraction", "fraction of rows in the training split (0.7)"),
    ("stratified", "preserve class ratios in the split (true)"),
    ("folds", "cross-validation folds, at least 2 (5)"),
    ("seed", "base seed; a --seed flag overrides it (42)"),
    ("selected_columns", "feature columns by name or zero-based index (all)"),
    (
        "zero_as_missing",
        "columns whose zeros are imputed by the median (Pima clinical columns)",
    ),
    ("c", "SVM box constraint (1.0)"),
    ("tolerance", "SMO KKT tolerance (0.001)"),
    ("max_passes", "SMO iteration cap (100 x rows)"),
    (
        "class_balance",
        "weight the SVM hinge by inverse class frequency (false)",
    ),
    ("sigma", "RBF width (sqrt(d/2) for d features)"),
    ("hidden_size", "LSTM memory blocks (70)"),
    ("mlp_hidden", "two MLP hidden widths (12,8)"),
    ("ensemble_size", "number of MLP heads (3)"),
    ("epochs", "full-batch training epochs (50)"),
    ("learning_rate", "AdaGrad learning rate (0.2)"),
    ("dropout", "MLP hidden dropout rate (0.35)"),
    ("pool_window", "max-pooling window (2)"),
    ("pool_stride", "max-pooling stride (2)"),
    ("fusion_weight", "weight of the SVM branch in the fused score (0.5)"),
    ("threshold", "decision threshold on the fused score (0.5)"),
];

/// Help text describing the configuration file format.
pub fn schema_help() -> String {
    let mut s = String::from("CONFIG FILE (key = value per line, # starts a comment):\n");
    for (key, doc) in CONFIG_KEYS {
        s.push_str(&format!("  {key:<17} {doc}\n"));
    }
    s
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Applies `text` on top of `base`.
pub fn parse_config(text: &str, base: PipelineConfig) -> Result<PipelineConfig> {
    let mut cfg = base;
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
        }
        match key {
            "train_fraction" => cfg.train_fraction = parse_value(key, value)?,
            "stratified" => cfg.stratified = parse_value(key, value)?,
            "folds" => cfg.folds = parse_value(key, value)?,
            "seed" => cfg.seed = parse_value(key, value)?,
            "selected_columns" => cfg.selected_columns = Some(parse_list(value)),
            "zero_as_missing" => cfg.zero_as_missing = Some(parse_list(value)),
            "c" => cfg.svm.c = parse_value(key, value)?,
            "tolerance" => cfg.svm.tolerance = parse_value(key, value)?,
            "max_passes" => cfg.svm.max_passes = Some(parse_value(key, value)?),
            "class_balance" => cfg.svm.class_balance = parse_value(key, value)?,
            "sigma" => cfg.sigma = Some(parse_value(key, value)?),
            "hidden_size" => cfg.neural.hidden_size = parse_value(key, value)?,
            "mlp_hidden" => {
                let widths = parse_list(value)
                    .iter()
                    .map(|w| parse_value(key, w))
                    .collect::<Result<Vec<usize>>>()?;
                cfg.neural.mlp_hidden = widths
                    .try_into()
                    .map_err(|_| Error::Config("mlp_hidden needs exactly two widths".into()))?;
            }
            "ensemble_size" => cfg.neural.ensemble_size = parse_value(key, value)?,
            "epochs" => cfg.neural.epochs = parse_value(key, value)?,
            "learning_rate" => cfg.neural.learning_rate = parse_value(key, value)?,
            "dropout" => cfg.neural.dropout = parse_value(key, value)?,
            "pool_window" => cfg.neural.pool_window = parse_value(key, value)?,
            "pool_stride" => cfg.neural.pool_stride = parse_value(key, value)?,
            "fusion_weight" => cfg.fusion_weight = parse_value(key, value)?,
            "threshold" => cfg.threshold = parse_value(key, value)?,
            other => return Err(Error::Config(format!("line {}: unknown key {other}", n + 1))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, PipelineConfig::default())
}
