//! Flat `key = value` configuration files for training runs.
//!
//! One assignment per line, `#` starts a comment, blank lines are skipped.
//! Keys mirror the training configuration fields one-to-one; unknown keys and
//! unparsable values are hard errors so typos never silently fall back to
//! defaults. Command-line overrides reuse the same `key=value` grammar and
//! are applied after the file.

use std::path::Path;

use crate::agcl::LayerCombine;
use crate::error::{CoreError, Result};
use crate::graph::SubgraphSource;
use crate::trainer::TrainConfig;

/// Keys accepted by [`apply_kv`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "lr",
    "d",
    "max_len",
    "gcn_layers",
    "alpha",
    "d_prime",
    "heads",
    "n_layers",
    "lambda1",
    "lambda2",
    "tau",
    "tau_seq",
    "dropout",
    "max_epochs",
    "patience",
    "seed",
    "gce_batch_cap",
    "layer_combine",
    "subgraph_source",
    "crop_ratio",
    "mask_ratio",
    "reorder_ratio",
    "disable_agcl",
    "disable_pge",
    "freeze_perturbation",
    "exclude_seen",
];

fn bad_value(key: &str, value: &str, expected: &str) -> CoreError {
    CoreError::InvalidConfig(format!(
        "config key '{key}': expected {expected}, got '{value}'"
    ))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| bad_value(key, value, "a non-negative integer"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| bad_value(key, value, "a non-negative integer"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad_value(key, value, "a number"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad_value(key, value, "true/false/1/0")),
    }
}

/// Applies one assignment to `cfg`. Unknown keys are errors.
pub fn apply_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "batch_size" => cfg.batch_size = parse_usize(key, value)?,
        "lr" => cfg.lr = parse_f64(key, value)?,
        "d" => cfg.d = parse_usize(key, value)?,
        "max_len" => cfg.max_len = parse_usize(key, value)?,
        "gcn_layers" => cfg.gcn_layers = parse_usize(key, value)?,
        "alpha" => cfg.alpha = parse_f64(key, value)?,
        "d_prime" => cfg.d_prime = parse_usize(key, value)?,
        "heads" => cfg.heads = parse_usize(key, value)?,
        "n_layers" => cfg.n_layers = parse_usize(key, value)?,
        "lambda1" => cfg.lambda1 = parse_f64(key, value)?,
        "lambda2" => cfg.lambda2 = parse_f64(key, value)?,
        "tau" => cfg.tau = parse_f64(key, value)?,
        "tau_seq" => cfg.tau_seq = parse_f64(key, value)?,
        "dropout" => cfg.dropout = parse_f64(key, value)?,
        "max_epochs" => cfg.max_epochs = parse_usize(key, value)?,
        "patience" => cfg.patience = parse_usize(key, value)?,
        "seed" => cfg.seed = parse_u64(key, value)?,
        "gce_batch_cap" => cfg.gce_batch_cap = parse_usize(key, value)?,
        "layer_combine" => {
            cfg.layer_combine = match value {
                "mean" => LayerCombine::Mean,
                "paper_literal" => LayerCombine::PaperLiteral,
                _ => return Err(bad_value(key, value, "mean|paper_literal")),
            }
        }
        "subgraph_source" => {
            cfg.subgraph_source = match value {
                "original" => SubgraphSource::Original,
                "refined" => SubgraphSource::Refined,
                _ => return Err(bad_value(key, value, "original|refined")),
            }
        }
        "crop_ratio" => cfg.augmentation.crop_ratio = parse_f64(key, value)?,
        "mask_ratio" => cfg.augmentation.mask_ratio = parse_f64(key, value)?,
        "reorder_ratio" => cfg.augmentation.reorder_ratio = parse_f64(key, value)?,
        "disable_agcl" => cfg.disable_agcl = parse_bool(key, value)?,
        "disable_pge" => cfg.disable_pge = parse_bool(key, value)?,
        "freeze_perturbation" => cfg.freeze_perturbation = parse_bool(key, value)?,
        "exclude_seen" => cfg.exclude_seen = parse_bool(key, value)?,
        _ => {
            return Err(CoreError::InvalidConfig(format!(
                "unknown config key '{key}'"
            )))
        }
    }
    Ok(())
}

/// Splits one `key=value` assignment; both sides are trimmed.
pub fn split_assignment(line: &str) -> Result<(String, String)> {
    let (key, value) = line.split_once('=').ok_or_else(|| {
        CoreError::InvalidConfig(format!("expected key=value, got '{line}'"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CoreError::InvalidConfig(format!(
            "missing key in assignment '{line}'"
        )));
    }
    Ok((key.to_string(), value.trim().to_string()))
}

/// Parses file text into ordered assignments; `#` comments, blank lines ok.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let parsed = split_assignment(line).map_err(|e| {
            CoreError::InvalidConfig(format!("line {}: {e}", lineno + 1))
        })?;
        out.push(parsed);
    }
    Ok(out)
}

/// Builds a training configuration from defaults, an optional file, and
/// ordered command-line overrides (applied last).
pub fn load_train_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
        for (key, value) in parse_config_text(&text)? {
            apply_kv(&mut cfg, &key, &value)?;
        }
    }
    for (key, value) in overrides {
        apply_kv(&mut cfg, key, value)?;
    }
    Ok(cfg)
}
