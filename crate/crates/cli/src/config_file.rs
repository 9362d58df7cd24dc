//! TOML experiment files.
//!
//! ```toml
//! rounds = 200
//! seed = 0
//!
//! [data]
//! source = "synthetic"      # synthetic | skew_synthetic | skew_idx
//! num_nodes = 50
//! iid_fraction = 0.2
//! heterogeneity = 1.0
//!
//! [model]
//! kind = "mlr"              # mlr | mlp
//!
//! [train]
//! epochs = 1
//! batch_size = 20
//! learning_rate = 0.01
//! decay = 0.995
//!
//! [policy]
//! selection = "fedpns"      # random | fedpns | bn2
//! alpha = 2
//! beta = 0.7
//! fraction = 0.2
//!
//! [aggregation]
//! mode = "optimal"          # fedavg | optimal
//! min_retained_fraction = 0.7
//! eval_batch_size = 128
//!
//! [diagnostics]
//! divergence = false
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use fedsim_core::config::{AggregationMode, ExperimentConfig};
use fedsim_core::selection::SelectionPolicy;

use crate::error::{CliError, CliResult};

/// Parses and validates an experiment file.
pub fn parse_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config_str(&text).map_err(|message| CliError::Config {
        path: path.to_path_buf(),
        message,
    })
}

/// Parses and validates experiment TOML. Errors name the line or the field.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, String> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, String> {
    toml::to_string(cfg).map_err(|e| e.to_string())
}

/// Named policy/aggregation pairings accepted by `--policy`.
pub const PRESETS: [&str; 4] = ["fedavg", "optagg", "fedpns", "bn2"];

pub fn preset(name: &str) -> Option<(SelectionPolicy, AggregationMode)> {
    match name {
        "fedavg" => Some((SelectionPolicy::Random, AggregationMode::FedAvg)),
        "optagg" => Some((SelectionPolicy::Random, AggregationMode::Optimal)),
        "fedpns" => Some((SelectionPolicy::FedPns, AggregationMode::Optimal)),
        "bn2" => Some((SelectionPolicy::Bn2, AggregationMode::FedAvg)),
        _ => None,
    }
}

pub fn apply_preset(cfg: &mut ExperimentConfig, name: &str) -> CliResult<()> {
    let (policy, mode) = preset(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown policy `{name}`; expected one of {}",
            PRESETS.join(", ")
        ))
    })?;
    cfg.selection.policy = policy;
    cfg.aggregation.mode = mode;
    Ok(())
}
