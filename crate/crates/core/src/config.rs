//! Experiment configuration with the default hyperparameters of the
//! reference experiments.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelSpec, TrainConfig};
use crate::selection::{SelectionPolicy, SelectionPolicyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Shifted-Gaussian population labeled by a shared linear model.
    Synthetic,
    /// Label-skew partition of a class-balanced Gaussian mixture pool.
    SkewSynthetic,
    /// Label-skew partition of IDX files (e.g. MNIST).
    SkewIdx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_nodes: usize,
    /// σ: fraction of IID nodes.
    pub iid_fraction: f64,
    /// ϱ (synthetic only).
    pub heterogeneity: f64,
    /// ρ (label skew only).
    pub labels_per_node: usize,
    pub samples_per_node: usize,
    /// Pool size for `skew_synthetic`.
    pub pool_size: usize,
    /// Held-out test set size for `skew_synthetic`.
    pub test_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            num_nodes: 50,
            iid_fraction: 0.2,
            heterogeneity: 1.0,
            labels_per_node: 2,
            samples_per_node: 200,
            pool_size: 30_000,
            test_size: 2_000,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub init_scale: f64,
    pub zero_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlr,
            hidden_dim: 64,
            init_scale: 0.01,
            zero_init: false,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            input_dim,
            num_classes,
            hidden_dim: if self.kind == ModelKind::Mlp { self.hidden_dim } else { 0 },
            init_scale: self.init_scale,
            zero_init: self.zero_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// η₀
    pub learning_rate: f64,
    /// Multiplicative per-round decay: `η_t = η₀ · decay^t`.
    pub decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 1,
            batch_size: 20,
            learning_rate: 0.01,
            decay: 0.995,
        }
    }
}

impl TrainSchedule {
    /// Learning rate of zero-based round `t`.
    pub fn rate_at(&self, round: usize) -> f64 {
        self.learning_rate * self.decay.powi(round as i32)
    }

    pub fn at_round(&self, round: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.rate_at(round),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    FedAvg,
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub mode: AggregationMode,
    /// v: fraction of the participants that is always retained.
    pub min_retained_fraction: f64,
    /// B̄: evaluation batch size of the loss check.
    pub eval_batch_size: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            mode: AggregationMode::FedAvg,
            min_retained_fraction: 0.7,
            eval_batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Track `‖w^t - v^t‖` against centralized SGD. Every node trains every
    /// round while enabled.
    pub divergence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    #[serde(rename = "policy")]
    pub selection: SelectionPolicyConfig,
    pub aggregation: AggregationConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rounds: 200,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSchedule::default(),
            selection: SelectionPolicyConfig::default(),
            aggregation: AggregationConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be at least 1"));
        }
        let d = &self.data;
        if d.num_nodes == 0 {
            return Err(Error::invalid("num_nodes", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&d.iid_fraction) {
            return Err(Error::invalid("iid_fraction", "must lie in [0, 1]"));
        }
        if d.samples_per_node < 2 {
            return Err(Error::invalid("samples_per_node", "must be at least 2"));
        }
        if d.source == DataSource::SkewIdx
            && (d.train_images.is_none() || d.train_labels.is_none())
        {
            return Err(Error::invalid(
                "train_images",
                "skew_idx needs train_images and train_labels",
            ));
        }
        if d.test_images.is_some() != d.test_labels.is_some() {
            return Err(Error::invalid(
                "test_images",
                "test_images and test_labels go together",
            ));
        }
        if self.train.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and > 0"));
        }
        if !(self.train.decay > 0.0 && self.train.decay <= 1.0) {
            return Err(Error::invalid("decay", "must lie in (0, 1]"));
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim", "an MLP needs at least 1 hidden unit"));
        }
        if !(self.model.init_scale >= 0.0 && self.model.init_scale.is_finite()) {
            return Err(Error::invalid("init_scale", "must be finite and >= 0"));
        }
        self.selection.validate(d.num_nodes)?;
        let a = &self.aggregation;
        if !(a.min_retained_fraction > 0.0 && a.min_retained_fraction <= 1.0) {
            return Err(Error::invalid("min_retained_fraction", "must lie in (0, 1]"));
        }
        if a.eval_batch_size == 0 {
            return Err(Error::invalid("eval_batch_size", "must be at least 1"));
        }
        if self.selection.policy == SelectionPolicy::FedPns && a.mode != AggregationMode::Optimal {
            return Err(Error::invalid(
                "mode",
                "fedpns selection needs `optimal` aggregation to label nodes",
            ));
        }
        Ok(())
    }

    /// Short name of the selection/aggregation pairing, e.g. `fedavg`.
    pub fn strategy_label(&self) -> String {
        match (self.selection.policy, self.aggregation.mode) {
            (SelectionPolicy::Random, AggregationMode::FedAvg) => "fedavg".into(),
            (SelectionPolicy::Random, AggregationMode::Optimal) => "optagg".into(),
            (SelectionPolicy::FedPns, AggregationMode::Optimal) => "fedpns".into(),
            (SelectionPolicy::Bn2, AggregationMode::FedAvg) => "bn2".into(),
            (p, AggregationMode::Optimal) => format!("{}+optimal", p.name()),
            (p, AggregationMode::FedAvg) => format!("{}+fedavg", p.name()),
        }
    }

    /// SHA-256 over the canonical JSON form of the resolved configuration.
    /// Independent of how the source file ordered its keys.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.selection.participants(c.data.num_nodes), 10);
        assert_eq!(c.strategy_label(), "fedavg");
    }

    #[test]
    fn decay_is_zero_based() {
        let t = TrainSchedule::default();
        assert_eq!(t.rate_at(0), 0.01);
        assert_eq!(t.rate_at(3), 0.01 * 0.995f64.powi(3));
    }

    #[test]
    fn rejects_zero_rounds_and_fedpns_without_optimal() {
        let mut c = ExperimentConfig {
            rounds: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { field: "rounds", .. })));
        c.rounds = 1;
        c.selection.policy = SelectionPolicy::FedPns;
        assert!(c.validate().is_err());
        c.aggregation.mode = AggregationMode::Optimal;
        c.validate().unwrap();
        assert_eq!(c.strategy_label(), "fedpns");
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest_hex().len(), 64);
    }
}
