//! The federated training loop: per round, select participants, train them
//! locally, aggregate, update selection probabilities and record metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rayon::prelude::*;

use crate::aggregation::{optimal_aggregation, AggregationOutcome, BatchLossComparator, ExpectationStep, RoundUpdates};
use crate::checkpoint::Checkpoint;
use crate::config::{AggregationMode, DataSource, ExperimentConfig};
use crate::datasets::{
    generate_synthetic, load_idx, partition_label_skew, LabeledExample,
    MixturePool, NodeDataset, SkewConfig, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::models::{evaluate, local_train, mean_loss, sgd_steps, LocalUpdate, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{derive_seed, substream, SimRng, Stream};
use crate::selection::{sample_nodes, select_bn2, select_random, update_probabilities, NodeStats, SelectionPolicy};
use crate::NodeId;

const SYNTHETIC_DIM: usize = 60;
const SYNTHETIC_CLASSES: usize = 10;
/// Scale of the class means of the mixture pool.
const MIXTURE_SEPARATION: f64 = 0.4;

/// Metrics of one global round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// Zero-based round index.
    pub round: usize,
    pub learning_rate: f64,
    /// Nodes whose updates entered aggregation.
    pub selected: Vec<NodeId>,
    pub labeled: Vec<NodeId>,
    pub excluded: Vec<NodeId>,
    /// Global training loss of the post-aggregation model.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// `‖Δ_i‖ / η_t` for every node whose update the server saw (the
    /// participants, or the whole macro set for BN2).
    pub grad_norms: Vec<(NodeId, f64)>,
    /// Selection probabilities after this round's update.
    pub probabilities: Vec<f64>,
    pub divergence: Option<f64>,
    pub expectation_trace: Vec<ExpectationStep>,
}

/// Node data plus the evaluation set and the input geometry.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub nodes: Vec<NodeDataset>,
    pub test_set: Vec<LabeledExample>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl FederatedData {
    /// Builds the population described by `cfg.data`, seeded from `cfg.seed`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let data_seed = derive_seed(cfg.seed, Stream::Data);
        match d.source {
            DataSource::Synthetic => {
                let nodes = generate_synthetic(&SyntheticConfig {
                    num_nodes: d.num_nodes,
                    iid_fraction: d.iid_fraction,
                    heterogeneity: d.heterogeneity,
                    samples_per_node: d.samples_per_node,
                    feature_dim: SYNTHETIC_DIM,
                    num_classes: SYNTHETIC_CLASSES,
                    seed: data_seed,
                })?;
                Self::from_nodes(nodes, None)
            }
            DataSource::SkewSynthetic => {
                let mut rng = SimRng::seed_from_u64(data_seed);
                let mixture = MixturePool::new(SYNTHETIC_DIM, SYNTHETIC_CLASSES, MIXTURE_SEPARATION, &mut rng);
                let pool = mixture.sample(d.pool_size, &mut rng);
                let test = mixture.sample(d.test_size, &mut rng);
                let nodes = partition_label_skew(&pool, &skew_config(cfg, SYNTHETIC_CLASSES, data_seed))?;
                Self::from_nodes(nodes, Some(test))
            }
            DataSource::SkewIdx => {
                let (Some(images), Some(labels)) = (&d.train_images, &d.train_labels) else {
                    return Err(Error::invalid("train_images", "missing IDX paths"));
                };
                let pool = load_idx(images, labels)?;
                let test = match (&d.test_images, &d.test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    _ => None,
                };
                let classes = pool
                    .iter()
                    .chain(test.iter().flatten())
                    .map(|e| e.label + 1)
                    .max()
                    .unwrap_or(0)
                    .max(2);
                let nodes = partition_label_skew(&pool, &skew_config(cfg, classes, data_seed))?;
                Self::from_nodes(nodes, test)
            }
        }
    }

    /// Wraps existing node data. Without an explicit test set, the union of
    /// the node test splits is used.
    pub fn from_nodes(nodes: Vec<NodeDataset>, test_set: Option<Vec<LabeledExample>>) -> Result<Self> {
        let first = nodes
            .iter()
            .flat_map(|n| n.train.first())
            .next()
            .ok_or(Error::Empty("node training data"))?;
        let input_dim = first.features.len();
        let test_set = test_set.unwrap_or_else(|| nodes.iter().flat_map(|n| n.test.iter().cloned()).collect());
        if test_set.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let num_classes = nodes
            .iter()
            .flat_map(|n| n.train.iter().chain(&n.test))
            .chain(&test_set)
            .map(|e| e.label + 1)
            .max()
            .unwrap_or(0)
            .max(2);
        if nodes.iter().any(|n| n.train.is_empty()) {
            return Err(Error::Empty("node training data"));
        }
        Ok(FederatedData {
            nodes,
            test_set,
            input_dim,
            num_classes,
        })
    }
}

fn skew_config(cfg: &ExperimentConfig, num_classes: usize, seed: u64) -> SkewConfig {
    SkewConfig {
        num_nodes: cfg.data.num_nodes,
        iid_fraction: cfg.data.iid_fraction,
        labels_per_node: cfg.data.labels_per_node,
        samples_per_node: cfg.data.samples_per_node,
        num_classes,
        seed,
    }
}

/// Equal-weight mean of the per-node training losses.
pub fn global_train_loss(spec: &ModelSpec, w: &ParamVector, nodes: &[NodeDataset]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Empty("node set"));
    }
    let losses = nodes
        .par_iter()
        .map(|n| mean_loss(spec, w, &n.train))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Pooled training data of all nodes, the data of the centralized
/// reference trajectory.
#[derive(Debug, Clone)]
pub struct CentralizedReference {
    pub pooled: Vec<LabeledExample>,
}

impl CentralizedReference {
    pub fn new(nodes: &[NodeDataset]) -> Self {
        CentralizedReference {
            pooled: nodes.iter().flat_map(|n| n.train.iter().cloned()).collect(),
        }
    }
}

/// Synchronizes the reference to `start` and runs `steps` mini-batch SGD
/// steps on the pooled data.
pub fn centralized_step<R: rand::Rng + ?Sized>(
    reference: &CentralizedReference,
    spec: &ModelSpec,
    start: &ParamVector,
    learning_rate: f64,
    batch_size: usize,
    steps: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    sgd_steps(spec, start, &reference.pooled, batch_size, learning_rate, steps, rng)
}

/// `‖a - b‖`.
pub fn weight_divergence(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    b.check_len(a.len())?;
    Ok(a.sub(b).norm())
}

/// A running federated experiment.
pub struct Simulation {
    cfg: ExperimentConfig,
    data: FederatedData,
    spec: ModelSpec,
    model: ParamVector,
    stats: NodeStats,
    round: usize,
    gamma_hat: Vec<f64>,
    reference: Option<CentralizedReference>,
    /// Full-participation average of the previous round.
    synced: Option<ParamVector>,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = FederatedData::build(&cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: ExperimentConfig, data: FederatedData) -> Result<Self> {
        cfg.validate()?;
        if data.nodes.len() != cfg.data.num_nodes {
            return Err(Error::invalid(
                "num_nodes",
                format!("config says {} but data has {}", cfg.data.num_nodes, data.nodes.len()),
            ));
        }
        let spec = cfg.model.spec(data.input_dim, data.num_classes);
        spec.validate()?;
        let model = spec.init_params(&mut substream(cfg.seed, Stream::Init, 0, 0))?;
        let k = data.nodes.len();
        let reference = cfg
            .diagnostics
            .divergence
            .then(|| CentralizedReference::new(&data.nodes));
        let synced = cfg.diagnostics.divergence.then(|| model.clone());
        Ok(Simulation {
            cfg,
            data,
            spec,
            model,
            stats: NodeStats::uniform(k),
            round: 0,
            gamma_hat: vec![0.0; k],
            reference,
            synced,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &FederatedData {
        &self.data
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn model(&self) -> &ParamVector {
        &self.model
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    /// Number of completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Largest gradient norm observed so far per node (0 if never observed).
    pub fn gamma_hat(&self) -> &[f64] {
        &self.gamma_hat
    }

    /// `(Σ p_i γ̂_i, (1/|K|) Σ γ̂_i)` with the current probabilities.
    pub fn gradient_bound_sums(&self) -> (f64, f64) {
        let weighted = self
            .stats
            .probabilities
            .iter()
            .zip(&self.gamma_hat)
            .map(|(p, g)| p * g)
            .sum();
        let uniform = self.gamma_hat.iter().sum::<f64>() / self.gamma_hat.len() as f64;
        (weighted, uniform)
    }

    /// Runs one round with the configured policy.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        self.step(None)
    }

    /// Runs one round with a caller-chosen participant set, bypassing the
    /// selection policy. Probability updates still follow the policy.
    pub fn run_round_with_selection(&mut self, participants: &[NodeId]) -> Result<RoundRecord> {
        self.step(Some(participants))
    }

    fn train_nodes(&self, nodes: &BTreeSet<NodeId>) -> Result<BTreeMap<NodeId, LocalUpdate>> {
        let t = self.round as u64;
        let train_cfg = self.cfg.train.at_round(self.round);
        let list: Vec<NodeId> = nodes.iter().copied().collect();
        let updates = list
            .par_iter()
            .map(|&n| {
                let mut rng = substream(self.cfg.seed, Stream::Train, t, n as u64);
                local_train(&self.spec, &self.model, &self.data.nodes[n].train, &train_cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(list.into_iter().zip(updates).collect())
    }

    fn step(&mut self, forced: Option<&[NodeId]>) -> Result<RoundRecord> {
        let t = self.round;
        let k = self.data.nodes.len();
        let eta = self.cfg.train.rate_at(t);
        let m = self.cfg.selection.participants(k);
        let policy = self.cfg.selection.policy;
        let mut select_rng = substream(self.cfg.seed, Stream::Select, t as u64, 0);

        // Nodes the server hears from, and whether BN2 still has to narrow
        // them down.
        let observed: BTreeSet<NodeId> = match forced {
            Some(list) => {
                let set: BTreeSet<NodeId> = list.iter().copied().collect();
                if set.is_empty() || set.iter().any(|&n| n >= k) {
                    return Err(Error::invalid("participants", "empty or out-of-range node set"));
                }
                set
            }
            None => match policy {
                SelectionPolicy::Random => select_random(k, m, &mut select_rng)?.into_iter().collect(),
                SelectionPolicy::FedPns => sample_nodes(&self.stats.probabilities, m, &mut select_rng)?
                    .into_iter()
                    .collect(),
                SelectionPolicy::Bn2 => select_random(k, self.cfg.selection.macro_size, &mut select_rng)?
                    .into_iter()
                    .collect(),
            },
        };

        let to_train: BTreeSet<NodeId> = if self.reference.is_some() {
            (0..k).collect()
        } else {
            observed.clone()
        };
        let trained = self.train_nodes(&to_train)?;

        let norms: BTreeMap<NodeId, f64> = observed
            .iter()
            .map(|&n| (n, trained[&n].delta.norm() / eta))
            .collect();
        let participants: BTreeSet<NodeId> = if forced.is_none() && policy == SelectionPolicy::Bn2 {
            select_bn2(&norms, m)?.into_iter().collect()
        } else {
            observed
        };

        let updates = RoundUpdates {
            updates: participants
                .iter()
                .map(|&n| (n, trained[&n].delta.clone()))
                .collect(),
            global: self.model.clone(),
            learning_rate: eta,
        };
        let outcome = match self.cfg.aggregation.mode {
            AggregationMode::FedAvg => AggregationOutcome {
                new_model: updates.aggregate(&participants)?,
                retained: participants.clone(),
                labeled: BTreeSet::new(),
                excluded: BTreeSet::new(),
                expectation_trace: Vec::new(),
            },
            AggregationMode::Optimal => {
                let mut comparator = BatchLossComparator {
                    spec: &self.spec,
                    pool: &self.data.test_set,
                    batch_size: self.cfg.aggregation.eval_batch_size,
                    rng: substream(self.cfg.seed, Stream::Eval, t as u64, 0),
                };
                optimal_aggregation(&updates, self.cfg.aggregation.min_retained_fraction, &mut comparator)?
            }
        };

        self.stats
            .record_round(&participants, &outcome.labeled, &outcome.excluded)?;
        if policy == SelectionPolicy::FedPns {
            let s = &self.cfg.selection;
            update_probabilities(&mut self.stats, &outcome.labeled, s.alpha, s.beta, s.probability_floor)?;
        }
        for (&n, &g) in &norms {
            self.gamma_hat[n] = self.gamma_hat[n].max(g);
        }

        let divergence = match (&self.reference, &self.synced) {
            (Some(reference), Some(synced)) => {
                let steps = self.cfg.train.at_round(t).local_steps(self.data.nodes[0].train.len());
                let mut rng = substream(self.cfg.seed, Stream::Central, t as u64, 0);
                let virtual_model = centralized_step(
                    reference,
                    &self.spec,
                    synced,
                    eta,
                    self.cfg.train.batch_size,
                    steps,
                    &mut rng,
                )?;
                let d = weight_divergence(&outcome.new_model, &virtual_model)?;
                let full = ParamVector::mean(trained.values().map(|u| &u.local))?;
                self.synced = Some(full);
                Some(d)
            }
            _ => None,
        };

        self.model = outcome.new_model;
        self.round += 1;
        let train_loss = global_train_loss(&self.spec, &self.model, &self.data.nodes)?;
        let test = evaluate(&self.spec, &self.model, &self.data.test_set)?;

        Ok(RoundRecord {
            round: t,
            learning_rate: eta,
            selected: participants.into_iter().collect(),
            labeled: outcome.labeled.into_iter().collect(),
            excluded: outcome.excluded.into_iter().collect(),
            train_loss,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
            grad_norms: norms.into_iter().collect(),
            probabilities: self.stats.probabilities.clone(),
            divergence,
            expectation_trace: outcome.expectation_trace,
        })
    }

    /// Runs rounds until `cfg.rounds` are complete.
    pub fn run_to_end(&mut self) -> Result<Vec<RoundRecord>> {
        (self.round..self.cfg.rounds).map(|_| self.run_round()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_digest: self.cfg.digest(),
            round: self.round as u64,
            model: self.model.clone(),
            stats: self.stats.clone(),
            gamma_hat: self.gamma_hat.clone(),
            synced: self.synced.clone(),
        }
    }

    /// Rebuilds the data from `cfg` and continues from `checkpoint`.
    pub fn resume(cfg: ExperimentConfig, checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.config_digest != cfg.digest() {
            return Err(Error::Checkpoint(
                "configuration digest does not match the checkpoint".into(),
            ));
        }
        let mut sim = Self::new(cfg)?;
        let k = sim.data.nodes.len();
        checkpoint.model.check_len(sim.spec.num_params())?;
        if checkpoint.stats.num_nodes() != k || checkpoint.gamma_hat.len() != k {
            return Err(Error::Checkpoint(format!("node count differs from {k}")));
        }
        if checkpoint.synced.is_some() != sim.synced.is_some() {
            return Err(Error::Checkpoint("divergence state does not match config".into()));
        }
        sim.round = usize::try_from(checkpoint.round)
            .map_err(|_| Error::Checkpoint("round out of range".into()))?;
        sim.model = checkpoint.model;
        sim.stats = checkpoint.stats;
        sim.gamma_hat = checkpoint.gamma_hat;
        sim.synced = checkpoint.synced;
        Ok(sim)
    }
}

/// Runs `cfg.rounds` rounds from scratch.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    Simulation::new(cfg.clone())?.run_to_end()
}
