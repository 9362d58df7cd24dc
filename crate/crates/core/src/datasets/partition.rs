use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{iid_count, LabeledExample, NodeDataset};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Label-skew partition of a labeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewConfig {
    pub num_nodes: usize,
    /// Fraction of nodes receiving a uniform sample of the pool.
    pub iid_fraction: f64,
    /// Number of distinct labels on each non-IID node.
    pub labels_per_node: usize,
    pub samples_per_node: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl SkewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::invalid("num_nodes", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.iid_fraction) {
            return Err(Error::invalid("iid_fraction", "must lie in [0, 1]"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes", "must be at least 1"));
        }
        if !(1..=self.num_classes).contains(&self.labels_per_node) {
            return Err(Error::invalid(
                "labels_per_node",
                format!("must lie in [1, {}]", self.num_classes),
            ));
        }
        if self.samples_per_node == 0 {
            return Err(Error::invalid("samples_per_node", "must be at least 1"));
        }
        if !self.samples_per_node.is_multiple_of(self.labels_per_node) {
            return Err(Error::invalid(
                "samples_per_node",
                format!(
                    "{} samples do not divide evenly over {} labels",
                    self.samples_per_node, self.labels_per_node
                ),
            ));
        }
        Ok(())
    }

    /// Labels of the `ordinal`-th non-IID node. Assignment is round-robin:
    /// consecutive non-IID nodes take consecutive blocks of
    /// `labels_per_node` classes modulo `num_classes`.
    pub fn labels_for(&self, ordinal: usize) -> Vec<usize> {
        (0..self.labels_per_node)
            .map(|m| (ordinal * self.labels_per_node + m) % self.num_classes)
            .collect()
    }
}

/// Splits `pool` over the nodes of `cfg`.
///
/// IID nodes (the first `round(σ|K|)` ids) are served first, each with a
/// uniform sample without replacement; non-IID nodes then take
/// `samples_per_node / labels_per_node` samples of each of their labels from
/// what remains. No pool sample is handed out twice. Each node's samples are
/// split 80/20 into train and test.
pub fn partition_label_skew(pool: &[LabeledExample], cfg: &SkewConfig) -> Result<Vec<NodeDataset>> {
    cfg.validate()?;
    if let Some(bad) = pool.iter().find(|e| e.label >= cfg.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad.label,
            num_classes: cfg.num_classes,
        });
    }
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let n_iid = iid_count(cfg.num_nodes, cfg.iid_fraction);

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let iid_total = n_iid * cfg.samples_per_node;
    if iid_total > pool.len() {
        return Err(Error::invalid(
            "samples_per_node",
            format!(
                "{n_iid} IID nodes need {iid_total} samples but the pool holds {}",
                pool.len()
            ),
        ));
    }
    let (iid_part, rest) = order.split_at(iid_total);

    // Remaining indices grouped per class, in shuffled order.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_classes];
    for &i in rest {
        by_class[pool[i].label].push(i);
    }
    let mut cursor = vec![0usize; cfg.num_classes];

    let mut nodes = Vec::with_capacity(cfg.num_nodes);
    for (node_id, chunk) in iid_part.chunks(cfg.samples_per_node.max(1)).enumerate() {
        let samples = chunk.iter().map(|&i| pool[i].clone()).collect();
        nodes.push(NodeDataset::split_80_20(node_id, samples, true));
    }

    let per_label = cfg.samples_per_node / cfg.labels_per_node;
    for ordinal in 0..cfg.num_nodes - n_iid {
        let node_id = n_iid + ordinal;
        let mut samples = Vec::with_capacity(cfg.samples_per_node);
        for class in cfg.labels_for(ordinal) {
            let available = by_class[class].len() - cursor[class];
            if available < per_label {
                return Err(Error::InsufficientClass {
                    class,
                    needed: per_label,
                    available,
                });
            }
            let start = cursor[class];
            samples.extend(
                by_class[class][start..start + per_label]
                    .iter()
                    .map(|&i| pool[i].clone()),
            );
            cursor[class] += per_label;
        }
        samples.shuffle(&mut rng);
        nodes.push(NodeDataset::split_80_20(node_id, samples, false));
    }
    Ok(nodes)
}
