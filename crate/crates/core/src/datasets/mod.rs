//! Node datasets: the synthetic heterogeneous generator, label-skew
//! partitioning of a labeled pool, IDX ingestion and evaluation batches.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxImages, IMAGE_MAGIC, LABEL_MAGIC};
pub use partition::{partition_label_skew, SkewConfig};
pub use synthetic::{
    feature_variance, generate_iid_pool, generate_synthetic, generate_synthetic_with_teacher,
    LinearTeacher, MixturePool, SyntheticConfig,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::NodeId;

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A node's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataset {
    pub node_id: NodeId,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub is_iid: bool,
}

impl NodeDataset {
    /// Splits `samples` in order: the first `round(0.8 * n)` go to training.
    pub fn split_80_20(node_id: NodeId, mut samples: Vec<LabeledExample>, is_iid: bool) -> Self {
        let n_train = train_count(samples.len());
        let test = samples.split_off(n_train);
        NodeDataset {
            node_id,
            train: samples,
            test,
            is_iid,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Size of the training part of an 80/20 split.
pub fn train_count(total: usize) -> usize {
    (0.8 * total as f64).round() as usize
}

/// Number of IID nodes for a population of `num_nodes` with IID fraction
/// `iid_fraction`, rounded to nearest.
pub fn iid_count(num_nodes: usize, iid_fraction: f64) -> usize {
    ((iid_fraction * num_nodes as f64).round() as usize).min(num_nodes)
}

/// Draws `min(size, pool.len())` distinct examples uniformly at random.
pub fn sample_eval_batch<R: Rng + ?Sized>(
    pool: &[LabeledExample],
    size: usize,
    rng: &mut R,
) -> Result<Vec<LabeledExample>> {
    if pool.is_empty() {
        return Err(Error::Empty("evaluation pool"));
    }
    let amount = size.min(pool.len());
    Ok(rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}
