use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{iid_count, LabeledExample, NodeDataset};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Parameters of the synthetic heterogeneous population.
///
/// Nodes `0..round(iid_fraction * num_nodes)` are IID, the rest are not.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_nodes: usize,
    pub iid_fraction: f64,
    /// Standard deviation of the per-node mean shift `B_i`.
    pub heterogeneity: f64,
    pub samples_per_node: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_nodes: 50,
            iid_fraction: 0.2,
            heterogeneity: 1.0,
            samples_per_node: 200,
            feature_dim: 60,
            num_classes: 10,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::invalid("num_nodes", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.iid_fraction) {
            return Err(Error::invalid("iid_fraction", "must lie in [0, 1]"));
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return Err(Error::invalid("heterogeneity", "must be finite and >= 0"));
        }
        if self.samples_per_node == 0 {
            return Err(Error::invalid("samples_per_node", "must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "must be at least 2"));
        }
        Ok(())
    }
}

/// Diagonal of the feature covariance: `r^-1.2` for 1-based index `r`.
pub fn feature_variance(r: usize) -> f64 {
    (r as f64).powf(-1.2)
}

/// The labeling model `y = argmax softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTeacher {
    /// Row-major `num_classes x feature_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_dim: usize,
}

impl LinearTeacher {
    pub fn sample<R: Rng + ?Sized>(feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let weights = (0..feature_dim * num_classes)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let bias = (0..num_classes).map(|_| StandardNormal.sample(rng)).collect();
        LinearTeacher {
            weights,
            bias,
            feature_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Argmax of the logits; softmax is monotone so it is not evaluated.
    /// Ties go to the lowest class index.
    pub fn label(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_logit = f64::NEG_INFINITY;
        for (c, b) in self.bias.iter().enumerate() {
            let row = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
            let logit = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            if logit > best_logit {
                best_logit = logit;
                best = c;
            }
        }
        best
    }

    fn example<R: Rng + ?Sized>(&self, mean: Option<&[f64]>, rng: &mut R) -> LabeledExample {
        let features: Vec<f64> = (0..self.feature_dim)
            .map(|r| {
                let z: f64 = StandardNormal.sample(rng);
                let centre = mean.map_or(0.0, |m| m[r]);
                centre + feature_variance(r + 1).sqrt() * z
            })
            .collect();
        let label = self.label(&features);
        LabeledExample { features, label }
    }
}

/// Generates the node population. Equivalent to
/// [`generate_synthetic_with_teacher`] without the teacher.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<NodeDataset>> {
    generate_synthetic_with_teacher(cfg).map(|(_, nodes)| nodes)
}

/// Generates the node population and returns the shared labeling model.
///
/// Draw order: teacher weights, teacher bias, then node by node. A non-IID
/// node draws `B_i ~ N(0, heterogeneity)`, its mean vector `o_i ~ N(B_i, 1)`
/// element-wise, then its samples. Samples are drawn independently, so the
/// 80/20 split takes them in draw order.
pub fn generate_synthetic_with_teacher(
    cfg: &SyntheticConfig,
) -> Result<(LinearTeacher, Vec<NodeDataset>)> {
    cfg.validate()?;
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let teacher = LinearTeacher::sample(cfg.feature_dim, cfg.num_classes, &mut rng);
    let n_iid = iid_count(cfg.num_nodes, cfg.iid_fraction);
    let shift = Normal::new(0.0, cfg.heterogeneity)
        .map_err(|e| Error::invalid("heterogeneity", e.to_string()))?;

    let nodes = (0..cfg.num_nodes)
        .map(|node_id| {
            let is_iid = node_id < n_iid;
            let mean = (!is_iid).then(|| {
                let b: f64 = shift.sample(&mut rng);
                (0..cfg.feature_dim)
                    .map(|_| b + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>()
            });
            let samples = (0..cfg.samples_per_node)
                .map(|_| teacher.example(mean.as_deref(), &mut rng))
                .collect();
            NodeDataset::split_80_20(node_id, samples, is_iid)
        })
        .collect();
    Ok((teacher, nodes))
}

/// Draws `n` IID samples (`x ~ N(0, Σ)`) labeled by `teacher`.
pub fn generate_iid_pool<R: Rng + ?Sized>(
    teacher: &LinearTeacher,
    n: usize,
    rng: &mut R,
) -> Vec<LabeledExample> {
    (0..n).map(|_| teacher.example(None, rng)).collect()
}

/// Class-balanced Gaussian mixture, a stand-in for a real labeled dataset.
///
/// Class means have `N(0, 1)` entries; a sample of class `y` is
/// `separation * mean_y + z` with `z ~ N(0, I)`. Labels cycle through the
/// classes, so every class holds `n / num_classes` samples (the first
/// `n % num_classes` classes one more). The same `rng` state yields the same
/// means, so a test split can be drawn with [`MixturePool::sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePool {
    pub means: Vec<Vec<f64>>,
    pub separation: f64,
}

impl MixturePool {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        num_classes: usize,
        separation: f64,
        rng: &mut R,
    ) -> Self {
        let means = (0..num_classes)
            .map(|_| (0..feature_dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        MixturePool { means, separation }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| {
                let label = i % self.means.len();
                let features = self.means[label]
                    .iter()
                    .map(|m| self.separation * m + Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect();
                LabeledExample { features, label }
            })
            .collect()
    }
}
