//! Node selection: per-node selection probabilities with the labeled-node
//! penalty, weighted sampling without replacement, uniform sampling, and the
//! largest-gradient-norm baseline.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    /// Uniform sampling without replacement (the FedAvg baseline).
    Random,
    /// Probabilistic node selection with the labeled-node penalty.
    FedPns,
    /// Random macro set, then the largest local-gradient norms.
    Bn2,
}

impl SelectionPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SelectionPolicy::Random => "random",
            SelectionPolicy::FedPns => "fedpns",
            SelectionPolicy::Bn2 => "bn2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionPolicyConfig {
    #[serde(rename = "selection")]
    pub policy: SelectionPolicy,
    pub alpha: u32,
    pub beta: f64,
    /// Fraction `c` of nodes taking part in each round.
    pub fraction: f64,
    /// Size of the BN2 macro set.
    pub macro_size: usize,
    pub probability_floor: f64,
}

impl Default for SelectionPolicyConfig {
    fn default() -> Self {
        SelectionPolicyConfig {
            policy: SelectionPolicy::Random,
            alpha: 2,
            beta: 0.7,
            fraction: 0.2,
            macro_size: 20,
            probability_floor: 0.0,
        }
    }
}

impl SelectionPolicyConfig {
    /// `round(c |K|)`.
    pub fn participants(&self, num_nodes: usize) -> usize {
        (self.fraction * num_nodes as f64).round() as usize
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.alpha < 1 {
            return Err(Error::invalid("alpha", "must be a positive integer"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", "must lie in [0, 1]"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::invalid("fraction", "must lie in (0, 1]"));
        }
        let m = self.participants(num_nodes);
        if m < 1 {
            return Err(Error::invalid(
                "fraction",
                format!("selects no node out of {num_nodes}"),
            ));
        }
        if self.policy == SelectionPolicy::Bn2 && !(m..=num_nodes).contains(&self.macro_size) {
            return Err(Error::invalid(
                "macro_size",
                format!("must lie in [{m}, {num_nodes}] for BN2"),
            ));
        }
        if !(self.probability_floor >= 0.0 && self.probability_floor * num_nodes as f64 <= 1.0) {
            return Err(Error::invalid(
                "probability_floor",
                "must be >= 0 and at most 1/|K|",
            ));
        }
        Ok(())
    }
}

/// Selection probability and counters of every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub probabilities: Vec<f64>,
    pub times_selected: Vec<u64>,
    pub times_labeled: Vec<u64>,
    pub times_excluded: Vec<u64>,
}

impl NodeStats {
    /// Uniform probabilities `1/|K|`, zero counters.
    pub fn uniform(num_nodes: usize) -> Self {
        NodeStats {
            probabilities: vec![1.0 / num_nodes as f64; num_nodes],
            times_selected: vec![0; num_nodes],
            times_labeled: vec![0; num_nodes],
            times_excluded: vec![0; num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.probabilities.len()
    }

    /// Adds one round's participation, labels and exclusions to the counters.
    pub fn record_round(
        &mut self,
        selected: &BTreeSet<NodeId>,
        labeled: &BTreeSet<NodeId>,
        excluded: &BTreeSet<NodeId>,
    ) -> Result<()> {
        let k = self.num_nodes();
        if let Some(&bad) = selected.iter().chain(labeled).chain(excluded).find(|&&n| n >= k) {
            return Err(Error::invalid("node", format!("node {bad} outside 0..{k}")));
        }
        if !labeled.is_subset(selected) || !excluded.is_subset(labeled) {
            return Err(Error::invalid(
                "labeled",
                "labeled nodes must be selected and excluded nodes labeled",
            ));
        }
        for &n in selected {
            self.times_selected[n] += 1;
        }
        for &n in labeled {
            self.times_labeled[n] += 1;
        }
        for &n in excluded {
            self.times_excluded[n] += 1;
        }
        Ok(())
    }

    /// Accumulated labeled / selected ratio, `None` before the first selection.
    pub fn labeled_ratio(&self, node: NodeId) -> Option<f64> {
        let sel = self.times_selected[node];
        (sel > 0).then(|| self.times_labeled[node] as f64 / sel as f64)
    }
}

/// `min((x + β)^α, 1)` for a labeled ratio `x ∈ (0, 1]`.
pub fn decrement_factor(x: f64, alpha: u32, beta: f64) -> Result<f64> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::invalid("labeled_ratio", format!("{x} is outside (0, 1]")));
    }
    let exp = i32::try_from(alpha).map_err(|_| Error::invalid("alpha", "too large"))?;
    Ok((x + beta).powi(exp).min(1.0))
}

/// Penalizes the labeled nodes and spreads the removed mass equally over all
/// other nodes.
///
/// Counters must already include this round. A labeled node loses
/// `p_i * decrement_factor(x_i)` (clipped so it stays at or above `floor`);
/// the sum of what was actually removed, accumulated in node order, is
/// divided equally among the `|K| - |labeled|` other nodes.
pub fn update_probabilities(
    stats: &mut NodeStats,
    labeled: &BTreeSet<NodeId>,
    alpha: u32,
    beta: f64,
    floor: f64,
) -> Result<()> {
    if labeled.is_empty() {
        return Ok(());
    }
    let k = stats.num_nodes();
    if labeled.len() >= k {
        return Err(Error::NoRecipients);
    }
    let mut new_p = Vec::with_capacity(labeled.len());
    for &n in labeled {
        if n >= k {
            return Err(Error::invalid("labeled", format!("node {n} outside 0..{k}")));
        }
        let x = stats.labeled_ratio(n).ok_or_else(|| {
            Error::invalid("labeled", format!("node {n} labeled but never selected"))
        })?;
        let p = stats.probabilities[n];
        let target = p - p * decrement_factor(x, alpha, beta)?;
        new_p.push((n, target.max(floor.min(p))));
    }
    let mut removed = 0.0;
    for &(n, p) in &new_p {
        removed += stats.probabilities[n] - p;
        stats.probabilities[n] = p;
    }
    let share = removed / (k - labeled.len()) as f64;
    for (n, p) in stats.probabilities.iter_mut().enumerate() {
        if !labeled.contains(&n) {
            *p += share;
        }
    }
    Ok(())
}

/// Sequential weighted sampling without replacement: `m` draws, each
/// proportional to the weights of the nodes not drawn yet. Returns sorted
/// node ids.
pub fn sample_nodes<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Result<Vec<NodeId>> {
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    if positive < m {
        return Err(Error::SamplingShortfall {
            requested: m,
            available: positive,
        });
    }
    let mut remaining: Vec<(NodeId, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| (i, *w))
        .collect();
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = remaining.iter().map(|(_, w)| w).sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        // Falls back to the last candidate if rounding leaves u >= acc.
        let mut pick = remaining.len() - 1;
        for (idx, (_, w)) in remaining.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = idx;
                break;
            }
        }
        chosen.push(remaining.remove(pick).0);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Uniform sampling of `m` of `num_nodes` nodes without replacement.
pub fn select_random<R: Rng + ?Sized>(num_nodes: usize, m: usize, rng: &mut R) -> Result<Vec<NodeId>> {
    sample_nodes(&vec![1.0; num_nodes], m, rng)
}

/// The `m` nodes with the largest gradient norm; ties go to the lower id.
pub fn select_bn2(grad_norms: &BTreeMap<NodeId, f64>, m: usize) -> Result<Vec<NodeId>> {
    if grad_norms.len() < m {
        return Err(Error::SamplingShortfall {
            requested: m,
            available: grad_norms.len(),
        });
    }
    let mut ranked: Vec<(NodeId, f64)> = grad_norms.iter().map(|(&n, &g)| (n, g)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<NodeId> = ranked.into_iter().take(m).map(|(n, _)| n).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn stats_with(selected: &[u64], labeled: &[u64]) -> NodeStats {
        let mut s = NodeStats::uniform(selected.len());
        s.times_selected = selected.to_vec();
        s.times_labeled = labeled.to_vec();
        s
    }

    #[test]
    fn decrement_factor_values() {
        assert_eq!(decrement_factor(0.3, 2, 0.7).unwrap(), 1.0);
        assert!((decrement_factor(0.1, 2, 0.7).unwrap() - 0.64).abs() < 1e-15);
        for x in [0.01, 0.2, 0.5, 1.0] {
            assert_eq!(decrement_factor(x, 3, 1.0).unwrap(), 1.0);
        }
        assert!(decrement_factor(0.0, 2, 0.7).is_err());
        assert!(decrement_factor(1.01, 2, 0.7).is_err());
    }

    #[test]
    fn empty_label_set_is_identity() {
        let mut s = stats_with(&[1; 5], &[0; 5]);
        let before = s.clone();
        update_probabilities(&mut s, &BTreeSet::new(), 2, 0.7, 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn full_penalty_redistributes() {
        let mut s = stats_with(&[1, 0, 0, 0, 0], &[1, 0, 0, 0, 0]);
        update_probabilities(&mut s, &[0].into(), 2, 0.7, 0.0).unwrap();
        assert_eq!(s.probabilities[0], 0.0);
        for p in &s.probabilities[1..] {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn partial_penalty() {
        let mut s = stats_with(&[10, 0, 0, 0, 0], &[1, 0, 0, 0, 0]);
        update_probabilities(&mut s, &[0].into(), 2, 0.7, 0.0).unwrap();
        assert!((s.probabilities[0] - 0.072).abs() < 1e-15);
        for p in &s.probabilities[1..] {
            assert!((p - 0.232).abs() < 1e-15);
        }
        assert!((s.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn floor_limits_removal() {
        let mut s = stats_with(&[1, 0, 0, 0, 0], &[1, 0, 0, 0, 0]);
        update_probabilities(&mut s, &[0].into(), 2, 0.7, 0.05).unwrap();
        assert!((s.probabilities[0] - 0.05).abs() < 1e-15);
        for p in &s.probabilities[1..] {
            assert!((p - 0.2375).abs() < 1e-15);
        }
    }

    #[test]
    fn all_labeled_is_an_error() {
        let mut s = stats_with(&[1, 1], &[1, 1]);
        assert!(matches!(
            update_probabilities(&mut s, &[0, 1].into(), 2, 0.7, 0.0),
            Err(Error::NoRecipients)
        ));
    }

    #[test]
    fn record_round_checks_nesting() {
        let mut s = NodeStats::uniform(4);
        s.record_round(&[0, 1].into(), &[1].into(), &[1].into()).unwrap();
        assert_eq!(s.times_selected, vec![1, 1, 0, 0]);
        assert_eq!(s.labeled_ratio(1), Some(1.0));
        assert_eq!(s.labeled_ratio(3), None);
        assert!(s.record_round(&[0].into(), &[2].into(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn degenerate_and_exhaustive_sampling() {
        let mut rng = substream(1, Stream::Select, 0, 0);
        for _ in 0..50 {
            assert_eq!(sample_nodes(&[1.0, 0.0, 0.0], 1, &mut rng).unwrap(), vec![0]);
        }
        assert_eq!(
            sample_nodes(&[0.2; 5], 5, &mut rng).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(matches!(
            sample_nodes(&[0.5, 0.5, 0.0], 3, &mut rng),
            Err(Error::SamplingShortfall {
                requested: 3,
                available: 2
            })
        ));
    }

    #[test]
    fn random_selection_is_seeded() {
        let a = select_random(50, 10, &mut substream(9, Stream::Select, 4, 0)).unwrap();
        let b = select_random(50, 10, &mut substream(9, Stream::Select, 4, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(select_random(7, 7, &mut substream(9, Stream::Select, 4, 0)).unwrap().len(), 7);
    }

    #[test]
    fn bn2_ordering() {
        let norms: BTreeMap<_, _> = [(0, 5.0), (1, 1.0), (2, 3.0), (3, 2.0)].into();
        assert_eq!(select_bn2(&norms, 2).unwrap(), vec![0, 2]);
        let flat: BTreeMap<_, _> = [(4, 1.0), (2, 1.0), (9, 1.0)].into();
        assert_eq!(select_bn2(&flat, 2).unwrap(), vec![2, 4]);
        assert_eq!(select_bn2(&norms, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn config_validation() {
        let mut c = SelectionPolicyConfig::default();
        c.validate(50).unwrap();
        assert_eq!(c.participants(50), 10);
        c.alpha = 0;
        assert!(matches!(c.validate(50), Err(Error::InvalidConfig { field: "alpha", .. })));
        c.alpha = 2;
        c.beta = 1.2;
        assert!(c.validate(50).is_err());
        c.beta = 0.7;
        c.policy = SelectionPolicy::Bn2;
        c.macro_size = 5;
        assert!(c.validate(50).is_err());
    }
}
