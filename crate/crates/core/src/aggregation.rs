//! Server-side aggregation: FedAvg averaging and the greedy exclusion of
//! adverse local updates.
//!
//! The exclusion loop works on gradients reconstructed from the updates,
//! `g_i = -Δ_i / η_t`. The expectation term of a set `A` is
//! `(1/|A|) Σ_{i∈A} <ḡ_A, g_i>` with `ḡ_A` the mean gradient over `A`; it
//! measures how much the averaged step is expected to lower the global loss.
//! A node is *labeled* when dropping it raises that term above the current
//! baseline, and *excluded* when dropping it also strictly lowers the loss
//! of the aggregated model on a fresh evaluation batch.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::datasets::{sample_eval_batch, LabeledExample};
use crate::error::{Error, Result};
use crate::models::{mean_loss, ModelSpec};
use crate::params::ParamVector;
use crate::NodeId;

/// Relative tolerance under which two expectation values (or two losses)
/// are considered tied. Ties never label or exclude a node.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// `a > b` by more than the tie tolerance.
pub fn strictly_greater(a: f64, b: f64) -> bool {
    a - b > TIE_TOLERANCE * a.abs().max(b.abs())
}

/// The updates received in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpdates {
    pub updates: BTreeMap<NodeId, ParamVector>,
    /// Round-start global model `w^t`.
    pub global: ParamVector,
    /// Round learning rate `η_t`, used to turn updates back into gradients.
    pub learning_rate: f64,
}

impl RoundUpdates {
    pub fn validate(&self) -> Result<()> {
        if self.updates.is_empty() {
            return Err(Error::Empty("round updates"));
        }
        for delta in self.updates.values() {
            delta.check_len(self.global.len())?;
        }
        Ok(())
    }

    fn update(&self, node: NodeId) -> Result<&ParamVector> {
        self.updates
            .get(&node)
            .ok_or_else(|| Error::invalid("node", format!("node {node} sent no update")))
    }

    /// `w^t + mean(Δ_i for i in nodes)`.
    pub fn aggregate<'a, I>(&self, nodes: I) -> Result<ParamVector>
    where
        I: IntoIterator<Item = &'a NodeId>,
    {
        let deltas = nodes
            .into_iter()
            .map(|n| self.update(*n))
            .collect::<Result<Vec<_>>>()?;
        let mean = ParamVector::mean(deltas)?;
        mean.check_len(self.global.len())?;
        Ok(self.global.add(&mean))
    }
}

/// FedAvg: `w_t + (1/|S|) Σ Δ_i`.
pub fn average_updates(
    updates: &BTreeMap<NodeId, ParamVector>,
    global: &ParamVector,
) -> Result<ParamVector> {
    let mean = ParamVector::mean(updates.values())?;
    mean.check_len(global.len())?;
    Ok(global.add(&mean))
}

/// `∇F_i(w^t) = -Δ_i / η_t` for every node.
pub fn reconstruct_gradients(updates: &RoundUpdates) -> Result<BTreeMap<NodeId, ParamVector>> {
    let eta = updates.learning_rate;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(
            "learning_rate",
            format!("gradient reconstruction needs a positive rate, got {eta}"),
        ));
    }
    Ok(updates
        .updates
        .iter()
        .map(|(&n, d)| (n, d.scaled(-1.0 / eta)))
        .collect())
}

/// `(1/|A|) Σ_{i∈A} <ḡ, g_i>` with `ḡ` the mean of `grads`.
///
/// Algebraically this equals `‖ḡ‖²`; the sum is evaluated as written.
pub fn expectation_term<'a, I>(grads: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a ParamVector>,
    I::IntoIter: Clone,
{
    let iter = grads.into_iter();
    let mean = ParamVector::mean(iter.clone())?;
    let products: Vec<f64> = iter.map(|g| mean.dot(g)).collect();
    // Shifted mean, exact when all products agree.
    let first = products[0];
    let shifted: f64 = products.iter().map(|p| p - first).sum();
    Ok(first + shifted / products.len() as f64)
}

/// Leave-one-out expectation values: for each `i`, the term over `S \ {i}`.
pub fn check_expectation(
    grads: &BTreeMap<NodeId, ParamVector>,
) -> Result<BTreeMap<NodeId, f64>> {
    if grads.len() < 2 {
        return Err(Error::invalid(
            "participants",
            "leave-one-out needs at least two gradients",
        ));
    }
    grads
        .keys()
        .map(|&left_out| {
            let rest = grads
                .iter()
                .filter(move |(n, _)| **n != left_out)
                .map(|(_, g)| g);
            expectation_term(rest).map(|v| (left_out, v))
        })
        .collect()
}

/// Scores candidate global models for the loss check. Both models of one
/// call must be scored on the same evaluation data.
pub trait LossComparator {
    /// Returns `(loss(full), loss(reduced))`.
    fn compare(&mut self, full: &ParamVector, reduced: &ParamVector) -> Result<(f64, f64)>;
}

/// Any deterministic objective can act as a comparator.
impl<F> LossComparator for F
where
    F: FnMut(&ParamVector) -> f64,
{
    fn compare(&mut self, full: &ParamVector, reduced: &ParamVector) -> Result<(f64, f64)> {
        Ok((self(full), self(reduced)))
    }
}

/// Draws a fresh batch of `batch_size` test samples per comparison and
/// scores both models on it with the mean cross-entropy.
pub struct BatchLossComparator<'a, R> {
    pub spec: &'a ModelSpec,
    pub pool: &'a [LabeledExample],
    pub batch_size: usize,
    pub rng: R,
}

impl<R: Rng> LossComparator for BatchLossComparator<'_, R> {
    fn compare(&mut self, full: &ParamVector, reduced: &ParamVector) -> Result<(f64, f64)> {
        let batch = sample_eval_batch(self.pool, self.batch_size, &mut self.rng)?;
        Ok((
            mean_loss(self.spec, full, &batch)?,
            mean_loss(self.spec, reduced, &batch)?,
        ))
    }
}

/// Builds the model from all of `retained` and from `retained \ {candidate}`
/// and returns their losses `(ls_full, ls_reduced)`.
pub fn check_loss<C: LossComparator + ?Sized>(
    updates: &RoundUpdates,
    retained: &BTreeSet<NodeId>,
    candidate: NodeId,
    comparator: &mut C,
) -> Result<(f64, f64)> {
    if !retained.contains(&candidate) {
        return Err(Error::invalid(
            "candidate",
            format!("node {candidate} is not in the retained set"),
        ));
    }
    if retained.len() < 2 {
        return Err(Error::Empty("reduced participant set"));
    }
    let full = updates.aggregate(retained)?;
    let reduced = updates.aggregate(retained.iter().filter(|n| **n != candidate))?;
    comparator.compare(&full, &reduced)
}

/// One pass of the exclusion loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationStep {
    /// Node whose removal gave the highest leave-one-out value.
    pub candidate: NodeId,
    /// Its leave-one-out expectation value.
    pub value: f64,
    /// Expectation value of the retained set before this pass.
    pub baseline: f64,
    /// `(ls_full, ls_reduced)` when the candidate was labeled.
    pub losses: Option<(f64, f64)>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub retained: BTreeSet<NodeId>,
    pub labeled: BTreeSet<NodeId>,
    pub excluded: BTreeSet<NodeId>,
    /// `w^{t+1}`, averaged over `retained`.
    pub new_model: ParamVector,
    pub expectation_trace: Vec<ExpectationStep>,
}

/// Smallest retained-set size allowed for `n` participants: `ceil(v n)`,
/// at least 1.
pub fn min_retained(n: usize, min_retained_fraction: f64) -> usize {
    // The epsilon keeps e.g. 0.7 * 10 from rounding up to 8.
    ((min_retained_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Greedy exclusion of adverse updates followed by the global update.
///
/// Each pass computes the leave-one-out expectation values of the retained
/// set. If the best of them (lowest node id on ties) does not exceed the
/// current baseline, the loop stops. Otherwise that node is labeled and the
/// loss check runs; the node is excluded only if the reduced model's loss is
/// strictly lower, in which case its leave-one-out value becomes the new
/// baseline. The loop never shrinks the retained set below
/// [`min_retained`].
pub fn optimal_aggregation<C: LossComparator + ?Sized>(
    updates: &RoundUpdates,
    min_retained_fraction: f64,
    comparator: &mut C,
) -> Result<AggregationOutcome> {
    updates.validate()?;
    if !(min_retained_fraction > 0.0 && min_retained_fraction <= 1.0) {
        return Err(Error::invalid(
            "min_retained_fraction",
            "must lie in (0, 1]",
        ));
    }
    let floor = min_retained(updates.updates.len(), min_retained_fraction);
    let mut retained: BTreeSet<NodeId> = updates.updates.keys().copied().collect();
    let mut labeled = BTreeSet::new();
    let mut excluded = BTreeSet::new();
    let mut trace = Vec::new();

    if retained.len() > floor {
        let mut grads = reconstruct_gradients(updates)?;
        let mut baseline = expectation_term(grads.values())?;
        while retained.len() > floor {
            let temp = check_expectation(&grads)?;
            let (candidate, value) = temp.iter().fold((usize::MAX, f64::NEG_INFINITY), |best, (&n, &v)| {
                if best.0 == usize::MAX || strictly_greater(v, best.1) {
                    (n, v)
                } else {
                    best
                }
            });
            let mut step = ExpectationStep {
                candidate,
                value,
                baseline,
                losses: None,
                excluded: false,
            };
            if !strictly_greater(value, baseline) {
                trace.push(step);
                break;
            }
            labeled.insert(candidate);
            let (full, reduced) = check_loss(updates, &retained, candidate, comparator)?;
            step.losses = Some((full, reduced));
            if !strictly_greater(full, reduced) {
                trace.push(step);
                break;
            }
            step.excluded = true;
            trace.push(step);
            retained.remove(&candidate);
            excluded.insert(candidate);
            grads.remove(&candidate);
            baseline = value;
        }
    }

    let new_model = updates.aggregate(&retained)?;
    Ok(AggregationOutcome {
        retained,
        labeled,
        excluded,
        new_model,
        expectation_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn grads(list: &[&[f64]]) -> BTreeMap<NodeId, ParamVector> {
        list.iter().enumerate().map(|(i, g)| (i + 1, pv(g))).collect()
    }

    /// Updates `Δ_i = -η g_i` around `w_t = 0` with `η = 0.5`.
    fn updates_from(grads: &BTreeMap<NodeId, ParamVector>) -> RoundUpdates {
        let dim = grads.values().next().unwrap().len();
        RoundUpdates {
            updates: grads.iter().map(|(&n, g)| (n, g.scaled(-0.5))).collect(),
            global: ParamVector::zeros(dim),
            learning_rate: 0.5,
        }
    }

    #[test]
    fn averaging() {
        let mut u = BTreeMap::new();
        u.insert(0, pv(&[1.0, 1.0]));
        u.insert(1, pv(&[3.0, 3.0]));
        assert_eq!(average_updates(&u, &pv(&[0.0, 0.0])).unwrap(), pv(&[2.0, 2.0]));
        u.remove(&1);
        assert_eq!(average_updates(&u, &pv(&[0.5, 0.0])).unwrap(), pv(&[1.5, 1.0]));
        u.insert(2, pv(&[1.0]));
        assert!(matches!(
            average_updates(&u, &pv(&[0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        let same: BTreeMap<_, _> = (0..5).map(|i| (i, pv(&[0.1, -0.3]))).collect();
        assert_eq!(
            average_updates(&same, &pv(&[1.0, 1.0])).unwrap(),
            pv(&[1.0, 1.0]).add(&pv(&[0.1, -0.3]))
        );
    }

    #[test]
    fn gradient_reconstruction() {
        let mut u = RoundUpdates {
            updates: [(0, pv(&[-0.1, 0.2])), (1, pv(&[0.0, 0.0]))].into_iter().collect(),
            global: pv(&[0.0, 0.0]),
            learning_rate: 0.01,
        };
        let g = reconstruct_gradients(&u).unwrap();
        assert!((g[&0].as_slice()[0] - 10.0).abs() < 1e-12);
        assert!((g[&0].as_slice()[1] + 20.0).abs() < 1e-12);
        assert!(g[&1].as_slice().iter().all(|v| *v == 0.0));
        u.learning_rate = 0.0;
        assert!(reconstruct_gradients(&u).is_err());
    }

    #[test]
    fn expectation_values() {
        assert_eq!(expectation_term([&pv(&[3.0, 4.0])]).unwrap(), 25.0);
        let g = grads(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, -1.0]]);
        assert_eq!(expectation_term(g.values()).unwrap(), 0.0);
        let loo = check_expectation(&g).unwrap();
        assert!((loo[&1] - 0.25).abs() < 1e-15);
        assert!((loo[&2] - 0.25).abs() < 1e-15);
        assert!((loo[&3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_gradients_give_norm_squared() {
        let g: BTreeMap<_, _> = (0..4).map(|i| (i, pv(&[0.3, -1.7, 2.2]))).collect();
        let norm2 = pv(&[0.3, -1.7, 2.2]).dot(&pv(&[0.3, -1.7, 2.2]));
        for v in check_expectation(&g).unwrap().values() {
            assert_eq!(*v, expectation_term(g.values()).unwrap());
            assert!((v - norm2).abs() < 1e-12);
        }
        assert!(check_expectation(&grads(&[&[1.0]])).is_err());
    }

    #[test]
    fn check_loss_redundant_and_pair() {
        let g = grads(&[&[1.0, 0.0], &[3.0, 0.0], &[2.0, 0.0]]);
        let u = updates_from(&g);
        let all: BTreeSet<_> = [1, 2, 3].into();
        let mut obj = |w: &ParamVector| w.dot(w) + w.as_slice()[0];
        // Node 3's update is the mean of the other two.
        let (full, reduced) = check_loss(&u, &all, 3, &mut obj).unwrap();
        assert_eq!(full, reduced);
        let pair: BTreeSet<_> = [1, 2].into();
        let mut seen = Vec::new();
        let mut record = |w: &ParamVector| {
            seen.push(w.clone());
            0.0
        };
        check_loss(&u, &pair, 1, &mut record).unwrap();
        assert_eq!(seen[1], u.global.add(&u.updates[&2]));
        let single: BTreeSet<_> = [1].into();
        assert!(check_loss(&u, &single, 1, &mut obj).is_err());
        assert!(check_loss(&u, &pair, 3, &mut obj).is_err());
    }

    #[test]
    fn homogeneous_round_is_fedavg() {
        let g: BTreeMap<_, _> = (0..10).map(|i| (i, pv(&[0.4, -0.2]))).collect();
        let u = updates_from(&g);
        let mut obj = |w: &ParamVector| w.norm();
        let out = optimal_aggregation(&u, 0.7, &mut obj).unwrap();
        assert!(out.labeled.is_empty() && out.excluded.is_empty());
        assert_eq!(out.retained.len(), 10);
        assert_eq!(out.new_model, u.global.add(&u.updates[&0]));
    }

    #[test]
    fn hand_fixture_excludes_node_three() {
        let g = grads(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, -1.0]]);
        let u = updates_from(&g);
        // Convex objective minimised in the direction of -(g1 + g2).
        let target = pv(&[-1.0, -1.0]);
        let mut obj = |w: &ParamVector| w.sub(&target).dot(&w.sub(&target));
        let out = optimal_aggregation(&u, 0.5, &mut obj).unwrap();
        assert_eq!(out.labeled, [3].into());
        assert_eq!(out.excluded, [3].into());
        assert_eq!(out.retained, [1, 2].into());
        let first = &out.expectation_trace[0];
        assert_eq!(first.candidate, 3);
        assert!(first.excluded);
        assert!(strictly_greater(first.value, first.baseline));
        assert_eq!(out.new_model, u.aggregate(&[1, 2]).unwrap());
    }

    #[test]
    fn labeled_but_kept_when_loss_disagrees() {
        let g = grads(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, -1.0]]);
        let u = updates_from(&g);
        // Objective that prefers the full average.
        let mut obj = |w: &ParamVector| w.dot(w);
        let out = optimal_aggregation(&u, 0.3, &mut obj).unwrap();
        assert_eq!(out.labeled, [3].into());
        assert!(out.excluded.is_empty());
        assert_eq!(out.retained.len(), 3);
    }

    #[test]
    fn exclusions_respect_fraction_floor() {
        assert_eq!(min_retained(10, 0.7), 7);
        assert_eq!(min_retained(10, 1.0), 10);
        assert_eq!(min_retained(3, 0.3), 1);
        assert_eq!(min_retained(1, 0.7), 1);
        // Every node is an outlier except node 0; an objective that always
        // prefers removal.
        let g: BTreeMap<_, _> = (0..10)
            .map(|i| (i, pv(&[1.0 + i as f64 * 0.1, (i * i) as f64 * 0.3 - 4.0])))
            .collect();
        let u = updates_from(&g);
        let mut shrinker = |a: &ParamVector, b: &ParamVector| -> Result<(f64, f64)> {
            let _ = (a, b);
            Ok((1.0, 0.0))
        };
        struct Always<F>(F);
        impl<F: FnMut(&ParamVector, &ParamVector) -> Result<(f64, f64)>> LossComparator for Always<F> {
            fn compare(&mut self, a: &ParamVector, b: &ParamVector) -> Result<(f64, f64)> {
                (self.0)(a, b)
            }
        }
        let out = optimal_aggregation(&u, 0.7, &mut Always(&mut shrinker)).unwrap();
        assert!(out.excluded.len() <= 3);
        assert!(out.retained.len() >= 7);
    }

    #[test]
    fn full_fraction_is_bit_exact_fedavg() {
        let g = grads(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, -1.0], &[0.3, 0.7]]);
        let u = updates_from(&g);
        let mut obj = |w: &ParamVector| -w.norm();
        let out = optimal_aggregation(&u, 1.0, &mut obj).unwrap();
        assert_eq!(out.new_model, average_updates(&u.updates, &u.global).unwrap());
        assert!(out.expectation_trace.is_empty());
    }

    #[test]
    fn rejects_bad_fraction() {
        let u = updates_from(&grads(&[&[1.0]]));
        let mut obj = |w: &ParamVector| w.norm();
        assert!(optimal_aggregation(&u, 0.0, &mut obj).is_err());
        assert!(optimal_aggregation(&u, 1.5, &mut obj).is_err());
    }
}
