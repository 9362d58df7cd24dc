use fedsim_core::checkpoint::Checkpoint;
use fedsim_core::config::{AggregationMode, DataSource, ExperimentConfig};
use fedsim_core::datasets::{LabeledExample, NodeDataset};
use fedsim_core::models::{local_train, mean_loss};
use fedsim_core::orchestrator::{
    global_train_loss, run_experiment, weight_divergence, FederatedData, Simulation,
};
use fedsim_core::rng::{substream, Stream};
use fedsim_core::selection::SelectionPolicy;
use fedsim_core::ParamVector;

fn small(policy: SelectionPolicy, mode: AggregationMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        rounds: 6,
        seed: 3,
        ..Default::default()
    };
    cfg.data.num_nodes = 10;
    cfg.data.samples_per_node = 40;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 0.05;
    cfg.selection.policy = policy;
    cfg.selection.fraction = 0.4;
    cfg.selection.macro_size = 6;
    cfg.aggregation.mode = mode;
    cfg.aggregation.eval_batch_size = 32;
    cfg
}

#[test]
fn single_round_gives_one_record() {
    let mut cfg = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    cfg.rounds = 1;
    let recs = run_experiment(&cfg).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].round, 0);
    assert_eq!(recs[0].selected.len(), 4);
}

#[test]
fn zero_rounds_rejected() {
    let mut cfg = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    cfg.rounds = 0;
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn fedpns_needs_optimal_aggregation() {
    let cfg = small(SelectionPolicy::FedPns, AggregationMode::FedAvg);
    assert!(cfg.validate().is_err());
}

#[test]
fn runs_are_deterministic() {
    for (p, m) in [
        (SelectionPolicy::Random, AggregationMode::FedAvg),
        (SelectionPolicy::FedPns, AggregationMode::Optimal),
        (SelectionPolicy::Bn2, AggregationMode::FedAvg),
    ] {
        let cfg = small(p, m);
        assert_eq!(run_experiment(&cfg).unwrap(), run_experiment(&cfg).unwrap());
    }
}

#[test]
fn different_seeds_differ() {
    let a = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    let mut b = a.clone();
    b.seed = 4;
    assert_ne!(run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
}

#[test]
fn random_policy_keeps_uniform_probabilities() {
    let recs = run_experiment(&small(SelectionPolicy::Random, AggregationMode::Optimal)).unwrap();
    for r in &recs {
        assert!(r.probabilities.iter().all(|&p| p == 0.1));
    }
}

#[test]
fn aggregation_mode_does_not_change_random_selections() {
    let avg = run_experiment(&small(SelectionPolicy::Random, AggregationMode::FedAvg)).unwrap();
    let opt = run_experiment(&small(SelectionPolicy::Random, AggregationMode::Optimal)).unwrap();
    for (a, b) in avg.iter().zip(&opt) {
        assert_eq!(a.selected, b.selected);
    }
}

#[test]
fn selection_counters_add_up() {
    let cfg = small(SelectionPolicy::FedPns, AggregationMode::Optimal);
    let mut sim = Simulation::new(cfg).unwrap();
    let recs = sim.run_to_end().unwrap();
    let total: u64 = sim.stats().times_selected.iter().sum();
    assert_eq!(total, 6 * 4);
    let labeled: u64 = sim.stats().times_labeled.iter().sum();
    assert_eq!(labeled as usize, recs.iter().map(|r| r.labeled.len()).sum::<usize>());
    for r in &recs {
        let s: f64 = r.probabilities.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn learning_rate_decays_from_round_zero() {
    let recs = run_experiment(&small(SelectionPolicy::Random, AggregationMode::FedAvg)).unwrap();
    for r in &recs {
        let want = 0.05 * 0.995f64.powi(r.round as i32);
        assert!((r.learning_rate - want).abs() < 1e-15);
    }
}

#[test]
fn bn2_keeps_top_norms_of_macro_set() {
    let recs = run_experiment(&small(SelectionPolicy::Bn2, AggregationMode::FedAvg)).unwrap();
    for r in &recs {
        assert_eq!(r.grad_norms.len(), 6);
        assert_eq!(r.selected.len(), 4);
        let min_kept = r
            .grad_norms
            .iter()
            .filter(|(n, _)| r.selected.contains(n))
            .map(|(_, g)| *g)
            .fold(f64::INFINITY, f64::min);
        let max_dropped = r
            .grad_norms
            .iter()
            .filter(|(n, _)| !r.selected.contains(n))
            .map(|(_, g)| *g)
            .fold(0.0, f64::max);
        assert!(min_kept >= max_dropped);
    }
}

#[test]
fn forced_fedavg_round_matches_manual_average() {
    let cfg = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    let w0 = sim.model().clone();
    let picked = [1, 4, 7];
    let rec = sim.run_round_with_selection(&picked).unwrap();
    let train_cfg = cfg.train.at_round(0);
    let deltas: Vec<ParamVector> = picked
        .iter()
        .map(|&n| {
            let mut rng = substream(cfg.seed, Stream::Train, 0, n as u64);
            local_train(sim.spec(), &w0, &sim.data().nodes[n].train, &train_cfg, &mut rng)
                .unwrap()
                .delta
        })
        .collect();
    let expected = w0.add(&ParamVector::mean(&deltas).unwrap());
    assert_eq!(sim.model(), &expected);
    assert_eq!(rec.selected, picked.to_vec());
    for (n, d) in picked.iter().zip(&deltas) {
        let g = rec.grad_norms.iter().find(|(m, _)| m == n).unwrap().1;
        assert_eq!(g, d.norm() / 0.05);
    }
}

fn identical_nodes(k: usize) -> FederatedData {
    let data: Vec<LabeledExample> = (0..10)
        .map(|i| LabeledExample {
            features: vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 1.0],
            label: i % 3,
        })
        .collect();
    let nodes = (0..k)
        .map(|id| NodeDataset {
            node_id: id,
            train: data.clone(),
            test: data.clone(),
            is_iid: true,
        })
        .collect();
    FederatedData::from_nodes(nodes, None).unwrap()
}

#[test]
fn nodes_with_identical_data_are_never_labeled() {
    let mut cfg = small(SelectionPolicy::FedPns, AggregationMode::Optimal);
    cfg.data.num_nodes = 5;
    cfg.selection.fraction = 0.6;
    cfg.selection.macro_size = 5;
    // A full batch makes every update identical.
    cfg.train.batch_size = 10;
    let mut sim = Simulation::with_data(cfg, identical_nodes(5)).unwrap();
    for r in sim.run_to_end().unwrap() {
        assert!(r.labeled.is_empty(), "round {} labeled {:?}", r.round, r.labeled);
    }
    assert!(sim.stats().probabilities.iter().all(|&p| p == 0.2));
}

#[test]
fn global_train_loss_is_pooled_loss_for_equal_sizes() {
    let cfg = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    let sim = Simulation::new(cfg).unwrap();
    let nodes = &sim.data().nodes;
    let pooled: Vec<LabeledExample> = nodes.iter().flat_map(|n| n.train.clone()).collect();
    let a = global_train_loss(sim.spec(), sim.model(), nodes).unwrap();
    let b = mean_loss(sim.spec(), sim.model(), &pooled).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn divergence_is_recorded_only_when_enabled() {
    let mut cfg = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    let off = run_experiment(&cfg).unwrap();
    assert!(off.iter().all(|r| r.divergence.is_none()));
    cfg.diagnostics.divergence = true;
    let on = run_experiment(&cfg).unwrap();
    assert!(on.iter().all(|r| r.divergence.is_some_and(|d| d.is_finite() && d >= 0.0)));
    // Training every node must not disturb the selections.
    for (a, b) in off.iter().zip(&on) {
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.train_loss, b.train_loss);
    }
}

#[test]
fn weight_divergence_edge_cases() {
    let a = ParamVector::from_vec(vec![1.0, 2.0]);
    assert_eq!(weight_divergence(&a, &a).unwrap(), 0.0);
    let b = ParamVector::from_vec(vec![4.0, 6.0]);
    assert_eq!(weight_divergence(&a, &b).unwrap(), 5.0);
    assert!(weight_divergence(&a, &ParamVector::zeros(3)).is_err());
}

#[test]
fn resume_from_checkpoint_continues_identically() {
    let mut cfg = small(SelectionPolicy::FedPns, AggregationMode::Optimal);
    cfg.diagnostics.divergence = true;
    let full = run_experiment(&cfg).unwrap();

    let mut sim = Simulation::new(cfg.clone()).unwrap();
    for _ in 0..3 {
        sim.run_round().unwrap();
    }
    let bytes = sim.checkpoint().encode();
    let mut resumed = Simulation::resume(cfg.clone(), Checkpoint::decode(&bytes).unwrap()).unwrap();
    let tail = resumed.run_to_end().unwrap();
    assert_eq!(tail, full[3..].to_vec());

    let mut other = cfg;
    other.seed += 1;
    assert!(Simulation::resume(other, Checkpoint::decode(&bytes).unwrap()).is_err());
}

#[test]
fn skew_population_has_expected_shape() {
    let mut cfg = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    cfg.data.source = DataSource::SkewSynthetic;
    cfg.data.iid_fraction = 0.5;
    cfg.data.labels_per_node = 1;
    cfg.data.pool_size = 2000;
    cfg.data.test_size = 100;
    let data = FederatedData::build(&cfg).unwrap();
    assert_eq!(data.nodes.len(), 10);
    assert_eq!(data.test_set.len(), 100);
    for node in &data.nodes {
        assert_eq!(node.len(), 40);
        let mut labels: Vec<usize> = node.train.iter().chain(&node.test).map(|e| e.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if node.is_iid {
            assert!(labels.len() > 1);
        } else {
            assert_eq!(labels.len(), 1);
        }
    }
    assert_eq!(data.nodes.iter().filter(|n| n.is_iid).count(), 5);
}

#[test]
fn identical_replicas_have_zero_divergence() {
    let mut cfg = small(SelectionPolicy::Random, AggregationMode::FedAvg);
    cfg.data.num_nodes = 4;
    cfg.selection.fraction = 0.5;
    cfg.selection.macro_size = 4;
    cfg.diagnostics.divergence = true;
    // Full batches on both sides make local and centralized SGD coincide.
    cfg.train.batch_size = 40;
    let mut sim = Simulation::with_data(cfg, identical_nodes(4)).unwrap();
    for r in sim.run_to_end().unwrap() {
        let d = r.divergence.unwrap();
        assert!(d < 1e-12, "round {}: {d:e}", r.round);
    }
}
