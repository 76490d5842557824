use pgfed_core::datagen::{dirichlet_partition, standardize_clients, synth_blobs, ClientDataset};
use pgfed_core::fedcore::{Checkpoint, Federation, FederationConfig};
use pgfed_core::metrics::ledger_charge;
use pgfed_core::models::ModelSpec;
use pgfed_core::{AlgorithmTag, AlphaGradient, PartitionSpec};

fn clients(n: usize, seed: u64) -> Vec<ClientDataset> {
    let data = synth_blobs(4, 5, 60 * n, 2.0, seed).unwrap();
    let spec = PartitionSpec {
        n_clients: n,
        dirichlet_alpha: 0.3,
        test_fraction: 0.25,
        seed,
    };
    let mut c = dirichlet_partition(&data, &spec).unwrap();
    standardize_clients(&mut c).unwrap();
    c
}

fn config(n: usize, algorithm: AlgorithmTag, seed: u64) -> FederationConfig {
    let mut cfg = FederationConfig::new(n, algorithm, seed);
    cfg.sample_rate = 0.5;
    cfg.local_epochs = 2;
    cfg.batch_size = 8;
    cfg.eta1 = 0.05;
    cfg.eta2 = 0.05;
    cfg.mu = 0.1;
    cfg
}

fn federation(n: usize, algorithm: AlgorithmTag, seed: u64) -> Federation {
    Federation::new(config(n, algorithm, seed), ModelSpec::softmax_linear(5, 4), clients(n, seed)).unwrap()
}

#[test]
fn alpha_starts_at_one_over_m() {
    let fed = federation(8, AlgorithmTag::Pgfed, 1);
    let m = fed.config().clients_per_round() as f64;
    for row in &fed.server().alpha {
        assert!(row.iter().all(|&a| a == 1.0 / m));
    }
    for c in fed.clients() {
        assert!(c.alpha_row.iter().all(|&a| a == 1.0 / m));
    }
}

#[test]
fn first_round_leaves_alpha_untouched() {
    for alg in [AlgorithmTag::Pgfed, AlgorithmTag::Pgfedmo, AlgorithmTag::PgfedCe] {
        let mut fed = federation(8, alg, 2);
        let before = fed.server().alpha.clone();
        let out = fed.run_round().unwrap();
        assert_eq!(out.alpha_updates, 0);
        assert_eq!(fed.server().alpha, before);
        assert_eq!(fed.server().prev_grads.len(), 4);
    }
}

#[test]
fn key_sets_follow_the_selection() {
    let mut fed = federation(8, AlgorithmTag::Pgfedmo, 3);
    for _ in 0..6 {
        let out = fed.run_round().unwrap();
        let s = fed.server();
        let keys: Vec<usize> = s.prev_grads.keys().copied().collect();
        assert_eq!(keys, out.selected);
        assert_eq!(s.prev_g1.keys().copied().collect::<Vec<_>>(), out.selected);
        assert_eq!(s.prev_selected, out.selected);
        for (i, c) in fed.clients().iter().enumerate() {
            assert_eq!(c.alpha_row, s.alpha[i]);
            assert!(c.alpha_row.iter().all(|&a| a >= 0.0));
        }
    }
}

#[test]
fn unselected_clients_are_frozen() {
    let mut fed = federation(8, AlgorithmTag::Pgfedmo, 4);
    let mut last = fed.clients().to_vec();
    for _ in 0..8 {
        let out = fed.run_round().unwrap();
        for (i, c) in fed.clients().iter().enumerate() {
            if !out.selected.contains(&i) {
                assert_eq!(c.theta, last[i].theta);
                assert_eq!(c.aux_grad, last[i].aux_grad);
                assert_eq!(c.alpha_row, last[i].alpha_row);
            }
        }
        last = fed.clients().to_vec();
    }
}

#[test]
fn zero_mu_collapses_to_fedavg() {
    for alg in [AlgorithmTag::Pgfed, AlgorithmTag::Pgfedmo, AlgorithmTag::PgfedCe] {
        let mut cfg = config(8, alg, 5);
        cfg.mu = 0.0;
        let mut pg = Federation::new(cfg.clone(), ModelSpec::softmax_linear(5, 4), clients(8, 5)).unwrap();
        cfg.algorithm = AlgorithmTag::Fedavg;
        let mut fa = Federation::new(cfg, ModelSpec::softmax_linear(5, 4), clients(8, 5)).unwrap();
        for _ in 0..6 {
            pg.run_round().unwrap();
            fa.run_round().unwrap();
            for (a, b) in pg.server().theta_glob.as_slice().iter().zip(fa.server().theta_glob.as_slice()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(
            pg.evaluate().unwrap().per_client_test_acc,
            fa.evaluate().unwrap().per_client_test_acc
        );
    }
}

#[test]
fn identical_clients_end_identical() {
    let data = synth_blobs(3, 4, 40, 2.0, 9).unwrap();
    let base = dirichlet_partition(
        &data,
        &PartitionSpec {
            n_clients: 2,
            dirichlet_alpha: 1.0,
            test_fraction: 0.25,
            seed: 1,
        },
    )
    .unwrap()
    .remove(0);
    let copies: Vec<ClientDataset> = (0..4)
        .map(|i| ClientDataset {
            client_id: i,
            ..base.clone()
        })
        .collect();
    let mut cfg = config(4, AlgorithmTag::Pgfed, 6);
    cfg.sample_rate = 1.0;
    cfg.batch_size = 1000;
    let mut fed = Federation::new(cfg, ModelSpec::softmax_linear(4, 3), copies).unwrap();
    fed.run_round().unwrap();
    fed.run_round().unwrap();
    let first = &fed.clients()[0].theta;
    for c in fed.clients() {
        for (a, b) in c.theta.as_slice().iter().zip(first.as_slice()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn engine_traffic_matches_ledger_for_every_algorithm() {
    for alg in AlgorithmTag::ALL {
        let mut fed = federation(8, alg, 7);
        let m = fed.config().clients_per_round();
        let mut sum = pgfed_core::CommLedger::default();
        for _ in 0..4 {
            let out = fed.run_round().unwrap();
            assert_eq!(out.traffic, ledger_charge(alg, out.round, m).unwrap(), "{alg} round {}", out.round);
            sum += out.traffic;
        }
        assert_eq!(sum, fed.traffic());
    }
}

#[test]
fn runs_are_deterministic() {
    for alg in [AlgorithmTag::PgfedCe, AlgorithmTag::FedavgFinetune, AlgorithmTag::Local] {
        let run = || {
            let mut fed = federation(6, alg, 8);
            (0..4)
                .map(|_| {
                    fed.run_round().unwrap();
                    fed.evaluate().unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    for alg in [AlgorithmTag::Pgfedmo, AlgorithmTag::Fedavg] {
        let mut straight = federation(8, alg, 9);
        for _ in 0..6 {
            straight.run_round().unwrap();
        }

        let mut first = federation(8, alg, 9);
        for _ in 0..3 {
            first.run_round().unwrap();
        }
        let json = serde_json::to_string_pretty(&first.checkpoint()).unwrap();
        let cp: Checkpoint = serde_json::from_str(&json).unwrap();
        let mut resumed = Federation::restore(config(8, alg, 9), ModelSpec::softmax_linear(5, 4), clients(8, 9), &cp).unwrap();
        for _ in 0..3 {
            resumed.run_round().unwrap();
        }
        assert_eq!(resumed.server(), straight.server());
        assert_eq!(resumed.clients(), straight.clients());
        assert_eq!(resumed.traffic(), straight.traffic());
    }
}

#[test]
fn checkpoint_rejects_mismatched_config() {
    let fed = federation(8, AlgorithmTag::Pgfed, 10);
    let cp = fed.checkpoint();
    let err = Federation::restore(config(8, AlgorithmTag::Fedavg, 10), ModelSpec::softmax_linear(5, 4), clients(8, 10), &cp);
    assert!(err.is_err());
}

#[test]
fn exact_alpha_gradient_never_raises_alpha() {
    let mut fed = federation(8, AlgorithmTag::Pgfed, 11).with_alpha_gradient(AlphaGradient::Exact);
    let mut updates = 0;
    for _ in 0..5 {
        let out = fed.run_round().unwrap();
        assert_eq!(out.alpha_increases, 0);
        updates += out.alpha_updates;
    }
    assert!(updates > 0);
}

#[test]
fn local_training_moves_nothing_over_the_wire() {
    let mut fed = federation(6, AlgorithmTag::Local, 12);
    let glob = fed.server().theta_glob.clone();
    for _ in 0..3 {
        fed.run_round().unwrap();
    }
    assert_eq!(fed.server().theta_glob, glob);
    assert_eq!(fed.traffic(), Default::default());
    let rec = fed.evaluate().unwrap();
    let recomputed = rec.per_client_test_acc.values().sum::<f64>() / rec.per_client_test_acc.len() as f64;
    assert!((rec.mean_personalized_acc - recomputed).abs() < 1e-12);
}

#[test]
fn client_errors_name_the_client() {
    let mut cfg = config(4, AlgorithmTag::Pgfed, 13);
    cfg.eta1 = f64::MAX;
    let mut fed = Federation::new(cfg, ModelSpec::softmax_linear(5, 4), clients(4, 13)).unwrap();
    let err = fed.run_round().unwrap_err();
    assert!(matches!(err, pgfed_core::Error::ClientUpdate { .. }), "{err}");
}

#[test]
fn aggregation_weights_are_renormalized_over_the_selection() {
    let mut fed = federation(8, AlgorithmTag::Fedavg, 14);
    let out = fed.run_round().unwrap();
    let sizes: Vec<usize> = out.selected.iter().map(|&i| fed.clients()[i].data.n_train()).collect();
    let w = pgfed_core::fedcore::aggregation_weights(&sizes).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let members: Vec<_> = out
        .selected
        .iter()
        .zip(&sizes)
        .map(|(&i, &n)| (&fed.clients()[i].theta, n))
        .collect();
    let expected = pgfed_core::fedcore::aggregate_global(&members).unwrap();
    assert_eq!(fed.server().theta_glob, expected);
}
