use ferret_core::data::{synthetic_classification, synthetic_regression, Dataset, PartitionPolicy};
use ferret_core::error::FerretError;
use ferret_core::federation::{
    AllocationPolicy, FedConfig, Federation, Method, SeedPolicy,
};
use ferret_core::models::{Example, ModelKind, ModelSpec, Optimizer};
use ferret_core::net::run_loopback;
use ferret_core::rand_basis::RandomSeed;
use ferret_core::subspace::{basis_matrix, reconstruct};
use ferret_core::wire::{decode_body, encode_body, Message, Payload};

fn linear(input_dim: usize) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::LinearRegression,
        input_dim,
        hidden_dim: 0,
        output_dim: 1,
        init_seed: RandomSeed(3),
    }
}

fn config(method: Method, clients: usize, total_bases: usize) -> FedConfig {
    FedConfig {
        method,
        num_clients: clients,
        rounds: 3,
        local_iters: 1,
        total_bases,
        local_lr: 0.1,
        server_lr: 1.0,
        participation: 1.0,
        partition: PartitionPolicy::Iid,
        allocation: AllocationPolicy::Uniform,
        seed_policy: SeedPolicy::PerRound,
        root_seed: RandomSeed(21),
        batch_size: 0,
        accum: 1,
        optimizer: Optimizer::Sgd,
        max_block_dim: None,
        exact_projection: false,
        zo_epsilon: 0.01,
        zo_lr: None,
    }
}

fn regression(n: usize, input_dim: usize) -> (Dataset, Dataset) {
    synthetic_regression(n + 20, input_dim, 0.1, RandomSeed(4))
        .split_tail(20)
        .unwrap()
}

/// Full-batch gradient of `mean ½(wᵀx + b − y)²`, written out by hand.
fn hand_grad(w: &[f64], data: &[Example]) -> Vec<f64> {
    let i = w.len() - 1;
    let mut g = vec![0.0; w.len()];
    for ex in data {
        let pred: f64 = w[i] + (0..i).map(|j| w[j] * ex.features[j]).sum::<f64>();
        let e = pred - ex.target;
        for j in 0..i {
            g[j] += e * ex.features[j] / data.len() as f64;
        }
        g[i] += e / data.len() as f64;
    }
    g
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {k}: {x} vs {y}");
    }
}

#[test]
fn two_client_fedavg_matches_hand_arithmetic() {
    let (train, test) = regression(40, 7);
    let mut cfg = config(Method::Fedavg, 2, 4);
    cfg.server_lr = 0.7;
    let mut fed = Federation::new(cfg, linear(7), &train, test).unwrap();
    assert_eq!(fed.dim(), 8);
    let w0 = fed.weights().to_vec();
    let deltas: Vec<Vec<f64>> = fed
        .clients()
        .iter()
        .map(|c| {
            hand_grad(&w0, &c.examples)
                .iter()
                .map(|g| ((0.1 * g) as f32) as f64)
                .collect()
        })
        .collect();
    fed.step().unwrap();
    let want: Vec<f64> = (0..8)
        .map(|k| w0[k] - 0.7 * (deltas[0][k] + deltas[1][k]) / 2.0)
        .collect();
    close(fed.weights(), &want, 1e-6);
}

#[test]
fn two_client_ferret_matches_explicit_bases() {
    let (train, test) = regression(40, 7);
    let cfg = config(Method::Ferret, 2, 5);
    let mut fed = Federation::new(cfg, linear(7), &train, test).unwrap();
    let w0 = fed.weights().to_vec();
    let partition = fed.partition().clone();
    let mut sum = [0.0; 8];
    for c in 0..2 {
        let delta: Vec<f64> = hand_grad(&w0, &fed.clients()[c].examples)
            .iter()
            .map(|g| 0.1 * g)
            .collect();
        let seed = fed.client_seed(c, 1);
        for l in 0..partition.num_blocks() {
            let r = partition.block_range(l);
            let v = basis_matrix(&partition, seed, l);
            let rho = partition.stats()[l].rho;
            let k = partition.block_budgets()[l] as f64;
            let d = nalgebra::DVector::from_column_slice(&delta[r.clone()]);
            let coords = v.transpose() * d / (rho * k);
            let rec = &v * coords;
            for (s, x) in sum[r].iter_mut().zip(rec.iter()) {
                *s += x;
            }
        }
    }
    fed.step().unwrap();
    let want: Vec<f64> = (0..8).map(|k| w0[k] - sum[k] / 2.0).collect();
    close(fed.weights(), &want, 1e-5);
}

#[test]
fn full_budget_exact_projection_tracks_fedavg() {
    let (train, test) = regression(60, 11);
    let mut a = config(Method::Ferret, 3, 12);
    a.exact_projection = true;
    a.local_iters = 4;
    let mut b = a.clone();
    b.method = Method::Fedavg;
    let mut ferret = Federation::new(a, linear(11), &train, test.clone()).unwrap();
    let mut fedavg = Federation::new(b, linear(11), &train, test).unwrap();
    assert_eq!(ferret.partition().block_budgets(), ferret.partition().block_dims());
    ferret.run().unwrap();
    fedavg.run().unwrap();
    close(ferret.weights(), fedavg.weights(), 1e-5);
}

#[test]
fn server_step_scales_the_update() {
    let (train, test) = regression(40, 5);
    let run = |server_lr: f64| {
        let mut cfg = config(Method::Ferret, 4, 4);
        cfg.server_lr = server_lr;
        let mut fed = Federation::new(cfg, linear(5), &train, test.clone()).unwrap();
        let w0 = fed.weights().to_vec();
        fed.step().unwrap();
        w0.iter().zip(fed.weights()).map(|(a, b)| a - b).collect::<Vec<_>>()
    };
    let one = run(1.0);
    let two: Vec<f64> = run(2.0).iter().map(|v| v / 2.0).collect();
    close(&two, &one, 1e-12);
}

/// Every client applies the previous round's aggregate to its own copy at
/// the start of the next round, as in the deferred form of the protocol.
#[test]
fn deferred_client_side_aggregation_is_identical() {
    let data = synthetic_classification(300, 5, 3, 1.5, RandomSeed(8));
    let (train, test) = data.split_tail(50).unwrap();
    let model = ModelSpec {
        kind: ModelKind::Mlp,
        input_dim: 5,
        hidden_dim: 6,
        output_dim: 3,
        init_seed: RandomSeed(1),
    };
    let mut cfg = config(Method::Ferret, 4, 16);
    cfg.local_iters = 3;
    cfg.batch_size = 8;
    let mut server = Federation::new(cfg, model, &train, test).unwrap();
    let reference = server.clone();
    server.run().unwrap();

    let n = reference.clients().len();
    let mut local = vec![reference.weights().to_vec(); n];
    let mut pending: Option<Vec<Vec<f64>>> = None;
    for round in 1..=3 {
        if let Some(updates) = pending.take() {
            for w in local.iter_mut() {
                let mut sum = vec![0.0; w.len()];
                for u in &updates {
                    for (s, v) in sum.iter_mut().zip(u) {
                        *s += v;
                    }
                }
                for (x, s) in w.iter_mut().zip(&sum) {
                    *x -= 1.0 / n as f64 * s;
                }
            }
        }
        let updates = (0..n)
            .map(|c| {
                let msg = reference.client_update(&local[c], round, c).unwrap();
                reference.decode_update(&local[c], &msg).unwrap()
            })
            .collect();
        pending = Some(updates);
    }
    let updates = pending.unwrap();
    let mut w = local[0].clone();
    let mut sum = vec![0.0; w.len()];
    for u in &updates {
        for (s, v) in sum.iter_mut().zip(u) {
            *s += v;
        }
    }
    for (x, s) in w.iter_mut().zip(&sum) {
        *x -= 1.0 / n as f64 * s;
    }
    assert_eq!(w, server.weights());
}

#[test]
fn server_regenerates_client_reconstruction_through_the_wire() {
    let (train, test) = regression(80, 9);
    let mut cfg = config(Method::Ferret, 3, 6);
    cfg.max_block_dim = Some(4);
    let fed = Federation::new(cfg, linear(9), &train, test).unwrap();
    assert!(fed.partition().num_blocks() >= 3);
    let msg = fed.client_update(fed.weights(), 1, 2).unwrap();
    let Payload::Projected(proj) = &msg.payload else {
        panic!("ferret must upload a projection");
    };
    let client_side = reconstruct(proj, fed.partition()).unwrap();
    let bytes = encode_body(&Message::ClientUpdate(msg.clone()));
    let Message::ClientUpdate(received) = decode_body(&bytes).unwrap() else {
        panic!("wrong message kind");
    };
    assert_eq!(received, msg);
    assert_eq!(fed.decode_update(fed.weights(), &received).unwrap(), client_side);
}

#[test]
fn arrival_order_does_not_matter() {
    let (train, test) = regression(80, 6);
    let fed = Federation::new(config(Method::Ferret, 5, 5), linear(6), &train, test).unwrap();
    let sampled = fed.sample_clients(1);
    let msgs: Vec<_> = sampled
        .iter()
        .map(|&c| fed.client_update(fed.weights(), 1, c).unwrap())
        .collect();
    let mut a = fed.clone();
    let mut b = fed.clone();
    let ra = a.apply_round(1, &sampled, msgs.clone(), 0.0).unwrap();
    let mut reversed = msgs;
    reversed.reverse();
    let rb = b.apply_round(1, &sampled, reversed, 0.0).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert_eq!(ra, rb);
}

#[test]
fn socket_runner_reproduces_in_process_records() {
    let data = synthetic_classification(400, 4, 3, 2.0, RandomSeed(5));
    let (train, test) = data.split_tail(60).unwrap();
    let model = ModelSpec {
        kind: ModelKind::LogisticRegression,
        input_dim: 4,
        hidden_dim: 0,
        output_dim: 3,
        init_seed: RandomSeed(2),
    };
    for method in [Method::Ferret, Method::Fedavg, Method::Fedzo, Method::Fedkseed] {
        let mut cfg = config(method, 5, 6);
        cfg.participation = 0.6;
        cfg.local_iters = 2;
        cfg.batch_size = 16;
        cfg.partition = PartitionPolicy::LabelSkew { alpha: 1.0 };
        let mut a = Federation::new(cfg, model, &train, test.clone()).unwrap();
        let mut b = a.clone();
        let local = a.run().unwrap();
        let remote = run_loopback(&mut b, 2).unwrap();
        assert_eq!(local, remote, "{}", method.name());
        assert_eq!(a.weights(), b.weights());
    }
}

#[test]
fn socket_runner_reports_divergence() {
    let (train, test) = regression(40, 5);
    let mut cfg = config(Method::Fedavg, 3, 4);
    cfg.local_lr = 1e9;
    cfg.local_iters = 40;
    let mut fed = Federation::new(cfg, linear(5), &train, test).unwrap();
    let err = run_loopback(&mut fed, 2).unwrap_err();
    assert!(err.is_divergence(), "{err}");
    assert!(matches!(err, FerretError::Round { round: 1, .. }));
}

#[test]
fn static_seeds_and_partial_participation_are_deterministic() {
    let (train, test) = regression(120, 6);
    let mut cfg = config(Method::Ferret, 10, 5);
    cfg.seed_policy = SeedPolicy::Static;
    cfg.participation = 0.25;
    cfg.rounds = 5;
    let a = Federation::new(cfg.clone(), linear(6), &train, test.clone()).unwrap().run().unwrap();
    let b = Federation::new(cfg, linear(6), &train, test).unwrap().run().unwrap();
    assert_eq!(a, b);
    assert_eq!(a[4].cumulative_upload, 5 * 3 * 6);
}

#[test]
fn training_reduces_loss_for_every_method() {
    let (train, test) = regression(200, 8);
    for method in [Method::Ferret, Method::Fedavg, Method::Fedzo, Method::Fedkseed] {
        let mut cfg = config(method, 4, 8);
        cfg.local_iters = 5;
        cfg.rounds = 8;
        if method == Method::Fedkseed || method == Method::Fedzo {
            cfg.zo_lr = Some(1.0);
        }
        let mut fed = Federation::new(cfg, linear(8), &train, test.clone()).unwrap();
        let (before, _) = fed.evaluate().unwrap();
        let recs = fed.run().unwrap();
        let after = recs.last().unwrap().loss;
        assert!(after < 0.5 * before, "{}: {before} -> {after}", method.name());
    }
}
