//! Plottable series for the desk-scale ablations.

use std::path::{Path, PathBuf};

use crate::data::{synthetic_classification, PartitionPolicy};
use crate::error::{FerretError, Result};
use crate::federation::{AllocationPolicy, FedConfig, Federation, Method, RoundRecord, SeedPolicy};
use crate::models::{ModelKind, ModelSpec, Optimizer};
use crate::rand_basis::RandomSeed;

use super::verify::{drift, reconstruction_vs_k, ConvergenceSetup};

pub const FIGURES: [&str; 4] = ["fig6", "fig7a", "fig4-analogue", "rounds-curve"];

/// Writes `<out_dir>/<figure>.csv` and returns its path.
pub fn repro(figure: &str, out_dir: &Path, seed: RandomSeed) -> Result<PathBuf> {
    let (header, rows) = match figure {
        "fig6" => fig6(seed)?,
        "fig7a" => fig7a(seed)?,
        "fig4-analogue" => fig4_analogue(seed)?,
        "rounds-curve" => rounds_curve(seed)?,
        other => {
            return Err(FerretError::Config(format!(
                "unknown figure {other:?}; expected one of {}",
                FIGURES.join(", ")
            )))
        }
    };
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("{figure}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(&header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(path)
}

type Series = (Vec<String>, Vec<Vec<f64>>);

/// Cosine similarity against `K` at `d = 10⁴` for Ferret and for ZO at
/// three step sizes.
fn fig6(seed: RandomSeed) -> Result<Series> {
    let eps = [0.01, 0.1, 1.0];
    let rows = reconstruction_vs_k(10_000, &[16, 32, 64, 128, 256, 512, 1024], &eps, 20, seed)?;
    let mut header = vec!["k".to_string(), "ferret".to_string()];
    header.extend(eps.iter().map(|e| format!("zo_eps_{e}")));
    let data = rows
        .into_iter()
        .map(|r| {
            let mut v = vec![r.x as f64, r.ferret];
            v.extend(r.zo);
            v
        })
        .collect();
    Ok((header, data))
}

/// Cosine similarity of a `T`-step update for `T = 1..=50`.
fn fig7a(seed: RandomSeed) -> Result<Series> {
    let rows = drift(50_000, 500, 50, 0.1, 0.1, seed)?;
    let data = rows
        .into_iter()
        .map(|r| vec![r.x as f64, r.ferret, r.zo[0]])
        .collect();
    Ok((vec!["t".into(), "ferret".into(), "zo".into()], data))
}

/// Ferret on a small MLP classifier with uniform and norm-sqrt budgets.
fn fig4_analogue(seed: RandomSeed) -> Result<Series> {
    let model = ModelSpec {
        kind: ModelKind::Mlp,
        input_dim: 16,
        hidden_dim: 32,
        output_dim: 4,
        init_seed: seed,
    };
    let data = synthetic_classification(2400, 16, 4, 1.0, seed);
    let (train, test) = data.split_tail(400)?;
    let run = |allocation| -> Result<Vec<RoundRecord>> {
        let cfg = FedConfig {
            method: Method::Ferret,
            num_clients: 10,
            rounds: 30,
            local_iters: 10,
            total_bases: 64,
            local_lr: 0.1,
            server_lr: 1.0,
            participation: 1.0,
            partition: PartitionPolicy::LabelSkew { alpha: 0.5 },
            allocation,
            seed_policy: SeedPolicy::PerRound,
            root_seed: seed,
            batch_size: 16,
            accum: 1,
            optimizer: Optimizer::Sgd,
            max_block_dim: None,
            exact_projection: false,
            zo_epsilon: 0.1,
            zo_lr: None,
        };
        Federation::new(cfg, model, &train, test.clone())?.run()
    };
    let uniform = run(AllocationPolicy::Uniform)?;
    let tuned = run(AllocationPolicy::NormSqrt)?;
    let data = uniform
        .iter()
        .zip(&tuned)
        .map(|(u, t)| vec![u.round as f64, u.loss, t.loss, u.metric, t.metric])
        .collect();
    Ok((
        ["round", "loss_uniform", "loss_norm_sqrt", "metric_uniform", "metric_norm_sqrt"]
            .map(String::from)
            .to_vec(),
        data,
    ))
}

/// Held-out loss per round of FedAvg, Ferret and FedKSeed on the
/// homogeneous regression task.
fn rounds_curve(seed: RandomSeed) -> Result<Series> {
    let setup = ConvergenceSetup {
        seed,
        ..ConvergenceSetup::default()
    };
    let cols = [Method::Fedavg, Method::Ferret, Method::Fedkseed]
        .map(|m| setup.losses(m))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let data = (0..setup.rounds)
        .map(|r| {
            let mut v = vec![(r + 1) as f64];
            v.extend(cols.iter().map(|c| c[r]));
            v
        })
        .collect();
    Ok((["round", "fedavg", "ferret", "fedkseed"].map(String::from).to_vec(), data))
}
