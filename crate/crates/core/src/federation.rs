//! Round engine for Ferret and the FedAvg, FedZO and FedKSeed baselines.
//!
//! A round is split into a pure per-client part ([`Federation::client_update`])
//! and an ordered server reduction ([`Federation::apply_round`]), so the same
//! engine drives both the in-process simulation and the socket runner in
//! [`crate::net`].

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition_data, ClientDataset, Dataset, PartitionPolicy};
use crate::error::{FerretError, Result};
use crate::models::{local_sgd, sample_batch, Example, LocalConfig, ModelSpec, Optimizer};
use crate::rand_basis::{derive_subseed, stream_index, RandomSeed, TruncGaussStats};
use crate::subspace::{
    allocate_budgets, exact_project, project, reconstruct, uniform_budgets, BlockPartition,
};
use crate::wire::{ClientUpdateMsg, Payload};
use crate::zoo::{fedkseed_local_step, replay_scalar_grads, zo_reconstruct, zo_scalar_grads, ZoConfig};

/// Lane tags passed as the `block` field of `derive_subseed(root, client,
/// round, lane, 0)` for the engine's own randomness.
pub const LANE_PROJECTION: u64 = 0;
pub const LANE_BATCHES: u64 = 1;
pub const LANE_SAMPLING: u64 = 2;
pub const LANE_PARTITION: u64 = 3;
pub const LANE_CALIBRATION: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ferret,
    Fedavg,
    Fedzo,
    Fedkseed,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ferret => "ferret",
            Method::Fedavg => "fedavg",
            Method::Fedzo => "fedzo",
            Method::Fedkseed => "fedkseed",
        }
    }

    /// Whether uploads are a seed plus `K` numbers rather than a `d`-vector.
    pub fn is_seed_based(self) -> bool {
        matches!(self, Method::Ferret | Method::Fedkseed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationPolicy {
    #[default]
    Uniform,
    /// `K_l ∝ √(‖Δ_l‖/ρ_l)` from a calibration round.
    NormSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Every client draws a new projection seed each round.
    #[default]
    PerRound,
    /// Every client keeps one projection seed for the whole run.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub method: Method,
    pub num_clients: usize,
    pub rounds: usize,
    pub local_iters: usize,
    /// Basis budget `K` (perturbations per round for the ZO methods).
    pub total_bases: usize,
    pub local_lr: f64,
    #[serde(default = "one")]
    pub server_lr: f64,
    #[serde(default = "one")]
    pub participation: f64,
    #[serde(default)]
    pub partition: PartitionPolicy,
    #[serde(default)]
    pub allocation: AllocationPolicy,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
    pub root_seed: RandomSeed,
    /// Examples per micro-batch; 0 uses the whole client dataset.
    #[serde(default = "one_usize")]
    pub batch_size: usize,
    #[serde(default = "one_usize")]
    pub accum: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Split parameter groups larger than this into several blocks.
    #[serde(default)]
    pub max_block_dim: Option<usize>,
    /// Use least-squares coordinates instead of the streaming projection.
    #[serde(default)]
    pub exact_projection: bool,
    #[serde(default = "default_zo_epsilon")]
    pub zo_epsilon: f64,
    /// Step size of the ZO baselines; defaults to `local_lr / ρ(d)`.
    #[serde(default)]
    pub zo_lr: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_zo_epsilon() -> f64 {
    0.1
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FerretError::Config(m));
        if self.num_clients == 0 {
            return bad("num_clients must be >= 1".into());
        }
        if self.local_iters == 0 {
            return bad("local_iters must be >= 1".into());
        }
        if self.total_bases == 0 {
            return bad("total_bases must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        if self.accum == 0 {
            return bad("accum must be >= 1".into());
        }
        if !self.local_lr.is_finite() || !self.server_lr.is_finite() {
            return bad("learning rates must be finite".into());
        }
        if !(self.zo_epsilon > 0.0) {
            return bad("zo_epsilon must be > 0".into());
        }
        Ok(())
    }

    pub fn sampled_per_round(&self) -> usize {
        ((self.participation * self.num_clients as f64).ceil() as usize).clamp(1, self.num_clients)
    }

    fn local(&self) -> LocalConfig {
        LocalConfig {
            iters: self.local_iters,
            lr: self.local_lr,
            batch_size: self.batch_size,
            accum: self.accum,
            optimizer: self.optimizer,
        }
    }
}

/// Per-round metrics. Cumulative counters are in transmitted numbers (a
/// seed counts as one) and mini-batch model evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub loss: f64,
    pub metric: f64,
    pub cumulative_upload: u64,
    pub cumulative_grad_evals: u64,
    pub local_seconds: f64,
    pub aggregate_seconds: f64,
    pub cumulative_download: u64,
}

/// Analytic per-round communication of one method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub method: Method,
    pub dim: u64,
    pub total_bases: u64,
    pub sampled: u64,
}

impl CostModel {
    /// Numbers one client uploads per round: `K + 1` for the seed-based
    /// methods, `d` otherwise.
    pub fn upload_per_client(&self) -> u64 {
        if self.method.is_seed_based() {
            self.total_bases + 1
        } else {
            self.dim
        }
    }

    pub fn upload_per_round(&self) -> u64 {
        self.sampled * self.upload_per_client()
    }

    /// Every sampled client receives all (seed, coordinates) pairs of the
    /// round for the seed-based methods, or the new `d`-vector otherwise.
    pub fn download_per_round(&self) -> u64 {
        let broadcast = if self.method.is_seed_based() {
            self.upload_per_round()
        } else {
            self.dim
        };
        self.sampled * broadcast
    }

    /// Counter-only records for `rounds` rounds (losses are NaN).
    pub fn records(&self, rounds: usize) -> Vec<RoundRecord> {
        (1..=rounds)
            .map(|r| RoundRecord {
                round: r,
                loss: f64::NAN,
                metric: f64::NAN,
                cumulative_upload: r as u64 * self.upload_per_round(),
                cumulative_grad_evals: 0,
                local_seconds: 0.0,
                aggregate_seconds: 0.0,
                cumulative_download: r as u64 * self.download_per_round(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub method: Method,
    pub dim: u64,
    pub total_bases: u64,
    pub rounds: usize,
    pub total_upload: u64,
    pub total_download: u64,
    pub total_grad_evals: u64,
    pub upload_per_round: f64,
    pub download_per_round: f64,
    pub local_seconds: f64,
    pub aggregate_seconds: f64,
    pub final_loss: Option<f64>,
    pub final_metric: Option<f64>,
}

impl CostSummary {
    /// Per-round upload of `self` relative to `other`.
    pub fn upload_ratio(&self, other: &CostSummary) -> f64 {
        self.upload_per_round / other.upload_per_round
    }
}

/// Folds per-round records into totals and per-round means.
pub fn account_costs(method: Method, dim: u64, total_bases: u64, records: &[RoundRecord]) -> CostSummary {
    let last = records.last();
    let rounds = records.len();
    let per = |v: u64| if rounds == 0 { 0.0 } else { v as f64 / rounds as f64 };
    let total_upload = last.map_or(0, |r| r.cumulative_upload);
    let total_download = last.map_or(0, |r| r.cumulative_download);
    let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
    CostSummary {
        method,
        dim,
        total_bases,
        rounds,
        total_upload,
        total_download,
        total_grad_evals: last.map_or(0, |r| r.cumulative_grad_evals),
        upload_per_round: per(total_upload),
        download_per_round: per(total_download),
        local_seconds: records.iter().map(|r| r.local_seconds).fold(0.0, |a, b| a + b),
        aggregate_seconds: records.iter().map(|r| r.aggregate_seconds).fold(0.0, |a, b| a + b),
        final_loss: last.and_then(|r| finite(r.loss)),
        final_metric: last.and_then(|r| finite(r.metric)),
    }
}

/// Server and client state of one experiment.
#[derive(Debug, Clone)]
pub struct Federation {
    cfg: FedConfig,
    model: ModelSpec,
    clients: Vec<ClientDataset>,
    eval: Vec<Example>,
    partition: BlockPartition,
    zo_partition: BlockPartition,
    zo_lr: f64,
    weights: Vec<f64>,
    round: usize,
    cumulative_upload: u64,
    cumulative_download: u64,
    cumulative_grad_evals: u64,
    record_timings: bool,
}

impl Federation {
    /// Splits `train` over the clients and fixes the block layout and
    /// budgets for the whole run.
    pub fn new(cfg: FedConfig, model: ModelSpec, train: &Dataset, eval: Dataset) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if train.input_dim != model.input_dim || (!eval.is_empty() && eval.input_dim != model.input_dim) {
            return Err(FerretError::Config(format!(
                "data has {} features, model expects {}",
                train.input_dim, model.input_dim
            )));
        }
        let seed = derive_subseed(cfg.root_seed, 0, 0, LANE_PARTITION, 0);
        let clients = partition_data(&train.examples, cfg.num_clients, cfg.partition, seed)?;
        let w0 = model.init();
        let dims = w0.block_dims(cfg.max_block_dim);
        let d = w0.dim();
        let budgets = if cfg.method == Method::Ferret {
            uniform_budgets(&dims, cfg.total_bases)?
        } else {
            // Layout only; the ZO methods use the single-block partition.
            uniform_budgets(&dims, dims.len().max(cfg.total_bases.min(d)))?
        };
        let partition = BlockPartition::new(dims, budgets)?;
        let zo_partition = BlockPartition::single(d, cfg.total_bases.min(d))?;
        let zo_lr = match cfg.zo_lr {
            Some(lr) => lr,
            None => cfg.local_lr / TruncGaussStats::new(d as u64)?.rho,
        };
        let mut fed = Federation {
            cfg,
            model,
            clients,
            eval: eval.examples,
            partition,
            zo_partition,
            zo_lr,
            weights: w0.values,
            round: 0,
            cumulative_upload: 0,
            cumulative_download: 0,
            cumulative_grad_evals: 0,
            record_timings: false,
        };
        if fed.cfg.method == Method::Ferret && fed.cfg.allocation == AllocationPolicy::NormSqrt {
            fed.calibrate_budgets()?;
        }
        Ok(fed)
    }

    /// Sets budgets from the mean per-block norm of every client's first
    /// local update from `w₀`. Not counted in the round accounting.
    fn calibrate_budgets(&mut self) -> Result<()> {
        let local = self.cfg.local();
        let norms: Vec<Vec<f64>> = (0..self.clients.len())
            .into_par_iter()
            .map(|c| {
                let rng = derive_subseed(self.cfg.root_seed, c as u64, 0, LANE_CALIBRATION, 0);
                let out = local_sgd(&self.model, &self.weights, &self.clients[c].examples, &local, rng)?;
                self.partition.block_norms(&out.delta)
            })
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0; self.partition.num_blocks()];
        for n in &norms {
            for (m, v) in mean.iter_mut().zip(n) {
                *m += v / norms.len() as f64;
            }
        }
        let budgets = allocate_budgets(&mean, self.partition.stats(), self.cfg.total_bases)?;
        self.partition = self.partition.with_budgets(budgets)?;
        Ok(())
    }

    /// Record wall-clock timings (off by default so records are
    /// reproducible byte for byte).
    pub fn set_record_timings(&mut self, on: bool) {
        self.record_timings = on;
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn zo_partition(&self) -> &BlockPartition {
        &self.zo_partition
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, w: Vec<f64>) -> Result<()> {
        if w.len() != self.weights.len() {
            return Err(FerretError::Shape {
                expected: self.weights.len(),
                actual: w.len(),
            });
        }
        self.weights = w;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            method: self.cfg.method,
            dim: self.dim() as u64,
            total_bases: self.cfg.total_bases as u64,
            sampled: self.cfg.sampled_per_round() as u64,
        }
    }

    /// Projection seed of `client` in `round`.
    pub fn client_seed(&self, client: usize, round: usize) -> RandomSeed {
        let r = match self.cfg.seed_policy {
            SeedPolicy::PerRound => round as u64,
            SeedPolicy::Static => 0,
        };
        derive_subseed(self.cfg.root_seed, client as u64, r, LANE_PROJECTION, 0)
    }

    fn batch_seed(&self, client: usize, round: usize) -> RandomSeed {
        derive_subseed(self.cfg.root_seed, client as u64, round as u64, LANE_BATCHES, 0)
    }

    /// Ascending ids of the `⌈participation·N⌉` clients of `round`.
    pub fn sample_clients(&self, round: usize) -> Vec<usize> {
        let n = self.cfg.num_clients;
        let m = self.cfg.sampled_per_round();
        if m == n {
            return (0..n).collect();
        }
        let key = derive_subseed(self.cfg.root_seed, u64::MAX, round as u64, LANE_SAMPLING, 0).0;
        let mut ids: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + stream_index(key, i as u64, n - i);
            ids.swap(i, j);
        }
        let mut out = ids[..m].to_vec();
        out.sort_unstable();
        out
    }

    /// The upload of `client` in `round` starting from global weights `w`.
    /// Pure: depends only on its arguments and the fixed experiment state.
    pub fn client_update(&self, w: &[f64], round: usize, client: usize) -> Result<ClientUpdateMsg> {
        let data = &self
            .clients
            .get(client)
            .ok_or_else(|| FerretError::Config(format!("no client {client}")))?
            .examples;
        let rng = self.batch_seed(client, round);
        let seed = self.client_seed(client, round);
        let (payload, evals) = match self.cfg.method {
            Method::Ferret => {
                let out = local_sgd(&self.model, w, data, &self.cfg.local(), rng)?;
                let proj = if self.cfg.exact_projection {
                    exact_project(&out.delta, &self.partition, seed)?
                } else {
                    project(&out.delta, &self.partition, seed)?
                };
                (Payload::Projected(proj), out.grad_evals)
            }
            Method::Fedavg => {
                let out = local_sgd(&self.model, w, data, &self.cfg.local(), rng)?;
                let raw = out.delta.iter().map(|&v| v as f32).collect();
                (Payload::Raw(raw), out.grad_evals)
            }
            Method::Fedzo => self.fedzo_local(w, data, rng, seed)?,
            Method::Fedkseed => {
                let cfg = ZoConfig::new(self.cfg.zo_epsilon, self.cfg.total_bases, seed)?;
                let bs = self.cfg.batch_size;
                let model = &self.model;
                let (_, log) = fedkseed_local_step(
                    w,
                    |k, x| {
                        let batch = sample_batch(data, bs, rng, k, 0);
                        model.loss(x, &batch).unwrap_or(f64::NAN)
                    },
                    &self.zo_partition,
                    &cfg,
                    self.zo_lr,
                )
                .map_err(as_divergence)?;
                (Payload::Scalars(log), 2 * self.cfg.total_bases as u64)
            }
        };
        Ok(ClientUpdateMsg::new(client as u32, round as u32, evals, payload))
    }

    /// `T` steps of `w ← w - zo_lr · Vg/K`, fresh perturbations per step.
    fn fedzo_local(
        &self,
        w: &[f64],
        data: &[Example],
        rng: RandomSeed,
        seed: RandomSeed,
    ) -> Result<(Payload, u64)> {
        let mut cur = w.to_vec();
        let k = self.cfg.total_bases;
        for t in 0..self.cfg.local_iters {
            let batch = sample_batch(data, self.cfg.batch_size, rng, t, 0);
            let step_seed = derive_subseed(seed, 0, t as u64, 0, 0);
            let cfg = ZoConfig::new(self.cfg.zo_epsilon, k, step_seed)?;
            let grads = zo_scalar_grads(
                |x| self.model.loss(x, &batch).unwrap_or(f64::NAN),
                &cur,
                &self.zo_partition,
                &cfg,
            )
            .map_err(|_| FerretError::Diverged { iteration: t })?;
            let est = zo_reconstruct(&grads, &self.zo_partition)?;
            for (x, e) in cur.iter_mut().zip(&est) {
                *x -= self.zo_lr * e;
            }
        }
        let raw = w.iter().zip(&cur).map(|(a, b)| (a - b) as f32).collect();
        Ok((Payload::Raw(raw), ((k + 1) * self.cfg.local_iters) as u64))
    }

    /// The server's estimate of one client's `Δ` from its upload.
    pub fn decode_update(&self, w: &[f64], msg: &ClientUpdateMsg) -> Result<Vec<f64>> {
        match (&msg.payload, self.cfg.method) {
            (Payload::Projected(p), Method::Ferret) => reconstruct(p, &self.partition),
            (Payload::Raw(v), Method::Fedavg | Method::Fedzo) => {
                if v.len() != self.dim() {
                    return Err(FerretError::Shape {
                        expected: self.dim(),
                        actual: v.len(),
                    });
                }
                Ok(v.iter().map(|&x| x as f64).collect())
            }
            (Payload::Scalars(s), Method::Fedkseed) => {
                if s.values.len() != self.cfg.total_bases {
                    return Err(FerretError::Shape {
                        expected: self.cfg.total_bases,
                        actual: s.values.len(),
                    });
                }
                let after = replay_scalar_grads(w, s, &self.zo_partition, self.zo_lr)?;
                Ok(w.iter().zip(&after).map(|(a, b)| a - b).collect())
            }
            _ => Err(FerretError::Protocol(format!(
                "payload tag {:#04x} does not match method {}",
                msg.payload.tag(),
                self.cfg.method.name()
            ))),
        }
    }

    /// Applies `w ← w - server_lr · mean Δ̃` over `msgs` (summed in
    /// ascending client order) and records the round.
    pub fn apply_round(
        &mut self,
        round: usize,
        sampled: &[usize],
        mut msgs: Vec<ClientUpdateMsg>,
        local_seconds: f64,
    ) -> Result<RoundRecord> {
        let started = Instant::now();
        msgs.sort_by_key(|m| m.client_id);
        let ids: Vec<usize> = msgs.iter().map(|m| m.client_id as usize).collect();
        if ids != sampled {
            return Err(FerretError::Protocol(format!(
                "round {round}: got updates from {ids:?}, expected {sampled:?}"
            )));
        }
        if let Some(m) = msgs.iter().find(|m| m.round as usize != round) {
            return Err(FerretError::Protocol(format!(
                "update for round {} arrived in round {round}",
                m.round
            )));
        }
        let w = &self.weights;
        let deltas: Vec<Vec<f64>> = msgs
            .par_iter()
            .map(|m| self.decode_update(w, m))
            .collect::<Result<_>>()?;
        let mut sum = vec![0.0f64; self.dim()];
        for d in &deltas {
            for (s, v) in sum.iter_mut().zip(d) {
                *s += v;
            }
        }
        let scale = self.cfg.server_lr / msgs.len() as f64;
        for (x, s) in self.weights.iter_mut().zip(&sum) {
            *x -= scale * s;
        }
        let upload: u64 = msgs.iter().map(|m| m.upload_units).sum();
        let broadcast = if self.cfg.method.is_seed_based() {
            upload
        } else {
            self.dim() as u64
        };
        self.cumulative_upload += upload;
        self.cumulative_download += msgs.len() as u64 * broadcast;
        self.cumulative_grad_evals += msgs.iter().map(|m| m.grad_evals).sum::<u64>();
        self.round = round;
        let aggregate_seconds = started.elapsed().as_secs_f64();
        let (loss, metric) = self.evaluate()?;
        let (local_seconds, aggregate_seconds) = if self.record_timings {
            (local_seconds, aggregate_seconds)
        } else {
            (0.0, 0.0)
        };
        Ok(RoundRecord {
            round,
            loss,
            metric,
            cumulative_upload: self.cumulative_upload,
            cumulative_grad_evals: self.cumulative_grad_evals,
            local_seconds,
            aggregate_seconds,
            cumulative_download: self.cumulative_download,
        })
    }

    /// Loss and metric of the current global model on the held-out set
    /// (NaN when there is none).
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        if self.eval.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let loss = self
            .model
            .loss(&self.weights, &self.eval)
            .map_err(|_| FerretError::Diverged { iteration: 0 })?;
        Ok((loss, self.model.metric(&self.weights, &self.eval)?))
    }

    /// One in-process round with clients run on the rayon pool.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let round = self.round + 1;
        let sampled = self.sample_clients(round);
        let started = Instant::now();
        let w = &self.weights;
        let msgs: Vec<ClientUpdateMsg> = sampled
            .par_iter()
            .map(|&c| self.client_update(w, round, c))
            .collect::<Result<_>>()
            .map_err(|e| FerretError::Round {
                round,
                source: Box::new(e),
            })?;
        let local = started.elapsed().as_secs_f64();
        self.apply_round(round, &sampled, msgs, local)
            .map_err(|e| FerretError::Round {
                round,
                source: Box::new(e),
            })
    }

    /// Runs the remaining configured rounds.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        while self.round < self.cfg.rounds {
            out.push(self.step()?);
        }
        Ok(out)
    }

    pub fn summary(&self, records: &[RoundRecord]) -> CostSummary {
        account_costs(
            self.cfg.method,
            self.dim() as u64,
            self.cfg.total_bases as u64,
            records,
        )
    }
}

fn as_divergence(e: FerretError) -> FerretError {
    match e {
        FerretError::Numeric { index, .. } => FerretError::Diverged { iteration: index },
        other => other,
    }
}

/// Builds a federation and runs every round in process.
pub fn run_experiment(
    cfg: FedConfig,
    model: ModelSpec,
    train: &Dataset,
    eval: Dataset,
) -> Result<Vec<RoundRecord>> {
    Federation::new(cfg, model, train, eval)?.run()
}
