//! Measured statistics behind `ferret verify`.
//!
//! Each function returns raw measurements; [`run_check`] compares them with
//! the default thresholds and renders a report. Everything is a pure
//! function of its arguments, including the seed.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{synthetic_regression, PartitionPolicy};
use crate::error::{FerretError, Result};
use crate::federation::{account_costs, AllocationPolicy, CostModel, CostSummary, FedConfig, Federation, Method, SeedPolicy};
use crate::models::{ModelKind, ModelSpec, Optimizer};
use crate::rand_basis::{basis_key, derive_subseed, RandomSeed, TruncGaussStats};
use crate::subspace::{
    allocate_budgets, block_cost, cosine_similarity, project, project_reconstruct, reconstruct,
    relative_error, uniform_budgets, BlockPartition,
};
use crate::zoo::{fill_direction, zo_reconstruct, zo_scalar_grads, ZoConfig};

const LANE_TARGET: u64 = 0;
const LANE_BASES: u64 = 1;

/// Seed of trial `t` on `lane`.
pub fn trial_seed(root: RandomSeed, t: usize, lane: u64) -> RandomSeed {
    derive_subseed(root, t as u64, 0, lane, 0)
}

/// `N(0, I)` vector drawn from `seed`.
pub fn gaussian(seed: RandomSeed, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn sum_in_order(parts: Vec<Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// `‖mean(Δ̃) − Δ‖/‖Δ‖` over `trials` independent seeds for one fixed
/// Gaussian `Δ`.
pub fn unbiasedness(dim: usize, budget: usize, trials: usize, seed: RandomSeed) -> Result<f64> {
    let partition = BlockPartition::single(dim, budget)?;
    let delta = gaussian(trial_seed(seed, 0, LANE_TARGET), dim);
    const CHUNK: usize = 256;
    let chunks: Vec<usize> = (0..trials.div_ceil(CHUNK)).collect();
    let parts = chunks
        .par_iter()
        .map(|&c| {
            let mut acc = vec![0.0; dim];
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let r = project_reconstruct(&delta, &partition, trial_seed(seed, t, LANE_BASES))?;
                for (a, v) in acc.iter_mut().zip(r) {
                    *a += v;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean: Vec<f64> = sum_in_order(parts, dim)
        .into_iter()
        .map(|v| v / trials as f64)
        .collect();
    Ok(relative_error(&mean, &delta))
}

/// `max{2√(2ln(2d)/(ρK)), 2ln(2d)/(ρK)}`.
pub fn error_bound(dim: usize, budget: usize) -> Result<f64> {
    let rho = TruncGaussStats::new(dim as u64)?.rho;
    let x = 2.0 * (2.0 * dim as f64).ln() / (rho * budget as f64);
    Ok((2.0 * x.sqrt()).max(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundStats {
    pub dim: usize,
    pub budget: usize,
    pub trials: usize,
    pub bound: f64,
    pub mean_error: f64,
    pub max_error: f64,
    /// Trials whose relative error exceeded the bound.
    pub violations: usize,
}

/// Relative reconstruction error of fresh Gaussian updates.
pub fn error_bound_trials(dim: usize, budget: usize, trials: usize, seed: RandomSeed) -> Result<ErrorBoundStats> {
    let partition = BlockPartition::single(dim, budget)?;
    let bound = error_bound(dim, budget)?;
    let errors = (0..trials)
        .into_par_iter()
        .map(|t| {
            let delta = gaussian(trial_seed(seed, t, LANE_TARGET), dim);
            let r = project_reconstruct(&delta, &partition, trial_seed(seed, t, LANE_BASES))?;
            Ok(relative_error(&r, &delta))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ErrorBoundStats {
        dim,
        budget,
        trials,
        bound,
        mean_error: errors.iter().sum::<f64>() / trials as f64,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        violations: errors.iter().filter(|&&e| e > bound).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoConnectionStats {
    pub epsilon: f64,
    pub beta: f64,
    pub bound: f64,
    pub max_gap: f64,
    pub draws: usize,
    pub violations: usize,
}

/// `A = MᵀM/λ_max(MᵀM)`, so `ℓ(x) = ½xᵀAx + bᵀx` is exactly β-smooth with
/// `β = scale`.
fn random_quadratic(dim: usize, scale: f64, seed: RandomSeed) -> DMatrix<f64> {
    let m = DMatrix::from_vec(dim, dim, gaussian(seed, dim * dim));
    let a = m.transpose() * &m;
    let top = a.clone().symmetric_eigenvalues().max();
    a * (scale / top)
}

/// Gap `‖Vg/K − VVᵀ∇ℓ/K‖` between the forward-difference reconstruction
/// and its first-order counterpart on a β-smooth quadratic.
pub fn zo_connection(
    dim: usize,
    budget: usize,
    epsilon: f64,
    beta: f64,
    draws: usize,
    seed: RandomSeed,
) -> Result<ZoConnectionStats> {
    let partition = BlockPartition::single(dim, budget)?;
    let a = random_quadratic(dim, beta, trial_seed(seed, usize::MAX, LANE_TARGET));
    let bound = beta * epsilon / 2.0;
    let gaps = (0..draws)
        .into_par_iter()
        .map(|t| {
            let x = gaussian(trial_seed(seed, t, LANE_TARGET), dim);
            let b = gaussian(trial_seed(seed, t, 2), dim);
            let loss = |p: &[f64]| {
                let pv = nalgebra::DVectorView::from_slice(p, dim);
                0.5 * pv.dot(&(&a * pv)) + pv.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>()
            };
            let xv = nalgebra::DVector::from_column_slice(&x);
            let grad: Vec<f64> = (&a * &xv).iter().zip(&b).map(|(u, v)| u + v).collect();
            let cfg = ZoConfig::new(epsilon, budget, trial_seed(seed, t, LANE_BASES))?;
            let g = zo_scalar_grads(loss, &x, &partition, &cfg)?;
            let est = zo_reconstruct(&g, &partition)?;
            let mut reference = vec![0.0; dim];
            let mut v = vec![0.0; dim];
            for k in 0..budget as u32 {
                fill_direction(&partition, cfg.seed, k, &mut v);
                let d: f64 = v.iter().zip(&grad).map(|(p, q)| p * q).sum();
                for (r, vi) in reference.iter_mut().zip(&v) {
                    *r += d * vi / budget as f64;
                }
            }
            let gap = est
                .iter()
                .zip(&reference)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            Ok(gap)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ZoConnectionStats {
        epsilon,
        beta,
        bound,
        max_gap: gaps.iter().copied().fold(0.0, f64::max),
        draws,
        violations: gaps.iter().filter(|&&g| g > bound).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRateStats {
    pub dims: Vec<usize>,
    pub inv_rho: Vec<f64>,
    /// Least-squares slope of `ln(1/ρ)` against `ln d`.
    pub slope: f64,
    /// `ρ·d` at the largest dimension.
    pub rho_d_at_max: f64,
}

pub fn rho_rate(dims: &[usize]) -> Result<RhoRateStats> {
    if dims.len() < 2 {
        return Err(FerretError::InvalidDimension("need at least two dimensions".into()));
    }
    let stats = dims
        .iter()
        .map(|&d| TruncGaussStats::new(d as u64))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = dims.iter().map(|&d| (d as f64).ln()).collect();
    let ys: Vec<f64> = stats.iter().map(|s| (1.0 / s.rho).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let last = stats.iter().zip(dims).max_by_key(|(_, &d)| d).unwrap();
    Ok(RhoRateStats {
        dims: dims.to_vec(),
        inv_rho: stats.iter().map(|s| 1.0 / s.rho).collect(),
        slope: sxy / sxx,
        rho_d_at_max: last.0.rho * *last.1 as f64,
    })
}

/// Cosine similarity of the first-order and zeroth-order reconstructions
/// with their target, at one x-axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub x: usize,
    pub ferret: f64,
    /// One entry per ε, in the order requested.
    pub zo: Vec<f64>,
}

/// `K` basis vectors of a single block, row-major.
struct Bases {
    dim: usize,
    rho: f64,
    rows: Vec<f32>,
}

impl Bases {
    fn new(dim: usize, count: usize, seed: RandomSeed) -> Result<Self> {
        let stats = TruncGaussStats::new(dim as u64)?;
        let mut rows = vec![0.0f32; dim * count];
        rows.par_chunks_mut(dim)
            .enumerate()
            .for_each(|(k, row)| stats.fill(basis_key(seed, 0, k as u32), 0, row));
        Ok(Bases {
            dim,
            rho: stats.rho,
            rows,
        })
    }

    fn row(&self, k: usize) -> &[f32] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    fn dots(&self, count: usize, x: &[f64]) -> Vec<f64> {
        (0..count)
            .into_par_iter()
            .map(|k| self.row(k).iter().zip(x).map(|(&v, &u)| v as f64 * u).sum())
            .collect()
    }

    /// Same arithmetic as `project_reconstruct` on a single block.
    fn ferret(&self, dots: &[f64], budget: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, &d) in dots[..budget].iter().enumerate() {
            let g = (d / (self.rho * budget as f64)) as f32 as f64;
            for (o, &v) in out.iter_mut().zip(self.row(k)) {
                *o += g * v as f64;
            }
        }
        out
    }

    /// Forward differences `(F(x + εv_k) − F(x))/ε`, rounded to f32 as on
    /// the wire.
    fn zo_scalars<F: Fn(&[f64]) -> f64 + Sync>(&self, f: &F, x: &[f64], eps: f64, count: usize) -> Vec<f64> {
        let base = f(x);
        (0..count)
            .into_par_iter()
            .map(|k| {
                let p: Vec<f64> = x
                    .iter()
                    .zip(self.row(k))
                    .map(|(&u, &v)| u + eps * v as f64)
                    .collect();
                ((f(&p) - base) / eps) as f32 as f64
            })
            .collect()
    }

    /// `(1/K) Σ g_k v_k`.
    fn zo(&self, scalars: &[f64], budget: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, &g) in scalars[..budget].iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.row(k)) {
                *o += g * v as f64;
            }
        }
        out.iter_mut().for_each(|o| *o /= budget as f64);
        out
    }
}

fn sum_squares(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn sum_sin_squares(x: &[f64]) -> f64 {
    x.iter().map(|v| v.sin() * v.sin()).sum()
}

/// Reconstruction of `∇F(x) = 2x` for `F(x) = Σx²` at a Gaussian `x`, as
/// a function of `K`, averaged over `seeds` draws. Basis `k` is shared by
/// every `K > k` within a draw.
pub fn reconstruction_vs_k(
    dim: usize,
    ks: &[usize],
    epsilons: &[f64],
    seeds: usize,
    seed: RandomSeed,
) -> Result<Vec<CosineRow>> {
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if kmax > dim || ks.contains(&0) {
        return Err(FerretError::InvalidDimension(format!("budgets {ks:?} must lie in 1..={dim}")));
    }
    let mut rows: Vec<CosineRow> = ks
        .iter()
        .map(|&k| CosineRow {
            x: k,
            ferret: 0.0,
            zo: vec![0.0; epsilons.len()],
        })
        .collect();
    for s in 0..seeds {
        let x = gaussian(trial_seed(seed, s, LANE_TARGET), dim);
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let bases = Bases::new(dim, kmax, trial_seed(seed, s, LANE_BASES))?;
        let dots = bases.dots(kmax, &grad);
        let scalars: Vec<Vec<f64>> = epsilons
            .iter()
            .map(|&e| bases.zo_scalars(&sum_squares, &x, e, kmax))
            .collect();
        for row in rows.iter_mut() {
            row.ferret += cosine_similarity(&bases.ferret(&dots, row.x), &grad) / seeds as f64;
            for (z, sc) in row.zo.iter_mut().zip(&scalars) {
                *z += cosine_similarity(&bases.zo(sc, row.x), &grad) / seeds as f64;
            }
        }
    }
    Ok(rows)
}

/// Reconstruction of a `T`-step gradient-descent update on
/// `F(x) = Σ sin²(x_i)` for `T = 1..=steps`, one fixed basis set of size
/// `K`.
///
/// Ferret projects the true update `x₀ − x_T`. The zeroth-order method
/// runs its own `T` steps with the same `K` directions, stepping by
/// `lr·K/(ρd)·Vg/K` so that a step inside `span(V)` has the first-order
/// length, and reports its accumulated update.
pub fn drift(dim: usize, budget: usize, steps: usize, lr: f64, epsilon: f64, seed: RandomSeed) -> Result<Vec<CosineRow>> {
    if budget == 0 || budget > dim {
        return Err(FerretError::InvalidDimension(format!("budget {budget} must lie in 1..={dim}")));
    }
    let x0 = gaussian(trial_seed(seed, 0, LANE_TARGET), dim);
    let bases = Bases::new(dim, budget, trial_seed(seed, 0, LANE_BASES))?;
    let zo_lr = lr * budget as f64 / (bases.rho * dim as f64);
    let mut x = x0.clone();
    let mut z = x0.clone();
    let mut rows = Vec::with_capacity(steps);
    for t in 1..=steps {
        for v in x.iter_mut() {
            *v -= lr * (2.0 * *v).sin();
        }
        let scalars = bases.zo_scalars(&sum_sin_squares, &z, epsilon, budget);
        let est = bases.zo(&scalars, budget);
        for (v, e) in z.iter_mut().zip(&est) {
            *v -= zo_lr * e;
        }
        let truth: Vec<f64> = x0.iter().zip(&x).map(|(a, b)| a - b).collect();
        let zo_delta: Vec<f64> = x0.iter().zip(&z).map(|(a, b)| a - b).collect();
        let ferret = bases.ferret(&bases.dots(budget, &truth), budget);
        rows.push(CosineRow {
            x: t,
            ferret: cosine_similarity(&ferret, &truth),
            zo: vec![cosine_similarity(&zo_delta, &truth)],
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpeedupStats {
    pub dim: usize,
    pub budget: usize,
    pub blocks: usize,
    pub cost_single: u64,
    pub cost_blocked: u64,
    pub seconds_single: f64,
    pub seconds_blocked: f64,
    pub speedup: f64,
    pub cosine_single: f64,
    pub cosine_blocked: f64,
}

/// Projection time and accuracy of `L` equal blocks against one block, on
/// the gradient of `Σ sin²(x_i)` at a Gaussian `x`.
pub fn block_speedup(dim: usize, budget: usize, blocks: usize, seed: RandomSeed) -> Result<BlockSpeedupStats> {
    let single = BlockPartition::single(dim, budget)?;
    let split = BlockPartition::equal_split(dim, blocks, budget)?;
    let x = gaussian(trial_seed(seed, 0, LANE_TARGET), dim);
    let grad: Vec<f64> = x.iter().map(|v| (2.0 * v).sin()).collect();
    let bases = trial_seed(seed, 0, LANE_BASES);

    let started = Instant::now();
    let p1 = project(&grad, &single, bases)?;
    let seconds_single = started.elapsed().as_secs_f64();
    let mut seconds_blocked = f64::INFINITY;
    let mut pl = None;
    for _ in 0..3 {
        let started = Instant::now();
        let p = project(&grad, &split, bases)?;
        seconds_blocked = seconds_blocked.min(started.elapsed().as_secs_f64());
        pl = Some(p);
    }
    let pl = pl.expect("at least one repetition");
    Ok(BlockSpeedupStats {
        dim,
        budget,
        blocks,
        cost_single: block_cost(&single),
        cost_blocked: block_cost(&split),
        seconds_single,
        seconds_blocked,
        speedup: seconds_single / seconds_blocked,
        cosine_single: cosine_similarity(&reconstruct(&p1, &single)?, &grad),
        cosine_blocked: cosine_similarity(&reconstruct(&pl, &split)?, &grad),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationStats {
    pub norms: Vec<f64>,
    pub uniform_budgets: Vec<usize>,
    pub norm_sqrt_budgets: Vec<usize>,
    pub uniform_error: f64,
    pub norm_sqrt_error: f64,
}

/// Mean relative reconstruction error of updates whose blocks have the
/// given norms, under uniform and `√(‖Δ_l‖/ρ_l)` budgets.
pub fn allocation(
    block_dims: &[usize],
    norms: &[f64],
    budget: usize,
    trials: usize,
    seed: RandomSeed,
) -> Result<AllocationStats> {
    let uniform = BlockPartition::uniform(block_dims.to_vec(), budget)?;
    let sqrt_budgets = allocate_budgets(norms, uniform.stats(), budget)?;
    let tuned = uniform.with_budgets(sqrt_budgets.clone())?;
    let dim = uniform.dim();
    let errs = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut delta = gaussian(trial_seed(seed, t, LANE_TARGET), dim);
            for (l, &n) in norms.iter().enumerate() {
                let r = uniform.block_range(l);
                let scale = n / sum_squares(&delta[r.clone()]).sqrt();
                delta[r].iter_mut().for_each(|v| *v *= scale);
            }
            let s = trial_seed(seed, t, LANE_BASES);
            let a = relative_error(&project_reconstruct(&delta, &uniform, s)?, &delta);
            let b = relative_error(&project_reconstruct(&delta, &tuned, s)?, &delta);
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AllocationStats {
        norms: norms.to_vec(),
        uniform_budgets: uniform_budgets(block_dims, budget)?,
        norm_sqrt_budgets: sqrt_budgets,
        uniform_error: errs.iter().map(|e| e.0).sum::<f64>() / trials as f64,
        norm_sqrt_error: errs.iter().map(|e| e.1).sum::<f64>() / trials as f64,
    })
}

/// Homogeneous federated linear regression: every client holds the same
/// data and runs full-batch gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSetup {
    pub input_dim: usize,
    pub examples: usize,
    pub test_examples: usize,
    pub noise: f64,
    pub clients: usize,
    pub local_iters: usize,
    pub rounds: usize,
    pub lr: f64,
    /// Ferret budget and FedKSeed steps per round.
    pub budget: usize,
    /// Round of FedAvg whose loss is the threshold.
    pub threshold_round: usize,
    pub seed: RandomSeed,
}

impl Default for ConvergenceSetup {
    fn default() -> Self {
        ConvergenceSetup {
            input_dim: 63,
            examples: 512,
            test_examples: 256,
            noise: 0.1,
            clients: 8,
            local_iters: 10,
            rounds: 20,
            lr: 0.04,
            budget: 16,
            threshold_round: 10,
            seed: RandomSeed(7),
        }
    }
}

impl ConvergenceSetup {
    pub fn dim(&self) -> usize {
        self.input_dim + 1
    }

    pub fn fed_config(&self, method: Method) -> FedConfig {
        // FedKSeed: a step of 1/(ρd) along v is an exact line search for
        // unit curvature.
        let zo_lr = TruncGaussStats::new(self.dim() as u64)
            .map(|s| 1.0 / (s.rho * self.dim() as f64))
            .ok();
        FedConfig {
            method,
            num_clients: self.clients,
            rounds: self.rounds,
            local_iters: self.local_iters,
            total_bases: self.budget,
            local_lr: self.lr,
            server_lr: 1.0,
            participation: 1.0,
            partition: PartitionPolicy::Replicate,
            allocation: AllocationPolicy::Uniform,
            seed_policy: SeedPolicy::PerRound,
            root_seed: self.seed,
            batch_size: 0,
            accum: 1,
            optimizer: Optimizer::Sgd,
            max_block_dim: None,
            exact_projection: false,
            zo_epsilon: 1e-3,
            zo_lr,
        }
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            input_dim: self.input_dim,
            hidden_dim: 0,
            output_dim: 1,
            init_seed: derive_subseed(self.seed, 0, 0, 9, 0),
        }
    }

    /// Held-out loss after every round.
    pub fn losses(&self, method: Method) -> Result<Vec<f64>> {
        let data = synthetic_regression(self.examples + self.test_examples, self.input_dim, self.noise, self.seed);
        let (train, test) = data.split_tail(self.test_examples)?;
        let mut fed = Federation::new(self.fed_config(method), self.model(), &train, test)?;
        Ok(fed.run()?.into_iter().map(|r| r.loss).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStats {
    pub fedavg: Vec<f64>,
    pub ferret: Vec<f64>,
    pub fedkseed: Vec<f64>,
    pub threshold: f64,
    /// First round (1-based) at or below `threshold`.
    pub ferret_rounds: Option<usize>,
    pub fedkseed_rounds: Option<usize>,
    /// Final Ferret loss over final FedAvg loss.
    pub final_ratio: f64,
}

fn first_at_or_below(losses: &[f64], threshold: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= threshold).map(|i| i + 1)
}

pub fn convergence(setup: &ConvergenceSetup) -> Result<ConvergenceStats> {
    let fedavg = setup.losses(Method::Fedavg)?;
    let ferret = setup.losses(Method::Ferret)?;
    let fedkseed = setup.losses(Method::Fedkseed)?;
    let threshold = *fedavg
        .get(setup.threshold_round.saturating_sub(1))
        .ok_or_else(|| FerretError::Config("threshold round beyond the run".into()))?;
    Ok(ConvergenceStats {
        ferret_rounds: first_at_or_below(&ferret, threshold),
        fedkseed_rounds: first_at_or_below(&fedkseed, threshold),
        final_ratio: ferret.last().copied().unwrap_or(f64::NAN) / fedavg.last().copied().unwrap_or(f64::NAN),
        threshold,
        fedavg,
        ferret,
        fedkseed,
    })
}

/// Per-round cost summaries of all four methods at one `(d, K)`.
pub fn accounting(dim: u64, budget: u64, sampled: u64, rounds: usize) -> Vec<CostSummary> {
    [Method::Ferret, Method::Fedavg, Method::Fedzo, Method::Fedkseed]
        .into_iter()
        .map(|method| {
            let cm = CostModel {
                method,
                dim,
                total_bases: budget,
                sampled,
            };
            account_costs(method, dim, budget, &cm.records(rounds))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Unbiased,
    ErrorBound,
    ZoConnection,
    RhoRate,
    ReconstructionVsK,
    Drift,
    BlockSpeedup,
    Allocation,
    Convergence,
    Accounting,
}

impl Check {
    pub const ALL: [Check; 10] = [
        Check::Unbiased,
        Check::ErrorBound,
        Check::ZoConnection,
        Check::RhoRate,
        Check::ReconstructionVsK,
        Check::Drift,
        Check::BlockSpeedup,
        Check::Allocation,
        Check::Convergence,
        Check::Accounting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Unbiased => "unbiased",
            Check::ErrorBound => "error-bound",
            Check::ZoConnection => "zo-connection",
            Check::RhoRate => "rho-rate",
            Check::ReconstructionVsK => "reconstruction-vs-k",
            Check::Drift => "drift",
            Check::BlockSpeedup => "block-speedup",
            Check::Allocation => "allocation",
            Check::Convergence => "convergence",
            Check::Accounting => "accounting",
        }
    }

    pub fn parse(name: &str) -> Option<Check> {
        Check::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Scale and tolerances of one check. Fields a check does not use are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryCheckConfig {
    pub which: Check,
    #[serde(default)]
    pub dims: Vec<usize>,
    #[serde(default)]
    pub budgets: Vec<usize>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: RandomSeed,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Gradient noise and initial gap, used only by `convergence`.
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub gap: f64,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub lr: f64,
}

fn one() -> usize {
    1
}

fn default_tolerance() -> f64 {
    0.05
}

fn default_beta() -> f64 {
    1.0
}

impl TheoryCheckConfig {
    /// The configuration the default suite runs for `which`.
    pub fn default_for(which: Check) -> Self {
        let mut c = TheoryCheckConfig {
            which,
            dims: vec![],
            budgets: vec![],
            trials: 1,
            tolerance: default_tolerance(),
            seed: RandomSeed(7),
            epsilons: vec![],
            beta: 1.0,
            sigma: 0.1,
            gap: 0.0,
            steps: 0,
            lr: 0.0,
        };
        match which {
            Check::Unbiased => {
                c.dims = vec![256];
                c.budgets = vec![16];
                c.trials = 20_000;
                c.tolerance = 0.02;
            }
            Check::ErrorBound => {
                c.dims = vec![1024, 4096, 16384];
                c.budgets = vec![32, 64, 128];
                c.trials = 200;
            }
            Check::ZoConnection => {
                c.dims = vec![512];
                c.budgets = vec![32];
                c.trials = 100;
                c.epsilons = vec![0.1, 0.01];
            }
            Check::RhoRate => {
                c.dims = vec![100, 1_000, 10_000, 100_000, 1_000_000];
                c.tolerance = 0.05;
            }
            Check::ReconstructionVsK => {
                c.dims = vec![10_000];
                c.budgets = vec![64, 128, 256, 512];
                c.trials = 20;
                c.epsilons = vec![0.1];
            }
            Check::Drift => {
                c.dims = vec![50_000];
                c.budgets = vec![500];
                c.steps = 50;
                c.lr = 0.1;
                c.epsilons = vec![0.1];
                c.tolerance = 0.02;
            }
            Check::BlockSpeedup => {
                c.dims = vec![1 << 20];
                c.budgets = vec![256];
                c.steps = 16;
                c.tolerance = 0.02;
            }
            Check::Allocation => {
                c.dims = vec![256, 256, 256, 256];
                c.budgets = vec![64];
                c.trials = 100;
            }
            Check::Convergence => {
                c.tolerance = 0.1;
            }
            Check::Accounting => {
                c.dims = vec![1_000_000];
                c.budgets = vec![4096];
            }
        }
        c
    }

    fn dim(&self, i: usize) -> Result<usize> {
        self.dims
            .get(i)
            .copied()
            .ok_or_else(|| FerretError::Config(format!("{}: missing dims[{i}]", self.which.name())))
    }

    fn budget(&self, i: usize) -> Result<usize> {
        self.budgets
            .get(i)
            .copied()
            .ok_or_else(|| FerretError::Config(format!("{}: missing budgets[{i}]", self.which.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(FerretError::Config("trials must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(FerretError::Config("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: Check,
    pub seed: RandomSeed,
    pub passed: bool,
    pub lines: Vec<String>,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "  {l}")?;
        }
        write!(
            f,
            "{} {} (seed {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.check.name(),
            self.seed.0
        )
    }
}

fn non_decreasing(xs: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = xs.collect();
    v.windows(2).all(|w| w[1] >= w[0])
}

/// Runs one check against its thresholds.
pub fn run_check(cfg: &TheoryCheckConfig) -> Result<CheckReport> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut lines = Vec::new();
    let passed = match cfg.which {
        Check::Unbiased => {
            let (d, k) = (cfg.dim(0)?, cfg.budget(0)?);
            let e = unbiasedness(d, k, cfg.trials, seed)?;
            lines.push(format!("d={d} K={k} trials={}: |mean - delta|/|delta| = {e:.5} (tolerance {})", cfg.trials, cfg.tolerance));
            e <= cfg.tolerance
        }
        Check::ErrorBound => {
            let mut ok = true;
            for i in 0..cfg.dims.len() {
                let s = error_bound_trials(cfg.dim(i)?, cfg.budget(i)?, cfg.trials, seed)?;
                lines.push(format!(
                    "d={} K={}: mean error {:.4}, max {:.4}, bound {:.4}, violations {}",
                    s.dim, s.budget, s.mean_error, s.max_error, s.bound, s.violations
                ));
                ok &= s.violations == 0 && s.mean_error <= s.bound;
            }
            ok
        }
        Check::ZoConnection => {
            let mut ok = true;
            for &eps in &cfg.epsilons {
                let s = zo_connection(cfg.dim(0)?, cfg.budget(0)?, eps, cfg.beta, cfg.trials, seed)?;
                lines.push(format!(
                    "eps={eps}: max gap {:.3e} vs bound {:.3e}, {}/{} within",
                    s.max_gap,
                    s.bound,
                    s.draws - s.violations,
                    s.draws
                ));
                ok &= s.violations == 0;
            }
            ok
        }
        Check::RhoRate => {
            let s = rho_rate(&cfg.dims)?;
            lines.push(format!("slope of ln(1/rho) vs ln d = {:.5}", s.slope));
            lines.push(format!("rho*d at d={} = {:.7} (1/3 = {:.7})", cfg.dims.iter().max().unwrap(), s.rho_d_at_max, 1.0 / 3.0));
            (s.slope - 1.0).abs() <= cfg.tolerance && (s.rho_d_at_max * 3.0 - 1.0).abs() <= 1e-3
        }
        Check::ReconstructionVsK => {
            let rows = reconstruction_vs_k(cfg.dim(0)?, &cfg.budgets, &cfg.epsilons, cfg.trials, seed)?;
            for r in &rows {
                lines.push(format!("K={}: ferret {:.5}, zo {:?}", r.x, r.ferret, r.zo));
            }
            non_decreasing(rows.iter().map(|r| r.ferret))
                && rows.iter().all(|r| r.zo.iter().all(|&z| r.ferret >= z))
        }
        Check::Drift => {
            let eps = cfg.epsilons.first().copied().unwrap_or(0.1);
            let rows = drift(cfg.dim(0)?, cfg.budget(0)?, cfg.steps, cfg.lr, eps, seed)?;
            let f: Vec<f64> = rows.iter().map(|r| r.ferret).collect();
            let spread = f.iter().copied().fold(f64::MIN, f64::max) - f.iter().copied().fold(f64::MAX, f64::min);
            let last = rows.last().ok_or_else(|| FerretError::Config("drift needs steps >= 1".into()))?;
            lines.push(format!("ferret cosine spread over T: {spread:.5}"));
            lines.push(format!("T={}: ferret {:.5}, zo {:.5} (T=1: zo {:.5})", last.x, last.ferret, last.zo[0], rows[0].zo[0]));
            spread < cfg.tolerance && last.zo[0] < last.ferret
        }
        Check::BlockSpeedup => {
            let s = block_speedup(cfg.dim(0)?, cfg.budget(0)?, cfg.steps, seed)?;
            let expected = (s.dim as u64 * s.budget as u64) / s.blocks as u64;
            lines.push(format!("multiplies: L=1 {}, L={} {} (dK/L = {expected})", s.cost_single, s.blocks, s.cost_blocked));
            lines.push(format!("projection: {:.3}s vs {:.3}s, speedup {:.2}x", s.seconds_single, s.seconds_blocked, s.speedup));
            lines.push(format!("cosine: {:.5} vs {:.5}", s.cosine_single, s.cosine_blocked));
            s.cost_blocked == expected && s.speedup >= 4.0 && (s.cosine_single - s.cosine_blocked).abs() <= cfg.tolerance
        }
        Check::Allocation => {
            let norms = [10.0, 1.0, 1.0, 1.0];
            let s = allocation(&cfg.dims, &norms[..cfg.dims.len().min(4)], cfg.budget(0)?, cfg.trials, seed)?;
            lines.push(format!("budgets uniform {:?}, norm-sqrt {:?}", s.uniform_budgets, s.norm_sqrt_budgets));
            lines.push(format!("mean error uniform {:.4}, norm-sqrt {:.4}", s.uniform_error, s.norm_sqrt_error));
            s.norm_sqrt_error <= s.uniform_error
        }
        Check::Convergence => {
            let setup = ConvergenceSetup {
                seed,
                ..ConvergenceSetup::default()
            };
            let s = convergence(&setup)?;
            lines.push(format!(
                "final loss: fedavg {:.5}, ferret {:.5} (ratio {:.4}), fedkseed {:.5}",
                s.fedavg.last().unwrap_or(&f64::NAN),
                s.ferret.last().unwrap_or(&f64::NAN),
                s.final_ratio,
                s.fedkseed.last().unwrap_or(&f64::NAN)
            ));
            lines.push(format!(
                "rounds to reach {:.5}: ferret {:?}, fedkseed {:?}",
                s.threshold, s.ferret_rounds, s.fedkseed_rounds
            ));
            let more = match (s.ferret_rounds, s.fedkseed_rounds) {
                (Some(a), Some(b)) => b > a,
                (Some(_), None) => true,
                _ => false,
            };
            (s.final_ratio - 1.0).abs() <= cfg.tolerance && more
        }
        Check::Accounting => {
            let (d, k) = (cfg.dim(0)? as u64, cfg.budget(0)? as u64);
            let s = accounting(d, k, 8, 3);
            let ratio = |m: Method| s.iter().find(|c| c.method == m).unwrap().upload_ratio(&s[1]);
            let want = (k + 1) as f64 / d as f64;
            for m in [Method::Ferret, Method::Fedkseed, Method::Fedzo] {
                lines.push(format!("{} / fedavg upload per round = {:e}", m.name(), ratio(m)));
            }
            ratio(Method::Ferret) == want && ratio(Method::Fedkseed) == want && ratio(Method::Fedzo) == 1.0
        }
    };
    Ok(CheckReport {
        check: cfg.which,
        seed,
        passed,
        lines,
    })
}
