//! Zeroth-order estimation along the same shared-randomness bases.
//!
//! Perturbation `k` is the concatenation over blocks of basis vector
//! `(seed, block l, k)`, so with a single-block partition the ZO directions
//! are exactly the columns of the projection basis `V`.

use serde::{Deserialize, Serialize};

use crate::error::{FerretError, Result};
use crate::rand_basis::{basis_key, RandomSeed, SEED_DERIVATION_VERSION};
use crate::subspace::BlockPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    pub epsilon: f64,
    pub num_perturbations: usize,
    pub seed: RandomSeed,
}

impl ZoConfig {
    pub fn new(epsilon: f64, num_perturbations: usize, seed: RandomSeed) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(FerretError::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        if num_perturbations == 0 || num_perturbations > u32::MAX as usize {
            return Err(FerretError::Config(
                "num_perturbations must lie in [1, 2^32)".into(),
            ));
        }
        Ok(ZoConfig {
            epsilon,
            num_perturbations,
            seed,
        })
    }
}

/// Seed plus one scalar per perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrads {
    pub version: u8,
    pub seed: RandomSeed,
    pub values: Vec<f32>,
}

impl ScalarGrads {
    /// Transmitted numbers: the scalars plus the seed.
    pub fn numeric_units(&self) -> u64 {
        self.values.len() as u64 + 1
    }

    fn check_version(&self) -> Result<()> {
        if self.version != SEED_DERIVATION_VERSION {
            return Err(FerretError::Protocol(format!(
                "unknown seed derivation version {}",
                self.version
            )));
        }
        Ok(())
    }
}

/// Writes perturbation direction `k` into `out` (length `partition.dim()`).
pub fn fill_direction(partition: &BlockPartition, seed: RandomSeed, k: u32, out: &mut [f64]) {
    for (l, stats) in partition.stats().iter().enumerate() {
        let key = basis_key(seed, l as u32, k);
        let range = partition.block_range(l);
        let start = range.start;
        for i in range {
            out[i] = stats.entry(key, (i - start) as u64) as f64;
        }
    }
}

fn finite(value: f64, index: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(FerretError::numeric(index, format!("non-finite loss {value}")))
    }
}

/// Forward differences `g_k = (ℓ(w + εv_k) - ℓ(w)) / ε` for `k < K`.
///
/// Calls `loss_at` exactly `K + 1` times, the base point first. A
/// non-finite loss reports the perturbation index (`K` for the base point).
pub fn zo_scalar_grads<F>(
    mut loss_at: F,
    w: &[f64],
    partition: &BlockPartition,
    cfg: &ZoConfig,
) -> Result<ScalarGrads>
where
    F: FnMut(&[f64]) -> f64,
{
    if w.len() != partition.dim() {
        return Err(FerretError::Shape {
            expected: partition.dim(),
            actual: w.len(),
        });
    }
    let k_total = cfg.num_perturbations;
    let base = finite(loss_at(w), k_total)?;
    let mut dir = vec![0.0f64; w.len()];
    let mut probe = vec![0.0f64; w.len()];
    let mut values = Vec::with_capacity(k_total);
    for k in 0..k_total {
        fill_direction(partition, cfg.seed, k as u32, &mut dir);
        for ((p, &x), &v) in probe.iter_mut().zip(w).zip(&dir) {
            *p = x + cfg.epsilon * v;
        }
        let shifted = finite(loss_at(&probe), k)?;
        values.push(((shifted - base) / cfg.epsilon) as f32);
    }
    Ok(ScalarGrads {
        version: SEED_DERIVATION_VERSION,
        seed: cfg.seed,
        values,
    })
}

/// `(1/K) Σ_k g_k v_k`.
pub fn zo_reconstruct(grads: &ScalarGrads, partition: &BlockPartition) -> Result<Vec<f64>> {
    grads.check_version()?;
    let k_total = grads.values.len();
    let mut out = vec![0.0f64; partition.dim()];
    if k_total == 0 {
        return Ok(out);
    }
    let mut dir = vec![0.0f64; partition.dim()];
    for (k, &g) in grads.values.iter().enumerate() {
        fill_direction(partition, grads.seed, k as u32, &mut dir);
        let g = g as f64;
        for (o, &v) in out.iter_mut().zip(&dir) {
            *o += g * v;
        }
    }
    let scale = 1.0 / k_total as f64;
    for o in out.iter_mut() {
        *o *= scale;
    }
    Ok(out)
}

#[inline]
fn apply_step(w: &mut [f64], dir: &[f64], lr: f64, g: f32) {
    let step = lr * g as f64;
    for (x, &v) in w.iter_mut().zip(dir) {
        *x -= step * v;
    }
}

/// Runs `K` single-perturbation steps `w ← w - lr · g_k v_k`.
///
/// `loss_at(k, point)` evaluates the loss of step `k` (each step may use
/// its own mini-batch). The update uses the f32 scalar that is logged, so
/// [`replay_scalar_grads`] reproduces `w` bit for bit. Two evaluations per
/// step.
pub fn fedkseed_local_step<F>(
    w: &[f64],
    mut loss_at: F,
    partition: &BlockPartition,
    cfg: &ZoConfig,
    lr: f64,
) -> Result<(Vec<f64>, ScalarGrads)>
where
    F: FnMut(usize, &[f64]) -> f64,
{
    if w.len() != partition.dim() {
        return Err(FerretError::Shape {
            expected: partition.dim(),
            actual: w.len(),
        });
    }
    let mut cur = w.to_vec();
    let mut dir = vec![0.0f64; w.len()];
    let mut probe = vec![0.0f64; w.len()];
    let mut values = Vec::with_capacity(cfg.num_perturbations);
    for k in 0..cfg.num_perturbations {
        fill_direction(partition, cfg.seed, k as u32, &mut dir);
        let base = finite(loss_at(k, &cur), k)?;
        for ((p, &x), &v) in probe.iter_mut().zip(&cur).zip(&dir) {
            *p = x + cfg.epsilon * v;
        }
        let shifted = finite(loss_at(k, &probe), k)?;
        let g = ((shifted - base) / cfg.epsilon) as f32;
        apply_step(&mut cur, &dir, lr, g);
        values.push(g);
    }
    Ok((
        cur,
        ScalarGrads {
            version: SEED_DERIVATION_VERSION,
            seed: cfg.seed,
            values,
        },
    ))
}

/// Re-applies a FedKSeed log to `w` from the seed and scalars alone.
pub fn replay_scalar_grads(
    w: &[f64],
    grads: &ScalarGrads,
    partition: &BlockPartition,
    lr: f64,
) -> Result<Vec<f64>> {
    grads.check_version()?;
    if w.len() != partition.dim() {
        return Err(FerretError::Shape {
            expected: partition.dim(),
            actual: w.len(),
        });
    }
    let mut cur = w.to_vec();
    let mut dir = vec![0.0f64; w.len()];
    for (k, &g) in grads.values.iter().enumerate() {
        fill_direction(partition, grads.seed, k as u32, &mut dir);
        apply_step(&mut cur, &dir, lr, g);
    }
    Ok(cur)
}
