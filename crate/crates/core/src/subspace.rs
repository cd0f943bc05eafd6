//! Projection of updates onto seeded random bases and block-wise reconstruction.
//!
//! For a block of dimension `d_l` with budget `K_l`, the client sends
//! `γ_l = (ρ_l K_l)⁻¹ V_lᵀ Δ_l` and anyone holding the seed rebuilds
//! `Δ̃_l = V_l γ_l`. Bases are streamed one vector at a time and never stored
//! as a matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FerretError, Result};
use crate::rand_basis::{
    basis_key, mix64, RandomSeed, TruncGaussStats, SEED_DERIVATION_VERSION,
};

/// Layout of `d` parameters into `L` blocks, each with its own basis budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    block_dims: Vec<usize>,
    block_budgets: Vec<usize>,
    stats: Vec<TruncGaussStats>,
    offsets: Vec<usize>,
    id: u32,
}

impl BlockPartition {
    pub fn new(block_dims: Vec<usize>, block_budgets: Vec<usize>) -> Result<Self> {
        if block_dims.is_empty() {
            return Err(FerretError::InvalidDimension("partition has no blocks".into()));
        }
        if block_dims.len() != block_budgets.len() {
            return Err(FerretError::Shape {
                expected: block_dims.len(),
                actual: block_budgets.len(),
            });
        }
        if block_dims.len() > u32::MAX as usize {
            return Err(FerretError::InvalidDimension("too many blocks".into()));
        }
        for (l, (&d, &k)) in block_dims.iter().zip(&block_budgets).enumerate() {
            if d == 0 {
                return Err(FerretError::InvalidDimension(format!("block {l} has d_l = 0")));
            }
            if k == 0 || k > d || k > u32::MAX as usize {
                return Err(FerretError::InvalidDimension(format!(
                    "block {l}: K_l = {k} must lie in [1, d_l = {d}]"
                )));
            }
        }
        let stats = block_dims
            .iter()
            .map(|&d| TruncGaussStats::new(d as u64))
            .collect::<Result<Vec<_>>>()?;
        let mut offsets = Vec::with_capacity(block_dims.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for &d in &block_dims {
            acc += d;
            offsets.push(acc);
        }
        let mut h = mix64(block_dims.len() as u64);
        for (&d, &k) in block_dims.iter().zip(&block_budgets) {
            h = mix64(h ^ d as u64);
            h = mix64(h ^ k as u64);
        }
        Ok(BlockPartition {
            block_dims,
            block_budgets,
            stats,
            offsets,
            id: (h ^ (h >> 32)) as u32,
        })
    }

    /// One block covering all `d` coordinates.
    pub fn single(dim: usize, budget: usize) -> Result<Self> {
        Self::new(vec![dim], vec![budget])
    }

    /// Budgets split as evenly as possible across the given blocks.
    pub fn uniform(block_dims: Vec<usize>, total_budget: usize) -> Result<Self> {
        let budgets = uniform_budgets(&block_dims, total_budget)?;
        Self::new(block_dims, budgets)
    }

    /// `blocks` blocks of (nearly) equal size covering `dim`, with the budget
    /// split evenly.
    pub fn equal_split(dim: usize, blocks: usize, total_budget: usize) -> Result<Self> {
        if blocks == 0 || blocks > dim {
            return Err(FerretError::InvalidDimension(format!(
                "cannot split d = {dim} into {blocks} blocks"
            )));
        }
        let base = dim / blocks;
        let extra = dim % blocks;
        let dims = (0..blocks).map(|l| base + usize::from(l < extra)).collect();
        Self::uniform(dims, total_budget)
    }

    /// Same blocks, different budgets.
    pub fn with_budgets(&self, budgets: Vec<usize>) -> Result<Self> {
        Self::new(self.block_dims.clone(), budgets)
    }

    pub fn num_blocks(&self) -> usize {
        self.block_dims.len()
    }

    /// Total dimension `d`.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Total basis budget `K`.
    pub fn total_budget(&self) -> usize {
        self.block_budgets.iter().sum()
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn block_budgets(&self) -> &[usize] {
        &self.block_budgets
    }

    pub fn stats(&self) -> &[TruncGaussStats] {
        &self.stats
    }

    pub fn block_range(&self, block: usize) -> std::ops::Range<usize> {
        self.offsets[block]..self.offsets[block + 1]
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(FerretError::Shape {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Per-block 2-norms of `values`.
    pub fn block_norms(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values.len())?;
        Ok((0..self.num_blocks())
            .map(|l| {
                values[self.block_range(l)]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}

/// The O(K) message a client uploads: one seed plus per-block coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedUpdate {
    /// Seed-derivation scheme the coordinates were produced under.
    pub version: u8,
    pub partition_id: u32,
    pub seed: RandomSeed,
    pub coords: Vec<Vec<f32>>,
}

impl ProjectedUpdate {
    pub fn total_coords(&self) -> usize {
        self.coords.iter().map(Vec::len).sum()
    }

    /// Transmitted numbers: every coordinate plus the seed.
    pub fn numeric_units(&self) -> u64 {
        self.total_coords() as u64 + 1
    }

    fn check_against(&self, partition: &BlockPartition) -> Result<()> {
        if self.version != SEED_DERIVATION_VERSION {
            return Err(FerretError::Protocol(format!(
                "unknown seed derivation version {}",
                self.version
            )));
        }
        if self.partition_id != partition.id() {
            return Err(FerretError::Protocol(format!(
                "partition id {:#010x} does not match {:#010x}",
                self.partition_id,
                partition.id()
            )));
        }
        if self.coords.len() != partition.num_blocks() {
            return Err(FerretError::Shape {
                expected: partition.num_blocks(),
                actual: self.coords.len(),
            });
        }
        for (c, &k) in self.coords.iter().zip(partition.block_budgets()) {
            if c.len() != k {
                return Err(FerretError::Shape {
                    expected: k,
                    actual: c.len(),
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn dot_basis(stats: &TruncGaussStats, key: u64, slice: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (i, &x) in slice.iter().enumerate() {
        acc += stats.entry(key, i as u64) as f64 * x;
    }
    acc
}

#[inline]
fn coordinate(stats: &TruncGaussStats, budget: usize, key: u64, slice: &[f64]) -> f32 {
    (dot_basis(stats, key, slice) / (stats.rho * budget as f64)) as f32
}

/// Projects `update` to `(ρ_l K_l)⁻¹ V_lᵀ Δ_l` for every block.
pub fn project(
    update: &[f64],
    partition: &BlockPartition,
    seed: RandomSeed,
) -> Result<ProjectedUpdate> {
    partition.check_len(update.len())?;
    let coords = (0..partition.num_blocks())
        .map(|l| {
            let slice = &update[partition.block_range(l)];
            let stats = &partition.stats[l];
            let budget = partition.block_budgets[l];
            (0..budget as u32)
                .map(|k| coordinate(stats, budget, basis_key(seed, l as u32, k), slice))
                .collect()
        })
        .collect();
    Ok(ProjectedUpdate {
        version: SEED_DERIVATION_VERSION,
        partition_id: partition.id(),
        seed,
        coords,
    })
}

/// [`project`] with coordinates computed on the rayon pool. Bit-identical to
/// the serial version.
pub fn project_par(
    update: &[f64],
    partition: &BlockPartition,
    seed: RandomSeed,
) -> Result<ProjectedUpdate> {
    partition.check_len(update.len())?;
    let coords = (0..partition.num_blocks())
        .map(|l| {
            let slice = &update[partition.block_range(l)];
            let stats = &partition.stats[l];
            let budget = partition.block_budgets[l];
            (0..budget as u32)
                .into_par_iter()
                .map(|k| coordinate(stats, budget, basis_key(seed, l as u32, k), slice))
                .collect()
        })
        .collect();
    Ok(ProjectedUpdate {
        version: SEED_DERIVATION_VERSION,
        partition_id: partition.id(),
        seed,
        coords,
    })
}

#[inline]
fn accumulate_block(
    stats: &TruncGaussStats,
    seed: RandomSeed,
    block: u32,
    coords: &[f32],
    offset: u64,
    out: &mut [f64],
) {
    // Basis-index ascending, so every element sees the same summation order.
    for (k, &g) in coords.iter().enumerate() {
        let key = basis_key(seed, block, k as u32);
        let g = g as f64;
        for (i, o) in out.iter_mut().enumerate() {
            *o += g * stats.entry(key, offset + i as u64) as f64;
        }
    }
}

/// Rebuilds `Δ̃_l = Σ_k γ_{l,k} v_{l,k}` for every block.
pub fn reconstruct(proj: &ProjectedUpdate, partition: &BlockPartition) -> Result<Vec<f64>> {
    proj.check_against(partition)?;
    let mut out = vec![0.0f64; partition.dim()];
    for l in 0..partition.num_blocks() {
        let range = partition.block_range(l);
        accumulate_block(
            &partition.stats[l],
            proj.seed,
            l as u32,
            &proj.coords[l],
            0,
            &mut out[range],
        );
    }
    Ok(out)
}

const PAR_SPAN: usize = 4096;

/// [`reconstruct`] split over element ranges on the rayon pool.
/// Bit-identical to the serial version.
pub fn reconstruct_par(proj: &ProjectedUpdate, partition: &BlockPartition) -> Result<Vec<f64>> {
    proj.check_against(partition)?;
    let mut out = vec![0.0f64; partition.dim()];
    for l in 0..partition.num_blocks() {
        let range = partition.block_range(l);
        let stats = &partition.stats[l];
        let coords = &proj.coords[l];
        out[range]
            .par_chunks_mut(PAR_SPAN)
            .enumerate()
            .for_each(|(c, span)| {
                accumulate_block(
                    stats,
                    proj.seed,
                    l as u32,
                    coords,
                    (c * PAR_SPAN) as u64,
                    span,
                )
            });
    }
    Ok(out)
}

/// `reconstruct(project(update))` generating each basis vector once.
///
/// Holds one basis vector of the largest block at a time. Bit-identical to
/// the two-step form.
pub fn project_reconstruct(
    update: &[f64],
    partition: &BlockPartition,
    seed: RandomSeed,
) -> Result<Vec<f64>> {
    partition.check_len(update.len())?;
    let mut out = vec![0.0f64; partition.dim()];
    let max_dim = partition.block_dims.iter().copied().max().unwrap_or(0);
    let mut buf = vec![0.0f32; max_dim];
    for l in 0..partition.num_blocks() {
        let range = partition.block_range(l);
        let slice = &update[range.clone()];
        let dst = &mut out[range];
        let stats = &partition.stats[l];
        let budget = partition.block_budgets[l];
        let basis = &mut buf[..slice.len()];
        for k in 0..budget as u32 {
            stats.fill(basis_key(seed, l as u32, k), 0, basis);
            let mut dot = 0.0f64;
            for (&v, &x) in basis.iter().zip(slice) {
                dot += v as f64 * x;
            }
            let g = (dot / (stats.rho * budget as f64)) as f32 as f64;
            for (o, &v) in dst.iter_mut().zip(basis.iter()) {
                *o += g * v as f64;
            }
        }
    }
    Ok(out)
}

/// Least-squares coordinates `(VᵀV)⁻¹VᵀΔ` per block, materializing `V`.
///
/// Only meant for small blocks; it is the exact solution the streaming
/// projection approximates.
pub fn exact_project(
    update: &[f64],
    partition: &BlockPartition,
    seed: RandomSeed,
) -> Result<ProjectedUpdate> {
    partition.check_len(update.len())?;
    let mut coords = Vec::with_capacity(partition.num_blocks());
    for l in 0..partition.num_blocks() {
        let range = partition.block_range(l);
        let v = basis_matrix(partition, seed, l);
        let delta = DVector::from_column_slice(&update[range.clone()]);
        let gram = v.transpose() * &v;
        let rhs = v.transpose() * delta;
        let chol = gram.cholesky().ok_or_else(|| {
            FerretError::numeric(range.start, format!("singular VᵀV in block {l}"))
        })?;
        let y = chol.solve(&rhs);
        coords.push(y.iter().map(|&c| c as f32).collect());
    }
    Ok(ProjectedUpdate {
        version: SEED_DERIVATION_VERSION,
        partition_id: partition.id(),
        seed,
        coords,
    })
}

/// `d_l × K_l` basis matrix of one block in 64-bit.
pub fn basis_matrix(partition: &BlockPartition, seed: RandomSeed, block: usize) -> DMatrix<f64> {
    let d = partition.block_dims[block];
    let k = partition.block_budgets[block];
    let stats = &partition.stats[block];
    let mut m = DMatrix::zeros(d, k);
    let mut buf = vec![0.0f32; d];
    for j in 0..k {
        stats.fill(basis_key(seed, block as u32, j as u32), 0, &mut buf);
        for i in 0..d {
            m[(i, j)] = buf[i] as f64;
        }
    }
    m
}

/// Multiply count of block-wise projection, `Σ d_l K_l`.
pub fn block_cost(partition: &BlockPartition) -> u64 {
    partition
        .block_dims
        .iter()
        .zip(&partition.block_budgets)
        .map(|(&d, &k)| d as u64 * k as u64)
        .sum()
}

/// Budgets `K_l ∝ √(‖Δ_l‖/ρ_l)`, at least 1 and at most `d_l` per block,
/// summing to `total`.
pub fn allocate_budgets(
    block_norms: &[f64],
    stats: &[TruncGaussStats],
    total: usize,
) -> Result<Vec<usize>> {
    if block_norms.len() != stats.len() {
        return Err(FerretError::Shape {
            expected: stats.len(),
            actual: block_norms.len(),
        });
    }
    if let Some(i) = block_norms.iter().position(|n| !n.is_finite() || *n < 0.0) {
        return Err(FerretError::numeric(i, "block norm must be finite and >= 0"));
    }
    let weights: Vec<f64> = block_norms
        .iter()
        .zip(stats)
        .map(|(&n, s)| (n / s.rho).sqrt())
        .collect();
    let caps: Vec<usize> = stats.iter().map(|s| s.dim as usize).collect();
    apportion(&weights, &caps, total)
}

/// Budgets `K_l ∝ ‖Δ_l‖` (the linear rule), same floor and cap handling.
pub fn allocate_budgets_linear(
    block_norms: &[f64],
    block_dims: &[usize],
    total: usize,
) -> Result<Vec<usize>> {
    if block_norms.len() != block_dims.len() {
        return Err(FerretError::Shape {
            expected: block_dims.len(),
            actual: block_norms.len(),
        });
    }
    apportion(block_norms, block_dims, total)
}

/// Even split of `total` over the blocks, capped at each `d_l`.
pub fn uniform_budgets(block_dims: &[usize], total: usize) -> Result<Vec<usize>> {
    apportion(&vec![1.0; block_dims.len()], block_dims, total)
}

/// Integer apportionment of `total` proportional to `weights` with a floor
/// of one per block and a cap of `caps[l]`, rounded by largest remainder
/// (ties to the lower block index). All-zero weights split evenly.
pub fn apportion(weights: &[f64], caps: &[usize], total: usize) -> Result<Vec<usize>> {
    let n = weights.len();
    let capacity: usize = caps.iter().sum();
    if n == 0 || total < n || total > capacity || caps.contains(&0) {
        return Err(FerretError::InfeasibleBudget {
            total,
            blocks: n,
            capacity,
        });
    }
    let weights: Vec<f64> = if weights.iter().all(|&w| w <= 0.0) {
        vec![1.0; n]
    } else {
        weights.iter().map(|&w| w.max(0.0)).collect()
    };

    // Zero-weight blocks keep the floor unless the weighted blocks saturate.
    let saturated: usize = (0..n).map(|l| if weights[l] > 0.0 { caps[l] } else { 1 }).sum();
    if saturated < total {
        let spare: Vec<f64> = weights.iter().map(|&w| if w > 0.0 { 0.0 } else { 1.0 }).collect();
        let zero_caps: Vec<usize> = (0..n).filter(|&l| spare[l] > 0.0).map(|l| caps[l]).collect();
        let placed: usize = (0..n).filter(|&l| spare[l] == 0.0).map(|l| caps[l]).sum();
        let mut rest = apportion(&vec![1.0; zero_caps.len()], &zero_caps, total - placed)?.into_iter();
        return Ok((0..n)
            .map(|l| if spare[l] > 0.0 { rest.next().unwrap() } else { caps[l] })
            .collect());
    }

    // Water level λ with Σ clamp(λ w_l, 1, cap_l) = total.
    let filled = |lambda: f64| -> Vec<f64> {
        (0..n)
            .map(|l| (lambda * weights[l]).clamp(1.0, caps[l] as f64))
            .collect()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while filled(hi).iter().sum::<f64>() < total as f64 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if filled(mid).iter().sum::<f64>() < total as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let shares = filled(hi);

    // Largest remainder, ties to the lower block index.
    let mut k: Vec<usize> = shares.iter().map(|s| (s.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(k.iter().sum());
    while left > 0 {
        for &l in &order {
            if left > 0 && k[l] < caps[l] {
                k[l] += 1;
                left -= 1;
            }
        }
    }
    Ok(k)
}

/// Cosine similarity of two vectors (0 when either is zero).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// `‖a - b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    (num / den).sqrt()
}
