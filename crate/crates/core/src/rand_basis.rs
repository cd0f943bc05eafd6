//! Shared randomness: seed derivation, a counter-based uniform stream and
//! truncated-normal random bases.
//!
//! Everything here is a pure function of its inputs. A basis entry is
//! addressed by `(seed, block, basis_index, position)` and can be produced
//! in any order on any thread; the values never depend on how many entries
//! were generated before. The constants below are part of the wire contract
//! (see `PROTOCOL.md`) and must not change.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{FerretError, Result};
use crate::special::{erf, erf_inv, normal_pdf};

/// Weyl increment of the uniform stream (splitmix64 gamma).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// First multiplier of the 64-bit finalizer.
pub const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
/// Second multiplier of the 64-bit finalizer.
pub const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;
/// Domain separator folded into every derived seed.
pub const DERIVE_DOMAIN: u64 = 0x6665_7272_6574_0001;
/// Per-field lane tags for `derive_subseed` (client, round, block, basis).
pub const DERIVE_LANES: [u64; 4] = [
    0x636C_6965_6E74_0000,
    0x726F_756E_6400_0000,
    0x626C_6F63_6B00_0000,
    0x6261_7369_7300_0000,
];
/// Version tag of the derivation scheme above.
pub const SEED_DERIVATION_VERSION: u8 = 1;

/// Below this dimension ρ is evaluated from the erf closed form, above it
/// from the cancellation-free power series of the same expression.
pub const RHO_SERIES_MIN_DIM: u64 = 17;

/// A 64-bit seed identifying a stream of shared randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RandomSeed(pub u64);

impl RandomSeed {
    pub const fn new(value: u64) -> Self {
        RandomSeed(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }
}

impl From<u64> for RandomSeed {
    fn from(v: u64) -> Self {
        RandomSeed(v)
    }
}

impl std::fmt::Display for RandomSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// splitmix64 finalizer. A bijection on u64.
#[inline(always)]
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Mixes `root` with four indices into a fresh seed.
///
/// Each field is absorbed as `h = mix64((h + GAMMA) ^ mix64(x ^ lane))`,
/// which is injective in `x` for a fixed prefix, so distinct tuples collide
/// only with probability ~2⁻⁶⁴. Field order matters.
pub const fn derive_subseed(
    root: RandomSeed,
    client: u64,
    round: u64,
    block: u64,
    basis_index: u64,
) -> RandomSeed {
    let fields = [client, round, block, basis_index];
    let mut h = mix64(root.0 ^ DERIVE_DOMAIN);
    let mut i = 0;
    while i < 4 {
        h = mix64(h.wrapping_add(GOLDEN_GAMMA) ^ mix64(fields[i] ^ DERIVE_LANES[i]));
        i += 1;
    }
    RandomSeed(h)
}

/// The `counter`-th 64-bit output of the stream keyed by `key`.
///
/// Identical to the `counter + 1`-th output of splitmix64 seeded with `key`.
#[inline(always)]
pub const fn stream_u64(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Uniform in the open interval (0, 1): `((x >> 11) + 0.5) · 2⁻⁵³`.
#[inline(always)]
pub fn stream_uniform(key: u64, counter: u64) -> f64 {
    ((stream_u64(key, counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Symmetric uniform in the open interval (-1, 1), exactly `2u - 1` for the
/// `u` of [`stream_uniform`].
#[inline(always)]
fn stream_signed_unit(key: u64, counter: u64) -> f64 {
    let m = (stream_u64(key, counter) >> 11) as i64;
    (2 * m + 1 - (1i64 << 53)) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, n)` by 128-bit multiply-shift.
#[inline]
pub fn stream_index(key: u64, counter: u64, n: usize) -> usize {
    ((stream_u64(key, counter) as u128 * n as u128) >> 64) as usize
}

/// Moments of N(0, 1) truncated to `[-1/√d, 1/√d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncGaussStats {
    pub dim: u64,
    /// Truncation bound `1/√dim`.
    pub bound: f64,
    /// Second moment of one entry, the ρ correction factor.
    pub rho: f64,
    /// Probability mass kept by the truncation, `erf(bound/√2)`.
    pub mass: f64,
    /// Largest f32 not exceeding `bound`.
    pub bound_f32: f32,
}

impl TruncGaussStats {
    pub fn new(dim: u64) -> Result<Self> {
        if dim == 0 {
            return Err(FerretError::InvalidDimension(
                "truncated normal basis needs dim >= 1".into(),
            ));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mass = erf(bound * FRAC_1_SQRT_2);
        let rho = if dim < RHO_SERIES_MIN_DIM {
            rho_closed_form(bound)
        } else {
            rho_series(bound)
        };
        let mut bound_f32 = bound as f32;
        if bound_f32 as f64 > bound {
            bound_f32 = f32::from_bits(bound_f32.to_bits() - 1);
        }
        Ok(TruncGaussStats {
            dim,
            bound,
            rho,
            mass,
            bound_f32,
        })
    }

    /// Maps a symmetric uniform `s ∈ (-1, 1)` to a truncated-normal draw.
    ///
    /// Equivalent to `Φ⁻¹(Φ(-a) + u·(Φ(a) - Φ(-a)))` with `s = 2u - 1`.
    #[inline(always)]
    pub fn transform(&self, s: f64) -> f32 {
        let v = SQRT_2 * erf_inv(s * self.mass);
        (v as f32).clamp(-self.bound_f32, self.bound_f32)
    }

    /// Entry `position` of the basis vector keyed by `key`.
    #[inline(always)]
    pub fn entry(&self, key: u64, position: u64) -> f32 {
        self.transform(stream_signed_unit(key, position))
    }

    /// Fills `out` with entries `offset..offset + out.len()` of basis `key`.
    #[inline]
    pub fn fill(&self, key: u64, offset: u64, out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.entry(key, offset + i as u64);
        }
    }
}

/// `1 - (2ψ(a)a) / (2Φ(a) - 1)` evaluated directly, with `2Φ(a)-1 = erf(a/√2)`.
fn rho_closed_form(a: f64) -> f64 {
    1.0 - 2.0 * normal_pdf(a) * a / erf(a * FRAC_1_SQRT_2)
}

/// Same quantity as a ratio of the moment series
/// `a² · Σ (-a²/2)ⁿ/n!/(2n+3) / Σ (-a²/2)ⁿ/n!/(2n+1)`.
fn rho_series(a: f64) -> f64 {
    let y = -0.5 * a * a;
    let mut term = 1.0f64;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for n in 0..40u32 {
        let t3 = term / (2 * n + 3) as f64;
        num += t3;
        den += term / (2 * n + 1) as f64;
        if t3.abs() < 1e-18 * num.abs() {
            break;
        }
        term *= y / (n + 1) as f64;
    }
    a * a * num / den
}

/// Second-moment statistics for a block of dimension `dim`.
pub fn trunc_gauss_stats(dim: u64) -> Result<TruncGaussStats> {
    TruncGaussStats::new(dim)
}

/// Stream key of basis vector `basis_index` in `block` under `seed`.
#[inline]
pub const fn basis_key(seed: RandomSeed, block: u32, basis_index: u32) -> u64 {
    derive_subseed(seed, 0, 0, block as u64, basis_index as u64).0
}

/// One materialized basis vector restricted to a block.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisChunk {
    pub seed: RandomSeed,
    pub block: u32,
    pub basis_index: u32,
    pub values: Vec<f32>,
}

impl BasisChunk {
    pub fn block_dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }
}

/// Generates basis vector `basis_index` of `block` (dimension `block_dim`).
pub fn sample_basis(
    seed: RandomSeed,
    block: u32,
    block_dim: usize,
    basis_index: u32,
) -> Result<BasisChunk> {
    let stats = TruncGaussStats::new(block_dim as u64)?;
    let mut values = vec![0.0f32; block_dim];
    stats.fill(basis_key(seed, block, basis_index), 0, &mut values);
    Ok(BasisChunk {
        seed,
        block,
        basis_index,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle for ρ: composite Simpson quadrature of the truncated moments.
    fn rho_quadrature(dim: u64) -> f64 {
        let a = 1.0 / (dim as f64).sqrt();
        let n = 2000;
        let h = 2.0 * a / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x = -a + h * i as f64;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let f = (-0.5 * x * x).exp();
            num += w * x * x * f;
            den += w * f;
        }
        num / den
    }

    #[test]
    fn subseed_is_stable() {
        let s = RandomSeed(42);
        assert_eq!(derive_subseed(s, 0, 0, 0, 0), derive_subseed(s, 0, 0, 0, 0));
        // Frozen value: changes here break cross-version reproducibility.
        assert_eq!(derive_subseed(s, 0, 0, 0, 0).0, FROZEN_SUBSEED_42);
    }

    const FROZEN_SUBSEED_42: u64 = 1_248_613_635_523_000_035;

    #[test]
    fn subseed_distinct_indices_and_order() {
        let s = RandomSeed(42);
        assert_ne!(derive_subseed(s, 0, 0, 0, 1), derive_subseed(s, 0, 0, 0, 2));
        assert_ne!(derive_subseed(s, 1, 2, 0, 0), derive_subseed(s, 2, 1, 0, 0));
        let mut seen = std::collections::HashSet::new();
        for c in 0..8 {
            for r in 0..8 {
                for b in 0..8 {
                    for k in 0..8 {
                        assert!(seen.insert(derive_subseed(s, c, r, b, k)));
                    }
                }
            }
        }
    }

    #[test]
    fn rho_dim_one_reference() {
        let st = trunc_gauss_stats(1).unwrap();
        // 1 - 2ψ(1)/(2Φ(1) - 1) with ψ(1), Φ(1) to 16 digits.
        let want = 1.0 - 2.0 * 0.241_970_724_519_143_37 / (2.0 * 0.841_344_746_068_542_9 - 1.0);
        assert!((st.rho - want).abs() < 1e-12);
        assert!((st.rho - 0.291_125_9).abs() < 1e-6);
        assert_eq!(st.bound, 1.0);
    }

    #[test]
    fn rho_matches_quadrature() {
        for &d in &[1u64, 2, 3, 10, 16, 17, 64, 1000, 100_000, 1_000_000_000] {
            let got = trunc_gauss_stats(d).unwrap().rho;
            let want = rho_quadrature(d);
            assert!(((got - want) / want).abs() < 1e-12, "d={d}: {got} vs {want}");
        }
    }

    #[test]
    fn rho_branches_agree_at_switch() {
        for d in 8..40u64 {
            let a = 1.0 / (d as f64).sqrt();
            let c = rho_closed_form(a);
            let s = rho_series(a);
            assert!(((c - s) / s).abs() < 1e-13, "d={d}");
        }
    }

    #[test]
    fn rho_large_dim_limit() {
        let st = trunc_gauss_stats(1_000_000).unwrap();
        assert!((st.rho * 1e6 - 1.0 / 3.0).abs() < 1e-3 / 3.0);
        for &d in &[1u64, 10, 1000, 1_000_000_000] {
            let r = trunc_gauss_stats(d).unwrap().rho;
            assert!(r > 0.0 && r < 1.0);
        }
    }

    #[test]
    fn rho_strictly_decreasing() {
        let mut prev = trunc_gauss_stats(1).unwrap().rho;
        for d in 2..=10_000u64 {
            let r = trunc_gauss_stats(d).unwrap().rho;
            assert!(r < prev, "d={d}");
            prev = r;
        }
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(matches!(
            trunc_gauss_stats(0),
            Err(FerretError::InvalidDimension(_))
        ));
        assert!(sample_basis(RandomSeed(1), 0, 0, 0).is_err());
    }

    #[test]
    fn chunk_entries_bounded_and_reproducible() {
        for &d in &[1usize, 2, 7, 64, 1000] {
            for k in 0..20 {
                let c = sample_basis(RandomSeed(9), 3, d, k).unwrap();
                let bound = 1.0 / (d as f64).sqrt();
                assert!(c.values.iter().all(|&v| (v as f64).abs() <= bound));
                assert!(c.norm() <= 1.0);
                assert_eq!(c, sample_basis(RandomSeed(9), 3, d, k).unwrap());
            }
        }
    }

    #[test]
    fn offset_fill_matches_full_fill() {
        let st = TruncGaussStats::new(100).unwrap();
        let mut full = vec![0.0; 100];
        st.fill(77, 0, &mut full);
        let mut tail = vec![0.0; 40];
        st.fill(77, 60, &mut tail);
        assert_eq!(&full[60..], &tail[..]);
    }

    #[test]
    fn inverse_cdf_recipe_matches_textbook_form() {
        // v = Φ⁻¹(Φ(-a) + u (Φ(a) - Φ(-a))) evaluated with the quantile fn.
        use crate::special::{normal_cdf, normal_quantile};
        let st = TruncGaussStats::new(4).unwrap();
        let a = st.bound;
        for c in 0..200u64 {
            let u = stream_uniform(5, c);
            let want = normal_quantile(normal_cdf(-a) + u * (normal_cdf(a) - normal_cdf(-a)));
            let got = st.entry(5, c) as f64;
            assert!((got - want).abs() < 1e-7, "c={c}: {got} vs {want}");
        }
    }

    #[test]
    fn moments_converge_to_rho() {
        let d = 64usize;
        let m = 10_000u32;
        let st = TruncGaussStats::new(d as u64).unwrap();
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for k in 0..m {
            let c = sample_basis(RandomSeed(2024), 0, d, k).unwrap();
            for &v in &c.values {
                s1 += v as f64;
                s2 += (v as f64).powi(2);
            }
        }
        let n = (d as f64) * m as f64;
        let mean = s1 / n;
        let second = s2 / n;
        // Entry std is √ρ, so 4 standard errors of the mean is 4√ρ/√n.
        assert!(mean.abs() < 4.0 * st.rho.sqrt() / n.sqrt(), "mean {mean}");
        assert!(((second - st.rho) / st.rho).abs() < 0.01, "second {second}");
    }

    #[test]
    fn off_diagonal_covariance_shrinks() {
        let d = 16usize;
        let m = 100_000u32;
        let st = TruncGaussStats::new(d as u64).unwrap();
        let mut cov = vec![0.0f64; d * d];
        let mut buf = vec![0.0f32; d];
        for k in 0..m {
            st.fill(basis_key(RandomSeed(3), 0, k), 0, &mut buf);
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += buf[i] as f64 * buf[j] as f64;
                }
            }
        }
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let c = cov[i * d + j] / m as f64;
                if i == j {
                    assert!(((c - st.rho) / st.rho).abs() < 0.02);
                } else {
                    worst = worst.max(c.abs());
                }
            }
        }
        // Scaled by ρ: the bound is stated for unit-variance entries.
        assert!(worst / st.rho < 5.0 / (m as f64).sqrt(), "worst {worst}");
    }
}
