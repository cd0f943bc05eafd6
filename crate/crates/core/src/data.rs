//! Datasets: synthetic generators, CSV and binary files, and splitting
//! across clients.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic "FRDS" | version u8 = 1 | reserved u8 | reserved u16
//! examples u64 | input_dim u32 | classes u32 (0 = regression)
//! examples × (input_dim × f32 feature, f32 target)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FerretError, Result};
use crate::models::Example;
use crate::rand_basis::RandomSeed;

pub const BINARY_MAGIC: [u8; 4] = *b"FRDS";
pub const BINARY_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    /// Number of classes, 0 for a regression target.
    pub classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Splits off the last `n` examples.
    pub fn split_tail(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n >= self.examples.len() {
            return Err(FerretError::Config(format!(
                "cannot hold out {n} of {} examples",
                self.examples.len()
            )));
        }
        let tail = self.examples.split_off(self.examples.len() - n);
        let test = Dataset {
            input_dim: self.input_dim,
            classes: self.classes,
            examples: tail,
        };
        Ok((self, test))
    }
}

fn rng(seed: RandomSeed) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.0)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `y = w*·x + b* + noise·ξ` with `x, ξ ~ N(0, I)` and a teacher
/// `w* ~ N(0, I/input_dim)`.
pub fn synthetic_regression(n: usize, input_dim: usize, noise: f64, seed: RandomSeed) -> Dataset {
    let mut rng = rng(seed);
    let scale = 1.0 / (input_dim as f64).sqrt();
    let teacher: Vec<f64> = gaussian_vec(&mut rng, input_dim)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let bias = rng.sample::<f64, _>(StandardNormal);
    let examples = (0..n)
        .map(|_| {
            let features = gaussian_vec(&mut rng, input_dim);
            let clean: f64 = bias + features.iter().zip(&teacher).map(|(a, b)| a * b).sum::<f64>();
            let target = clean + noise * rng.sample::<f64, _>(StandardNormal);
            Example { features, target }
        })
        .collect();
    Dataset {
        input_dim,
        classes: 0,
        examples,
    }
}

/// Gaussian class clusters: label uniform over `classes`, features
/// `μ_label + ξ` with centers `μ_c ~ N(0, separation² I)`.
pub fn synthetic_classification(
    n: usize,
    input_dim: usize,
    classes: usize,
    separation: f64,
    seed: RandomSeed,
) -> Dataset {
    let mut rng = rng(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            gaussian_vec(&mut rng, input_dim)
                .into_iter()
                .map(|v| v * separation)
                .collect()
        })
        .collect();
    let examples = (0..n)
        .map(|_| {
            let label = rng.random_range(0..classes);
            let features = centers[label]
                .iter()
                .map(|&c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            Example {
                features,
                target: label as f64,
            }
        })
        .collect();
    Dataset {
        input_dim,
        classes,
        examples,
    }
}

fn parse_row(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record.iter().map(|f| f.trim().parse::<f64>().ok()).collect()
}

/// Reads `features…, target` rows. A first row that does not parse as
/// numbers is taken as a header. `classes` is 0 for regression.
pub fn read_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut examples = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let Some(row) = parse_row(&record) else {
            if line == 0 {
                continue;
            }
            return Err(FerretError::Config(format!(
                "{}: line {}: non-numeric field",
                path.display(),
                line + 1
            )));
        };
        if row.len() < 2 {
            return Err(FerretError::Config(format!(
                "{}: line {}: need at least one feature and a target",
                path.display(),
                line + 1
            )));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(FerretError::Shape {
                    expected: w,
                    actual: row.len(),
                })
            }
            _ => {}
        }
        let (features, target) = row.split_at(row.len() - 1);
        examples.push(Example {
            features: features.to_vec(),
            target: target[0],
        });
    }
    let input_dim = width.map(|w| w - 1).ok_or_else(|| {
        FerretError::Config(format!("{}: no data rows", path.display()))
    })?;
    Ok(Dataset {
        input_dim,
        classes,
        examples,
    })
}

/// Writes a header `x0,…,x{n-1},target` and one row per example.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.input_dim).map(|i| format!("x{i}")).collect();
    header.push("target".into());
    w.write_record(&header)?;
    for ex in &data.examples {
        let mut row: Vec<String> = ex.features.iter().map(|v| v.to_string()).collect();
        row.push(ex.target.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&BINARY_MAGIC)?;
    w.write_all(&[BINARY_VERSION, 0, 0, 0])?;
    w.write_all(&(data.examples.len() as u64).to_le_bytes())?;
    w.write_all(&(data.input_dim as u32).to_le_bytes())?;
    w.write_all(&(data.classes as u32).to_le_bytes())?;
    for ex in &data.examples {
        for &v in &ex.features {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&(ex.target as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 24];
    r.read_exact(&mut head)?;
    if head[..4] != BINARY_MAGIC {
        return Err(FerretError::Protocol(format!("{}: bad magic", path.display())));
    }
    if head[4] != BINARY_VERSION {
        return Err(FerretError::Protocol(format!(
            "{}: unsupported version {}",
            path.display(),
            head[4]
        )));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let input_dim = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(head[20..24].try_into().unwrap()) as usize;
    let mut row = vec![0u8; 4 * (input_dim + 1)];
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut row)?;
        let vals: Vec<f64> = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        examples.push(Example {
            features: vals[..input_dim].to_vec(),
            target: vals[input_dim],
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(FerretError::Protocol(format!("{}: trailing bytes", path.display())));
    }
    Ok(Dataset {
        input_dim,
        classes,
        examples,
    })
}

/// How the training set is spread over clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionPolicy {
    /// Uniform random split into near-equal shards.
    #[default]
    Iid,
    /// Per-class client proportions from a symmetric Dirichlet(alpha).
    LabelSkew { alpha: f64 },
    /// Every client holds the whole training set.
    Replicate,
}

impl std::fmt::Display for PartitionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionPolicy::Iid => write!(f, "iid"),
            PartitionPolicy::LabelSkew { alpha } => write!(f, "label-skew({alpha})"),
            PartitionPolicy::Replicate => write!(f, "replicate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub examples: Vec<Example>,
    pub skew_label: String,
}

const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Splits `full` over `n` clients. Deterministic in `seed`; every client
/// gets at least one example.
pub fn partition_data(
    full: &[Example],
    n: usize,
    policy: PartitionPolicy,
    seed: RandomSeed,
) -> Result<Vec<ClientDataset>> {
    if n == 0 {
        return Err(FerretError::Partition("need at least one client".into()));
    }
    if full.len() < n {
        return Err(FerretError::Partition(format!(
            "{} examples cannot cover {n} clients",
            full.len()
        )));
    }
    let label = policy.to_string();
    let wrap = |shards: Vec<Vec<usize>>| {
        shards
            .into_iter()
            .enumerate()
            .map(|(client_id, idx)| ClientDataset {
                client_id,
                examples: idx.into_iter().map(|i| full[i].clone()).collect(),
                skew_label: label.clone(),
            })
            .collect()
    };
    let mut rng = rng(seed);
    match policy {
        PartitionPolicy::Replicate => Ok(wrap(vec![(0..full.len()).collect(); n])),
        PartitionPolicy::Iid => {
            let mut idx: Vec<usize> = (0..full.len()).collect();
            idx.shuffle(&mut rng);
            let base = full.len() / n;
            let extra = full.len() % n;
            let mut shards = Vec::with_capacity(n);
            let mut start = 0;
            for c in 0..n {
                let len = base + usize::from(c < extra);
                let mut shard = idx[start..start + len].to_vec();
                shard.sort_unstable();
                shards.push(shard);
                start += len;
            }
            Ok(wrap(shards))
        }
        PartitionPolicy::LabelSkew { alpha } => {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(FerretError::Partition(format!("alpha must be > 0, got {alpha}")));
            }
            let mut by_class: Vec<Vec<usize>> = Vec::new();
            for (i, ex) in full.iter().enumerate() {
                let t = ex.target;
                if t < 0.0 || t.fract() != 0.0 {
                    return Err(FerretError::Partition(format!(
                        "label skew needs class targets, found {t}"
                    )));
                }
                let c = t as usize;
                if by_class.len() <= c {
                    by_class.resize(c + 1, Vec::new());
                }
                by_class[c].push(i);
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| FerretError::Partition(e.to_string()))?;
            for _ in 0..MAX_PARTITION_ATTEMPTS {
                let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
                for members in &by_class {
                    let mut members = members.clone();
                    members.shuffle(&mut rng);
                    let p = dirichlet(&gamma, n, &mut rng);
                    let mut acc = 0.0;
                    let mut start = 0;
                    for (c, &pc) in p.iter().enumerate() {
                        acc += pc;
                        let end = if c + 1 == n {
                            members.len()
                        } else {
                            ((acc * members.len() as f64).round() as usize).min(members.len())
                        };
                        let end = end.max(start);
                        shards[c].extend_from_slice(&members[start..end]);
                        start = end;
                    }
                }
                if shards.iter().all(|s| !s.is_empty()) {
                    for s in shards.iter_mut() {
                        s.sort_unstable();
                    }
                    return Ok(wrap(shards));
                }
            }
            Err(FerretError::Partition(format!(
                "no label-skew draw left every client non-empty after {MAX_PARTITION_ATTEMPTS} attempts"
            )))
        }
    }
}

/// Symmetric Dirichlet draw by normalized Gamma variates; re-draws the
/// (rare) all-underflow case.
fn dirichlet(gamma: &Gamma<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            return g.into_iter().map(|v| v / s).collect();
        }
    }
}
