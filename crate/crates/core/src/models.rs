//! Small differentiable models with hand-written gradients, and the local
//! first-order update loop run by every client.

use std::borrow::Borrow;
use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{FerretError, Result};
use crate::rand_basis::{derive_subseed, mix64, stream_index, stream_u64, RandomSeed};
use crate::special::{erf, erf_inv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    #[serde(default = "default_init_seed")]
    pub init_seed: RandomSeed,
}

fn default_output_dim() -> usize {
    1
}

fn default_init_seed() -> RandomSeed {
    RandomSeed(0)
}

/// A named, contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Inputs feeding each output of this group; 0 for biases.
    pub fan_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub groups: Vec<ParamGroup>,
}

impl ParamVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .map(|g| &self.values[g.offset..g.offset + g.len])
    }

    /// Block sizes following group boundaries, splitting any group larger
    /// than `max_block_dim` into near-equal pieces.
    pub fn block_dims(&self, max_block_dim: Option<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        for g in &self.groups {
            match max_block_dim {
                Some(m) if m > 0 && g.len > m => {
                    let pieces = g.len.div_ceil(m);
                    let base = g.len / pieces;
                    let extra = g.len % pieces;
                    out.extend((0..pieces).map(|i| base + usize::from(i < extra)));
                }
                _ => out.push(g.len),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    /// Real target for regression, class index for classification.
    pub target: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FerretError::Config("model input_dim must be >= 1".into()));
        }
        match self.kind {
            ModelKind::LinearRegression if self.output_dim != 1 => Err(FerretError::Config(
                "linear-regression has output_dim = 1".into(),
            )),
            ModelKind::LogisticRegression if self.output_dim < 2 => Err(FerretError::Config(
                "logistic-regression needs output_dim >= 2 classes".into(),
            )),
            ModelKind::Mlp if self.hidden_dim == 0 || self.output_dim == 0 => Err(
                FerretError::Config("mlp needs hidden_dim >= 1 and output_dim >= 1".into()),
            ),
            _ => Ok(()),
        }
    }

    /// True when the loss is cross-entropy over `output_dim` classes.
    pub fn is_classifier(&self) -> bool {
        match self.kind {
            ModelKind::LinearRegression => false,
            ModelKind::LogisticRegression => true,
            ModelKind::Mlp => self.output_dim >= 2,
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let shapes: Vec<(&str, usize, usize)> = match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                vec![("weight", o * i, i), ("bias", o, 0)]
            }
            ModelKind::Mlp => vec![
                ("hidden.weight", h * i, i),
                ("hidden.bias", h, 0),
                ("output.weight", o * h, h),
                ("output.bias", o, 0),
            ],
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, len, fan_in)| {
                let g = ParamGroup {
                    name: name.to_string(),
                    offset,
                    len,
                    fan_in,
                };
                offset += len;
                g
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.groups().iter().map(|g| g.len).sum()
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.dim()],
            groups: self.groups(),
        }
    }

    /// Weights from N(0, 1) truncated to [-2, 2] scaled by `1/√fan_in`,
    /// biases zero. Deterministic in `init_seed`.
    pub fn init(&self) -> ParamVector {
        let mut p = self.zeros();
        let mass = erf(2.0 / SQRT_2);
        for (gi, g) in p.groups.iter().enumerate() {
            if g.fan_in == 0 {
                continue;
            }
            let key = derive_subseed(self.init_seed, 0, 0, gi as u64, 0).0;
            let scale = 1.0 / (g.fan_in as f64).sqrt();
            for j in 0..g.len {
                let m = (stream_u64(key, j as u64) >> 11) as i64;
                let s = (2 * m + 1 - (1i64 << 53)) as f64 / (1u64 << 53) as f64;
                p.values[g.offset + j] = scale * SQRT_2 * erf_inv(s * mass);
            }
        }
        p
    }

    fn check<B: Borrow<Example>>(&self, w: &[f64], batch: &[B]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(FerretError::Shape {
                expected: self.dim(),
                actual: w.len(),
            });
        }
        if batch.is_empty() {
            return Err(FerretError::InvalidDimension("empty batch".into()));
        }
        for (n, ex) in batch.iter().enumerate() {
            let ex = ex.borrow();
            if ex.features.len() != self.input_dim {
                return Err(FerretError::Shape {
                    expected: self.input_dim,
                    actual: ex.features.len(),
                });
            }
            if !ex.target.is_finite() || ex.features.iter().any(|x| !x.is_finite()) {
                return Err(FerretError::numeric(n, "non-finite example"));
            }
            if self.is_classifier() {
                let t = ex.target;
                if t < 0.0 || t.fract() != 0.0 || t as usize >= self.output_dim {
                    return Err(FerretError::numeric(n, format!("class {t} out of range")));
                }
            }
        }
        Ok(())
    }

    /// Loss of one example; adds its gradient into `grad` when given.
    fn example(&self, w: &[f64], ex: &Example, grad: Option<&mut [f64]>, scratch: &mut Scratch) -> f64 {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let x = &ex.features;
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                let (wt, b) = w.split_at(o * i);
                scratch.out.clear();
                scratch
                    .out
                    .extend((0..o).map(|r| b[r] + dot(&wt[r * i..(r + 1) * i], x)));
                let loss = self.head(ex.target, scratch);
                if let Some(grad) = grad {
                    let (gw, gb) = grad.split_at_mut(o * i);
                    for r in 0..o {
                        let e = scratch.dout[r];
                        gb[r] += e;
                        axpy(e, x, &mut gw[r * i..(r + 1) * i]);
                    }
                }
                loss
            }
            ModelKind::Mlp => {
                let (w1, rest) = w.split_at(h * i);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(o * h);
                scratch.hidden.clear();
                scratch
                    .hidden
                    .extend((0..h).map(|r| (b1[r] + dot(&w1[r * i..(r + 1) * i], x)).tanh()));
                scratch.out.clear();
                let hidden = &scratch.hidden;
                scratch
                    .out
                    .extend((0..o).map(|r| b2[r] + dot(&w2[r * h..(r + 1) * h], hidden)));
                let loss = self.head(ex.target, scratch);
                if let Some(grad) = grad {
                    let (g1, rest) = grad.split_at_mut(h * i);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (g2, gb2) = rest.split_at_mut(o * h);
                    scratch.dhidden.clear();
                    scratch.dhidden.resize(h, 0.0);
                    for r in 0..o {
                        let e = scratch.dout[r];
                        gb2[r] += e;
                        axpy(e, &scratch.hidden, &mut g2[r * h..(r + 1) * h]);
                        axpy(e, &w2[r * h..(r + 1) * h], &mut scratch.dhidden);
                    }
                    for r in 0..h {
                        let a = scratch.hidden[r];
                        let e = scratch.dhidden[r] * (1.0 - a * a);
                        gb1[r] += e;
                        axpy(e, x, &mut g1[r * i..(r + 1) * i]);
                    }
                }
                loss
            }
        }
    }

    /// Loss from the output layer in `scratch.out`; leaves dℓ/dout in
    /// `scratch.dout`.
    fn head(&self, target: f64, scratch: &mut Scratch) -> f64 {
        scratch.dout.clear();
        if self.is_classifier() {
            let max = scratch.out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scratch.out.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            let t = target as usize;
            scratch.dout.extend(
                scratch
                    .out
                    .iter()
                    .enumerate()
                    .map(|(r, &v)| (v - log_z).exp() - f64::from(r == t)),
            );
            log_z - scratch.out[t]
        } else {
            let e = scratch.out[0] - target;
            scratch.dout.push(e);
            scratch.dout.extend(scratch.out[1..].iter().map(|_| 0.0));
            0.5 * e * e
        }
    }

    /// Mean per-example loss: `½(ŷ - y)²` for regression, cross-entropy for
    /// classification.
    pub fn loss<B: Borrow<Example>>(&self, w: &[f64], batch: &[B]) -> Result<f64> {
        self.check(w, batch)?;
        let mut scratch = Scratch::default();
        let total: f64 = batch
            .iter()
            .map(|ex| self.example(w, ex.borrow(), None, &mut scratch))
            .sum();
        finite_loss(total / batch.len() as f64)
    }

    /// Analytic gradient of [`ModelSpec::loss`].
    pub fn grad<B: Borrow<Example>>(&self, w: &[f64], batch: &[B]) -> Result<Vec<f64>> {
        self.loss_and_grad(w, batch).map(|(_, g)| g)
    }

    pub fn loss_and_grad<B: Borrow<Example>>(
        &self,
        w: &[f64],
        batch: &[B],
    ) -> Result<(f64, Vec<f64>)> {
        self.check(w, batch)?;
        let mut scratch = Scratch::default();
        let mut g = vec![0.0; w.len()];
        let mut total = 0.0;
        for ex in batch {
            total += self.example(w, ex.borrow(), Some(&mut g), &mut scratch);
        }
        let inv = 1.0 / batch.len() as f64;
        for v in g.iter_mut() {
            *v *= inv;
        }
        Ok((finite_loss(total * inv)?, g))
    }

    /// Accuracy for classifiers, mean absolute error for regression.
    pub fn metric<B: Borrow<Example>>(&self, w: &[f64], batch: &[B]) -> Result<f64> {
        self.check(w, batch)?;
        let mut scratch = Scratch::default();
        let mut acc = 0.0;
        for ex in batch {
            let ex = ex.borrow();
            self.example(w, ex, None, &mut scratch);
            acc += if self.is_classifier() {
                let best = scratch
                    .out
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (r, &v)| if v > b.1 { (r, v) } else { b })
                    .0;
                f64::from(best == ex.target as usize)
            } else {
                (scratch.out[0] - ex.target).abs()
            };
        }
        Ok(acc / batch.len() as f64)
    }
}

fn finite_loss(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FerretError::numeric(0, format!("non-finite loss {v}")))
    }
}

#[derive(Default)]
struct Scratch {
    hidden: Vec<f64>,
    dhidden: Vec<f64>,
    out: Vec<f64>,
    dout: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Local step rule. State is reset at the start of every local run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    Momentum {
        #[serde(default = "default_beta1")]
        beta: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub iters: usize,
    pub lr: f64,
    /// Examples per micro-batch, sampled with replacement; 0 means the whole
    /// dataset in order.
    pub batch_size: usize,
    /// Micro-batch gradients averaged per step.
    pub accum: usize,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: Vec<f64>,
    /// `w_start - w_end`.
    pub delta: Vec<f64>,
    /// Mini-batch gradient evaluations performed.
    pub grad_evals: u64,
    /// Loss of the first micro-batch of the last step, before the step.
    pub last_loss: f64,
}

/// Draws micro-batch `(step, micro)` for a local run keyed by `rng`.
pub fn sample_batch(
    data: &[Example],
    batch_size: usize,
    rng: RandomSeed,
    step: usize,
    micro: usize,
) -> Vec<&Example> {
    if batch_size == 0 {
        return data.iter().collect();
    }
    let key = mix64(rng.0 ^ mix64(((step as u64) << 32) | micro as u64));
    (0..batch_size as u64)
        .map(|b| &data[stream_index(key, b, data.len())])
        .collect()
}

/// `T` local steps `w ← w - η ĝ` (or the configured adaptive rule) on
/// micro-batches drawn from `data`.
pub fn local_sgd(
    model: &ModelSpec,
    w: &[f64],
    data: &[Example],
    cfg: &LocalConfig,
    rng: RandomSeed,
) -> Result<LocalOutcome> {
    if cfg.iters == 0 || cfg.accum == 0 {
        return Err(FerretError::Config("local iters and accum must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(FerretError::InvalidDimension("client dataset is empty".into()));
    }
    let d = w.len();
    let mut cur = w.to_vec();
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    let mut last_loss = 0.0;
    for t in 0..cfg.iters {
        let mut g = vec![0.0; d];
        for j in 0..cfg.accum {
            let batch = sample_batch(data, cfg.batch_size, rng, t, j);
            let (loss, gj) = model
                .loss_and_grad(&cur, &batch)
                .map_err(|e| divergence(e, t))?;
            if j == 0 {
                last_loss = loss;
            }
            for (a, b) in g.iter_mut().zip(&gj) {
                *a += b;
            }
        }
        if cfg.accum > 1 {
            let inv = 1.0 / cfg.accum as f64;
            for a in g.iter_mut() {
                *a *= inv;
            }
        }
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (x, gi) in cur.iter_mut().zip(&g) {
                    *x -= cfg.lr * gi;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((x, gi), m) in cur.iter_mut().zip(&g).zip(m1.iter_mut()) {
                    *m = beta * *m + gi;
                    *x -= cfg.lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let step = (t + 1) as i32;
                let c1 = 1.0 - beta1.powi(step);
                let c2 = 1.0 - beta2.powi(step);
                for i in 0..d {
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
                    cur[i] -= cfg.lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
                }
            }
        }
        if cur.iter().any(|x| !x.is_finite()) {
            return Err(FerretError::Diverged { iteration: t });
        }
    }
    let delta = w.iter().zip(&cur).map(|(a, b)| a - b).collect();
    Ok(LocalOutcome {
        params: cur,
        delta,
        grad_evals: (cfg.iters * cfg.accum) as u64,
        last_loss,
    })
}

fn divergence(e: FerretError, iteration: usize) -> FerretError {
    match e {
        FerretError::Numeric { .. } => FerretError::Diverged { iteration },
        other => other,
    }
}
