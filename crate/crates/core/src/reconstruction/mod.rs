//! Block-wise reconstruction: unit partitioning, the BN-driven L-P loss and
//! the two-phase weight optimization.

mod partition;
mod weights;

pub use partition::{partition_blocks, BlockUnit, GammaSource};
pub use weights::{reconstruct_unit_weights, LayerOutcome, UnitWeightReport, WeightConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::network::{forward, FoldedNet, Overrides};
use crate::tensor::Tensor;

/// `Σ|a - b|^P` per sample, averaged over the leading (batch) axis.
pub fn lp_loss(a: &Tensor, b: &Tensor, p: f64) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.shape().first().copied().unwrap_or(1).max(1);
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).abs().powf(p))
        .sum();
    Ok(sum / n as f64)
}

/// Gradient of [`lp_loss`] with respect to `a`; zero where `a == b`.
pub fn lp_loss_grad(a: &Tensor, b: &Tensor, p: f64) -> Result<Tensor> {
    check_pair(a, b)?;
    let n = a.shape().first().copied().unwrap_or(1).max(1) as f64;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            if d == 0.0 {
                0.0
            } else {
                (p * d.abs().powf(p - 1.0) * d.signum() / n) as f32
            }
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "lp_loss",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `1 + α·sigmoid(mean(γ) - β_shift)` kept to two decimals.
///
/// Rounding never leaves `(1, 1 + α]`: a value that would round above the
/// upper bound is truncated instead, and one that would round down to 1 is
/// lifted to 1.01. When `α < 0.01` no two-decimal value fits, so the raw
/// value is returned.
pub fn compute_p_value(gamma: &[f32], alpha: f64, beta_shift: f64) -> Result<f64> {
    if gamma.is_empty() {
        return Err(invalid("P-value needs at least one channel"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    let mean = gamma.iter().map(|&g| g as f64).sum::<f64>() / gamma.len() as f64;
    let z = mean - beta_shift;
    let sig = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        z.exp() / (1.0 + z.exp())
    };
    let raw = 1.0 + alpha * sig;
    let upper = 1.0 + alpha;
    if alpha < 0.01 {
        return Ok(raw.clamp(1.0 + f64::EPSILON, upper));
    }
    let cents = |v: f64| v * 100.0;
    let mut p = cents(raw).round() / 100.0;
    if p > upper + 1e-12 {
        p = (cents(raw) + 1e-9).floor() / 100.0;
    }
    if p <= 1.0 {
        p = 1.01;
    }
    Ok(p)
}

/// Adaptive-moment optimizer over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32, len: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn iterations(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= (self.lr as f64 * mh / (vh.sqrt() + self.eps)) as f32;
        }
    }
}

/// Minibatch indices from seeded, reshuffled epochs.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pool: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || pool < batch {
            return Err(invalid(format!("pool of {pool} cannot supply batches of {batch}")));
        }
        let mut s = BatchSampler {
            order: (0..pool).collect(),
            pos: 0,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Calibration-pool tensors a unit reads, and the float target it matches.
#[derive(Debug, Clone)]
pub struct UnitData {
    /// Values of external layers (already passed through the quantized prefix).
    pub externals: Vec<(usize, Tensor)>,
    /// Raw images, for the unit that owns the input layer.
    pub raw: Option<Tensor>,
    /// Float-model output of the unit's output layer.
    pub target: Tensor,
}

impl UnitData {
    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, rows: &[usize]) -> (Vec<(usize, Tensor)>, Option<Tensor>, Tensor) {
        (
            self.externals.iter().map(|(i, t)| (*i, t.gather_rows(rows))).collect(),
            self.raw.as_ref().map(|t| t.gather_rows(rows)),
            self.target.gather_rows(rows),
        )
    }

    pub fn chunk(&self, start: usize, end: usize) -> (Vec<(usize, Tensor)>, Option<Tensor>, Tensor) {
        (
            self.externals.iter().map(|(i, t)| (*i, t.slice_rows(start, end))).collect(),
            self.raw.as_ref().map(|t| t.slice_rows(start, end)),
            self.target.slice_rows(start, end),
        )
    }
}

pub const EVAL_CHUNK: usize = 256;

/// Unit output over the whole pool.
pub fn unit_output(net: &FoldedNet, unit: &BlockUnit, data: &UnitData, ov: Overrides<'_>) -> Result<Tensor> {
    let mut parts = Vec::new();
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let (ext, raw, _) = data.chunk(start, end);
        let mut tr = forward(net, &unit.layers, ext, raw, ov)?;
        parts.push(tr.take(unit.output));
        start = end;
    }
    Tensor::concat_rows(&parts)
}

/// [`lp_loss`] of the unit over the whole pool.
pub fn unit_loss(net: &FoldedNet, unit: &BlockUnit, data: &UnitData, ov: Overrides<'_>, p: f64) -> Result<f64> {
    let out = unit_output(net, unit, data, ov)?;
    lp_loss(&out, &data.target, p)
}
