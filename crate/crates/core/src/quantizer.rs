//! Uniform affine quantization, naive power-of-two conversion and
//! MSE-driven range initialisation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Smallest scale handed out by [`init_scale_mse`]; also an exact power of two.
pub const SCALE_FLOOR: f32 = 1.0 / 65536.0;

const MSE_GRID_POINTS: usize = 100;
const MSE_GRID_LO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerOutputChannel,
}

/// Both variants use codes in `[0, 2^b - 1]`; activations after ReLU usually
/// end up with a zero point of 0, weights anywhere in range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signedness {
    AsymmetricUnsigned,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleState {
    /// Real-valued scales before hardening.
    Float(Vec<f32>),
    /// Integral log2 exponents; the scale is exactly `2^e`.
    Pow2(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bit_width: u8,
    pub scale: ScaleState,
    pub zero_point: Vec<i32>,
    pub range_lo: i32,
    pub range_hi: i32,
    pub granularity: Granularity,
    pub signedness: Signedness,
}

/// `2^e` as an exact f32 for normal exponents.
pub fn pow2_f32(e: i32) -> f32 {
    assert!((-126..=127).contains(&e), "exponent {e} outside f32 normal range");
    f32::from_bits(((e + 127) as u32) << 23)
}

pub fn pow2_f64(e: i32) -> f64 {
    assert!((-1022..=1023).contains(&e), "exponent {e} outside f64 normal range");
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Integer code range `[0, 2^b - 1]`.
pub fn code_range(bit_width: u8) -> (i32, i32) {
    (0, (1i32 << bit_width) - 1)
}

/// `clip(round(x / s + z), lo, hi)` with half-away-from-zero rounding.
#[inline]
pub fn quantize_value(x: f32, scale: f32, zero_point: i32, lo: i32, hi: i32) -> i32 {
    let r = (x / scale + zero_point as f32).round();
    r.clamp(lo as f32, hi as f32) as i32
}

#[inline]
pub fn dequantize_value(q: i32, scale: f32, zero_point: i32) -> f32 {
    scale * (q - zero_point) as f32
}

impl QuantParams {
    fn build(
        bit_width: u8,
        scale: ScaleState,
        zero_point: Vec<i32>,
        granularity: Granularity,
        signedness: Signedness,
    ) -> Result<Self> {
        let (range_lo, range_hi) = code_range(bit_width);
        let q = QuantParams {
            bit_width,
            scale,
            zero_point,
            range_lo,
            range_hi,
            granularity,
            signedness,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn new_float(
        bit_width: u8,
        scales: Vec<f32>,
        zero_point: Vec<i32>,
        granularity: Granularity,
        signedness: Signedness,
    ) -> Result<Self> {
        Self::build(bit_width, ScaleState::Float(scales), zero_point, granularity, signedness)
    }

    pub fn new_pow2(
        bit_width: u8,
        exponents: Vec<i32>,
        zero_point: Vec<i32>,
        granularity: Granularity,
        signedness: Signedness,
    ) -> Result<Self> {
        Self::build(bit_width, ScaleState::Pow2(exponents), zero_point, granularity, signedness)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bit_width) {
            return Err(invalid(format!("bit width {} outside [2, 16]", self.bit_width)));
        }
        if self.range_lo >= self.range_hi {
            return Err(invalid("empty quantization range"));
        }
        if (self.range_lo, self.range_hi) != code_range(self.bit_width) {
            return Err(invalid("quantization range does not match bit width"));
        }
        let channels = match &self.scale {
            ScaleState::Float(s) => {
                if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(invalid("scales must be positive and finite"));
                }
                s.len()
            }
            ScaleState::Pow2(e) => {
                if e.iter().any(|v| !(-126..=127).contains(v)) {
                    return Err(invalid("power-of-two exponent outside f32 range"));
                }
                e.len()
            }
        };
        if channels == 0 || channels != self.zero_point.len() {
            return Err(invalid("scale and zero-point counts differ"));
        }
        if self.granularity == Granularity::PerTensor && channels != 1 {
            return Err(invalid("per-tensor quantizer with several scales"));
        }
        if self
            .zero_point
            .iter()
            .any(|z| *z < self.range_lo || *z > self.range_hi)
        {
            return Err(invalid("zero point outside code range"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.zero_point.len()
    }

    pub fn scale(&self, channel: usize) -> f32 {
        match &self.scale {
            ScaleState::Float(s) => s[channel],
            ScaleState::Pow2(e) => pow2_f32(e[channel]),
        }
    }

    pub fn exponents(&self) -> Option<&[i32]> {
        match &self.scale {
            ScaleState::Pow2(e) => Some(e),
            ScaleState::Float(_) => None,
        }
    }

    pub fn is_pow2(&self) -> bool {
        matches!(self.scale, ScaleState::Pow2(_))
    }

    fn channel_len(&self, x: &Tensor) -> Result<usize> {
        let c = self.channels();
        match self.granularity {
            Granularity::PerTensor => Ok(x.len()),
            Granularity::PerOutputChannel => {
                if x.shape().first() != Some(&c) {
                    return Err(Error::ShapeMismatch {
                        op: "quantize per-channel",
                        lhs: x.shape().to_vec(),
                        rhs: vec![c],
                    });
                }
                Ok(x.row_len())
            }
        }
    }
}

/// Quantize then dequantize. Returns `(x_hat, q_int)`.
pub fn quantize_affine(x: &Tensor, q: &QuantParams) -> Result<(Tensor, Vec<i32>)> {
    q.validate()?;
    x.ensure_finite("quantize_affine")?;
    let per = q.channel_len(x)?;
    let mut codes = Vec::with_capacity(x.len());
    let mut hat = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let c = i.checked_div(per).unwrap_or(0);
        let (s, z) = (q.scale(c), q.zero_point[c]);
        let k = quantize_value(v, s, z, q.range_lo, q.range_hi);
        codes.push(k);
        hat.push(dequantize_value(k, s, z));
    }
    Ok((Tensor::new(x.shape().to_vec(), hat)?, codes))
}

/// Nearest power-of-two exponent, ties to even.
pub fn naive_pow2_scale(s: f32) -> Result<i32> {
    if !(s.is_finite() && s > 0.0) {
        return Err(invalid(format!("scale {s} must be positive")));
    }
    Ok((s as f64).log2().round_ties_even() as i32)
}

/// Zero point after a scale change: `clip(round(-x_min / 2^e), lo, hi)`.
pub fn update_zero_point(x_min: f32, exponent: i32, bit_width: u8) -> i32 {
    let (lo, hi) = code_range(bit_width);
    let z = (-(x_min as f64) / pow2_f64(exponent)).round();
    z.clamp(lo as f64, hi as f64) as i32
}

fn best_range_for(values: &[f32], bit_width: u8) -> (f32, i32) {
    let (lo_code, hi_code) = code_range(bit_width);
    let levels = (hi_code - lo_code) as f64;
    let (mut mn, mut mx) = (0.0f64, 0.0f64);
    for &v in values {
        mn = mn.min(v as f64);
        mx = mx.max(v as f64);
    }
    if mx - mn <= 0.0 {
        return (SCALE_FLOOR, 0);
    }
    let mut best = (f64::INFINITY, SCALE_FLOOR, 0);
    for i in 0..MSE_GRID_POINTS {
        let frac = MSE_GRID_LO + (1.0 - MSE_GRID_LO) * i as f64 / (MSE_GRID_POINTS - 1) as f64;
        let (lo, hi) = (frac * mn, frac * mx);
        let s = (((hi - lo) / levels) as f32).max(SCALE_FLOOR);
        let z = ((-lo / s as f64).round() as i32).clamp(lo_code, hi_code);
        let mse: f64 = values
            .iter()
            .map(|&v| {
                let k = quantize_value(v, s, z, lo_code, hi_code);
                let d = (v - dequantize_value(k, s, z)) as f64;
                d * d
            })
            .sum();
        if mse < best.0 {
            best = (mse, s, z);
        }
    }
    (best.1, best.2)
}

/// Picks `(s, z)` per channel minimising squared quantization error over a
/// grid of shrunken min/max ranges.
pub fn init_scale_mse(
    samples: &Tensor,
    bit_width: u8,
    granularity: Granularity,
    signedness: Signedness,
) -> Result<QuantParams> {
    if samples.is_empty() {
        return Err(invalid("init_scale_mse needs samples"));
    }
    samples.ensure_finite("init_scale_mse")?;
    let chunks: Vec<&[f32]> = match granularity {
        Granularity::PerTensor => vec![samples.data()],
        Granularity::PerOutputChannel => samples.data().chunks(samples.row_len().max(1)).collect(),
    };
    let (scales, zps) = chunks.iter().map(|c| best_range_for(c, bit_width)).unzip();
    QuantParams::new_float(bit_width, scales, zps, granularity, signedness)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRoundStats {
    pub clipped: usize,
    pub max_round_err: f32,
}

/// Clipped element count and worst rounding error among unclipped elements.
pub fn count_clipped(x: &Tensor, q: &QuantParams) -> Result<ClipRoundStats> {
    q.validate()?;
    let per = q.channel_len(x)?;
    let mut stats = ClipRoundStats {
        clipped: 0,
        max_round_err: 0.0,
    };
    for (i, &v) in x.data().iter().enumerate() {
        let c = i.checked_div(per).unwrap_or(0);
        let (s, z) = (q.scale(c), q.zero_point[c]);
        let r = (v / s + z as f32).round();
        if r < q.range_lo as f32 || r > q.range_hi as f32 {
            stats.clipped += 1;
        } else {
            let err = (v - dequantize_value(r as i32, s, z)).abs();
            stats.max_round_err = stats.max_round_err.max(err);
        }
    }
    Ok(stats)
}
