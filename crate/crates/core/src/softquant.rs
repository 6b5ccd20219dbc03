//! Soft quantization: rectified sigmoid gates, the annealed binary
//! regularizer and soft power-of-two weights with learnable rounding (U) and
//! learnable exponent offsets (V).

use std::f64::consts::{LN_2, PI};

use crate::error::{invalid, Result};
use crate::quantizer::{code_range, pow2_f32, Granularity, QuantParams, Signedness};
use crate::tensor::Tensor;

pub const BETA_START: f32 = 20.0;
pub const BETA_END: f32 = 2.0;
pub const WARMUP_FRACTION: f64 = 0.2;
/// Gate targets are clamped into this interval before inversion.
pub const INIT_CLAMP: (f32, f32) = (0.01, 0.99);

/// Stretch parameters of the rectified sigmoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stretch {
    pub xi: f32,
    pub gamma: f32,
}

impl Default for Stretch {
    fn default() -> Self {
        Stretch { xi: 1.1, gamma: -0.1 }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Stretch {
    pub fn validate(&self) -> Result<()> {
        if self.xi > 1.0 && self.gamma < 0.0 {
            Ok(())
        } else {
            Err(invalid("stretch needs xi > 1 and gamma < 0"))
        }
    }

    #[inline]
    pub fn h(&self, x: f32) -> f32 {
        let v = sigmoid(x as f64) * (self.xi - self.gamma) as f64 + self.gamma as f64;
        v.clamp(0.0, 1.0) as f32
    }

    /// dh/dx; zero where the gate is clipped.
    #[inline]
    pub fn dh(&self, x: f32) -> f32 {
        let s = sigmoid(x as f64);
        let v = s * (self.xi - self.gamma) as f64 + self.gamma as f64;
        if v <= 0.0 || v >= 1.0 {
            0.0
        } else {
            ((self.xi - self.gamma) as f64 * s * (1.0 - s)) as f32
        }
    }

    /// Pre-image of `target`, clamped into [`INIT_CLAMP`] first.
    pub fn inverse(&self, target: f32) -> f32 {
        let t = target.clamp(INIT_CLAMP.0, INIT_CLAMP.1) as f64;
        let s = (t - self.gamma as f64) / (self.xi - self.gamma) as f64;
        (s / (1.0 - s)).ln() as f32
    }
}

pub fn rectified_sigmoid(x: &Tensor) -> Tensor {
    let st = Stretch::default();
    x.map(|v| st.h(v))
}

/// `Σ 1 - |2h(x) - 1|^β`.
pub fn regularizer(x: &[f32], beta_anneal: f32, stretch: Stretch) -> f32 {
    x.iter()
        .map(|&v| {
            let d = (2.0 * stretch.h(v) as f64 - 1.0).abs();
            1.0 - d.powf(beta_anneal as f64)
        })
        .sum::<f64>() as f32
}

/// Gradient of [`regularizer`] with respect to each raw value.
pub fn regularizer_grad(x: &[f32], beta_anneal: f32, stretch: Stretch) -> Vec<f32> {
    let b = beta_anneal as f64;
    x.iter()
        .map(|&v| {
            let d = 2.0 * stretch.h(v) as f64 - 1.0;
            if d == 0.0 {
                return 0.0;
            }
            (-b * d.abs().powf(b - 1.0) * d.signum() * 2.0 * stretch.dh(v) as f64) as f32
        })
        .collect()
}

/// β for a global iteration: held at the start value through warm-up, then a
/// cosine decay to the end value at `iter == total`.
pub fn anneal_schedule(iter: usize, total: usize) -> f32 {
    let warm = warmup_iters(total);
    if iter < warm || total <= warm {
        return BETA_START;
    }
    let progress = ((iter - warm) as f64 / (total - warm) as f64).min(1.0);
    (BETA_END as f64 + (BETA_START - BETA_END) as f64 * 0.5 * (1.0 + (PI * progress).cos())) as f32
}

pub fn warmup_iters(total: usize) -> usize {
    (total as f64 * WARMUP_FRACTION).round() as usize
}

/// Exponent grid fixed when the scale group is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenGrid {
    pub exponents: Vec<i32>,
    pub zero_points: Vec<i32>,
}

/// Trainable soft-quantization state for one weight layer.
#[derive(Debug, Clone)]
pub struct SoftQuantState {
    /// One rounding gate per weight element.
    pub u: Vec<f32>,
    /// One exponent-offset gate per output channel.
    pub v: Vec<f32>,
    pub float_scale: Vec<f32>,
    pub zero_point: Vec<i32>,
    pub floor_exp: Vec<i32>,
    pub bit_width: u8,
    pub stretch: Stretch,
    pub lambda: f32,
    pub mu: f32,
    pub frozen: Option<FrozenGrid>,
}

/// Cached values from [`soft_weight`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct SoftWeight {
    pub w_tilde: Tensor,
    pub s_tilde: Vec<f32>,
    /// Clipped code `clip(floor(.) + h1, 0, p)` per element.
    codes: Vec<f32>,
    /// Whether the pre-clip code fell inside `[0, p]`.
    inside: Vec<bool>,
}

impl SoftQuantState {
    /// Fresh state with V set so that the soft scale starts at `s` and U set
    /// to the fractional remainder on that grid.
    pub fn init(weight: &Tensor, q: &QuantParams, lambda: f32, mu: f32) -> Result<Self> {
        let crate::quantizer::ScaleState::Float(scales) = &q.scale else {
            return Err(invalid("soft state needs float scales"));
        };
        if weight.shape().first() != Some(&scales.len()) {
            return Err(invalid("per-channel scales do not match weight rows"));
        }
        let stretch = Stretch::default();
        let floor_exp = scales
            .iter()
            .map(|&s| (s as f64).log2().floor() as i32)
            .collect();
        let mut st = SoftQuantState {
            u: vec![0.0; weight.len()],
            v: init_v(scales, stretch),
            float_scale: scales.clone(),
            zero_point: q.zero_point.clone(),
            floor_exp,
            bit_width: q.bit_width,
            stretch,
            lambda,
            mu,
            frozen: None,
        };
        st.reset_u(weight);
        Ok(st)
    }

    pub fn channels(&self) -> usize {
        self.v.len()
    }

    /// Soft scale and real-valued zero point of channel `c`.
    pub fn channel_grid(&self, c: usize) -> (f32, f32) {
        match &self.frozen {
            Some(g) => (pow2_f32(g.exponents[c]), g.zero_points[c] as f32),
            None => {
                let t = self.floor_exp[c] as f64 + self.stretch.h(self.v[c]) as f64;
                let s_tilde = t.exp2() as f32;
                let z = self.float_scale[c] * self.zero_point[c] as f32 / s_tilde;
                (s_tilde, z)
            }
        }
    }

    /// Re-derives U from the current grid: `h1(U) = frac(W / s~ + z')`.
    pub fn reset_u(&mut self, weight: &Tensor) {
        let per = weight.row_len();
        for c in 0..self.channels() {
            let (s, z) = self.channel_grid(c);
            for i in c * per..(c + 1) * per {
                let x = weight.data()[i] / s + z;
                self.u[i] = self.stretch.inverse(x - x.floor());
            }
        }
    }

    /// Hardened exponents: `floor(log2 s) + round(h2(V))`.
    pub fn hard_exponents(&self) -> Vec<i32> {
        match &self.frozen {
            Some(g) => g.exponents.clone(),
            None => self
                .v
                .iter()
                .zip(&self.floor_exp)
                .map(|(&v, &f)| f + self.stretch.h(v).round() as i32)
                .collect(),
        }
    }

    /// Integer zero points for a set of exponents: `clip(round(s*z / 2^e))`.
    pub fn zero_points_for(&self, exponents: &[i32]) -> Vec<i32> {
        let (lo, hi) = code_range(self.bit_width);
        exponents
            .iter()
            .enumerate()
            .map(|(c, &e)| {
                let z = self.float_scale[c] as f64 * self.zero_point[c] as f64 / pow2_f32(e) as f64;
                (z.round() as i32).clamp(lo, hi)
            })
            .collect()
    }

    /// Locks the exponent grid and re-initialises U on it.
    pub fn freeze(&mut self, exponents: Vec<i32>, weight: &Tensor) {
        let zero_points = self.zero_points_for(&exponents);
        self.frozen = Some(FrozenGrid {
            exponents,
            zero_points,
        });
        self.reset_u(weight);
    }

    /// Naive exponents `round(log2 s)` (ties to even).
    pub fn naive_exponents(&self) -> Vec<i32> {
        self.float_scale
            .iter()
            .map(|&s| (s as f64).log2().round_ties_even() as i32)
            .collect()
    }
}

pub fn init_v(scales: &[f32], stretch: Stretch) -> Vec<f32> {
    scales
        .iter()
        .map(|&s| {
            let l = (s as f64).log2();
            stretch.inverse((l - l.floor()) as f32)
        })
        .collect()
}

/// Soft weight `s~ · [clip(floor(W/s~ + z') + h1(U), 0, p) - z']`.
pub fn soft_weight(weight: &Tensor, state: &SoftQuantState) -> Result<SoftWeight> {
    if weight.len() != state.u.len() {
        return Err(invalid("soft state does not match weight size"));
    }
    let p = code_range(state.bit_width).1 as f32;
    let per = weight.row_len();
    let mut w = vec![0.0f32; weight.len()];
    let mut codes = vec![0.0f32; weight.len()];
    let mut inside = vec![false; weight.len()];
    let mut s_tilde = Vec::with_capacity(state.channels());
    for c in 0..state.channels() {
        let (s, z) = state.channel_grid(c);
        s_tilde.push(s);
        for i in c * per..(c + 1) * per {
            let a = (weight.data()[i] / s + z).floor() + state.stretch.h(state.u[i]);
            let k = a.clamp(0.0, p);
            inside[i] = (0.0..=p).contains(&a);
            codes[i] = k;
            w[i] = s * (k - z);
        }
    }
    Ok(SoftWeight {
        w_tilde: Tensor::new(weight.shape().to_vec(), w)?,
        s_tilde,
        codes,
        inside,
    })
}

/// Chains `dL/dW~` back to U and (when the grid is not frozen) V. Floor terms
/// are treated as constants.
pub fn soft_weight_backward(
    sw: &SoftWeight,
    state: &SoftQuantState,
    grad: &Tensor,
) -> (Vec<f32>, Vec<f32>) {
    let per = grad.row_len();
    let g = grad.data();
    let mut gu = vec![0.0f32; g.len()];
    let mut gv = vec![0.0f32; state.channels()];
    for c in 0..state.channels() {
        let s = sw.s_tilde[c];
        let mut acc = 0.0f64;
        for i in c * per..(c + 1) * per {
            if sw.inside[i] {
                gu[i] = g[i] * s * state.stretch.dh(state.u[i]);
            }
            // s~·z' is constant, so dW~/ds~ is the clipped code itself.
            acc += (g[i] * sw.codes[i]) as f64;
        }
        if state.frozen.is_none() {
            gv[c] = (acc * s as f64 * LN_2) as f32 * state.stretch.dh(state.v[c]);
        }
    }
    (gu, gv)
}

#[derive(Debug, Clone)]
pub struct HardenedWeights {
    pub params: QuantParams,
    pub codes: Vec<i32>,
    /// Fraction of rounding gates outside `[0, 0.01] ∪ [0.99, 1]`.
    pub undecided_fraction: f32,
}

impl HardenedWeights {
    pub fn dequantized(&self, shape: &[usize]) -> Result<Tensor> {
        let per = self.codes.len() / self.params.channels();
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let c = i / per;
                self.params.scale(c) * (k - self.params.zero_point[c]) as f32
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Converts the soft state into integral exponents, integer zero points and
/// integer codes. Rounding offsets are `round(h1(U))`.
pub fn harden(state: &SoftQuantState, weight: &Tensor) -> Result<HardenedWeights> {
    let exponents = state.hard_exponents();
    let zero_points = match &state.frozen {
        Some(g) => g.zero_points.clone(),
        None => state.zero_points_for(&exponents),
    };
    let (lo, hi) = code_range(state.bit_width);
    let per = weight.row_len();
    let mut codes = Vec::with_capacity(weight.len());
    let mut undecided = 0usize;
    for c in 0..state.channels() {
        let s = pow2_f32(exponents[c]);
        for i in c * per..(c + 1) * per {
            let h = state.stretch.h(state.u[i]);
            if h > INIT_CLAMP.0 && h < INIT_CLAMP.1 {
                undecided += 1;
            }
            let base = (weight.data()[i] / s + zero_points[c] as f32).floor() as i32;
            codes.push((base + h.round() as i32).clamp(lo, hi));
        }
    }
    let undecided_fraction = undecided as f32 / weight.len().max(1) as f32;
    if undecided_fraction > 0.01 {
        log::warn!(
            "hardening with {:.1}% of rounding gates undecided",
            100.0 * undecided_fraction
        );
    }
    Ok(HardenedWeights {
        params: QuantParams::new_pow2(
            state.bit_width,
            exponents,
            zero_points,
            Granularity::PerOutputChannel,
            Signedness::Asymmetric,
        )?,
        codes,
        undecided_fraction,
    })
}

/// Nearest rounding on a given exponent grid.
pub fn nearest_rounding(
    state: &SoftQuantState,
    weight: &Tensor,
    exponents: &[i32],
) -> Result<HardenedWeights> {
    let zero_points = state.zero_points_for(exponents);
    let (lo, hi) = code_range(state.bit_width);
    let per = weight.row_len();
    let codes = weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let c = i / per;
            crate::quantizer::quantize_value(w, pow2_f32(exponents[c]), zero_points[c], lo, hi)
        })
        .collect();
    Ok(HardenedWeights {
        params: QuantParams::new_pow2(
            state.bit_width,
            exponents.to_vec(),
            zero_points,
            Granularity::PerOutputChannel,
            Signedness::Asymmetric,
        )?,
        codes,
        undecided_fraction: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rectified_sigmoid_values() {
        let st = Stretch::default();
        assert_eq!(st.h(20.0), 1.0);
        assert!((st.h(0.0) - 0.5).abs() < 1e-7);
        assert_eq!(st.h(2.398), 1.0);
        assert_eq!(st.h(-2.398), 0.0);
        assert_eq!(st.dh(3.0), 0.0);
        assert!(st.h(2.39) < 1.0);
    }

    #[test]
    fn regularizer_examples() {
        let st = Stretch::default();
        assert_eq!(regularizer(&[20.0, -20.0, 30.0], 5.0, st), 0.0);
        for beta in [2.0, 7.5, 20.0] {
            assert!((regularizer(&[0.0], beta, st) - 1.0).abs() < 1e-6);
        }
        let x = st.inverse(0.75);
        assert!((regularizer(&[x], 2.0, st) - 0.75).abs() < 1e-5);
    }

    #[test]
    fn regularizer_grad_matches_finite_differences() {
        let st = Stretch::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor::new(vec![16], xs.clone()).unwrap();
        for beta in [2.0f32, 8.0, 20.0] {
            let g = regularizer_grad(&xs, beta, st);
            let f = finite_diff_grad(|t| regularizer(t.data(), beta, st) as f64, &t, 1e-3).unwrap();
            for (a, b) in g.iter().zip(f.data()) {
                assert!((a - b).abs() <= 2e-3 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn anneal_endpoints() {
        assert_eq!(anneal_schedule(0, 1000), BETA_START);
        assert_eq!(anneal_schedule(200, 1000), BETA_START);
        assert!((anneal_schedule(1000, 1000) - BETA_END).abs() < 1e-6);
        assert!((anneal_schedule(600, 1000) - 11.0).abs() < 1e-5);
        let mut prev = f32::INFINITY;
        for i in 200..=1000 {
            let b = anneal_schedule(i, 1000);
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn inverse_round_trips() {
        let st = Stretch::default();
        assert!(st.inverse(0.5).abs() < 1e-7);
        for t in [0.01f32, 0.2, 0.37, 0.5, 0.81, 0.99] {
            assert!((st.h(st.inverse(t)) - t).abs() < 1e-6);
        }
        let v = init_v(&[0.25], st);
        assert!((st.h(v[0]) - 0.01).abs() < 1e-6);
    }

    fn state_for(w: &Tensor, scales: Vec<f32>, zps: Vec<i32>, bits: u8) -> SoftQuantState {
        let q = QuantParams::new_float(bits, scales, zps, Granularity::PerOutputChannel, Signedness::Asymmetric)
            .unwrap();
        SoftQuantState::init(w, &q, 0.01, 0.01).unwrap()
    }

    #[test]
    fn soft_weight_scalar_example() {
        let w = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let mut st = state_for(&w, vec![0.3], vec![0], 4);
        assert_eq!(st.floor_exp, vec![-2]);
        st.v[0] = 20.0;
        st.u[0] = 20.0;
        let sw = soft_weight(&w, &st).unwrap();
        assert_eq!(sw.s_tilde, vec![0.5]);
        assert_eq!(sw.w_tilde.data(), &[0.5]);
        st.v[0] = -20.0;
        assert_eq!(soft_weight(&w, &st).unwrap().s_tilde, vec![0.25]);
    }

    #[test]
    fn init_reproduces_float_value() {
        let w = Tensor::new(vec![2, 3], vec![0.11, -0.42, 0.3, 0.05, 0.5, -0.2]).unwrap();
        let st = state_for(&w, vec![0.07, 0.05], vec![6, 4], 4);
        let sw = soft_weight(&w, &st).unwrap();
        for c in 0..2 {
            for i in c * 3..(c + 1) * 3 {
                // U is clamped to [0.01, 0.99] so the residual is bounded by 1% of the step.
                assert!((sw.w_tilde.data()[i] - w.data()[i]).abs() <= 0.0101 * sw.s_tilde[c]);
            }
        }
    }

    #[test]
    fn soft_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 10 {
            let w = Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
            let mut st = state_for(&w, vec![0.09, 0.13], vec![5, 7], 4);
            st.u.iter_mut().for_each(|u| *u = rng.random_range(-1.5..1.5));
            st.v.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
            let g = Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let loss = |st: &SoftQuantState| -> f64 {
                let sw = soft_weight(&w, st).unwrap();
                sw.w_tilde.data().iter().zip(g.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let floors = |st: &SoftQuantState| -> Vec<f32> {
                (0..8).map(|i| {
                    let (s, z) = st.channel_grid(i / 4);
                    (w.data()[i] / s + z).floor()
                }).collect()
            };
            let eps = 1e-3f64;
            // Skip probes that cross a floor boundary.
            let mut crossing = false;
            for c in 0..2 {
                for d in [-eps, eps] {
                    let mut p = st.clone();
                    p.v[c] += d as f32;
                    crossing |= floors(&p) != floors(&st);
                }
            }
            if crossing {
                continue;
            }
            let sw = soft_weight(&w, &st).unwrap();
            let (gu, gv) = soft_weight_backward(&sw, &st, &g);
            let ut = Tensor::new(vec![8], st.u.clone()).unwrap();
            let fu = finite_diff_grad(|u| { let mut p = st.clone(); p.u = u.data().to_vec(); loss(&p) }, &ut, eps).unwrap();
            let vt = Tensor::new(vec![2], st.v.clone()).unwrap();
            let fv = finite_diff_grad(|v| { let mut p = st.clone(); p.v = v.data().to_vec(); loss(&p) }, &vt, eps).unwrap();
            let pairs: Vec<(f32, f32)> = gu.iter().zip(fu.data()).chain(gv.iter().zip(fv.data())).map(|(a, b)| (*a, *b)).collect();
            let diff: f32 = pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
            let norm: f32 = pairs.iter().map(|(a, _)| a * a).sum::<f32>().sqrt();
            assert!(diff <= 1e-3 * norm.max(1e-3), "{diff} vs {norm}: {pairs:?}");
            checked += 1;
        }
    }

    #[test]
    fn harden_endpoints_and_consistency() {
        let w = Tensor::new(vec![1, 3], vec![0.31, -0.12, 0.4]).unwrap();
        let mut st = state_for(&w, vec![0.1], vec![3], 4);
        let floor = st.floor_exp[0];
        st.v[0] = 10.0;
        assert_eq!(harden(&st, &w).unwrap().params.exponents().unwrap(), &[floor + 1]);
        st.v[0] = -10.0;
        assert_eq!(harden(&st, &w).unwrap().params.exponents().unwrap(), &[floor]);

        st.freeze(vec![floor + 1], &w);
        for (i, u) in st.u.iter_mut().enumerate() {
            *u = if i % 2 == 0 { 9.0 } else { -9.0 };
        }
        let soft = soft_weight(&w, &st).unwrap();
        let hard = harden(&st, &w).unwrap();
        assert_eq!(hard.undecided_fraction, 0.0);
        let deq = hard.dequantized(w.shape()).unwrap();
        assert_eq!(deq, soft.w_tilde);
    }

    #[test]
    fn log2_soft_scale_increases_with_gate() {
        let w = Tensor::new(vec![1, 1], vec![0.2]).unwrap();
        let mut st = state_for(&w, vec![0.3], vec![0], 4);
        let mut prev = 0.0;
        for k in 0..50 {
            st.v[0] = -2.3 + k as f32 * 0.095;
            let s = soft_weight(&w, &st).unwrap().s_tilde[0];
            assert!(s > prev);
            prev = s;
        }
    }
}
