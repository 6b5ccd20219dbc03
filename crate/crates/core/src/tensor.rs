//! Dense f32 tensors and the handful of kernels reconstruction needs.
//!
//! Every kernel accumulates in a fixed row-major order so repeated calls on
//! identical inputs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// shape/length invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0, 0, 0],
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[a, b] => Ok([a, b]),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    /// Elements per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Gathers rows along axis 0.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let stride = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::from_parts(shape, data)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let stride = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_parts(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Concatenates along axis 0. All parts must agree on trailing extents.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, pad: 0 }
    }
}

/// Per-channel batch-norm parameters in inference form.
#[derive(Debug, Clone, PartialEq)]
pub struct BNParams {
    pub gamma: Vec<f32>,
    pub bn_beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BNParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.bn_beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c
        {
            return Err(invalid("batch-norm vectors disagree on channel count"));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(invalid("batch-norm epsilon must be finite and non-negative"));
        }
        for (channel, &value) in self.running_var.iter().enumerate() {
            if value < 0.0 {
                return Err(Error::NegativeVariance { channel, value });
            }
            if value + self.epsilon <= 0.0 {
                return Err(invalid(format!(
                    "batch-norm channel {channel} has zero variance and zero epsilon"
                )));
            }
        }
        Ok(())
    }
}

fn out_extent(input: usize, kernel: usize, p: Conv2dParams) -> Option<usize> {
    let span = input + 2 * p.pad;
    if p.stride == 0 || span < kernel {
        None
    } else {
        Some((span - kernel) / p.stride + 1)
    }
}

/// Output positions `lo..hi` whose input coordinate `o*stride + k - pad` is in bounds.
#[inline]
fn valid_range(k: usize, p: Conv2dParams, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= p.pad {
        0
    } else {
        (p.pad - k).div_ceil(p.stride)
    };
    let hi = if in_len + p.pad > k {
        ((in_len - 1 + p.pad - k) / p.stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<ConvGeom> {
    let (&[n, c, h, w], &[o, ci, kh, kw]) = (input, weight) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    };
    if ci != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    }
    let (Some(oh), Some(ow)) = (out_extent(h, kh, p), out_extent(w, kw, p)) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        });
    };
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Cross-correlation of an NCHW input with an OIHW kernel.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    p: Conv2dParams,
) -> Result<Tensor> {
    let g = conv_geometry(input.shape(), weight.shape(), p)?;
    if bias.len() != g.o {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: weight.shape().to_vec(),
            rhs: vec![bias.len()],
        });
    }
    input.ensure_finite("conv2d input")?;
    weight.ensure_finite("conv2d weight")?;
    let (x, wt) = (input.data(), weight.data());
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f32; g.n * g.o * plane];
    for b in 0..g.n {
        for oc in 0..g.o {
            let dst = &mut out[(b * g.o + oc) * plane..(b * g.o + oc + 1) * plane];
            dst.fill(bias[oc]);
            for ic in 0..g.c {
                let src = &x[(b * g.c + ic) * g.h * g.w..(b * g.c + ic + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (ylo, yhi) = valid_range(ky, p, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wt[((oc * g.c + ic) * g.kh + ky) * g.kw + kx];
                        let (xlo, xhi) = valid_range(kx, p, g.w, g.ow);
                        for oy in ylo..yhi {
                            let iy = oy * p.stride + ky - p.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            if p.stride == 1 {
                                let off = kx as isize - p.pad as isize;
                                let s = &row[(xlo as isize + off) as usize..(xhi as isize + off) as usize];
                                for (d, &v) in drow[xlo..xhi].iter_mut().zip(s) {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    drow[ox] += wv * row[ox * p.stride + kx - p.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out))
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub input: Option<Tensor>,
    pub bias: Vec<f32>,
}

/// Gradients of `sum(grad_output * conv2d_forward(input, weight))`.
///
/// `want_input` skips the input gradient when the caller has no use for it.
pub fn conv2d_grad(
    input: &Tensor,
    weight: &Tensor,
    grad_output: &Tensor,
    p: Conv2dParams,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(input.shape(), weight.shape(), p)?;
    if grad_output.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_grad",
            lhs: vec![g.n, g.o, g.oh, g.ow],
            rhs: grad_output.shape().to_vec(),
        });
    }
    let (x, wt, go) = (input.data(), weight.data(), grad_output.data());
    let plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut gw = vec![0.0f32; wt.len()];
    let mut gb = vec![0.0f32; g.o];
    let mut gx = if want_input {
        vec![0.0f32; x.len()]
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        for oc in 0..g.o {
            let gplane = &go[(b * g.o + oc) * plane..(b * g.o + oc + 1) * plane];
            gb[oc] += gplane.iter().sum::<f32>();
            for ic in 0..g.c {
                let src = &x[(b * g.c + ic) * in_plane..(b * g.c + ic + 1) * in_plane];
                for ky in 0..g.kh {
                    let (ylo, yhi) = valid_range(ky, p, g.h, g.oh);
                    for kx in 0..g.kw {
                        let widx = ((oc * g.c + ic) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let (xlo, xhi) = valid_range(kx, p, g.w, g.ow);
                        let mut acc = 0.0f32;
                        for oy in ylo..yhi {
                            let iy = oy * p.stride + ky - p.pad;
                            let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                            for ox in xlo..xhi {
                                let ix = ox * p.stride + kx - p.pad;
                                acc += grow[ox] * src[iy * g.w + ix];
                            }
                        }
                        gw[widx] += acc;
                        if want_input {
                            let dst = &mut gx[(b * g.c + ic) * in_plane..(b * g.c + ic + 1) * in_plane];
                            for oy in ylo..yhi {
                                let iy = oy * p.stride + ky - p.pad;
                                let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                                for ox in xlo..xhi {
                                    dst[iy * g.w + ox * p.stride + kx - p.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        input: want_input.then(|| Tensor::from_parts(input.shape().to_vec(), gx)),
        bias: gb,
    })
}

/// `x[N, I] · w[O, I]ᵀ + b`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let [n, i] = input.dims2("linear input")?;
    let [o, wi] = weight.dims2("linear weight")?;
    if wi != i || bias.len() != o {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    input.ensure_finite("linear input")?;
    weight.ensure_finite("linear weight")?;
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![0.0f32; n * o];
    for b in 0..n {
        let xr = &x[b * i..(b + 1) * i];
        for oc in 0..o {
            let wr = &w[oc * i..(oc + 1) * i];
            let mut acc = bias[oc];
            for (a, c) in wr.iter().zip(xr) {
                acc += a * c;
            }
            out[b * o + oc] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

pub struct LinearGrads {
    pub weight: Tensor,
    pub input: Option<Tensor>,
    pub bias: Vec<f32>,
}

pub fn linear_grad(
    input: &Tensor,
    weight: &Tensor,
    grad_output: &Tensor,
    want_input: bool,
) -> Result<LinearGrads> {
    let [n, i] = input.dims2("linear input")?;
    let [o, _] = weight.dims2("linear weight")?;
    if grad_output.shape() != [n, o] {
        return Err(Error::ShapeMismatch {
            op: "linear_grad",
            lhs: vec![n, o],
            rhs: grad_output.shape().to_vec(),
        });
    }
    let (x, w, g) = (input.data(), weight.data(), grad_output.data());
    let mut gw = vec![0.0f32; o * i];
    let mut gb = vec![0.0f32; o];
    let mut gx = if want_input { vec![0.0f32; n * i] } else { Vec::new() };
    for b in 0..n {
        let xr = &x[b * i..(b + 1) * i];
        for oc in 0..o {
            let gv = g[b * o + oc];
            gb[oc] += gv;
            let gwr = &mut gw[oc * i..(oc + 1) * i];
            for (d, &v) in gwr.iter_mut().zip(xr) {
                *d += gv * v;
            }
            if want_input {
                let wr = &w[oc * i..(oc + 1) * i];
                for (d, &v) in gx[b * i..(b + 1) * i].iter_mut().zip(wr) {
                    *d += gv * v;
                }
            }
        }
    }
    Ok(LinearGrads {
        weight: Tensor::from_parts(weight.shape().to_vec(), gw),
        input: want_input.then(|| Tensor::from_parts(input.shape().to_vec(), gx)),
        bias: gb,
    })
}

/// Folds inference batch-norm into the preceding layer's weight (axis 0 =
/// output channel) and bias.
pub fn fold_bn(weight: &Tensor, bias: &[f32], bn: &BNParams) -> Result<(Tensor, Vec<f32>)> {
    bn.validate()?;
    let o = weight.shape().first().copied().unwrap_or(0);
    if o != bn.channels() || bias.len() != o {
        return Err(Error::ShapeMismatch {
            op: "fold_bn",
            lhs: weight.shape().to_vec(),
            rhs: vec![bn.channels()],
        });
    }
    let per = weight.row_len();
    let mut w = weight.data().to_vec();
    let mut b = vec![0.0f32; o];
    for c in 0..o {
        let inv = 1.0 / (bn.running_var[c] + bn.epsilon).sqrt();
        let k = bn.gamma[c] * inv;
        for v in &mut w[c * per..(c + 1) * per] {
            *v *= k;
        }
        b[c] = k * (bias[c] - bn.running_mean[c]) + bn.bn_beta[c];
    }
    Tensor::new(weight.shape().to_vec(), w).map(|t| (t, b))
}

/// Inference-mode batch norm over axis 1 of an N×C×… tensor.
pub fn bn_inference(x: &Tensor, bn: &BNParams) -> Result<Tensor> {
    bn.validate()?;
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != bn.channels() {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: shape.to_vec(),
            rhs: vec![bn.channels()],
        });
    }
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let ch = (i / inner) % c;
        let inv = 1.0 / (bn.running_var[ch] + bn.epsilon).sqrt();
        *v = bn.gamma[ch] * (*v - bn.running_mean[ch]) * inv + bn.bn_beta[ch];
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Cached batch statistics from a training-mode batch-norm forward.
pub struct BnTrainCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Training-mode batch norm: normalises with batch statistics (biased variance).
pub fn bn_train_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Tensor, BnTrainCache)> {
    let shape = x.shape();
    let c = gamma.len();
    if shape.len() < 2 || shape[1] != c || beta.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm_train",
            lhs: shape.to_vec(),
            rhs: vec![c],
        });
    }
    let n = shape[0];
    let inner: usize = shape[2..].iter().product();
    let count = (n * inner) as f32;
    let d = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let s = &d[(b * c + ch) * inner..(b * c + ch + 1) * inner];
            mean[ch] += s.iter().sum::<f32>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let s = &d[(b * c + ch) * inner..(b * c + ch + 1) * inner];
            var[ch] += s.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f32>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0f32; d.len()];
    let mut out = vec![0.0f32; d.len()];
    for (i, &v) in d.iter().enumerate() {
        let ch = (i / inner) % c;
        x_hat[i] = (v - mean[ch]) * inv_std[ch];
        out[i] = gamma[ch] * x_hat[i] + beta[ch];
    }
    Ok((
        Tensor::from_parts(shape.to_vec(), out),
        BnTrainCache {
            x_hat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns (grad_input, grad_gamma, grad_beta) for [`bn_train_forward`].
pub fn bn_train_backward(
    grad_output: &Tensor,
    gamma: &[f32],
    cache: &BnTrainCache,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let shape = grad_output.shape();
    let c = gamma.len();
    let inner: usize = shape[2..].iter().product();
    let count = (shape[0] * inner) as f32;
    let g = grad_output.data();
    let mut g_gamma = vec![0.0f32; c];
    let mut g_beta = vec![0.0f32; c];
    for (i, &gv) in g.iter().enumerate() {
        let ch = (i / inner) % c;
        g_gamma[ch] += gv * cache.x_hat[i];
        g_beta[ch] += gv;
    }
    let mut gx = vec![0.0f32; g.len()];
    for (i, &gv) in g.iter().enumerate() {
        let ch = (i / inner) % c;
        gx[i] = gamma[ch] * cache.inv_std[ch] / count
            * (count * gv - g_beta[ch] - cache.x_hat[i] * g_gamma[ch]);
    }
    (Tensor::from_parts(shape.to_vec(), gx), g_gamma, g_beta)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Multiplies `grad` by the ReLU derivative at `pre` (0 at the origin).
pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if pre.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            lhs: pre.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(pre.shape().to_vec(), data))
}

/// Central-difference gradient of a scalar function.
///
/// Perturbations are applied in f32; the quotient uses the step that was
/// actually representable, and evaluation results are taken in f64.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(invalid(format!("finite-difference step {eps} outside [1e-5, 1e-2]")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let base = x.data()[i];
        let hi = (base as f64 + eps) as f32;
        let lo = (base as f64 - eps) as f32;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe);
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe);
        probe.data_mut()[i] = base;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad[i] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = a.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>()
            .max(b.data().iter().map(|x| (*x as f64).powi(2)).sum());
        (num / den.max(1e-30)).sqrt()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(vec![2, 1, 4, 5], &mut rng);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0], Conv2dParams::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::full(vec![1, 2, 3, 3], 0.7);
        let w = Tensor::zeros(vec![3, 2, 3, 3]);
        let y = conv2d_forward(&x, &w, &[1.0, -2.0, 0.5], Conv2dParams { stride: 1, pad: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, [1.0, -2.0, 0.5][i / 9]);
        }
    }

    #[test]
    fn hand_computed_diagonal_kernel() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0], Conv2dParams::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &[0.0], Conv2dParams::default()).unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![1, 2, 4, 4]);
                assert_eq!(rhs, vec![1, 3, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![1, 2, 4, 4], &mut rng);
        let w = random(vec![3, 2, 3, 3], &mut rng);
        let g = conv2d_grad(&x, &w, &Tensor::zeros(vec![1, 3, 2, 2]), Conv2dParams::default(), true)
            .unwrap();
        assert!(g.weight.data().iter().all(|v| *v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_conv_grad_is_chain_rule() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![-2.0]).unwrap();
        let g = conv2d_grad(&x, &w, &Tensor::full(vec![1, 1, 1, 1], 1.0), Conv2dParams::default(), true)
            .unwrap();
        assert_eq!(g.weight.data(), &[3.0]);
        assert_eq!(g.input.unwrap().data(), &[-2.0]);
    }

    #[test]
    fn conv_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (case, p) in [Conv2dParams { stride: 1, pad: 1 }, Conv2dParams { stride: 2, pad: 1 }]
            .into_iter()
            .cycle()
            .take(10)
            .enumerate()
        {
            let x = random(vec![2, 3, 5, 5], &mut rng);
            let w = random(vec![4, 3, 3, 3], &mut rng);
            let bias: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv2d_forward(&x, &w, &bias, p).unwrap();
            let go = random(y.shape().to_vec(), &mut rng);
            let loss = |x: &Tensor, w: &Tensor| -> f64 {
                let y = conv2d_forward(x, w, &bias, p).unwrap();
                y.data().iter().zip(go.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let g = conv2d_grad(&x, &w, &go, p, true).unwrap();
            let fw = finite_diff_grad(|w| loss(&x, w), &w, 1e-2).unwrap();
            let fx = finite_diff_grad(|x| loss(x, &w), &x, 1e-2).unwrap();
            assert!(rel_err(&g.weight, &fw) < 1e-3, "case {case} weight");
            assert!(rel_err(g.input.as_ref().unwrap(), &fx) < 1e-3, "case {case} input");
        }
    }

    #[test]
    fn linear_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(vec![3, 6], &mut rng);
        let w = random(vec![4, 6], &mut rng);
        let go = random(vec![3, 4], &mut rng);
        let b = vec![0.1, 0.2, 0.3, 0.4];
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            let y = linear_forward(x, w, &b).unwrap();
            y.data().iter().zip(go.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let g = linear_grad(&x, &w, &go, true).unwrap();
        let fw = finite_diff_grad(|w| loss(&x, w), &w, 1e-2).unwrap();
        let fx = finite_diff_grad(|x| loss(x, &w), &x, 1e-2).unwrap();
        assert!(rel_err(&g.weight, &fw) < 1e-3);
        assert!(rel_err(g.input.as_ref().unwrap(), &fx) < 1e-3);
    }

    #[test]
    fn fold_identity_and_scaling() {
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let id = BNParams {
            gamma: vec![1.0],
            bn_beta: vec![0.0],
            running_mean: vec![0.0],
            running_var: vec![1.0],
            epsilon: 0.0,
        };
        let (w1, b1) = fold_bn(&w, &[0.5], &id).unwrap();
        assert_eq!(w1.data(), &[1.0]);
        assert_eq!(b1, vec![0.5]);
        let double = BNParams { gamma: vec![2.0], ..id };
        let (w2, b2) = fold_bn(&w, &[0.0], &double).unwrap();
        assert_eq!(w2.data(), &[2.0]);
        assert_eq!(b2, vec![0.0]);
    }

    #[test]
    fn fold_rejects_negative_variance() {
        let w = Tensor::zeros(vec![1, 1, 1, 1]);
        let bn = BNParams {
            gamma: vec![1.0],
            bn_beta: vec![0.0],
            running_mean: vec![0.0],
            running_var: vec![-1.0],
            epsilon: 1e-5,
        };
        assert!(matches!(fold_bn(&w, &[0.0], &bn), Err(Error::NegativeVariance { channel: 0, .. })));
    }

    #[test]
    fn folded_conv_matches_conv_then_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random(vec![2, 3, 6, 6], &mut rng);
            let w = random(vec![4, 3, 3, 3], &mut rng);
            let b: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bn = BNParams {
                gamma: (0..4).map(|_| rng.random_range(0.2..2.0)).collect(),
                bn_beta: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                running_mean: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                running_var: (0..4).map(|_| rng.random_range(0.1..3.0)).collect(),
                epsilon: 1e-5,
            };
            let p = Conv2dParams { stride: 1, pad: 1 };
            let reference = bn_inference(&conv2d_forward(&x, &w, &b, p).unwrap(), &bn).unwrap();
            let (wf, bf) = fold_bn(&w, &b, &bn).unwrap();
            let folded = conv2d_forward(&x, &wf, &bf, p).unwrap();
            assert!(reference.max_abs_diff(&folded) <= 1e-5);
        }
    }

    #[test]
    fn relu_values_and_gradient() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::new(vec![2], vec![-3.0, -0.5]).unwrap();
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::new(
            vec![20],
            (0..20)
                .map(|_| {
                    let v: f32 = rng.random_range(-2.0..2.0);
                    if v.abs() < 1e-2 { 0.5 } else { v }
                })
                .collect(),
        )
        .unwrap();
        let analytic = relu_backward(&x, &Tensor::full(vec![20], 1.0)).unwrap();
        let numeric = finite_diff_grad(
            |t| relu(t).data().iter().map(|v| *v as f64).sum(),
            &x,
            1e-3,
        )
        .unwrap();
        assert!(analytic.max_abs_diff(&numeric) < 1e-3);
    }

    #[test]
    fn finite_diff_basics() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| *v as f64).sum(), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-4));
        let g = finite_diff_grad(
            |t| 0.5 * t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>(),
            &x,
            1e-3,
        )
        .unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-3).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, 1.0).is_err());
    }

    #[test]
    fn bn_train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(vec![4, 2, 3, 3], &mut rng);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.2];
        let go = random(vec![4, 2, 3, 3], &mut rng);
        let loss = |x: &Tensor| -> f64 {
            let (y, _) = bn_train_forward(x, &gamma, &beta, 1e-5).unwrap();
            y.data().iter().zip(go.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = bn_train_forward(&x, &gamma, &beta, 1e-5).unwrap();
        let (gx, _, _) = bn_train_backward(&go, &gamma, &cache);
        let fx = finite_diff_grad(loss, &x, 1e-2).unwrap();
        assert!(rel_err(&gx, &fx) < 2e-3, "{}", rel_err(&gx, &fx));
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(vec![2, 3, 7, 7], &mut rng);
        let w = random(vec![5, 3, 3, 3], &mut rng);
        let p = Conv2dParams { stride: 2, pad: 1 };
        let a = conv2d_forward(&x, &w, &[0.0; 5], p).unwrap();
        let b = conv2d_forward(&x, &w, &[0.0; 5], p).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
