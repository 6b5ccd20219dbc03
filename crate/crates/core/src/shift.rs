//! Integer-only inference for power-of-two quantized models.
//!
//! Every rescaling on the data path is a shift. Values travel between nodes
//! centered (`q - z`) with a power-of-two exponent per channel; quantized
//! boundaries re-derive storage codes with [`rshift_round`]. A float64
//! fake-quant simulation of the same model serves as the reference.

use crate::error::{Error, Result};
use crate::io::quantized::{QNode, QOp, QuantizedModel, QWeight};
use crate::quantizer::{code_range, pow2_f64};
use crate::tensor::Tensor;

/// Round-half-away-from-zero arithmetic right shift.
pub fn rshift_round(v: i64, k: u32) -> i64 {
    if k == 0 {
        return v;
    }
    let half = 1i64 << (k - 1);
    let m = (v.unsigned_abs() as i64 + half) >> k;
    if v < 0 {
        -m
    } else {
        m
    }
}

/// `x · 2^e` by exponent-field arithmetic. Falls back to a multiply (counted)
/// only when the result leaves the normal range.
fn ldexp(x: f64, e: i32, ops: &mut OpCounts) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let new = exp + e;
    if exp == 0 || !(1..=2046).contains(&new) {
        ops.float_mul += 1;
        return x * 2f64.powi(e);
    }
    f64::from_bits((bits & !(0x7ffu64 << 52)) | ((new as u64) << 52))
}

/// Operation tallies for the integer path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub int_mul: u64,
    pub int_add: u64,
    pub shifts: u64,
    /// Floating multiplies on the data path.
    pub float_mul: u64,
    /// Float/integer conversions at the model boundary.
    pub float_convert: u64,
}

impl OpCounts {
    fn merge(&mut self, o: &OpCounts) {
        self.int_mul += o.int_mul;
        self.int_add += o.int_add;
        self.shifts += o.shifts;
        self.float_mul += o.float_mul;
        self.float_convert += o.float_convert;
    }
}

/// Integer values at one layer boundary: storage codes for quantized
/// nodes, accumulator units for the output node.
#[derive(Debug, Clone, PartialEq)]
pub struct Boundary {
    pub layer: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntOutput {
    pub logits: Tensor,
    /// Output accumulators and their per-feature exponents.
    pub logits_int: Vec<i32>,
    pub logit_exponents: Vec<i32>,
    pub boundaries: Vec<Boundary>,
    pub ops: OpCounts,
}

/// Centered integers with a per-channel (dimension 1) or per-tensor exponent.
#[derive(Debug, Clone)]
struct IntVal {
    vals: Vec<i32>,
    shape: Vec<usize>,
    exps: Vec<i32>,
}

impl IntVal {
    fn inner(&self) -> usize {
        self.shape[2..].iter().product()
    }

    fn channel_of(&self, idx: usize) -> usize {
        (idx / self.inner()) % self.shape[1]
    }

    fn exp_at(&self, idx: usize) -> i32 {
        if self.exps.len() == 1 {
            self.exps[0]
        } else {
            self.exps[self.channel_of(idx)]
        }
    }
}

fn overflow(node: &QNode) -> Error {
    Error::Overflow { layer: node.id.clone() }
}

fn requantize(v: i64, k: i32, zero_point: i32, lo: i32, hi: i32) -> i32 {
    let z = zero_point as i64;
    let q = if k > 0 {
        if k >= 33 {
            z
        } else {
            rshift_round(v + (z << k), k as u32)
        }
    } else {
        let l = (-k) as u32;
        if v == 0 {
            z
        } else if l >= 32 {
            if v > 0 {
                hi as i64
            } else {
                lo as i64
            }
        } else {
            (v << l) + z
        }
    };
    q.clamp(lo as i64, hi as i64) as i32
}

fn quantized_input<'a>(node: &QNode, x: &'a IntVal) -> Result<&'a IntVal> {
    if x.exps.len() != 1 {
        return Err(Error::Graph(format!("weight layer `{}` reads an unquantized tensor", node.id)));
    }
    Ok(x)
}

fn centered_weights(w: &QWeight) -> Vec<i32> {
    let per = w.codes.len() / w.shape[0];
    w.codes
        .iter()
        .enumerate()
        .map(|(i, &q)| q - w.params.zero_point[i / per])
        .collect()
}

fn conv_int(node: &QNode, x: &IntVal, w: &QWeight, stride: usize, pad: usize, x_bits: u8, ops: &mut OpCounts) -> Result<IntVal> {
    let x = quantized_input(node, x)?;
    let [n, c, h, wd] = dims4(&x.shape, &node.id)?;
    let [o, wc, kh, kw] = dims4(&w.shape, &node.id)?;
    if wc != c || h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d_int",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let wq = centered_weights(w);
    let bound = acc_bound(c * kh * kw, w.params.bit_width, x_bits);
    let ex = x.exps[0];
    let mut out = vec![0i32; n * o * oh * ow];
    let mut macs = 0u64;
    for b in 0..n {
        for oc in 0..o {
            let wbase = oc * c * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: i32 = 0;
                    for ic in 0..c {
                        let xbase = (b * c + ic) * h * wd;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.vals[xbase + iy as usize * wd + ix as usize];
                                let wv = wq[wbase + (ic * kh + ky) * kw + kx];
                                let p = wv.checked_mul(xv).ok_or_else(|| overflow(node))?;
                                acc = acc.checked_add(p).ok_or_else(|| overflow(node))?;
                                macs += 1;
                            }
                        }
                    }
                    if (acc as i64).abs() > bound {
                        return Err(overflow(node));
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc.checked_add(w.bias[oc]).ok_or_else(|| overflow(node))?;
                }
            }
        }
    }
    ops.int_mul += macs;
    ops.int_add += macs + out.len() as u64;
    let exps = w.params.exponents().unwrap().iter().map(|&e| e + ex).collect();
    Ok(IntVal {
        vals: out,
        shape: vec![n, o, oh, ow],
        exps,
    })
}

fn linear_int(node: &QNode, x: &IntVal, w: &QWeight, x_bits: u8, ops: &mut OpCounts) -> Result<IntVal> {
    let x = quantized_input(node, x)?;
    if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "linear_int",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let (n, f, o) = (x.shape[0], x.shape[1], w.shape[0]);
    let wq = centered_weights(w);
    let bound = acc_bound(f, w.params.bit_width, x_bits);
    let mut out = vec![0i32; n * o];
    for b in 0..n {
        let xr = &x.vals[b * f..(b + 1) * f];
        for oc in 0..o {
            let wr = &wq[oc * f..(oc + 1) * f];
            let mut acc: i32 = 0;
            for (&a, &wv) in xr.iter().zip(wr) {
                let p = wv.checked_mul(a).ok_or_else(|| overflow(node))?;
                acc = acc.checked_add(p).ok_or_else(|| overflow(node))?;
            }
            if (acc as i64).abs() > bound {
                return Err(overflow(node));
            }
            out[b * o + oc] = acc.checked_add(w.bias[oc]).ok_or_else(|| overflow(node))?;
        }
    }
    let macs = (n * o * f) as u64;
    ops.int_mul += macs;
    ops.int_add += macs + out.len() as u64;
    let ex = x.exps[0];
    Ok(IntVal {
        vals: out,
        shape: vec![n, o],
        exps: w.params.exponents().unwrap().iter().map(|&e| e + ex).collect(),
    })
}

fn add_int(node: &QNode, a: &IntVal, b: &IntVal, ops: &mut OpCounts) -> Result<IntVal> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "add_int",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let channels = a.shape[1];
    let per_tensor = a.exps.len() == 1 && b.exps.len() == 1;
    let exps: Vec<i32> = if per_tensor {
        vec![a.exps[0].min(b.exps[0])]
    } else {
        (0..channels)
            .map(|c| {
                let ea = a.exps[if a.exps.len() == 1 { 0 } else { c }];
                let eb = b.exps[if b.exps.len() == 1 { 0 } else { c }];
                ea.min(eb)
            })
            .collect()
    };
    let inner = a.inner();
    let mut vals = Vec::with_capacity(a.vals.len());
    for (i, (&x, &y)) in a.vals.iter().zip(&b.vals).enumerate() {
        let e = if per_tensor { exps[0] } else { exps[(i / inner) % channels] };
        let sx = shl_checked(x, (a.exp_at(i) - e) as u32).ok_or_else(|| overflow(node))?;
        let sy = shl_checked(y, (b.exp_at(i) - e) as u32).ok_or_else(|| overflow(node))?;
        vals.push(sx.checked_add(sy).ok_or_else(|| overflow(node))?);
    }
    ops.shifts += 2 * vals.len() as u64;
    ops.int_add += vals.len() as u64;
    Ok(IntVal {
        vals,
        shape: a.shape.clone(),
        exps,
    })
}

fn shl_checked(v: i32, k: u32) -> Option<i32> {
    if k == 0 || v == 0 {
        return Some(v);
    }
    if k >= 31 {
        return None;
    }
    let r = (v as i64) << k;
    i32::try_from(r).ok()
}

fn flatten(x: IntVal) -> IntVal {
    let n = x.shape[0];
    let f = x.vals.len() / n.max(1);
    let exps = if x.exps.len() == 1 {
        x.exps
    } else {
        let inner = x.inner();
        x.exps.iter().flat_map(|&e| std::iter::repeat_n(e, inner)).collect()
    };
    IntVal {
        vals: x.vals,
        shape: vec![n, f],
        exps,
    }
}

fn dims4(shape: &[usize], id: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Graph(format!("layer `{id}` expects a rank-4 tensor, got {shape:?}"))),
    }
}

/// Worst-case accumulator magnitude `K·(2^b_w - 1)·(2^b_x - 1)`.
pub fn acc_bound(kernel_volume: usize, weight_bits: u8, act_bits: u8) -> i64 {
    kernel_volume as i64 * ((1i64 << weight_bits) - 1) * ((1i64 << act_bits) - 1)
}

/// Bits of the quantizer that produced each node's value, following flattens.
fn producer_bits(model: &QuantizedModel, i: usize) -> Option<u8> {
    let n = &model.nodes[i];
    match (&n.act, n.op) {
        (Some(a), _) => Some(a.bit_width),
        (None, QOp::Flatten) => producer_bits(model, n.inputs[0]),
        _ => None,
    }
}

fn check_input(model: &QuantizedModel, input: &Tensor) -> Result<()> {
    if input.shape().len() < 2 || input.shape()[1..] != model.input_shape[..] {
        return Err(Error::ShapeMismatch {
            op: "infer_int",
            lhs: input.shape().to_vec(),
            rhs: model.input_shape.clone(),
        });
    }
    Ok(())
}

/// Runs `model` on `input` using only integer arithmetic between the input
/// quantizer and the final logit conversion.
pub fn infer_int(model: &QuantizedModel, input: &Tensor) -> Result<IntOutput> {
    model.validate()?;
    check_input(model, input)?;
    let mut ops = OpCounts::default();
    let mut values: Vec<Option<IntVal>> = vec![None; model.nodes.len()];
    let mut boundaries = Vec::new();
    for (i, node) in model.nodes.iter().enumerate() {
        let arg = |k: usize| -> &IntVal { values[node.inputs[k]].as_ref().expect("topological order") };
        let mut v = match node.op {
            QOp::Input => {
                let act = node
                    .act
                    .as_ref()
                    .ok_or_else(|| Error::Graph("input node carries no quantizer".into()))?;
                let e = act.exponents().unwrap()[0];
                let z = act.zero_point[0];
                let (lo, hi) = (act.range_lo, act.range_hi);
                let vals = input
                    .data()
                    .iter()
                    .map(|&x| {
                        let q = (ldexp(x as f64, -e, &mut ops) + z as f64).round();
                        q.clamp(lo as f64, hi as f64) as i32 - z
                    })
                    .collect::<Vec<_>>();
                ops.float_convert += vals.len() as u64;
                boundaries.push(Boundary {
                    layer: node.id.clone(),
                    values: vals.iter().map(|&c| (c + z) as f64).collect(),
                });
                values[i] = Some(IntVal {
                    vals,
                    shape: input.shape().to_vec(),
                    exps: vec![e],
                });
                continue;
            }
            QOp::Conv2d { stride, pad } => {
                let w = node.weight.as_ref().ok_or_else(|| Error::Graph(format!("`{}` has no weights", node.id)))?;
                let xb = producer_bits(model, node.inputs[0]).unwrap_or(8);
                conv_int(node, arg(0), w, stride, pad, xb, &mut ops)?
            }
            QOp::Linear => {
                let w = node.weight.as_ref().ok_or_else(|| Error::Graph(format!("`{}` has no weights", node.id)))?;
                let xb = producer_bits(model, node.inputs[0]).unwrap_or(8);
                linear_int(node, arg(0), w, xb, &mut ops)?
            }
            QOp::Relu => {
                let mut v = arg(0).clone();
                v.vals.iter_mut().for_each(|x| *x = (*x).max(0));
                v
            }
            QOp::Add => add_int(node, arg(0), arg(1), &mut ops)?,
            QOp::Flatten => flatten(arg(0).clone()),
        };
        if let Some(act) = &node.act {
            let e_out = act.exponents().unwrap()[0];
            let z = act.zero_point[0];
            let (lo, hi) = (act.range_lo, act.range_hi);
            let mut codes = Vec::with_capacity(v.vals.len());
            for (j, &x) in v.vals.iter().enumerate() {
                codes.push(requantize(x as i64, e_out - v.exp_at(j), z, lo, hi));
            }
            ops.shifts += codes.len() as u64;
            ops.int_add += codes.len() as u64;
            boundaries.push(Boundary {
                layer: node.id.clone(),
                values: codes.iter().map(|&c| c as f64).collect(),
            });
            v = IntVal {
                vals: codes.into_iter().map(|c| c - z).collect(),
                shape: v.shape,
                exps: vec![e_out],
            };
        } else if i == model.output {
            boundaries.push(Boundary {
                layer: node.id.clone(),
                values: v.vals.iter().map(|&x| x as f64).collect(),
            });
        }
        values[i] = Some(v);
    }
    let out = values[model.output].take().expect("output computed");
    let mut logits = Vec::with_capacity(out.vals.len());
    for (j, &x) in out.vals.iter().enumerate() {
        logits.push(ldexp(x as f64, out.exp_at(j), &mut ops) as f32);
    }
    ops.float_convert += logits.len() as u64;
    let logit_exponents = if out.exps.len() == 1 {
        vec![out.exps[0]; out.shape[1]]
    } else {
        out.exps.clone()
    };
    Ok(IntOutput {
        logits: Tensor::new(out.shape.clone(), logits)?,
        logits_int: out.vals,
        logit_exponents,
        boundaries,
        ops,
    })
}

/// Integer inference in chunks; returns float logits and summed op counts.
pub fn predict_int(model: &QuantizedModel, images: &Tensor, chunk: usize) -> Result<(Tensor, OpCounts)> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut ops = OpCounts::default();
    let mut s = 0;
    while s < n {
        let e = (s + chunk.max(1)).min(n);
        let r = infer_int(model, &images.slice_rows(s, e))?;
        ops.merge(&r.ops);
        parts.push(r.logits);
        s = e;
    }
    Ok((Tensor::concat_rows(&parts)?, ops))
}

/// Float64 fake-quant simulation of `model`. Every value is a dyadic rational
/// small enough for f64 to hold exactly, so its quantized boundaries are the
/// exact reference for the integer path.
pub fn simulate(model: &QuantizedModel, input: &Tensor) -> Result<Vec<Boundary>> {
    model.validate()?;
    check_input(model, input)?;
    let mut values: Vec<Option<(Vec<f64>, Vec<usize>)>> = vec![None; model.nodes.len()];
    let mut boundaries = Vec::new();
    let act_exp = |i: usize| -> Option<i32> {
        let mut k = i;
        loop {
            let n = &model.nodes[k];
            if let Some(a) = &n.act {
                return Some(a.exponents().unwrap()[0]);
            }
            if n.op != QOp::Flatten {
                return None;
            }
            k = n.inputs[0];
        }
    };
    for (i, node) in model.nodes.iter().enumerate() {
        let arg = |k: usize| values[node.inputs[k]].as_ref().expect("topological order");
        let (mut v, shape) = match node.op {
            QOp::Input => (input.data().iter().map(|&x| x as f64).collect(), input.shape().to_vec()),
            QOp::Conv2d { stride, pad } => {
                let w = node.weight.as_ref().unwrap();
                let ex = act_exp(node.inputs[0]).ok_or_else(|| Error::Graph(format!("`{}` reads an unquantized tensor", node.id)))?;
                let (x, xs) = arg(0);
                ref_conv(x, xs, w, ex, stride, pad, &node.id)?
            }
            QOp::Linear => {
                let w = node.weight.as_ref().unwrap();
                let ex = act_exp(node.inputs[0]).ok_or_else(|| Error::Graph(format!("`{}` reads an unquantized tensor", node.id)))?;
                let (x, xs) = arg(0);
                ref_linear(x, xs, w, ex)?
            }
            QOp::Relu => {
                let (x, s) = arg(0);
                (x.iter().map(|v| v.max(0.0)).collect(), s.clone())
            }
            QOp::Add => {
                let ((a, s), (b, _)) = (arg(0), arg(1));
                (a.iter().zip(b).map(|(x, y)| x + y).collect(), s.clone())
            }
            QOp::Flatten => {
                let (x, s) = arg(0);
                (x.clone(), vec![s[0], x.len() / s[0].max(1)])
            }
        };
        if let Some(act) = &node.act {
            let s = pow2_f64(act.exponents().unwrap()[0]);
            let z = act.zero_point[0];
            let (lo, hi) = code_range(act.bit_width);
            let codes: Vec<f64> = v
                .iter()
                .map(|&x| (x / s + z as f64).round().clamp(lo as f64, hi as f64))
                .collect();
            v = codes.iter().map(|&q| s * (q - z as f64)).collect();
            boundaries.push(Boundary {
                layer: node.id.clone(),
                values: codes,
            });
        } else if i == model.output {
            let exps = output_exponents(model, i, &shape)?;
            let inner: usize = shape[2..].iter().product();
            let units = v
                .iter()
                .enumerate()
                .map(|(j, &x)| x / pow2_f64(exps[(j / inner) % shape[1]]))
                .collect();
            boundaries.push(Boundary {
                layer: node.id.clone(),
                values: units,
            });
        }
        values[i] = Some((v, shape));
    }
    Ok(boundaries)
}

/// Per-channel exponent of an unquantized node's integer representation.
fn output_exponents(model: &QuantizedModel, i: usize, shape: &[usize]) -> Result<Vec<i32>> {
    let node = &model.nodes[i];
    if let Some(a) = &node.act {
        return Ok(vec![a.exponents().unwrap()[0]; shape[1]]);
    }
    match node.op {
        QOp::Conv2d { .. } | QOp::Linear => {
            let w = node.weight.as_ref().unwrap();
            let ex = output_exponents(model, node.inputs[0], &[0, 1])?[0];
            Ok(w.params.exponents().unwrap().iter().map(|&e| e + ex).collect())
        }
        QOp::Relu => output_exponents(model, node.inputs[0], shape),
        QOp::Add => {
            let a = output_exponents(model, node.inputs[0], shape)?;
            let b = output_exponents(model, node.inputs[1], shape)?;
            Ok(a.iter().zip(&b).map(|(x, y)| *x.min(y)).collect())
        }
        QOp::Flatten => {
            let src = &model.nodes[node.inputs[0]];
            if let Some(a) = &src.act {
                return Ok(vec![a.exponents().unwrap()[0]; shape[1]]);
            }
            Err(Error::Graph(format!("`{}` flattens an unquantized tensor", node.id)))
        }
        QOp::Input => Err(Error::Graph("input node carries no quantizer".into())),
    }
}

fn dequant_weights(w: &QWeight) -> Vec<f64> {
    let per = w.codes.len() / w.shape[0];
    let exps = w.params.exponents().unwrap();
    w.codes
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let c = i / per;
            pow2_f64(exps[c]) * (q - w.params.zero_point[c]) as f64
        })
        .collect()
}

fn ref_bias(w: &QWeight, ex: i32) -> Vec<f64> {
    let exps = w.params.exponents().unwrap();
    w.bias
        .iter()
        .zip(exps)
        .map(|(&b, &e)| b as f64 * pow2_f64(e + ex))
        .collect()
}

fn ref_conv(x: &[f64], xs: &[usize], w: &QWeight, ex: i32, stride: usize, pad: usize, id: &str) -> Result<(Vec<f64>, Vec<usize>)> {
    let [n, c, h, wd] = dims4(xs, id)?;
    let [o, _, kh, kw] = dims4(&w.shape, id)?;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let wf = dequant_weights(w);
    let bias = ref_bias(w, ex);
    let mut out = vec![0f64; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += wf[((oc * c + ic) * kh + ky) * kw + kx]
                                    * x[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc + bias[oc];
                }
            }
        }
    }
    Ok((out, vec![n, o, oh, ow]))
}

fn ref_linear(x: &[f64], xs: &[usize], w: &QWeight, ex: i32) -> Result<(Vec<f64>, Vec<usize>)> {
    let (n, f, o) = (xs[0], w.shape[1], w.shape[0]);
    if xs.len() != 2 || xs[1] != f {
        return Err(Error::ShapeMismatch {
            op: "linear_ref",
            lhs: xs.to_vec(),
            rhs: w.shape.clone(),
        });
    }
    let wf = dequant_weights(w);
    let bias = ref_bias(w, ex);
    let mut out = vec![0f64; n * o];
    for b in 0..n {
        for oc in 0..o {
            let s: f64 = (0..f).map(|k| wf[oc * f + k] * x[b * f + k]).sum();
            out[b * o + oc] = s + bias[oc];
        }
    }
    Ok((out, vec![n, o]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMismatch {
    pub layer: String,
    pub count: usize,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub inputs: usize,
    pub boundaries: usize,
    pub values_compared: usize,
    pub mismatches: usize,
    /// Earliest boundary (in execution order) that disagrees.
    pub first_mismatch: Option<LayerMismatch>,
    pub ops: OpCounts,
}

impl EquivalenceReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches == 0
    }
}

/// Runs `candidate` on the integer path and `reference` in the float64
/// simulation, comparing every shared boundary.
pub fn compare_paths(reference: &QuantizedModel, candidate: &QuantizedModel, inputs: &Tensor) -> Result<EquivalenceReport> {
    let refs = simulate(reference, inputs)?;
    let got = infer_int(candidate, inputs)?;
    let mut report = EquivalenceReport {
        inputs: inputs.shape()[0],
        boundaries: 0,
        values_compared: 0,
        mismatches: 0,
        first_mismatch: None,
        ops: got.ops,
    };
    for r in &refs {
        let Some(c) = got.boundaries.iter().find(|b| b.layer == r.layer) else {
            continue;
        };
        report.boundaries += 1;
        let mut count = 0;
        let mut max_dev = 0f64;
        for (a, b) in r.values.iter().zip(&c.values) {
            report.values_compared += 1;
            if a != b {
                count += 1;
                max_dev = max_dev.max((a - b).abs());
            }
        }
        if r.values.len() != c.values.len() {
            count += r.values.len().abs_diff(c.values.len());
            max_dev = f64::INFINITY;
        }
        report.mismatches += count;
        if count > 0 && report.first_mismatch.is_none() {
            report.first_mismatch = Some(LayerMismatch {
                layer: r.layer.clone(),
                count,
                max_deviation: max_dev,
            });
        }
    }
    Ok(report)
}

/// Integer path versus float64 simulation of the same model.
pub fn equivalence_check(model: &QuantizedModel, inputs: &Tensor) -> Result<EquivalenceReport> {
    compare_paths(model, model, inputs)
}
