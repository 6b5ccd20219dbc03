//! Activation quantizers with learnable power-of-two exponents.

use std::collections::HashMap;
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::network::{backward, forward, BackwardOpts, FakeQuant, FoldedNet, Overrides};
use crate::quantizer::{code_range, pow2_f32, update_zero_point};
use crate::reconstruction::{lp_loss, lp_loss_grad, unit_loss, Adam, BatchSampler, BlockUnit, UnitData};
use crate::tensor::Tensor;

/// Which clipped-branch constants the exponent gradient uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradVariant {
    /// 0 below the range, `2^(b-1)` above it. Spelled `paper` on the
    /// command line and in reports.
    #[default]
    #[serde(rename = "paper")]
    Constant,
    /// Derivative of the clipped affine form: `lo - z` below, `hi - z` above.
    Derived,
}

impl std::str::FromStr for GradVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(GradVariant::Constant),
            "derived" => Ok(GradVariant::Derived),
            other => Err(invalid(format!("unknown gradient variant `{other}`"))),
        }
    }
}

/// `∂x̂/∂log2(s)` for one element.
pub fn act_scale_grad_value(x: f32, scale: f32, zero_point: i32, bits: u8, variant: GradVariant) -> f32 {
    let (lo, hi) = code_range(bits);
    let s = scale as f64;
    let v = x as f64 / s + zero_point as f64;
    let r = v.round();
    let k = if r < lo as f64 {
        match variant {
            GradVariant::Constant => 0.0,
            GradVariant::Derived => (lo - zero_point) as f64,
        }
    } else if r > hi as f64 {
        match variant {
            GradVariant::Constant => (1u64 << (bits - 1)) as f64,
            GradVariant::Derived => (hi - zero_point) as f64,
        }
    } else {
        r - v
    };
    (s * LN_2 * k) as f32
}

/// Elementwise exponent gradient for a whole tensor.
pub fn act_scale_grad(x: &Tensor, q: &ActQuantizer, variant: GradVariant) -> Tensor {
    let fq = q.fake_quant();
    x.map(|v| act_scale_grad_value(v, fq.scale, fq.zero_point, fq.bits, variant))
}

/// Per-tensor unsigned activation quantizer with a trainable log2 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuantizer {
    pub layer: usize,
    pub bits: u8,
    pub log2_scale: f64,
    pub calib_min: f32,
}

impl ActQuantizer {
    pub fn exponent(&self) -> i32 {
        self.log2_scale.round() as i32
    }

    pub fn zero_point_for(&self, exponent: i32) -> i32 {
        update_zero_point(self.calib_min, exponent, self.bits)
    }

    pub fn fake_quant_at(&self, exponent: i32) -> FakeQuant {
        FakeQuant {
            scale: pow2_f32(exponent),
            zero_point: self.zero_point_for(exponent),
            bits: self.bits,
        }
    }

    /// Forward quantizer for the current (rounded) exponent.
    pub fn fake_quant(&self) -> FakeQuant {
        self.fake_quant_at(self.exponent())
    }
}

#[derive(Debug, Clone)]
pub struct ActConfig {
    pub iters: usize,
    pub lr: f32,
    pub batch: usize,
    pub p_value: f64,
    pub seed: u64,
    pub variant: GradVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActReport {
    pub unit: usize,
    pub initial_exponents: Vec<i32>,
    pub final_exponents: Vec<i32>,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub iterations: usize,
    pub distinct_evaluated: usize,
}

fn acts_vec(net: &FoldedNet, base: &[Option<FakeQuant>], qs: &[ActQuantizer], exps: &[i32]) -> Vec<Option<FakeQuant>> {
    let mut acts = base.to_vec();
    acts.resize(net.layers.len(), None);
    for (q, &e) in qs.iter().zip(exps) {
        acts[q.layer] = Some(q.fake_quant_at(e));
    }
    acts
}

/// Descends the unit loss with respect to each quantizer's log2 scale, then
/// returns the best exponent vector seen (every distinct rounded vector is
/// scored on the full pool) after a ±1 coordinate refinement. `quantizers`
/// are updated in place with integral `log2_scale`.
pub fn optimize_act_scales(
    net: &FoldedNet,
    unit: &BlockUnit,
    data: &UnitData,
    weights: &[Option<Tensor>],
    quantizers: &mut [ActQuantizer],
    cfg: &ActConfig,
) -> Result<ActReport> {
    if quantizers.is_empty() {
        let ov = Overrides { weights, acts: &[] };
        let loss = unit_loss(net, unit, data, ov, cfg.p_value)?;
        return Ok(ActReport {
            unit: unit.index,
            initial_exponents: Vec::new(),
            final_exponents: Vec::new(),
            loss_initial: loss,
            loss_final: loss,
            iterations: 0,
            distinct_evaluated: 1,
        });
    }
    let mut cache: HashMap<Vec<i32>, f64> = HashMap::new();
    let mut score = |exps: &[i32]| -> Result<f64> {
        if let Some(&l) = cache.get(exps) {
            return Ok(l);
        }
        let acts = acts_vec(net, &[], quantizers, exps);
        let l = unit_loss(net, unit, data, Overrides { weights, acts: &acts }, cfg.p_value)?;
        cache.insert(exps.to_vec(), l);
        Ok(l)
    };
    let initial: Vec<i32> = quantizers.iter().map(|q| q.exponent()).collect();
    let loss_initial = score(&initial)?;
    let mut best = (loss_initial, initial.clone());

    let mut ell: Vec<f32> = quantizers.iter().map(|q| q.log2_scale as f32).collect();
    let mut opt = Adam::new(cfg.lr, ell.len());
    let mut sampler = BatchSampler::new(data.len(), cfg.batch, cfg.seed)?;
    let opts = BackwardOpts {
        want_weight: false,
        want_act: true,
        variant: cfg.variant,
    };
    for t in 0..cfg.iters {
        let exps: Vec<i32> = ell.iter().map(|l| l.round() as i32).collect();
        let acts = acts_vec(net, &[], quantizers, &exps);
        let ov = Overrides { weights, acts: &acts };
        let rows = sampler.next_batch();
        let (ext, raw, target) = data.batch(&rows);
        let trace = forward(net, &unit.layers, ext, raw, ov)?;
        let out = trace.value(unit.output);
        let loss = lp_loss(out, &target, cfg.p_value)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "activation scale search",
                unit: unit.index,
                iter: t,
            });
        }
        let g = lp_loss_grad(out, &target, cfg.p_value)?;
        let grads = backward(net, &unit.layers, &trace, ov, g, opts)?;
        let gl: Vec<f32> = quantizers.iter().map(|q| grads.log2_scale[q.layer] as f32).collect();
        opt.step(&mut ell, &gl);
        let next: Vec<i32> = ell.iter().map(|l| l.round() as i32).collect();
        if next != exps {
            let l = score(&next)?;
            if l < best.0 {
                best = (l, next);
            }
        }
    }

    // Coordinate refinement around the best vector.
    for _ in 0..3 {
        let mut improved = false;
        for k in 0..best.1.len() {
            for d in [-1, 1] {
                let mut cand = best.1.clone();
                cand[k] += d;
                let l = score(&cand)?;
                if l < best.0 {
                    best = (l, cand);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let distinct_evaluated = cache.len();
    for (q, &e) in quantizers.iter_mut().zip(&best.1) {
        q.log2_scale = e as f64;
    }
    Ok(ActReport {
        unit: unit.index,
        initial_exponents: initial,
        final_exponents: best.1,
        loss_initial,
        loss_final: best.0,
        iterations: cfg.iters,
        distinct_evaluated,
    })
}
