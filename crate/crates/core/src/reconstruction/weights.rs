use super::{lp_loss, lp_loss_grad, unit_loss, Adam, BatchSampler, BlockUnit, UnitData};
use crate::actquant::GradVariant;
use crate::error::{Error, Result};
use crate::network::{backward, forward, BackwardOpts, FoldedNet, Overrides};
use crate::quantizer::{count_clipped, QuantParams};
use crate::softquant::{
    anneal_schedule, harden, nearest_rounding, regularizer, regularizer_grad, soft_weight,
    soft_weight_backward, warmup_iters, HardenedWeights, SoftQuantState,
};
use crate::tensor::Tensor;

const REFINE_PASSES: usize = 3;

#[derive(Debug, Clone)]
pub struct WeightConfig {
    /// Total weight iterations `I_w`, including the scale-group warm-up.
    pub iters_total: usize,
    /// Scale-group iterations `I_s`.
    pub iters_scale: usize,
    pub lr_u: f32,
    pub lr_v: f32,
    pub lambda: f32,
    pub mu: f32,
    pub batch: usize,
    pub p_value: f64,
    pub seed: u64,
}

impl WeightConfig {
    pub fn rounding_iters(&self) -> usize {
        self.iters_total.saturating_sub(self.iters_scale)
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub layer: usize,
    pub hardened: HardenedWeights,
    /// `floor(log2 s)` of the float initialisation, per channel.
    pub floor_exp: Vec<i32>,
    /// Share of rounding gates within 1e-3 of 0 or 1 after phase 2.
    pub binary_fraction: f32,
    pub clipped: usize,
    pub rounded_up: usize,
}

#[derive(Debug, Clone)]
pub struct UnitWeightReport {
    pub unit: usize,
    pub p_value: f64,
    /// Naive exponents with nearest rounding.
    pub loss_naive: f64,
    /// Learned exponents (before the guard) with nearest rounding.
    pub loss_scale_learned: f64,
    /// Kept (and refined) exponents with nearest rounding.
    pub loss_phase1: f64,
    /// Learned rounding on the kept grid (before the guard).
    pub loss_rounding_learned: f64,
    pub loss_final: f64,
    pub exponents_learned: bool,
    /// Channel flips made by the discrete refinement after phase 1.
    pub refined_channels: usize,
    pub rounding_learned: bool,
    pub layers: Vec<LayerOutcome>,
}

/// Per-layer gradients for the rounding gates U and the exponent gates V.
type GateGrads = (Vec<f32>, Vec<f32>);

struct Ctx<'a> {
    net: &'a FoldedNet,
    unit: &'a BlockUnit,
    data: &'a UnitData,
    layers: Vec<usize>,
    p: f64,
}

impl Ctx<'_> {
    fn weight(&self, li: usize) -> &Tensor {
        self.net.layers[li].weight.as_ref().expect("weight layer")
    }

    fn loss_with(&self, hardened: &[HardenedWeights]) -> Result<f64> {
        let mut ws = vec![None; self.net.layers.len()];
        for (&li, h) in self.layers.iter().zip(hardened) {
            ws[li] = Some(h.dequantized(self.weight(li).shape())?);
        }
        unit_loss(
            self.net,
            self.unit,
            self.data,
            Overrides {
                weights: &ws,
                acts: &[],
            },
            self.p,
        )
    }

    fn nearest(&self, states: &[SoftQuantState], exps: &[Vec<i32>]) -> Result<Vec<HardenedWeights>> {
        self.layers
            .iter()
            .zip(states)
            .zip(exps)
            .map(|((&li, st), e)| nearest_rounding(st, self.weight(li), e))
            .collect()
    }

    /// One minibatch step: returns the reconstruction loss and per-layer
    /// (dU, dV).
    fn step(
        &self,
        states: &[SoftQuantState],
        rows: &[usize],
        stage: &'static str,
        iter: usize,
    ) -> Result<(f64, Vec<GateGrads>)> {
        let mut ws = vec![None; self.net.layers.len()];
        let mut soft = Vec::with_capacity(self.layers.len());
        for (&li, st) in self.layers.iter().zip(states) {
            let sw = soft_weight(self.weight(li), st)?;
            ws[li] = Some(sw.w_tilde.clone());
            soft.push(sw);
        }
        let ov = Overrides {
            weights: &ws,
            acts: &[],
        };
        let (ext, raw, target) = self.data.batch(rows);
        let trace = forward(self.net, &self.unit.layers, ext, raw, ov)?;
        let out = trace.value(self.unit.output);
        let loss = lp_loss(out, &target, self.p)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage,
                unit: self.unit.index,
                iter,
            });
        }
        let g = lp_loss_grad(out, &target, self.p)?;
        let opts = BackwardOpts {
            want_weight: true,
            want_act: false,
            variant: GradVariant::Constant,
        };
        let grads = backward(self.net, &self.unit.layers, &trace, ov, g, opts)?;
        let mut out_grads = Vec::with_capacity(self.layers.len());
        for ((&li, st), sw) in self.layers.iter().zip(states).zip(&soft) {
            let gw = grads.weight[li].as_ref().expect("weight gradient");
            out_grads.push(soft_weight_backward(sw, st, gw));
        }
        Ok((loss, out_grads))
    }
}

fn add_scaled(dst: &mut [f32], src: &[f32], k: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Two-phase reconstruction of one unit's weights.
///
/// Phase 1 learns the exponent offsets V with the rounding gates U held at
/// their initial values, then freezes the grid. Phase 2 learns U on the frozen
/// grid with the annealed regularizer and hardens. After each phase the
/// learned result is compared with the naive alternative (rounded-log
/// exponents, nearest rounding) on the full pool and the better one is kept.
pub fn reconstruct_unit_weights(
    net: &FoldedNet,
    unit: &BlockUnit,
    data: &UnitData,
    init: &[QuantParams],
    cfg: &WeightConfig,
) -> Result<UnitWeightReport> {
    let ctx = Ctx {
        net,
        unit,
        data,
        layers: unit.weight_layers(net),
        p: cfg.p_value,
    };
    if init.len() != ctx.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "unit {} has {} weight layers but {} initial quantizers",
            unit.index,
            ctx.layers.len(),
            init.len()
        )));
    }
    let mut states: Vec<SoftQuantState> = ctx
        .layers
        .iter()
        .zip(init)
        .map(|(&li, q)| SoftQuantState::init(ctx.weight(li), q, cfg.lambda, cfg.mu))
        .collect::<Result<_>>()?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch, cfg.seed)?;

    // Phase 1: scale group.
    let mut adam_v: Vec<Adam> = states.iter().map(|s| Adam::new(cfg.lr_v, s.v.len())).collect();
    let warm_v = warmup_iters(cfg.iters_scale);
    for t in 0..cfg.iters_scale {
        let rows = sampler.next_batch();
        let (_, grads) = ctx.step(&states, &rows, "weight scale search", t)?;
        let beta = anneal_schedule(t, cfg.iters_scale);
        let mu = if t >= warm_v { cfg.mu } else { 0.0 };
        for ((st, opt), (_, gv)) in states.iter_mut().zip(&mut adam_v).zip(grads) {
            let mut g = gv;
            if mu > 0.0 {
                add_scaled(&mut g, &regularizer_grad(&st.v, beta, st.stretch), mu);
            }
            opt.step(&mut st.v, &g);
        }
    }
    let learned: Vec<Vec<i32>> = states.iter().map(|s| s.hard_exponents()).collect();
    let naive: Vec<Vec<i32>> = states.iter().map(|s| s.naive_exponents()).collect();
    let loss_scale_learned = ctx.loss_with(&ctx.nearest(&states, &learned)?)?;
    let loss_naive = ctx.loss_with(&ctx.nearest(&states, &naive)?)?;
    let exponents_learned = loss_scale_learned <= loss_naive;
    let mut chosen = if exponents_learned { learned } else { naive };
    let mut loss_phase1 = loss_scale_learned.min(loss_naive);

    // Discrete pass over the scale group: flip single channels between
    // floor and floor + 1 while the full-pool loss improves.
    let mut refined_channels = 0;
    for _ in 0..REFINE_PASSES {
        let mut improved = false;
        for l in 0..states.len() {
            for c in 0..states[l].channels() {
                let fe = states[l].floor_exp[c];
                let alt = if chosen[l][c] == fe { fe + 1 } else { fe };
                let mut cand = chosen.clone();
                cand[l][c] = alt;
                let loss = ctx.loss_with(&ctx.nearest(&states, &cand)?)?;
                if loss < loss_phase1 {
                    chosen = cand;
                    loss_phase1 = loss;
                    refined_channels += 1;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    for ((st, &li), e) in states.iter_mut().zip(&ctx.layers).zip(&chosen) {
        st.freeze(e.clone(), net.layers[li].weight.as_ref().unwrap());
    }

    // Phase 2: rounding.
    let mut adam_u: Vec<Adam> = states.iter().map(|s| Adam::new(cfg.lr_u, s.u.len())).collect();
    let warm_total = warmup_iters(cfg.iters_total);
    for t in 0..cfg.rounding_iters() {
        let global = cfg.iters_scale + t;
        let rows = sampler.next_batch();
        let (_, grads) = ctx.step(&states, &rows, "weight rounding", global)?;
        let beta = anneal_schedule(global, cfg.iters_total);
        let lambda = if global >= warm_total { cfg.lambda } else { 0.0 };
        for ((st, opt), (gu, _)) in states.iter_mut().zip(&mut adam_u).zip(grads) {
            let mut g = gu;
            if lambda > 0.0 {
                add_scaled(&mut g, &regularizer_grad(&st.u, beta, st.stretch), lambda);
            }
            opt.step(&mut st.u, &g);
        }
    }
    if log::log_enabled!(log::Level::Debug) {
        for st in &states {
            log::debug!(
                "unit {}: final rounding regularizer {:.3}",
                unit.index,
                regularizer(&st.u, crate::softquant::BETA_END, st.stretch)
            );
        }
    }
    let hard: Vec<HardenedWeights> = ctx
        .layers
        .iter()
        .zip(&states)
        .map(|(&li, st)| harden(st, ctx.weight(li)))
        .collect::<Result<_>>()?;
    let nearest = ctx.nearest(&states, &chosen)?;
    let loss_rounding_learned = ctx.loss_with(&hard)?;
    let loss_nearest = ctx.loss_with(&nearest)?;
    let rounding_learned = loss_rounding_learned <= loss_nearest;
    let final_weights = if rounding_learned { hard } else { nearest };

    let mut layers = Vec::with_capacity(ctx.layers.len());
    for ((&li, st), hw) in ctx.layers.iter().zip(&states).zip(final_weights) {
        let w = ctx.weight(li);
        let binary = st
            .u
            .iter()
            .filter(|&&u| {
                let h = st.stretch.h(u);
                h <= 1e-3 || h >= 1.0 - 1e-3
            })
            .count();
        let stats = count_clipped(w, &hw.params)?;
        let per = w.row_len();
        let rounded_up = hw
            .codes
            .iter()
            .enumerate()
            .filter(|&(i, &k)| {
                let c = i / per;
                let base = (w.data()[i] / hw.params.scale(c) + hw.params.zero_point[c] as f32).floor();
                k as f32 > base
            })
            .count();
        layers.push(LayerOutcome {
            layer: li,
            floor_exp: st.floor_exp.clone(),
            binary_fraction: binary as f32 / st.u.len().max(1) as f32,
            clipped: stats.clipped,
            rounded_up,
            hardened: hw,
        });
    }
    Ok(UnitWeightReport {
        unit: unit.index,
        p_value: cfg.p_value,
        loss_naive,
        loss_scale_learned,
        loss_phase1,
        loss_rounding_learned,
        loss_final: loss_rounding_learned.min(loss_nearest),
        exponents_learned,
        refined_channels,
        rounding_learned,
        layers,
    })
}
