//! End-to-end quantization runs: calibration, weight reconstruction,
//! activation exponent search, hardening, verification and reporting.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use serde_json::json;

use crate::actquant::{optimize_act_scales, ActConfig, ActQuantizer, GradVariant};
use crate::error::{invalid, Error, Result};
use crate::io::calib::{load_calibration, Dataset};
use crate::io::graph::load_model;
use crate::io::quantized::{QNode, QOp, QWeight, QuantizedModel};
use crate::network::{accuracy, forward, predict, FakeQuant, FoldedNet, LayerKind, Overrides};
use crate::quantizer::{init_scale_mse, naive_pow2_scale, pow2_f64, Granularity, QuantParams, Signedness};
use crate::reconstruction::{
    compute_p_value, partition_blocks, reconstruct_unit_weights, unit_loss, BlockUnit, GammaSource, UnitData,
    WeightConfig,
};
use crate::shift::{equivalence_check, predict_int, EquivalenceReport};
use crate::softquant::{nearest_rounding, HardenedWeights, SoftQuantState, WARMUP_FRACTION};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Quick,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "quick" => Ok(Mode::Quick),
            other => Err(invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Rounded-log exponents, nearest rounding, no optimization.
    Naive,
    /// Two-phase reconstruction with the plain squared loss.
    ScaleGroup,
    /// Two-phase reconstruction with the γ-derived L-P loss.
    AdaptiveP,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::ScaleGroup => "scale-group",
            Method::AdaptiveP => "adaptive-p",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub mode: Mode,
    /// Total weight iterations per unit.
    pub iters_weight: usize,
    /// Scale-group warm-up iterations, included in `iters_weight`.
    pub iters_scale: usize,
    pub iters_act: usize,
    pub alpha: f64,
    pub beta_shift: f64,
    pub seed: u64,
    pub lr_u: f32,
    pub lr_v: f32,
    pub lr_act: f32,
    pub lambda: f32,
    pub mu: f32,
    pub batch: usize,
    pub grad_variant: GradVariant,
    /// Replaces the γ-derived exponent of every unit.
    pub force_p: Option<f64>,
    pub equivalence_inputs: usize,
}

impl RunConfig {
    pub fn new(mode: Mode, weight_bits: u8, act_bits: u8) -> Self {
        let (iters_weight, iters_act, alpha) = match mode {
            Mode::Full => (80_000, 5_000, 0.9),
            Mode::Quick => (20_000, 1_000, 0.1),
        };
        RunConfig {
            weight_bits,
            act_bits,
            mode,
            iters_weight,
            iters_scale: scale_iters(iters_weight),
            iters_act,
            alpha,
            beta_shift: 1.0,
            seed: 0,
            lr_u: 1e-3,
            lr_v: 1e-3,
            lr_act: 5e-3,
            lambda: 1.0,
            mu: 0.01,
            batch: 32,
            grad_variant: GradVariant::Constant,
            force_p: None,
            equivalence_inputs: 256,
        }
    }

    /// Sets `I_w` and the warm-up share derived from it.
    pub fn with_iters_weight(mut self, iters: usize) -> Self {
        self.iters_weight = iters;
        self.iters_scale = scale_iters(iters);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("weight", self.weight_bits), ("activation", self.act_bits)] {
            if !(2..=8).contains(&b) {
                return Err(invalid(format!("{name} bit width {b} outside 2..=8")));
            }
        }
        if self.iters_scale > self.iters_weight {
            return Err(invalid("scale iterations exceed total weight iterations"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta_shift.is_finite()) {
            return Err(invalid("alpha must be non-negative and beta finite"));
        }
        if self.batch == 0 || self.equivalence_inputs == 0 {
            return Err(invalid("batch and equivalence input counts must be positive"));
        }
        if let Some(p) = self.force_p {
            if !(p >= 1.0 && p.is_finite()) {
                return Err(invalid(format!("forced P {p} must be at least 1")));
            }
        }
        Ok(())
    }
}

fn scale_iters(total: usize) -> usize {
    (total as f64 * WARMUP_FRACTION).round() as usize
}

/// Pipeline stages; each failure maps to its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Calibrate,
    ScaleSearch,
    Rounding,
    ActSearch,
    Harden,
    Verify,
    Report,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 10,
            Stage::Load => 11,
            Stage::Calibrate => 12,
            Stage::ScaleSearch => 13,
            Stage::Rounding => 14,
            Stage::ActSearch => 15,
            Stage::Harden => 16,
            Stage::Verify => 17,
            Stage::Report => 18,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "configuration",
            Stage::Load => "loading",
            Stage::Calibrate => "calibration",
            Stage::ScaleSearch => "weight scale search",
            Stage::Rounding => "weight rounding",
            Stage::ActSearch => "activation scale search",
            Stage::Harden => "hardening",
            Stage::Verify => "verification",
            Stage::Report => "reporting",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

fn at(stage: Stage) -> impl Fn(Error) -> PipelineError {
    move |source| PipelineError { stage, source }
}

type PResult<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Serialize)]
pub struct LayerRecord {
    pub layer: String,
    pub exponents: Vec<i32>,
    pub floor_exponents: Vec<i32>,
    pub zero_points: Vec<i32>,
    pub clipped: usize,
    pub rounded_up: usize,
    pub binary_fraction: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActRecord {
    pub layer: String,
    pub initial_exponent: i32,
    pub exponent: i32,
    pub zero_point: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitRecord {
    pub unit: usize,
    pub layers: Vec<String>,
    pub p_value: f64,
    pub gamma_mean: f64,
    pub gamma_source: String,
    pub loss_naive: f64,
    pub loss_scale_learned: f64,
    pub loss_phase1: f64,
    pub loss_rounding_learned: f64,
    pub loss_weights: f64,
    pub exponents_learned: bool,
    pub refined_channels: usize,
    pub rounding_learned: bool,
    pub act_loss_initial: f64,
    pub act_loss_final: f64,
    pub act_candidates: usize,
    pub weights: Vec<LayerRecord>,
    pub activations: Vec<ActRecord>,
}

#[derive(Debug, Clone)]
pub struct QuantOutcome {
    pub method: Method,
    pub model: QuantizedModel,
    pub units: Vec<UnitRecord>,
    pub equivalence: EquivalenceReport,
    pub accuracy: Option<f32>,
    pub fp_accuracy: Option<f32>,
    pub elapsed_secs: f64,
}

impl QuantOutcome {
    pub fn p_values(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.p_value).collect()
    }
}

/// Per-unit reconstruction inputs: earlier units run with `weights` and
/// `acts`, targets come from the float trace.
fn unit_data(
    net: &FoldedNet,
    units: &[BlockUnit],
    k: usize,
    calib: &Tensor,
    fp: &crate::network::Trace,
    weights: &[Option<Tensor>],
    acts: &[Option<FakeQuant>],
) -> Result<UnitData> {
    let unit = &units[k];
    let mut prefix: Vec<usize> = units[..k].iter().flat_map(|u| u.layers.iter().copied()).collect();
    prefix.sort_unstable();
    let externals = if unit.externals.is_empty() {
        Vec::new()
    } else {
        let mut trace = forward(net, &prefix, Vec::new(), Some(calib.clone()), Overrides { weights, acts })?;
        unit.externals.iter().map(|&e| (e, trace.take(e))).collect()
    };
    let raw = unit.contains(net.input_layer()).then(|| calib.clone());
    Ok(UnitData {
        externals,
        raw,
        target: fp.value(unit.output).clone(),
    })
}

fn unit_seed(seed: u64, unit: usize, salt: u64) -> u64 {
    seed ^ (unit as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn gamma_source_name(g: GammaSource) -> String {
    match g {
        GammaSource::Own => "own".into(),
        GammaSource::Preceding(u) => format!("preceding:{u}"),
        GammaSource::Default => "default".into(),
    }
}

/// Exponent of the quantizer feeding layer `i`, looking through flattens.
fn input_exponent(net: &FoldedNet, acts: &[Option<ActQuantizer>], i: usize) -> Option<i32> {
    let mut k = net.layers[i].inputs[0];
    loop {
        if let Some(q) = &acts[k] {
            return Some(q.exponent());
        }
        if net.layers[k].kind != LayerKind::Flatten {
            return None;
        }
        k = net.layers[k].inputs[0];
    }
}

fn quantize_bias(bias: &[f32], exps: &[i32], ex: i32, layer: &str) -> Result<Vec<i32>> {
    bias.iter()
        .zip(exps)
        .map(|(&b, &e)| {
            let v = (b as f64 / pow2_f64(e + ex)).round();
            if v.abs() > i32::MAX as f64 {
                Err(Error::Overflow { layer: layer.into() })
            } else {
                Ok(v as i32)
            }
        })
        .collect()
}

fn build_model(
    net: &FoldedNet,
    hardened: &[Option<HardenedWeights>],
    acts: &[Option<ActQuantizer>],
    act_bits: u8,
) -> Result<QuantizedModel> {
    let mut nodes = Vec::with_capacity(net.layers.len());
    for (i, l) in net.layers.iter().enumerate() {
        let op = match l.kind {
            LayerKind::Input => QOp::Input,
            LayerKind::Conv(p) => QOp::Conv2d {
                stride: p.stride,
                pad: p.pad,
            },
            LayerKind::Linear => QOp::Linear,
            LayerKind::Relu => QOp::Relu,
            LayerKind::Add => QOp::Add,
            LayerKind::Flatten => QOp::Flatten,
        };
        let act = match &acts[i] {
            Some(q) => {
                let e = q.exponent();
                Some(QuantParams::new_pow2(
                    act_bits,
                    vec![e],
                    vec![q.zero_point_for(e)],
                    Granularity::PerTensor,
                    Signedness::AsymmetricUnsigned,
                )?)
            }
            None => None,
        };
        let weight = match (&hardened[i], &l.weight) {
            (Some(h), Some(w)) => {
                let ex = input_exponent(net, acts, i)
                    .ok_or_else(|| Error::Graph(format!("weight layer `{}` reads an unquantized tensor", l.id)))?;
                let exps = h.params.exponents().ok_or_else(|| Error::NotPowerOfTwo(l.id.clone()))?;
                Some(QWeight {
                    shape: w.shape().to_vec(),
                    codes: h.codes.clone(),
                    params: h.params.clone(),
                    bias: quantize_bias(&l.bias, exps, ex, &l.id)?,
                })
            }
            (None, Some(_)) => return Err(Error::Graph(format!("weight layer `{}` was not quantized", l.id))),
            _ => None,
        };
        nodes.push(QNode {
            id: l.id.clone(),
            op,
            inputs: l.inputs.clone(),
            act,
            weight,
        });
    }
    let model = QuantizedModel {
        nodes,
        output: net.output,
        input_shape: net.input_shape.clone(),
        bn_folded: true,
    };
    model.validate()?;
    Ok(model)
}

/// Quantizes `net` with `method`, calibrating on `calib` and, if given,
/// evaluating on the labeled `eval` set.
pub fn quantize(
    net: &FoldedNet,
    calib: &Tensor,
    eval: Option<&Dataset>,
    cfg: &RunConfig,
    method: Method,
) -> PResult<QuantOutcome> {
    let started = Instant::now();
    cfg.validate().map_err(at(Stage::Config))?;
    let n = net.layers.len();
    let units = partition_blocks(net).map_err(at(Stage::Calibrate))?;
    let all = net.all_layers();
    let fp = forward(net, &all, Vec::new(), Some(calib.clone()), Overrides::none()).map_err(at(Stage::Calibrate))?;

    let mut p_values = Vec::with_capacity(units.len());
    for u in &units {
        let p = match (method, cfg.force_p) {
            (Method::Naive | Method::ScaleGroup, _) => 2.0,
            (Method::AdaptiveP, Some(p)) => p,
            (Method::AdaptiveP, None) => compute_p_value(&u.bn_gamma_last, cfg.alpha, cfg.beta_shift).map_err(at(Stage::Calibrate))?,
        };
        p_values.push(p);
    }

    // Weights, unit by unit.
    let mut qweights: Vec<Option<Tensor>> = vec![None; n];
    let mut hardened: Vec<Option<HardenedWeights>> = vec![None; n];
    let mut records = Vec::with_capacity(units.len());
    for (k, unit) in units.iter().enumerate() {
        let wl = unit.weight_layers(net);
        let mut inits = Vec::with_capacity(wl.len());
        for &li in &wl {
            let w = net.layers[li].weight.as_ref().expect("weight layer");
            inits.push(
                init_scale_mse(w, cfg.weight_bits, Granularity::PerOutputChannel, Signedness::Asymmetric)
                    .map_err(at(Stage::Calibrate))?,
            );
        }
        let data = unit_data(net, &units, k, calib, &fp, &qweights, &[]).map_err(at(Stage::Calibrate))?;
        let gamma_mean = unit.bn_gamma_last.iter().map(|&g| g as f64).sum::<f64>() / unit.bn_gamma_last.len().max(1) as f64;
        let mut rec = UnitRecord {
            unit: unit.index,
            layers: unit.layers.iter().map(|&i| net.layers[i].id.clone()).collect(),
            p_value: p_values[k],
            gamma_mean,
            gamma_source: gamma_source_name(unit.gamma_source),
            loss_naive: 0.0,
            loss_scale_learned: 0.0,
            loss_phase1: 0.0,
            loss_rounding_learned: 0.0,
            loss_weights: 0.0,
            exponents_learned: false,
            refined_channels: 0,
            rounding_learned: false,
            act_loss_initial: 0.0,
            act_loss_final: 0.0,
            act_candidates: 0,
            weights: Vec::new(),
            activations: Vec::new(),
        };
        let outcomes: Vec<(usize, HardenedWeights, Vec<i32>, usize, usize, f32)> = if method == Method::Naive || wl.is_empty() {
            let mut out = Vec::new();
            for (&li, init) in wl.iter().zip(&inits) {
                let w = net.layers[li].weight.as_ref().expect("weight layer");
                let st = SoftQuantState::init(w, init, cfg.lambda, cfg.mu).map_err(at(Stage::Harden))?;
                let h = nearest_rounding(&st, w, &st.naive_exponents()).map_err(at(Stage::Harden))?;
                out.push((li, h, st.floor_exp.clone(), 0, 0, 1.0));
            }
            let mut ws = qweights.clone();
            for (li, h, ..) in &out {
                ws[*li] = Some(h.dequantized(net.layers[*li].weight.as_ref().unwrap().shape()).map_err(at(Stage::Harden))?);
            }
            let loss = unit_loss(net, unit, &data, Overrides { weights: &ws, acts: &[] }, p_values[k])
                .map_err(at(Stage::Harden))?;
            rec.loss_naive = loss;
            rec.loss_scale_learned = loss;
            rec.loss_phase1 = loss;
            rec.loss_rounding_learned = loss;
            rec.loss_weights = loss;
            out
        } else {
            let wcfg = WeightConfig {
                iters_total: cfg.iters_weight,
                iters_scale: cfg.iters_scale,
                lr_u: cfg.lr_u,
                lr_v: cfg.lr_v,
                lambda: cfg.lambda,
                mu: cfg.mu,
                batch: cfg.batch,
                p_value: p_values[k],
                seed: unit_seed(cfg.seed, unit.index, 1),
            };
            let r = reconstruct_unit_weights(net, unit, &data, &inits, &wcfg).map_err(|e| {
                let stage = match e {
                    Error::Diverged { stage, .. } if stage == Stage::Rounding.name() => Stage::Rounding,
                    _ => Stage::ScaleSearch,
                };
                PipelineError { stage, source: e }
            })?;
            rec.loss_naive = r.loss_naive;
            rec.loss_scale_learned = r.loss_scale_learned;
            rec.loss_phase1 = r.loss_phase1;
            rec.loss_rounding_learned = r.loss_rounding_learned;
            rec.loss_weights = r.loss_final;
            rec.exponents_learned = r.exponents_learned;
            rec.refined_channels = r.refined_channels;
            rec.rounding_learned = r.rounding_learned;
            r.layers
                .into_iter()
                .map(|o| (o.layer, o.hardened, o.floor_exp, o.clipped, o.rounded_up, o.binary_fraction))
                .collect()
        };
        for (li, h, floor_exp, clipped, rounded_up, binary_fraction) in outcomes {
            let shape = net.layers[li].weight.as_ref().unwrap().shape().to_vec();
            qweights[li] = Some(h.dequantized(&shape).map_err(at(Stage::Harden))?);
            rec.weights.push(LayerRecord {
                layer: net.layers[li].id.clone(),
                exponents: h.params.exponents().unwrap_or(&[]).to_vec(),
                floor_exponents: floor_exp,
                zero_points: h.params.zero_point.clone(),
                clipped,
                rounded_up,
                binary_fraction,
            });
            hardened[li] = Some(h);
        }
        info!(
            "unit {} [{}]: P = {:.2}, weight loss {:.4} (naive {:.4})",
            unit.index,
            rec.layers.join(","),
            rec.p_value,
            rec.loss_weights,
            rec.loss_naive
        );
        records.push(rec);
    }

    // Activation quantizers, initialised from the float calibration trace.
    let qp = net.quant_points();
    let mut acts: Vec<Option<ActQuantizer>> = vec![None; n];
    for (i, &is_q) in qp.iter().enumerate() {
        if !is_q {
            continue;
        }
        let x = fp.value(i);
        let init = init_scale_mse(x, cfg.act_bits, Granularity::PerTensor, Signedness::AsymmetricUnsigned)
            .map_err(at(Stage::Calibrate))?;
        let s = init.scale(0);
        let log2_scale = match method {
            Method::Naive => naive_pow2_scale(s).map_err(at(Stage::Calibrate))? as f64,
            _ => (s as f64).log2(),
        };
        let calib_min = x.data().iter().copied().fold(f32::INFINITY, f32::min);
        acts[i] = Some(ActQuantizer {
            layer: i,
            bits: cfg.act_bits,
            log2_scale,
            calib_min,
        });
    }
    for (k, unit) in units.iter().enumerate() {
        let members: Vec<usize> = unit.layers.iter().copied().filter(|&i| acts[i].is_some()).collect();
        let mut qs: Vec<ActQuantizer> = members.iter().map(|&i| acts[i].clone().unwrap()).collect();
        let initial: Vec<i32> = qs.iter().map(|q| q.exponent()).collect();
        if method != Method::Naive && !qs.is_empty() {
            let fixed: Vec<Option<FakeQuant>> = acts
                .iter()
                .enumerate()
                .map(|(i, q)| q.as_ref().filter(|_| !unit.contains(i)).map(|q| q.fake_quant()))
                .collect();
            let data = unit_data(net, &units, k, calib, &fp, &qweights, &fixed).map_err(at(Stage::ActSearch))?;
            let acfg = ActConfig {
                iters: cfg.iters_act,
                lr: cfg.lr_act,
                batch: cfg.batch,
                p_value: p_values[k],
                seed: unit_seed(cfg.seed, unit.index, 2),
                variant: cfg.grad_variant,
            };
            let r = optimize_act_scales(net, unit, &data, &qweights, &mut qs, &acfg).map_err(at(Stage::ActSearch))?;
            records[k].act_loss_initial = r.loss_initial;
            records[k].act_loss_final = r.loss_final;
            records[k].act_candidates = r.distinct_evaluated;
        }
        for (q, e0) in qs.into_iter().zip(initial) {
            let e = q.exponent();
            records[k].activations.push(ActRecord {
                layer: net.layers[q.layer].id.clone(),
                initial_exponent: e0,
                exponent: e,
                zero_point: q.zero_point_for(e),
            });
            let li = q.layer;
            acts[li] = Some(q);
        }
    }

    let model = build_model(net, &hardened, &acts, cfg.act_bits).map_err(at(Stage::Harden))?;

    let probe = eval.map(|d| &d.images).unwrap_or(calib);
    let rows = cfg.equivalence_inputs.min(probe.shape()[0]);
    let equivalence = equivalence_check(&model, &probe.slice_rows(0, rows)).map_err(at(Stage::Verify))?;
    if let Some(m) = &equivalence.first_mismatch {
        return Err(PipelineError {
            stage: Stage::Verify,
            source: Error::Mismatch {
                layer: m.layer.clone(),
                max_deviation: m.max_deviation,
            },
        });
    }
    if equivalence.ops.float_mul != 0 {
        return Err(PipelineError {
            stage: Stage::Verify,
            source: Error::Graph(format!("{} float multiplies on the integer path", equivalence.ops.float_mul)),
        });
    }

    let (mut acc, mut fp_acc) = (None, None);
    if let Some(d) = eval {
        let labels = d.labels().map_err(at(Stage::Report))?;
        let (logits, _) = predict_int(&model, &d.images, 256).map_err(at(Stage::Report))?;
        acc = Some(accuracy(&logits, labels));
        let fl = predict(net, &d.images, Overrides::none(), 256).map_err(at(Stage::Report))?;
        fp_acc = Some(accuracy(&fl, labels));
    }
    Ok(QuantOutcome {
        method,
        model,
        units: records,
        equivalence,
        accuracy: acc,
        fp_accuracy: fp_acc,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

/// File locations for a run.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub model: PathBuf,
    /// Defaults to `weights.bin` next to the manifest.
    pub weights: Option<PathBuf>,
    pub calib: PathBuf,
    pub out: PathBuf,
    pub report: PathBuf,
    pub eval: Option<PathBuf>,
}

struct Inputs {
    net: FoldedNet,
    calib: Dataset,
    eval: Option<Dataset>,
}

fn load_inputs(paths: &RunPaths) -> PResult<Inputs> {
    let model = load_model(&paths.model, paths.weights.as_deref()).map_err(at(Stage::Load))?;
    let net = FoldedNet::from_model(&model).map_err(at(Stage::Load))?;
    let calib = load_calibration(&paths.calib, &net.input_shape).map_err(at(Stage::Load))?;
    let eval = match &paths.eval {
        Some(p) => Some(load_calibration(p, &net.input_shape).map_err(at(Stage::Load))?),
        None => None,
    };
    Ok(Inputs { net, calib, eval })
}

fn outcome_records(o: &QuantOutcome) -> Vec<serde_json::Value> {
    let mut out = Vec::new();
    for u in &o.units {
        let mut v = serde_json::to_value(u).expect("serializable record");
        v["record"] = json!("unit");
        v["method"] = json!(o.method.name());
        out.push(v);
    }
    out.push(json!({
        "record": "equivalence",
        "method": o.method.name(),
        "inputs": o.equivalence.inputs,
        "boundaries": o.equivalence.boundaries,
        "values_compared": o.equivalence.values_compared,
        "mismatches": o.equivalence.mismatches,
        "int_mul": o.equivalence.ops.int_mul,
        "shifts": o.equivalence.ops.shifts,
        "float_mul": o.equivalence.ops.float_mul,
    }));
    let clipped: usize = o.units.iter().flat_map(|u| &u.weights).map(|l| l.clipped).sum();
    let rounded_up: usize = o.units.iter().flat_map(|u| &u.weights).map(|l| l.rounded_up).sum();
    out.push(json!({
        "record": "summary",
        "method": o.method.name(),
        "units": o.units.len(),
        "p_values": o.p_values(),
        "accuracy": o.accuracy,
        "fp_accuracy": o.fp_accuracy,
        "clipped": clipped,
        "rounded_up": rounded_up,
        "elapsed_secs": o.elapsed_secs,
    }));
    out
}

fn write_report(path: &Path, cfg: &RunConfig, records: &[serde_json::Value]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut head = serde_json::to_value(cfg)?;
    head["record"] = json!("config");
    serde_json::to_writer(&mut f, &head)?;
    f.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn save_model(model: &QuantizedModel, path: &Path) -> PResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| at(Stage::Harden)(e.into()))?;
    }
    model.save(path).map_err(at(Stage::Harden))
}

fn run_method(cfg: &RunConfig, paths: &RunPaths, method: Method) -> PResult<QuantOutcome> {
    cfg.validate().map_err(at(Stage::Config))?;
    let inp = load_inputs(paths)?;
    let o = quantize(&inp.net, &inp.calib.images, inp.eval.as_ref(), cfg, method)?;
    save_model(&o.model, &paths.out)?;
    write_report(&paths.report, cfg, &outcome_records(&o)).map_err(at(Stage::Report))?;
    Ok(o)
}

/// Full pipeline with the γ-derived loss exponent.
pub fn run_quantize(cfg: &RunConfig, paths: &RunPaths) -> PResult<QuantOutcome> {
    run_method(cfg, paths, Method::AdaptiveP)
}

/// Rounded-log exponents with nearest rounding, no optimization.
pub fn run_baseline(cfg: &RunConfig, paths: &RunPaths) -> PResult<QuantOutcome> {
    run_method(cfg, paths, Method::Naive)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub method: Method,
    pub p_values: Vec<f64>,
    pub accuracy: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub fp_accuracy: f32,
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>9}  P per unit", "method", "accuracy")?;
        for r in &self.rows {
            let ps: Vec<String> = r.p_values.iter().map(|p| format!("{p:.2}")).collect();
            writeln!(f, "{:<14} {:>8.2}%  {}", r.method.name(), 100.0 * r.accuracy, ps.join(" "))?;
        }
        write!(f, "{:<14} {:>8.2}%", "float", 100.0 * self.fp_accuracy)
    }
}

/// Runs the three methods in memory and tabulates their eval accuracy.
pub fn ablation(net: &FoldedNet, calib: &Tensor, eval: &Dataset, cfg: &RunConfig) -> PResult<(AblationTable, Vec<QuantOutcome>)> {
    eval.labels().map_err(at(Stage::Config))?;
    let mut outcomes = Vec::with_capacity(3);
    for m in [Method::Naive, Method::ScaleGroup, Method::AdaptiveP] {
        outcomes.push(quantize(net, calib, Some(eval), cfg, m)?);
    }
    let table = AblationTable {
        fp_accuracy: outcomes[0].fp_accuracy.unwrap_or(0.0),
        rows: outcomes
            .iter()
            .map(|o| AblationRow {
                method: o.method,
                p_values: o.p_values(),
                accuracy: o.accuracy.unwrap_or(0.0),
            })
            .collect(),
    };
    Ok((table, outcomes))
}

/// Ablation over files; the adaptive-P model is written to `paths.out`.
pub fn run_ablation(cfg: &RunConfig, paths: &RunPaths) -> PResult<AblationTable> {
    cfg.validate().map_err(at(Stage::Config))?;
    if paths.eval.is_none() {
        return Err(at(Stage::Config)(invalid("ablation needs a labeled --eval set")));
    }
    let inp = load_inputs(paths)?;
    let eval = inp.eval.as_ref().expect("checked above");
    let (table, outcomes) = ablation(&inp.net, &inp.calib.images, eval, cfg)?;
    save_model(&outcomes[2].model, &paths.out)?;
    let mut records: Vec<serde_json::Value> = outcomes.iter().flat_map(outcome_records).collect();
    let mut t = serde_json::to_value(&table).map_err(|e| at(Stage::Report)(e.into()))?;
    t["record"] = json!("ablation");
    records.push(t);
    write_report(&paths.report, cfg, &records).map_err(at(Stage::Report))?;
    Ok(table)
}
