//! BN-folded networks and a small graph executor with fake-quant hooks.

use crate::actquant::{act_scale_grad_value, GradVariant};
use crate::error::{Error, Result};
use crate::io::graph::{FloatModel, OpSpec};
use crate::quantizer::{code_range, quantize_value};
use crate::tensor::{
    conv2d_forward, conv2d_grad, fold_bn, linear_forward, linear_grad, relu_backward, Conv2dParams,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv(Conv2dParams),
    Linear,
    Relu,
    Add,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv(_) => "conv2d",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn has_weight(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Linear)
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub weight: Option<Tensor>,
    pub bias: Vec<f32>,
    /// γ of the batch norm folded into this layer, if any.
    pub bn_gamma: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct FoldedNet {
    /// Layers in topological order.
    pub layers: Vec<Layer>,
    pub output: usize,
    pub consumers: Vec<Vec<usize>>,
    pub input_shape: Vec<usize>,
}

impl FoldedNet {
    pub fn from_model(model: &FloatModel) -> Result<Self> {
        let g = &model.graph;
        let order = g.topo_order()?;
        let mut layer_of = vec![usize::MAX; g.nodes.len()];
        let mut by_id = std::collections::HashMap::new();
        for (i, n) in g.nodes.iter().enumerate() {
            by_id.insert(n.id.as_str(), i);
        }
        let mut layers: Vec<Layer> = Vec::new();
        for &ni in &order {
            let n = &g.nodes[ni];
            let inputs: Vec<usize> = n.inputs.iter().map(|s| layer_of[by_id[s.as_str()]]).collect();
            let mut push = |kind, weight: Option<Tensor>, bias: Vec<f32>| {
                layers.push(Layer {
                    id: n.id.clone(),
                    kind,
                    inputs: inputs.clone(),
                    weight,
                    bias,
                    bn_gamma: None,
                });
                layers.len() - 1
            };
            layer_of[ni] = match &n.op {
                OpSpec::Input { .. } => push(LayerKind::Input, None, Vec::new()),
                OpSpec::Conv2d {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let w = model.tensors[weight].clone();
                    let b = bias_or_zero(model, bias.as_deref(), w.shape()[0]);
                    let p = Conv2dParams {
                        stride: *stride,
                        pad: *pad,
                    };
                    push(LayerKind::Conv(p), Some(w), b)
                }
                OpSpec::Linear { weight, bias } => {
                    let w = model.tensors[weight].clone();
                    let b = bias_or_zero(model, bias.as_deref(), w.shape()[0]);
                    push(LayerKind::Linear, Some(w), b)
                }
                OpSpec::Bn { .. } => {
                    let bn = model.bn_params(n).expect("bn node");
                    let li = inputs[0];
                    let layer = &mut layers[li];
                    let (w, b) = fold_bn(layer.weight.as_ref().expect("weight layer"), &layer.bias, &bn)?;
                    layer.weight = Some(w);
                    layer.bias = b;
                    layer.bn_gamma = Some(bn.gamma.clone());
                    li
                }
                OpSpec::Relu => push(LayerKind::Relu, None, Vec::new()),
                OpSpec::Add => push(LayerKind::Add, None, Vec::new()),
                OpSpec::Flatten => push(LayerKind::Flatten, None, Vec::new()),
            };
        }
        let output = layer_of[by_id[g.output.as_str()]];
        let consumers = consumers_of(&layers);
        Ok(FoldedNet {
            layers,
            output,
            consumers,
            input_shape: model.input_shape(),
        })
    }

    pub fn input_layer(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::Input)
            .expect("validated graph has an input")
    }

    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.has_weight())
            .collect()
    }

    /// Layers whose output carries an activation quantizer: the input, and
    /// every other non-flatten, non-output layer that is not consumed
    /// exclusively by ReLUs (those are fused with the ReLU's quantizer).
    pub fn quant_points(&self) -> Vec<bool> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l.kind {
                LayerKind::Input => true,
                LayerKind::Flatten => false,
                _ if i == self.output => false,
                _ => !self.consumers[i]
                    .iter()
                    .all(|&c| self.layers[c].kind == LayerKind::Relu),
            })
            .collect()
    }

    /// Per-sample output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let s = match l.kind {
                LayerKind::Input => self.input_shape.clone(),
                LayerKind::Conv(p) => {
                    let x = &shapes[l.inputs[0]];
                    let w = l.weight.as_ref().unwrap().shape();
                    let probe = Tensor::zeros(vec![1, x[0], x[1], x[2]]);
                    let probe_w = Tensor::zeros(w.to_vec());
                    let o = conv2d_forward(&probe, &probe_w, &vec![0.0; w[0]], p)?;
                    o.shape()[1..].to_vec()
                }
                LayerKind::Linear => {
                    let x = &shapes[l.inputs[0]];
                    let w = l.weight.as_ref().unwrap().shape();
                    if x.len() != 1 || x[0] != w[1] {
                        return Err(Error::ShapeMismatch {
                            op: "linear",
                            lhs: x.clone(),
                            rhs: w.to_vec(),
                        });
                    }
                    vec![w[0]]
                }
                LayerKind::Relu => shapes[l.inputs[0]].clone(),
                LayerKind::Add => {
                    let (a, b) = (&shapes[l.inputs[0]], &shapes[l.inputs[1]]);
                    if a != b {
                        return Err(Error::ShapeMismatch {
                            op: "add",
                            lhs: a.clone(),
                            rhs: b.clone(),
                        });
                    }
                    a.clone()
                }
                LayerKind::Flatten => vec![shapes[l.inputs[0]].iter().product()],
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn all_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).collect()
    }
}

fn bias_or_zero(model: &FloatModel, name: Option<&str>, channels: usize) -> Vec<f32> {
    match name {
        Some(n) => model.tensors[n].data().to_vec(),
        None => vec![0.0; channels],
    }
}

fn consumers_of(layers: &[Layer]) -> Vec<Vec<usize>> {
    let mut c = vec![Vec::new(); layers.len()];
    for (i, l) in layers.iter().enumerate() {
        for &j in &l.inputs {
            c[j].push(i);
        }
    }
    c
}

/// Quantize-dequantize applied to a layer output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuant {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u8,
}

impl FakeQuant {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (lo, hi) = code_range(self.bits);
        x.map(|v| self.scale * (quantize_value(v, self.scale, self.zero_point, lo, hi) - self.zero_point) as f32)
    }
}

/// Values recorded by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Output of each executed or external layer, after fake quantization.
    pub values: Vec<Option<Tensor>>,
    /// Output before fake quantization, where a quantizer was applied.
    pub pre_quant: Vec<Option<Tensor>>,
}

impl Trace {
    pub fn value(&self, layer: usize) -> &Tensor {
        self.values[layer].as_ref().expect("layer was not executed")
    }

    pub fn take(&mut self, layer: usize) -> Tensor {
        self.values[layer].take().expect("layer was not executed")
    }
}

/// Per-call substitutions for weights and activation quantizers, indexed by
/// layer.
#[derive(Debug, Clone, Copy)]
pub struct Overrides<'a> {
    pub weights: &'a [Option<Tensor>],
    pub acts: &'a [Option<FakeQuant>],
}

impl<'a> Overrides<'a> {
    pub fn none() -> Overrides<'static> {
        Overrides {
            weights: &[],
            acts: &[],
        }
    }

    fn weight<'n>(&self, net: &'n FoldedNet, i: usize) -> &'n Tensor
    where
        'a: 'n,
    {
        match self.weights.get(i) {
            Some(Some(w)) => w,
            _ => net.layers[i].weight.as_ref().expect("weight layer"),
        }
    }

    fn act(&self, i: usize) -> Option<FakeQuant> {
        self.acts.get(i).copied().flatten()
    }
}

/// Runs `members` (topologically ordered) given the values of every external
/// layer they read. An `Input` member reads `raw_input`.
pub fn forward(
    net: &FoldedNet,
    members: &[usize],
    externals: Vec<(usize, Tensor)>,
    raw_input: Option<Tensor>,
    ov: Overrides<'_>,
) -> Result<Trace> {
    let n = net.layers.len();
    let mut values: Vec<Option<Tensor>> = vec![None; n];
    let mut pre_quant: Vec<Option<Tensor>> = vec![None; n];
    for (i, t) in externals {
        values[i] = Some(t);
    }
    let mut raw_input = raw_input;
    for &i in members {
        let l = &net.layers[i];
        let arg = |k: usize| -> Result<&Tensor> {
            values[l.inputs[k]].as_ref().ok_or_else(|| {
                Error::Graph(format!("layer `{}` input `{}` unavailable", l.id, net.layers[l.inputs[k]].id))
            })
        };
        let out = match l.kind {
            LayerKind::Input => raw_input
                .take()
                .ok_or_else(|| Error::Graph("input layer executed without raw input".into()))?,
            LayerKind::Conv(p) => conv2d_forward(arg(0)?, ov.weight(net, i), &l.bias, p)?,
            LayerKind::Linear => linear_forward(arg(0)?, ov.weight(net, i), &l.bias)?,
            LayerKind::Relu => arg(0)?.map(|v| v.max(0.0)),
            LayerKind::Add => {
                let mut a = arg(0)?.clone();
                a.add_assign(arg(1)?)?;
                a
            }
            LayerKind::Flatten => {
                let x = arg(0)?;
                let b = x.shape()[0];
                x.clone().reshape(vec![b, x.len() / b.max(1)])?
            }
        };
        if let Some(fq) = ov.act(i) {
            values[i] = Some(fq.apply(&out));
            pre_quant[i] = Some(out);
        } else {
            values[i] = Some(out);
        }
    }
    Ok(Trace { values, pre_quant })
}

#[derive(Debug, Clone)]
pub struct Grads {
    /// dL/dW for weight members.
    pub weight: Vec<Option<Tensor>>,
    /// dL/d(log2 s) for each member carrying a fake quantizer.
    pub log2_scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOpts {
    pub want_weight: bool,
    pub want_act: bool,
    pub variant: GradVariant,
}

/// Back-propagates `grad_output` (w.r.t. the last member's output) through
/// `members`. Fake quantizers use a straight-through mask on in-range
/// elements.
pub fn backward(
    net: &FoldedNet,
    members: &[usize],
    trace: &Trace,
    ov: Overrides<'_>,
    grad_output: Tensor,
    opts: BackwardOpts,
) -> Result<Grads> {
    let n = net.layers.len();
    let mut member = vec![false; n];
    members.iter().for_each(|&i| member[i] = true);
    let mut g: Vec<Option<Tensor>> = vec![None; n];
    let last = *members.last().ok_or_else(|| Error::Graph("empty unit".into()))?;
    g[last] = Some(grad_output);
    let mut grads = Grads {
        weight: vec![None; n],
        log2_scale: vec![0.0; n],
    };
    let accumulate = |g: &mut Vec<Option<Tensor>>, j: usize, t: Tensor| -> Result<()> {
        match &mut g[j] {
            Some(acc) => acc.add_assign(&t),
            slot => {
                *slot = Some(t);
                Ok(())
            }
        }
    };
    for &i in members.iter().rev() {
        let Some(mut gi) = g[i].take() else { continue };
        let l = &net.layers[i];
        if let Some(fq) = ov.act(i) {
            let pre = trace.pre_quant[i].as_ref().expect("fake-quant input recorded");
            let (lo, hi) = code_range(fq.bits);
            let mut acc = 0.0f64;
            for (gv, &x) in gi.data_mut().iter_mut().zip(pre.data()) {
                if opts.want_act {
                    acc += *gv as f64
                        * act_scale_grad_value(x, fq.scale, fq.zero_point, fq.bits, opts.variant) as f64;
                }
                let r = (x / fq.scale + fq.zero_point as f32).round();
                if r < lo as f32 || r > hi as f32 {
                    *gv = 0.0;
                }
            }
            grads.log2_scale[i] = acc;
        }
        let needs = |k: usize| {
            let j = l.inputs[k];
            member[j]
                && (net.layers[j].kind != LayerKind::Input || (opts.want_act && ov.act(j).is_some()))
        };
        match l.kind {
            LayerKind::Input => {}
            LayerKind::Conv(p) => {
                let x = trace.value(l.inputs[0]);
                let cg = conv2d_grad(x, ov.weight(net, i), &gi, p, needs(0))?;
                if opts.want_weight {
                    grads.weight[i] = Some(cg.weight);
                }
                if let Some(gx) = cg.input {
                    accumulate(&mut g, l.inputs[0], gx)?;
                }
            }
            LayerKind::Linear => {
                let x = trace.value(l.inputs[0]);
                let lg = linear_grad(x, ov.weight(net, i), &gi, needs(0))?;
                if opts.want_weight {
                    grads.weight[i] = Some(lg.weight);
                }
                if let Some(gx) = lg.input {
                    accumulate(&mut g, l.inputs[0], gx)?;
                }
            }
            LayerKind::Relu => {
                if needs(0) {
                    let gx = relu_backward(trace.value(l.inputs[0]), &gi)?;
                    accumulate(&mut g, l.inputs[0], gx)?;
                }
            }
            LayerKind::Add => {
                for k in 0..2 {
                    if needs(k) {
                        accumulate(&mut g, l.inputs[k], gi.clone())?;
                    }
                }
            }
            LayerKind::Flatten => {
                if needs(0) {
                    let shape = trace.value(l.inputs[0]).shape().to_vec();
                    accumulate(&mut g, l.inputs[0], gi.reshape(shape)?)?;
                }
            }
        }
    }
    Ok(grads)
}

/// Full-network forward in evaluation chunks; returns the output layer.
pub fn predict(net: &FoldedNet, images: &Tensor, ov: Overrides<'_>, chunk: usize) -> Result<Tensor> {
    let members = net.all_layers();
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut tr = forward(net, &members, Vec::new(), Some(images.slice_rows(start, end)), ov)?;
        parts.push(tr.take(net.output));
        start = end;
    }
    Tensor::concat_rows(&parts)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[u8]) -> f32 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    hits as f32 / labels.len().max(1) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::graph::{ModelGraph, NodeSpec};
    use crate::tensor::{bn_inference, finite_diff_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn node(id: &str, inputs: &[&str], op: OpSpec) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            op,
        }
    }

    fn conv(w: &str) -> OpSpec {
        OpSpec::Conv2d {
            weight: w.into(),
            bias: None,
            stride: 1,
            pad: 1,
        }
    }

    fn bn(p: &str) -> OpSpec {
        OpSpec::Bn {
            gamma: format!("{p}.g"),
            beta: format!("{p}.b"),
            mean: format!("{p}.m"),
            var: format!("{p}.v"),
            eps: 1e-5,
        }
    }

    /// conv-bn-relu, conv-bn, add(skip), relu, flatten, linear.
    fn residual_model(seed: u64) -> FloatModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = BTreeMap::new();
        let mut rand_t = |shape: Vec<usize>, lo: f32, hi: f32| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        t.insert("c1".into(), rand_t(vec![2, 2, 3, 3], -0.5, 0.5));
        t.insert("c2".into(), rand_t(vec![2, 2, 3, 3], -0.5, 0.5));
        for p in ["b1", "b2"] {
            t.insert(format!("{p}.g"), rand_t(vec![2], 0.5, 1.5));
            t.insert(format!("{p}.b"), rand_t(vec![2], -0.2, 0.2));
            t.insert(format!("{p}.m"), rand_t(vec![2], -0.2, 0.2));
            t.insert(format!("{p}.v"), rand_t(vec![2], 0.5, 1.5));
        }
        t.insert("fc".into(), rand_t(vec![3, 32], -0.3, 0.3));
        let graph = ModelGraph {
            weights: "w.bin".into(),
            nodes: vec![
                node("x", &[], OpSpec::Input { shape: vec![2, 4, 4] }),
                node("c1", &["x"], conv("c1")),
                node("b1", &["c1"], bn("b1")),
                node("r1", &["b1"], OpSpec::Relu),
                node("c2", &["r1"], conv("c2")),
                node("b2", &["c2"], bn("b2")),
                node("add", &["b2", "x"], OpSpec::Add),
                node("r2", &["add"], OpSpec::Relu),
                node("flat", &["r2"], OpSpec::Flatten),
                node(
                    "fc",
                    &["flat"],
                    OpSpec::Linear {
                        weight: "fc".into(),
                        bias: None,
                    },
                ),
            ],
            output: "fc".into(),
        };
        FloatModel::new(graph, t).unwrap()
    }

    /// Straight evaluation of the unfolded model with inference BN.
    fn reference_forward(m: &FloatModel, x: &Tensor) -> Tensor {
        let node = |id: &str| m.graph.node(id).unwrap();
        let p = Conv2dParams { stride: 1, pad: 1 };
        let c1 = conv2d_forward(x, &m.tensors["c1"], &[0.0, 0.0], p).unwrap();
        let r1 = bn_inference(&c1, &m.bn_params(node("b1")).unwrap()).unwrap().map(|v| v.max(0.0));
        let c2 = conv2d_forward(&r1, &m.tensors["c2"], &[0.0, 0.0], p).unwrap();
        let mut a = bn_inference(&c2, &m.bn_params(node("b2")).unwrap()).unwrap();
        a.add_assign(x).unwrap();
        let r2 = a.map(|v| v.max(0.0));
        let flat = r2.clone().reshape(vec![x.shape()[0], 32]).unwrap();
        linear_forward(&flat, &m.tensors["fc"], &[0.0; 3]).unwrap()
    }

    fn rand_input(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 2, 4, 4], (0..n * 32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn folded_forward_matches_unfolded() {
        let m = residual_model(1);
        let net = FoldedNet::from_model(&m).unwrap();
        assert_eq!(net.layers.len(), 8);
        let x = rand_input(2, 3);
        let got = predict(&net, &x, Overrides::none(), 2).unwrap();
        let want = reference_forward(&m, &x);
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn quant_points_skip_relu_fed_layers() {
        let net = FoldedNet::from_model(&residual_model(1)).unwrap();
        let qp: Vec<&str> = net
            .quant_points()
            .iter()
            .enumerate()
            .filter(|(_, &q)| q)
            .map(|(i, _)| net.layers[i].id.as_str())
            .collect();
        assert_eq!(qp, vec!["x", "r1", "c2", "r2"]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = residual_model(3);
        let net = FoldedNet::from_model(&m).unwrap();
        let x = rand_input(4, 2);
        let members = net.all_layers();
        let target = Tensor::new(vec![2, 3], vec![0.3, -0.1, 0.2, 0.5, 0.0, -0.4]).unwrap();
        let loss = |weights: &[Option<Tensor>]| -> f64 {
            let ov = Overrides { weights, acts: &[] };
            let tr = forward(&net, &members, Vec::new(), Some(x.clone()), ov).unwrap();
            tr.value(net.output)
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| 0.5 * ((a - b) as f64).powi(2))
                .sum()
        };
        let none = vec![None; net.layers.len()];
        let tr = forward(&net, &members, Vec::new(), Some(x.clone()), Overrides::none()).unwrap();
        let out = tr.value(net.output);
        let g = Tensor::new(
            out.shape().to_vec(),
            out.data().iter().zip(target.data()).map(|(a, b)| a - b).collect(),
        )
        .unwrap();
        let opts = BackwardOpts {
            want_weight: true,
            want_act: false,
            variant: GradVariant::Constant,
        };
        let grads = backward(&net, &members, &tr, Overrides::none(), g, opts).unwrap();
        for li in net.weight_layers() {
            let w0 = net.layers[li].weight.clone().unwrap();
            let fd = finite_diff_grad(
                |w| {
                    let mut ws = none.clone();
                    ws[li] = Some(w.clone());
                    loss(&ws)
                },
                &w0,
                1e-3,
            )
            .unwrap();
            let an = grads.weight[li].as_ref().unwrap();
            let diff: f32 = an.data().iter().zip(fd.data()).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
            let norm: f32 = fd.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(diff <= 1e-2 * norm, "layer {}: {diff} vs {norm}", net.layers[li].id);
        }
    }

    #[test]
    fn fake_quant_on_grid_is_identity() {
        let fq = FakeQuant {
            scale: 0.25,
            zero_point: 2,
            bits: 4,
        };
        let x = Tensor::new(vec![4], vec![-0.5, 0.0, 0.75, 3.25]).unwrap();
        assert_eq!(fq.apply(&x), x);
        let y = Tensor::new(vec![2], vec![-1.0, 9.0]).unwrap();
        assert_eq!(fq.apply(&y).data(), &[-0.5, 3.25]);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((accuracy(&logits, &[0, 1, 0]) - 2.0 / 3.0).abs() < 1e-6);
    }
}
