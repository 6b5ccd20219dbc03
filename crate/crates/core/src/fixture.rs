//! Desk-scale test fixture: a synthetic 10-class 16×16 image task and a small
//! residual CNN trained on it.
//!
//! Topology: conv(stride 2)-bn-relu stem, one residual block
//! (conv-bn-relu-conv-bn + skip, relu), flatten, linear head.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::calib::Dataset;
use crate::io::graph::{FloatModel, ModelGraph, NodeSpec, OpSpec};
use crate::network::{accuracy, predict, FoldedNet, Overrides};
use crate::tensor::{
    bn_train_backward, bn_train_forward, conv2d_forward, conv2d_grad, linear_forward, linear_grad,
    relu_backward, Conv2dParams, Tensor,
};

pub const IMAGE_SIDE: usize = 16;
pub const CLASSES: usize = 10;
pub const REQUIRED_ACCURACY: f32 = 0.95;
const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub seed: u64,
    pub width: usize,
    pub train: usize,
    pub calib: usize,
    pub test: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub noise: f32,
}

impl FixtureConfig {
    pub fn new(seed: u64) -> Self {
        FixtureConfig {
            seed,
            width: 4,
            train: 6000,
            calib: 1024,
            test: 1000,
            epochs: 12,
            batch: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            noise: 0.45,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: FloatModel,
    pub train: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
    pub test_accuracy: f32,
}

impl Fixture {
    /// Writes `model.json`, `weights.bin`, `train.bin`, `calib.bin` and `test.bin`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.json"))?;
        self.train.save(&dir.join("train.bin"))?;
        self.calib.save(&dir.join("calib.bin"))?;
        self.test.save(&dir.join("test.bin"))?;
        Ok(())
    }
}

struct Bump {
    cx: f32,
    cy: f32,
    sigma: f32,
    amp: f32,
}

/// Class prototypes: a few signed Gaussian bumps each.
fn prototypes(rng: &mut ChaCha8Rng) -> Vec<Vec<Bump>> {
    (0..CLASSES)
        .map(|_| {
            (0..3)
                .map(|_| Bump {
                    cx: rng.random_range(4.0..12.0),
                    cy: rng.random_range(4.0..12.0),
                    sigma: rng.random_range(1.2..2.4),
                    amp: if rng.random_bool(0.7) { 1.0 } else { -1.0 } * rng.random_range(0.6..1.2),
                })
                .collect()
        })
        .collect()
}

fn render(protos: &[Vec<Bump>], n: usize, noise: f32, rng: &mut ChaCha8Rng) -> Dataset {
    let side = IMAGE_SIDE;
    let normal = Normal::new(0.0f32, noise).expect("valid noise");
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..CLASSES);
        let dx: f32 = rng.random_range(-2.0..2.0);
        let dy: f32 = rng.random_range(-2.0..2.0);
        let gain: f32 = rng.random_range(0.8..1.2);
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0f32;
                for b in &protos[c] {
                    let ddx = x as f32 - b.cx - dx;
                    let ddy = y as f32 - b.cy - dy;
                    v += b.amp * (-(ddx * ddx + ddy * ddy) / (2.0 * b.sigma * b.sigma)).exp();
                }
                data.push(gain * v + normal.sample(rng));
            }
        }
        labels.push(c as u8);
    }
    Dataset {
        images: Tensor::new(vec![n, 1, side, side], data).expect("finite synthetic data"),
        labels: Some(labels),
    }
}

/// Trainable parameters, in a fixed order.
struct Params {
    w1: Vec<f32>,
    g1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    g2: Vec<f32>,
    b2: Vec<f32>,
    w3: Vec<f32>,
    g3: Vec<f32>,
    b3: Vec<f32>,
    wf: Vec<f32>,
    bf: Vec<f32>,
}

impl Params {
    fn init(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut he = |n: usize, fan_in: usize| -> Vec<f32> {
            let d = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let flat = width * (IMAGE_SIDE / 2) * (IMAGE_SIDE / 2);
        Params {
            w1: he(width * 9, 9),
            g1: vec![1.0; width],
            b1: vec![0.0; width],
            w2: he(width * width * 9, width * 9),
            g2: vec![1.0; width],
            b2: vec![0.0; width],
            w3: he(width * width * 9, width * 9),
            g3: vec![1.0; width],
            b3: vec![0.0; width],
            wf: he(CLASSES * flat, flat),
            bf: vec![0.0; CLASSES],
        }
    }

    fn slots(&mut self) -> [&mut Vec<f32>; 11] {
        [
            &mut self.w1,
            &mut self.g1,
            &mut self.b1,
            &mut self.w2,
            &mut self.g2,
            &mut self.b2,
            &mut self.w3,
            &mut self.g3,
            &mut self.b3,
            &mut self.wf,
            &mut self.bf,
        ]
    }
}

struct Shapes {
    w1: Vec<usize>,
    wc: Vec<usize>,
    wf: Vec<usize>,
}

fn shapes(width: usize) -> Shapes {
    Shapes {
        w1: vec![width, 1, 3, 3],
        wc: vec![width, width, 3, 3],
        wf: vec![CLASSES, width * (IMAGE_SIDE / 2) * (IMAGE_SIDE / 2)],
    }
}

const STEM: Conv2dParams = Conv2dParams { stride: 2, pad: 1 };
const SAME: Conv2dParams = Conv2dParams { stride: 1, pad: 1 };

/// One SGD step in training mode; returns the mean cross-entropy.
fn train_step(p: &Params, sh: &Shapes, x: &Tensor, labels: &[u8]) -> Result<(f32, Vec<Vec<f32>>)> {
    let t = |shape: &[usize], v: &[f32]| Tensor::new(shape.to_vec(), v.to_vec());
    let (w1, w2, w3, wf) = (t(&sh.w1, &p.w1)?, t(&sh.wc, &p.w2)?, t(&sh.wc, &p.w3)?, t(&sh.wf, &p.wf)?);
    let width = sh.w1[0];
    let zeros = vec![0.0; width];
    let c1 = conv2d_forward(x, &w1, &zeros, STEM)?;
    let (a1, k1) = bn_train_forward(&c1, &p.g1, &p.b1, BN_EPS)?;
    let r1 = a1.map(|v| v.max(0.0));
    let c2 = conv2d_forward(&r1, &w2, &zeros, SAME)?;
    let (a2, k2) = bn_train_forward(&c2, &p.g2, &p.b2, BN_EPS)?;
    let r2 = a2.map(|v| v.max(0.0));
    let c3 = conv2d_forward(&r2, &w3, &zeros, SAME)?;
    let (a3, k3) = bn_train_forward(&c3, &p.g3, &p.b3, BN_EPS)?;
    let mut sum = a3.clone();
    sum.add_assign(&r1)?;
    let r3 = sum.map(|v| v.max(0.0));
    let n = x.shape()[0];
    let flat = r3.clone().reshape(vec![n, sh.wf[1]])?;
    let logits = linear_forward(&flat, &wf, &p.bf)?;

    let (loss, gl) = softmax_xent(&logits, labels)?;
    let lg = linear_grad(&flat, &wf, &gl, true)?;
    let g_r3 = lg.input.unwrap().reshape(r3.shape().to_vec())?;
    let g_sum = relu_backward(&sum, &g_r3)?;
    let (g_c3, g_g3, g_b3) = bn_train_backward(&g_sum, &p.g3, &k3);
    let cg3 = conv2d_grad(&r2, &w3, &g_c3, SAME, true)?;
    let g_a2 = relu_backward(&a2, &cg3.input.unwrap())?;
    let (g_c2, g_g2, g_b2) = bn_train_backward(&g_a2, &p.g2, &k2);
    let cg2 = conv2d_grad(&r1, &w2, &g_c2, SAME, true)?;
    let mut g_r1 = cg2.input.unwrap();
    g_r1.add_assign(&g_sum)?;
    let g_a1 = relu_backward(&a1, &g_r1)?;
    let (g_c1, g_g1, g_b1) = bn_train_backward(&g_a1, &p.g1, &k1);
    let cg1 = conv2d_grad(x, &w1, &g_c1, STEM, false)?;
    Ok((
        loss,
        vec![
            cg1.weight.into_data(),
            g_g1,
            g_b1,
            cg2.weight.into_data(),
            g_g2,
            g_b2,
            cg3.weight.into_data(),
            g_g3,
            g_b3,
            lg.weight.into_data(),
            lg.bias,
        ],
    ))
}

fn softmax_xent(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
    let k = logits.row_len();
    let n = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (b, row) in logits.data().chunks(k).enumerate() {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
        let y = labels[b] as usize;
        loss += z.ln() - (row[y] - m) as f64;
        for j in 0..k {
            let pj = ((row[j] - m) as f64).exp() / z;
            grad[b * k + j] = ((pj - if j == y { 1.0 } else { 0.0 }) / n as f64) as f32;
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Population batch-norm statistics over the training set, layer by layer.
fn population_stats(p: &Params, sh: &Shapes, x: &Tensor) -> Result<[(Vec<f32>, Vec<f32>); 3]> {
    let t = |shape: &[usize], v: &[f32]| Tensor::new(shape.to_vec(), v.to_vec());
    let width = sh.w1[0];
    let zeros = vec![0.0; width];
    let apply = |c: &Tensor, g: &[f32], b: &[f32], mean: &[f32], var: &[f32]| {
        let inner = c.shape()[2] * c.shape()[3];
        let mut out = c.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let ch = (i / inner) % width;
            *v = g[ch] * (*v - mean[ch]) / (var[ch] + BN_EPS).sqrt() + b[ch];
        }
        Tensor::new(c.shape().to_vec(), out)
    };
    let c1 = conv2d_forward(x, &t(&sh.w1, &p.w1)?, &zeros, STEM)?;
    let (_, k1) = bn_train_forward(&c1, &p.g1, &p.b1, BN_EPS)?;
    let r1 = apply(&c1, &p.g1, &p.b1, &k1.mean, &k1.var)?.map(|v| v.max(0.0));
    let c2 = conv2d_forward(&r1, &t(&sh.wc, &p.w2)?, &zeros, SAME)?;
    let (_, k2) = bn_train_forward(&c2, &p.g2, &p.b2, BN_EPS)?;
    let r2 = apply(&c2, &p.g2, &p.b2, &k2.mean, &k2.var)?.map(|v| v.max(0.0));
    let c3 = conv2d_forward(&r2, &t(&sh.wc, &p.w3)?, &zeros, SAME)?;
    let (_, k3) = bn_train_forward(&c3, &p.g3, &p.b3, BN_EPS)?;
    Ok([(k1.mean, k1.var), (k2.mean, k2.var), (k3.mean, k3.var)])
}

fn build_model(p: &Params, sh: &Shapes, stats: &[(Vec<f32>, Vec<f32>); 3]) -> Result<FloatModel> {
    let node = |id: &str, inputs: &[&str], op: OpSpec| NodeSpec {
        id: id.into(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        op,
    };
    let conv = |w: &str, stride: usize| OpSpec::Conv2d {
        weight: format!("{w}.weight"),
        bias: None,
        stride,
        pad: 1,
    };
    let bn = |b: &str| OpSpec::Bn {
        gamma: format!("{b}.gamma"),
        beta: format!("{b}.beta"),
        mean: format!("{b}.running_mean"),
        var: format!("{b}.running_var"),
        eps: BN_EPS,
    };
    let graph = ModelGraph {
        weights: "weights.bin".into(),
        nodes: vec![
            node("input", &[], OpSpec::Input { shape: vec![1, IMAGE_SIDE, IMAGE_SIDE] }),
            node("conv1", &["input"], conv("conv1", 2)),
            node("bn1", &["conv1"], bn("bn1")),
            node("relu1", &["bn1"], OpSpec::Relu),
            node("conv2", &["relu1"], conv("conv2", 1)),
            node("bn2", &["conv2"], bn("bn2")),
            node("relu2", &["bn2"], OpSpec::Relu),
            node("conv3", &["relu2"], conv("conv3", 1)),
            node("bn3", &["conv3"], bn("bn3")),
            node("add", &["bn3", "relu1"], OpSpec::Add),
            node("relu3", &["add"], OpSpec::Relu),
            node("flatten", &["relu3"], OpSpec::Flatten),
            node(
                "fc",
                &["flatten"],
                OpSpec::Linear {
                    weight: "fc.weight".into(),
                    bias: Some("fc.bias".into()),
                },
            ),
        ],
        output: "fc".into(),
    };
    let width = sh.w1[0];
    let mut t = BTreeMap::new();
    let mut put = |name: &str, shape: Vec<usize>, v: &[f32]| -> Result<()> {
        t.insert(name.to_string(), Tensor::new(shape, v.to_vec())?);
        Ok(())
    };
    put("conv1.weight", sh.w1.clone(), &p.w1)?;
    put("conv2.weight", sh.wc.clone(), &p.w2)?;
    put("conv3.weight", sh.wc.clone(), &p.w3)?;
    put("fc.weight", sh.wf.clone(), &p.wf)?;
    put("fc.bias", vec![CLASSES], &p.bf)?;
    for (i, (g, b)) in [(&p.g1, &p.b1), (&p.g2, &p.b2), (&p.g3, &p.b3)].into_iter().enumerate() {
        let name = format!("bn{}", i + 1);
        put(&format!("{name}.gamma"), vec![width], g)?;
        put(&format!("{name}.beta"), vec![width], b)?;
        put(&format!("{name}.running_mean"), vec![width], &stats[i].0)?;
        put(&format!("{name}.running_var"), vec![width], &stats[i].1)?;
    }
    FloatModel::new(graph, t)
}

pub fn evaluate_float(model: &FloatModel, data: &Dataset) -> Result<f32> {
    let net = FoldedNet::from_model(model)?;
    let logits = predict(&net, &data.images, Overrides::none(), 256)?;
    Ok(accuracy(&logits, data.labels()?))
}

/// Builds the synthetic task and trains the fixture model. Fails if held-out
/// accuracy stays below [`REQUIRED_ACCURACY`].
pub fn generate_fixture_with(cfg: &FixtureConfig) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = prototypes(&mut rng);
    let train = render(&protos, cfg.train, cfg.noise, &mut rng);
    let calib = render(&protos, cfg.calib, cfg.noise, &mut rng);
    let test = render(&protos, cfg.test, cfg.noise, &mut rng);
    let sh = shapes(cfg.width);
    let mut p = Params::init(cfg.width, &mut rng);
    let mut velocity: Vec<Vec<f32>> = p.slots().iter().map(|s| vec![0.0; s.len()]).collect();
    let labels = train.labels()?;
    let steps_per_epoch = cfg.train / cfg.batch;
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..cfg.train).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for rows in order.chunks_exact(cfg.batch) {
            let x = train.images.gather_rows(rows);
            let y: Vec<u8> = rows.iter().map(|&r| labels[r]).collect();
            let (loss, grads) = train_step(&p, &sh, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "fixture training" });
            }
            epoch_loss += loss;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * step as f32 / total as f32).cos());
            for ((param, vel), g) in p.slots().into_iter().zip(&mut velocity).zip(&grads) {
                for ((w, v), &gw) in param.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v + gw + cfg.weight_decay * *w;
                    *w -= lr * *v;
                }
            }
            step += 1;
        }
        log::debug!("fixture epoch {epoch}: loss {:.4}", epoch_loss / steps_per_epoch as f32);
    }
    let stats = population_stats(&p, &sh, &train.images)?;
    let model = build_model(&p, &sh, &stats)?;
    let test_accuracy = evaluate_float(&model, &test)?;
    if test_accuracy < REQUIRED_ACCURACY {
        return Err(Error::FixtureAccuracy {
            accuracy: test_accuracy,
            required: REQUIRED_ACCURACY,
        });
    }
    Ok(Fixture {
        model,
        train,
        calib,
        test,
        test_accuracy,
    })
}

pub fn generate_fixture(seed: u64) -> Result<Fixture> {
    generate_fixture_with(&FixtureConfig::new(seed))
}
