//! Small linear units where every exponent and rounding choice can be
//! enumerated, used to check two-phase reconstruction against the optimum.

use po2q::io::graph::{FloatModel, ModelGraph};
use po2q::network::{forward, FoldedNet, Overrides};
use po2q::quantizer::{init_scale_mse, Granularity, Signedness};
use po2q::reconstruction::{partition_blocks, reconstruct_unit_weights, UnitData, WeightConfig};
use po2q::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use std::collections::BTreeMap;

struct Instance {
    weight: Vec<f32>,
    rows: usize,
    cols: usize,
    bias: Vec<f32>,
    x: Vec<f32>,
    samples: usize,
    bits: u8,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = [(1, 4), (2, 2), (3, 1), (2, 1), (1, 3), (3, 1)];
    let (rows, cols) = shapes[rng.random_range(0..shapes.len())];
    let wd = Normal::new(0.0f32, 0.5).unwrap();
    let xd = Normal::new(0.0f32, 1.0).unwrap();
    let samples = 128;
    Instance {
        weight: (0..rows * cols).map(|_| wd.sample(&mut rng)).collect(),
        rows,
        cols,
        bias: (0..rows).map(|_| rng.random_range(-0.2..0.2)).collect(),
        x: (0..samples * cols).map(|_| xd.sample(&mut rng)).collect(),
        samples,
        bits: if rng.random_bool(0.5) { 2 } else { 3 },
    }
}

/// Mean over samples of the summed squared output error, in f64.
fn loss(inst: &Instance, w: &[f64]) -> f64 {
    let mut total = 0.0;
    for n in 0..inst.samples {
        for r in 0..inst.rows {
            let mut y = 0.0f64;
            let mut t = inst.bias[r] as f64;
            for c in 0..inst.cols {
                let x = inst.x[n * inst.cols + c] as f64;
                y += w[r * inst.cols + c] * x;
                t += inst.weight[r * inst.cols + c] as f64 * x;
            }
            y += inst.bias[r] as f64;
            total += (y - t).powi(2);
        }
    }
    total / inst.samples as f64
}

pub struct Outcome {
    pub method: f64,
    pub optimum: f64,
    pub naive: f64,
}

/// Reconstruction loss of the two-phase result, the enumerated optimum and
/// naive exponents with nearest rounding, all in f64.
pub fn run(seed: u64) -> Outcome {
    let inst = instance(seed);
    let mut tensors = BTreeMap::new();
    tensors.insert("fc.weight".to_string(), Tensor::new(vec![inst.rows, inst.cols], inst.weight.clone()).unwrap());
    tensors.insert("fc.bias".to_string(), Tensor::new(vec![inst.rows], inst.bias.clone()).unwrap());
    let graph: ModelGraph = serde_json::from_value(json!({
        "weights": "weights.bin",
        "output": "fc",
        "nodes": [
            {"id": "x", "op": "input", "shape": [inst.cols]},
            {"id": "fc", "op": "linear", "inputs": ["x"], "weight": "fc.weight", "bias": "fc.bias"}
        ]
    }))
    .unwrap();
    let net = FoldedNet::from_model(&FloatModel::new(graph, tensors).unwrap()).unwrap();
    let unit = partition_blocks(&net).unwrap().remove(0);
    let x = Tensor::new(vec![inst.samples, inst.cols], inst.x.clone()).unwrap();
    let target = forward(&net, &net.all_layers(), vec![], Some(x.clone()), Overrides::none())
        .unwrap()
        .take(net.output);
    let data = UnitData {
        externals: vec![],
        raw: Some(x),
        target,
    };
    let wt = net.layers[net.output].weight.clone().unwrap();
    let init = init_scale_mse(&wt, inst.bits, Granularity::PerOutputChannel, Signedness::Asymmetric).unwrap();
    let cfg = WeightConfig {
        iters_total: 2000,
        iters_scale: 400,
        lr_u: 1e-2,
        lr_v: 1e-2,
        lambda: 1.0,
        mu: 0.01,
        batch: 32,
        p_value: 2.0,
        seed,
    };
    let report = reconstruct_unit_weights(&net, &unit, &data, std::slice::from_ref(&init), &cfg).unwrap();
    let learned: Vec<f64> = report.layers[0]
        .hardened
        .dequantized(wt.shape())
        .unwrap()
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();

    // Enumerate exponents {floor, floor + 1} and floor/ceil rounding per
    // weight. Output rows are independent, so rows are optimised separately.
    let p = (1i64 << inst.bits) - 1;
    let mut best = vec![0f64; inst.rows * inst.cols];
    let mut naive = vec![0f64; inst.rows * inst.cols];
    for r in 0..inst.rows {
        let s = init.scale(r) as f64;
        let z = init.zero_point[r] as f64;
        let grid = |e: i32| {
            let st = 2f64.powi(e);
            (st, (s * z / st).round().clamp(0.0, p as f64))
        };
        let row = r * inst.cols..(r + 1) * inst.cols;
        let fe = s.log2().floor() as i32;
        let mut row_best = (f64::INFINITY, vec![]);
        for e in [fe, fe + 1] {
            let (st, zp) = grid(e);
            for mask in 0..1u32 << inst.cols {
                let mut w = best.clone();
                for (k, i) in row.clone().enumerate() {
                    let up = ((mask >> k) & 1) as f64;
                    let q = ((inst.weight[i] as f64 / st + zp).floor() + up).clamp(0.0, p as f64);
                    w[i] = st * (q - zp);
                }
                let l = row_loss(&inst, &w, r);
                if l < row_best.0 {
                    row_best = (l, w[row.clone()].to_vec());
                }
            }
        }
        best[row.clone()].copy_from_slice(&row_best.1);
        let (st, zp) = grid(s.log2().round_ties_even() as i32);
        for i in row {
            let q = (inst.weight[i] as f64 / st + zp).round().clamp(0.0, p as f64);
            naive[i] = st * (q - zp);
        }
    }
    Outcome {
        method: loss(&inst, &learned),
        optimum: loss(&inst, &best),
        naive: loss(&inst, &naive),
    }
}

fn row_loss(inst: &Instance, w: &[f64], r: usize) -> f64 {
    let mut total = 0.0;
    for n in 0..inst.samples {
        let mut d = 0.0f64;
        for c in 0..inst.cols {
            d += (w[r * inst.cols + c] - inst.weight[r * inst.cols + c] as f64) * inst.x[n * inst.cols + c] as f64;
        }
        total += d * d;
    }
    total
}

pub fn close(a: f64, b: f64) -> bool {
    a <= b * (1.0 + 1e-5) + 1e-9
}
