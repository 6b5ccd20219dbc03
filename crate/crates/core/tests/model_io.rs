use std::collections::BTreeMap;

use po2q::io::blob::{decode, encode, ArrayData, NamedArray};
use po2q::io::calib::{sample_subset, Dataset};
use po2q::io::graph::{load_model, FloatModel, ModelGraph};
use po2q::network::FoldedNet;
use po2q::reconstruction::{partition_blocks, GammaSource};
use po2q::Tensor;
use serde_json::json;

fn one_conv_model() -> FloatModel {
    let graph: ModelGraph = serde_json::from_value(json!({
        "weights": "weights.bin",
        "output": "fc",
        "nodes": [
            {"id": "x", "op": "input", "shape": [2, 4, 4]},
            {"id": "conv", "op": "conv2d", "inputs": ["x"], "weight": "conv.weight", "bias": "conv.bias", "stride": 1, "pad": 1},
            {"id": "relu", "op": "relu", "inputs": ["conv"]},
            {"id": "flat", "op": "flatten", "inputs": ["relu"]},
            {"id": "fc", "op": "linear", "inputs": ["flat"], "weight": "fc.weight"}
        ]
    }))
    .unwrap();
    let ramp = |n: usize, k: f32| (0..n).map(|i| (i as f32 * k).sin()).collect::<Vec<_>>();
    let mut tensors = BTreeMap::new();
    tensors.insert("conv.weight".into(), Tensor::new(vec![3, 2, 3, 3], ramp(54, 0.7)).unwrap());
    tensors.insert("conv.bias".into(), Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
    tensors.insert("fc.weight".into(), Tensor::new(vec![5, 48], ramp(240, 1.3)).unwrap());
    FloatModel::new(graph, tensors).unwrap()
}

#[test]
fn one_conv_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = one_conv_model();
    model.save(&path).unwrap();
    let back = load_model(&path, None).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.input_shape(), vec![2, 4, 4]);
}

#[test]
fn weights_override_path_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    one_conv_model().save(&path).unwrap();
    let moved = dir.path().join("elsewhere.bin");
    std::fs::rename(dir.path().join("weights.bin"), &moved).unwrap();
    assert_eq!(load_model(&path, None).unwrap_err().code(), "E_IO");
    assert!(load_model(&path, Some(&moved)).is_ok());
}

#[test]
fn corrupt_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    one_conv_model().save(&path).unwrap();
    let wpath = dir.path().join("weights.bin");
    let mut bytes = std::fs::read(&wpath).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&wpath, bytes).unwrap();
    assert_eq!(load_model(&path, None).unwrap_err().code(), "E_MAGIC");
}

#[test]
fn missing_tensor_is_a_graph_error() {
    let model = one_conv_model();
    let mut tensors = model.tensors.clone();
    tensors.remove("fc.weight");
    assert!(FloatModel::new(model.graph.clone(), tensors).is_err());
}

#[test]
fn blob_round_trip_keeps_dtypes() {
    let mut map = BTreeMap::new();
    map.insert(
        "codes".to_string(),
        NamedArray {
            shape: vec![2, 3],
            data: ArrayData::I32(vec![-4, 0, 7, 1 << 20, -1, 3]),
        },
    );
    map.insert("w".to_string(), NamedArray::f32(&Tensor::new(vec![2], vec![0.5, -1.25]).unwrap()));
    let back = decode(&encode(&map).unwrap()).unwrap();
    assert_eq!(back, map);
}

#[test]
fn bn_less_unit_borrows_gamma_from_preceding_unit() {
    let graph: ModelGraph = serde_json::from_value(json!({
        "weights": "weights.bin",
        "output": "fc",
        "nodes": [
            {"id": "x", "op": "input", "shape": [1, 4, 4]},
            {"id": "conv", "op": "conv2d", "inputs": ["x"], "weight": "conv.weight"},
            {"id": "bn", "op": "bn", "inputs": ["conv"], "gamma": "bn.g", "beta": "bn.b", "mean": "bn.m", "var": "bn.v", "eps": 1e-5},
            {"id": "relu", "op": "relu", "inputs": ["bn"]},
            {"id": "flat", "op": "flatten", "inputs": ["relu"]},
            {"id": "fc", "op": "linear", "inputs": ["flat"], "weight": "fc.weight"}
        ]
    }))
    .unwrap();
    let mut tensors = BTreeMap::new();
    tensors.insert("conv.weight".into(), Tensor::full(vec![2, 1, 3, 3], 0.1));
    tensors.insert("bn.g".into(), Tensor::new(vec![2], vec![0.5, 1.5]).unwrap());
    tensors.insert("bn.b".into(), Tensor::zeros(vec![2]));
    tensors.insert("bn.m".into(), Tensor::zeros(vec![2]));
    tensors.insert("bn.v".into(), Tensor::full(vec![2], 1.0));
    tensors.insert("fc.weight".into(), Tensor::full(vec![3, 32], 0.01));
    let net = FoldedNet::from_model(&FloatModel::new(graph, tensors).unwrap()).unwrap();
    let units = partition_blocks(&net).unwrap();
    assert_eq!(units.len(), 2);
    assert_eq!(units[0].gamma_source, GammaSource::Own);
    assert_eq!(units[0].bn_gamma_last, vec![0.5, 1.5]);
    assert_eq!(units[1].gamma_source, GammaSource::Preceding(0));
    assert_eq!(units[1].bn_gamma_last, vec![0.5, 1.5]);
}

#[test]
fn dataset_round_trip_and_shape_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let d = Dataset {
        images: Tensor::new(vec![3, 1, 2, 2], (0..12).map(|i| i as f32 / 11.0).collect()).unwrap(),
        labels: Some(vec![0, 2, 1]),
    };
    d.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), d);
    assert!(po2q::io::calib::load_calibration(&path, &[1, 2, 2]).is_ok());
    assert_eq!(po2q::io::calib::load_calibration(&path, &[2, 2, 1]).unwrap_err().code(), "E_SHAPE");
}

#[test]
fn subset_sampling_is_uniform() {
    let (pool, k, draws) = (20, 5, 4000);
    let mut counts = vec![0usize; pool];
    for seed in 0..draws {
        let s = sample_subset(pool, k, seed).unwrap();
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), k);
        for i in s {
            counts[i] += 1;
        }
    }
    // Each index is expected k/pool of the time; chi-square with 19 dof.
    let expect = (draws as usize * k) as f64 / pool as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    assert!(chi2 < 43.8, "chi-square {chi2} over {counts:?}");
    assert_eq!(sample_subset(pool, k, 9).unwrap(), sample_subset(pool, k, 9).unwrap());
    assert!(sample_subset(3, 4, 0).is_err());
}
