//! End-to-end runs on the trained fixture with small iteration counts.

use std::sync::OnceLock;

use po2q::fixture::{generate_fixture, Fixture};
use po2q::io::quantized::QuantizedModel;
use po2q::network::FoldedNet;
use po2q::pipeline::{ablation, quantize, Method, Mode, QuantOutcome, RunConfig};
use po2q::quantizer::{init_scale_mse, naive_pow2_scale, Granularity, ScaleState, Signedness};
use po2q::shift::{compare_paths, equivalence_check, infer_int, predict_int, simulate};
use po2q::Tensor;

struct Setup {
    fixture: Fixture,
    net: FoldedNet,
}

fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let fixture = generate_fixture(0).unwrap();
        let net = FoldedNet::from_model(&fixture.model).unwrap();
        Setup { fixture, net }
    })
}

fn small_config(wbits: u8) -> RunConfig {
    let mut cfg = RunConfig::new(Mode::Quick, wbits, 4).with_iters_weight(300);
    cfg.iters_act = 40;
    cfg.equivalence_inputs = 64;
    cfg
}

fn run(method: Method) -> QuantOutcome {
    let s = setup();
    let eval = s.fixture.test.head(256);
    quantize(&s.net, &s.fixture.calib.images, Some(&eval), &small_config(4), method).unwrap()
}

fn adaptive() -> &'static QuantOutcome {
    static CELL: OnceLock<QuantOutcome> = OnceLock::new();
    CELL.get_or_init(|| run(Method::AdaptiveP))
}

fn inputs(n: usize) -> Tensor {
    setup().fixture.test.images.slice_rows(0, n)
}

#[test]
fn adaptive_run_is_exact_and_multiply_free() {
    let o = adaptive();
    assert_eq!(o.method.name(), "adaptive-p");
    assert!(o.equivalence.is_exact(), "{:?}", o.equivalence.first_mismatch);
    assert_eq!(o.equivalence.inputs, 64);
    assert_eq!(o.equivalence.ops.float_mul, 0);
    assert!(o.equivalence.ops.shifts > 0);
    let (acc, fp) = (o.accuracy.unwrap(), o.fp_accuracy.unwrap());
    assert!(acc > 0.5 && fp >= 0.95, "{acc} vs {fp}");
    for u in &o.units {
        assert!(u.loss_weights <= u.loss_naive * (1.0 + 1e-6), "unit {} worse than naive", u.unit);
        for l in &u.weights {
            for (e, f) in l.exponents.iter().zip(&l.floor_exponents) {
                assert!(*e == *f || *e == *f + 1, "{}: {e} vs floor {f}", l.layer);
            }
        }
    }
}

#[test]
fn p_values_stay_in_range_with_two_decimals() {
    let cfg = small_config(4);
    for p in adaptive().p_values() {
        assert!(p > 1.0 && p <= 1.0 + cfg.alpha + 1e-12, "P = {p}");
        assert!(((p * 100.0).round() - p * 100.0).abs() < 1e-9, "P = {p} not rounded");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let again = run(Method::AdaptiveP);
    assert_eq!(adaptive().model.to_bytes().unwrap(), again.model.to_bytes().unwrap());
}

#[test]
fn baseline_uses_rounded_log_exponents() {
    let s = setup();
    let o = run(Method::Naive);
    assert_eq!(o.method.name(), "naive");
    assert!(o.p_values().iter().all(|&p| p == 2.0));
    for li in s.net.weight_layers() {
        let layer = &s.net.layers[li];
        let w = layer.weight.as_ref().unwrap();
        let init = init_scale_mse(w, 4, Granularity::PerOutputChannel, Signedness::Asymmetric).unwrap();
        let expect: Vec<i32> = (0..init.channels()).map(|c| naive_pow2_scale(init.scale(c)).unwrap()).collect();
        let node = o.model.node(&layer.id).unwrap();
        assert_eq!(node.weight.as_ref().unwrap().params.exponents().unwrap(), &expect[..], "{}", layer.id);
    }
}

#[test]
fn ablation_rows_cover_three_methods() {
    let s = setup();
    let mut cfg = small_config(2);
    cfg.iters_weight = 100;
    cfg.iters_scale = 20;
    cfg.iters_act = 10;
    let eval = s.fixture.test.head(128);
    let (table, outcomes) = ablation(&s.net, &s.fixture.calib.images, &eval, &cfg).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.method.name()).collect();
    assert_eq!(names, ["naive", "scale-group", "adaptive-p"]);
    assert!(table.rows[1].p_values.iter().all(|&p| p == 2.0));
    assert!(table.rows[2].p_values.iter().all(|&p| p > 1.0 && p <= 1.1));
    assert_eq!(outcomes.len(), 3);
    assert!(table.to_string().contains("scale-group"));
}

#[test]
fn saved_model_loads_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.bin");
    let model = &adaptive().model;
    model.save(&path).unwrap();
    let back = QuantizedModel::load(&path).unwrap();
    assert_eq!(&back, model);
    let x = inputs(32);
    assert_eq!(predict_int(&back, &x, 8).unwrap().0, predict_int(model, &x, 8).unwrap().0);
}

#[test]
fn equivalence_holds_on_more_inputs_and_zero_input() {
    let model = &adaptive().model;
    let report = equivalence_check(model, &inputs(256)).unwrap();
    assert!(report.is_exact());
    assert_eq!(report.ops.float_mul, 0);

    let zero = Tensor::zeros([1].iter().chain(&model.input_shape).copied().collect());
    let out = infer_int(model, &zero).unwrap();
    let sim = simulate(model, &zero).unwrap();
    assert_eq!(out.boundaries.len(), sim.len());
    for (a, b) in out.boundaries.iter().zip(&sim) {
        assert_eq!(a.values, b.values, "{}", a.layer);
    }
}

#[test]
fn corrupted_exponent_is_localized_to_its_layer() {
    let reference = &adaptive().model;
    let mut candidate = reference.clone();
    let target = candidate
        .nodes
        .iter()
        .position(|n| n.id == "relu2")
        .expect("fixture has relu2");
    let act = candidate.nodes[target].act.as_mut().expect("relu2 is quantized");
    if let ScaleState::Pow2(e) = &mut act.scale {
        e[0] += 1;
    }
    let report = compare_paths(reference, &candidate, &inputs(16)).unwrap();
    assert!(!report.is_exact());
    assert_eq!(report.first_mismatch.unwrap().layer, "relu2");
}

#[test]
fn float_scales_are_rejected() {
    let mut model = adaptive().model.clone();
    let node = model.nodes.iter_mut().find(|n| n.act.is_some()).unwrap();
    node.act.as_mut().unwrap().scale = ScaleState::Float(vec![0.3]);
    assert_eq!(infer_int(&model, &inputs(1)).unwrap_err().code(), "E_POW2");
}

#[test]
fn invalid_bit_width_is_a_config_error() {
    let s = setup();
    let mut cfg = small_config(4);
    cfg.weight_bits = 9;
    let err = quantize(&s.net, &s.fixture.calib.images, None, &cfg, Method::AdaptiveP).unwrap_err();
    assert_eq!(err.exit_code(), 10);
}
