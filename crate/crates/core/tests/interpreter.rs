mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use tinydeploy::interp::{conv2d_naive, maxpool2d_naive, run_fused_instrumented};
use tinydeploy::model::{Conv2dSpec, LayerParams, ParamData, PoolSpec};
use tinydeploy::{
    classify, fuse, pingpong_plan, run_fused, run_naive, ElementType, LayerSpec, ModelGraph,
    Tensor, TensorShape, WeightStore,
};

use common::*;

/// Written against the textbook definition: explicit zero-padded copy of
/// the input, then a plain quadruple loop in f64.
fn oracle_conv(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    weight: &[f32],
    bias: &[f32],
    oc: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0f64; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                padded[ch * ph * pw + (y + pad) * pw + xx + pad] = f64::from(x[ch * h * w + y * w + xx]);
            }
        }
    }
    let (oh, ow) = (ph - k + 1, pw - k + 1);
    let mut out = Vec::with_capacity(oc * oh * ow);
    for o in 0..oc {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = f64::from(bias[o]);
                for ch in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            s += padded[ch * ph * pw + (y + dy) * pw + xx + dx]
                                * f64::from(weight[o * c * k * k + ch * k * k + dy * k + dx]);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

#[test]
fn conv_matches_quadruple_loop_oracle() {
    let mut rng = rng(11);
    let spec = Conv2dSpec {
        in_channels: 3,
        out_channels: 4,
        kernel_size: 5,
        stride: 1,
        padding: 2,
        has_bias: true,
    };
    for _ in 0..10 {
        let input = random_input(TensorShape::spatial(3, 8, 8), &mut rng);
        let weight: Vec<f32> = (0..4 * 3 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv2d_naive(&input, &weight, Some(&bias), &spec).unwrap();
        assert_eq!(got.shape(), TensorShape::spatial(4, 8, 8));
        let want = oracle_conv(input.as_f32().unwrap(), (3, 8, 8), &weight, &bias, 4, 5, 2);
        for (g, w) in got.as_f32().unwrap().iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() <= 1e-5 * (1.0 + w.abs()), "{g} vs {w}");
        }
    }
}

#[test]
fn single_relu_graph_is_elementwise() {
    let graph = ModelGraph::new(TensorShape::flat(3), ElementType::F32, vec![LayerSpec::Relu]).unwrap();
    let store = WeightStore::new(&graph, BTreeMap::new(), None).unwrap();
    let x = Tensor::from_f32(TensorShape::flat(3), vec![-1.0, 0.0, 2.0]).unwrap();
    let y = run_naive(&graph, &store, &x).unwrap();
    assert_eq!(y.as_f32().unwrap(), &[0.0, 0.0, 2.0]);
}

#[test]
fn zero_weights_give_zero_logits_and_class_zero() {
    let graph = lenet();
    let mut layers = BTreeMap::new();
    for (index, layer) in graph.parameterized_layers() {
        let (w, b) = layer.parameter_shape().unwrap();
        layers.insert(
            index,
            LayerParams {
                weight: ParamData::F32(vec![0.0; w]),
                bias: Some(ParamData::F32(vec![0.0; b])),
            },
        );
    }
    let store = WeightStore::new(&graph, layers, None).unwrap();
    let x = random_input(graph.input_shape(), &mut rng(1));
    let y = run_naive(&graph, &store, &x).unwrap();
    assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(classify(&y).unwrap(), 0);
}

#[test]
fn identity_conv_relu_pool_unit() {
    let graph = ModelGraph::new(
        TensorShape::spatial(1, 2, 2),
        ElementType::F32,
        vec![
            LayerSpec::Conv2d(Conv2dSpec {
                in_channels: 1,
                out_channels: 1,
                kernel_size: 1,
                stride: 1,
                padding: 0,
                has_bias: false,
            }),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d(PoolSpec {
                kernel_size: 2,
                stride: 2,
                padding: 0,
            }),
        ],
    )
    .unwrap();
    let store = WeightStore::new(
        &graph,
        BTreeMap::from([(
            0,
            LayerParams {
                weight: ParamData::F32(vec![1.0]),
                bias: None,
            },
        )]),
        None,
    )
    .unwrap();
    let plan = fuse(&graph).unwrap();
    assert_eq!(plan.steps.len(), 1);
    let buffers = pingpong_plan(&plan).unwrap();
    for (data, want) in [
        ([-3.0, 1.5, 0.25, -1.0], 1.5),
        ([-3.0, -1.5, -0.25, -1.0], 0.0),
    ] {
        let x = Tensor::from_f32(graph.input_shape(), data.to_vec()).unwrap();
        let y = run_fused(&plan, &store, &x, &buffers).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[want]);
    }
}

#[test]
fn strided_pool_fused_matches_naive() {
    // pool stride 3 > kernel 2: rows/columns between windows are skipped
    let graph = ModelGraph::new(
        TensorShape::spatial(2, 11, 11),
        ElementType::F32,
        vec![
            LayerSpec::Conv2d(Conv2dSpec {
                in_channels: 2,
                out_channels: 3,
                kernel_size: 3,
                stride: 1,
                padding: 1,
                has_bias: true,
            }),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d(PoolSpec {
                kernel_size: 2,
                stride: 3,
                padding: 0,
            }),
        ],
    )
    .unwrap();
    let plan = fuse(&graph).unwrap();
    assert_eq!(plan.steps.len(), 1);
    let mut rng = rng(3);
    let store = random_store(&graph, &mut rng);
    let buffers = pingpong_plan(&plan).unwrap();
    for _ in 0..5 {
        let x = random_input(graph.input_shape(), &mut rng);
        let naive = run_naive(&graph, &store, &x).unwrap();
        let fused = run_fused(&plan, &store, &x, &buffers).unwrap();
        assert_eq!(fused.shape(), TensorShape::spatial(3, 4, 4));
        assert!(fused.bitwise_eq(&naive));
    }
}

#[test]
fn naive_pool_matches_window_enumeration() {
    let x = Tensor::from_f32(TensorShape::spatial(1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
    let spec = PoolSpec {
        kernel_size: 1,
        stride: 1,
        padding: 0,
    };
    assert_eq!(maxpool2d_naive(&x, &spec).unwrap(), x);
}

#[test]
fn liveness_matches_plan_on_reference_models() {
    for graph in [lenet(), testnet().with_element_type(ElementType::F32)] {
        let plan = fuse(&graph).unwrap();
        let buffers = pingpong_plan(&plan).unwrap();
        let store = random_store(&graph, &mut rng(5));
        let x = random_input(graph.input_shape(), &mut rng(6));
        let (out, live) = run_fused_instrumented(&plan, &store, &x, &buffers).unwrap();
        assert!(out.bitwise_eq(&run_naive(&graph, &store, &x).unwrap()));
        assert_eq!(live.touched_bytes(), buffers.total_bytes);
        assert!(live.peak_live_bytes <= buffers.total_bytes);
    }
}

fn check_equivalence(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = rng(seed);
    let graph = random_graph(&mut rng);
    let store = random_store(&graph, &mut rng);
    let plan = fuse(&graph).unwrap();
    let buffers = pingpong_plan(&plan).unwrap();
    let inputs: Vec<Tensor> = (0..3).map(|_| random_input(graph.input_shape(), &mut rng)).collect();
    for x in &inputs {
        let naive = run_naive(&graph, &store, x).unwrap();
        let fused = run_fused(&plan, &store, x, &buffers).unwrap();
        prop_assert!(fused.bitwise_eq(&naive), "fp32 differs for {:?}", graph.layers());
    }

    let (qgraph, qstore) = quantize_model(&graph, &store, &inputs);
    let qplan = fuse(&qgraph).unwrap();
    let qbuffers = pingpong_plan(&qplan).unwrap();
    for x in &inputs {
        let qx = tinydeploy::quant::quantize_input(x, qstore.quant().unwrap()).unwrap();
        let naive = run_naive(&qgraph, &qstore, &qx).unwrap();
        let (fused, live) = run_fused_instrumented(&qplan, &qstore, &qx, &qbuffers).unwrap();
        prop_assert_eq!(fused.as_i8(), naive.as_i8());
        prop_assert_eq!(live.touched_bytes(), qbuffers.total_bytes);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_equals_naive(seed in any::<u64>()) {
        check_equivalence(seed)?;
    }

    #[test]
    fn classify_ignores_constant_shift(
        logits in prop::collection::vec(-100i32..100, 1..20),
        shift in -50i32..50,
    ) {
        let f = |v: &[i32]| Tensor::from_f32(
            TensorShape::flat(v.len()),
            v.iter().map(|&x| x as f32).collect(),
        ).unwrap();
        let shifted: Vec<i32> = logits.iter().map(|x| x + shift).collect();
        prop_assert_eq!(classify(&f(&logits)).unwrap(), classify(&f(&shifted)).unwrap());
    }
}
