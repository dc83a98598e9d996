#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinydeploy::model::{
    parse_model, Conv2dSpec, LayerParams, LinearSpec, ParamData, PoolSpec,
};
use tinydeploy::quant::{calibrate_activations, quantize_weights};
use tinydeploy::{ElementType, LayerSpec, ModelGraph, Tensor, TensorShape, WeightStore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn load_model(name: &str) -> ModelGraph {
    let text = fs::read_to_string(models_dir().join(name)).unwrap();
    parse_model(&text).unwrap()
}

pub fn lenet() -> ModelGraph {
    load_model("lenet5.json")
}

pub fn testnet() -> ModelGraph {
    load_model("testnet_i8.json")
}

/// Uniform weights scaled by fan-in, so activations stay O(1).
pub fn random_store(graph: &ModelGraph, rng: &mut impl Rng) -> WeightStore {
    assert_eq!(graph.element_type(), ElementType::F32);
    let mut layers = BTreeMap::new();
    for (index, layer) in graph.parameterized_layers() {
        let (w, b) = layer.parameter_shape().unwrap();
        let fan_in = match layer {
            LayerSpec::Conv2d(c) => c.in_channels * c.kernel_size * c.kernel_size,
            LayerSpec::Linear(l) => l.in_features,
            _ => unreachable!(),
        };
        let bound = 1.5 / (fan_in as f32).sqrt();
        let weight = (0..w).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = layer
            .has_bias()
            .then(|| ParamData::F32((0..b).map(|_| rng.gen_range(-0.1..0.1)).collect()));
        layers.insert(
            index,
            LayerParams {
                weight: ParamData::F32(weight),
                bias,
            },
        );
    }
    WeightStore::new(graph, layers, None).unwrap()
}

pub fn random_input(shape: TensorShape, rng: &mut impl Rng) -> Tensor {
    let data = (0..shape.element_count()).map(|_| rng.gen_range(0.0f32..1.0)).collect();
    Tensor::from_f32(shape, data).unwrap()
}

/// Sparse digit-like image: background 0, a few bright strokes.
pub fn synthetic_image(shape: TensorShape, rng: &mut impl Rng) -> Tensor {
    let (c, h, w) = shape.dims();
    let mut data = vec![0.0f32; c * h * w];
    for _ in 0..rng.gen_range(2..5) {
        let (mut y, mut x) = (rng.gen_range(0..h) as isize, rng.gen_range(0..w) as isize);
        let (dy, dx) = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
        for _ in 0..rng.gen_range(4..h.max(5)) {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                break;
            }
            for ch in 0..c {
                data[(ch * h + y as usize) * w + x as usize] = 1.0;
            }
            y += dy;
            x += dx;
        }
    }
    Tensor::from_f32(shape, data).unwrap()
}

pub fn quantize_model(
    graph: &ModelGraph,
    store: &WeightStore,
    samples: &[Tensor],
) -> (ModelGraph, WeightStore) {
    let calibration = calibrate_activations(graph, store, samples).unwrap();
    quantize_weights(graph, store, &calibration).unwrap()
}

/// Random sequential graph: 1-4 convolution units with optional ReLU and
/// random pools (non-overlapping, strided past the kernel, or overlapping),
/// optionally followed by a linear head. Spatial input at most 3x16x16.
pub fn random_graph(rng: &mut impl Rng) -> ModelGraph {
    loop {
        if let Some(g) = try_random_graph(rng) {
            return g;
        }
    }
}

fn try_random_graph(rng: &mut impl Rng) -> Option<ModelGraph> {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(4..=16);
    let w = rng.gen_range(4..=16);
    let input = TensorShape::spatial(c, h, w);
    let mut layers = Vec::new();
    let (mut ch, mut hh, mut ww) = (c, h, w);
    for _ in 0..rng.gen_range(1..=4) {
        let padding = rng.gen_range(0..=1);
        let kmax = 3.min(hh + 2 * padding).min(ww + 2 * padding);
        let kernel_size = rng.gen_range(1..=kmax);
        let stride = if rng.gen_bool(0.2) { 2 } else { 1 };
        let out_channels = rng.gen_range(1..=4);
        layers.push(LayerSpec::Conv2d(Conv2dSpec {
            in_channels: ch,
            out_channels,
            kernel_size,
            stride,
            padding,
            has_bias: rng.gen_bool(0.7),
        }));
        ch = out_channels;
        hh = (hh + 2 * padding - kernel_size) / stride + 1;
        ww = (ww + 2 * padding - kernel_size) / stride + 1;
        if rng.gen_bool(0.7) {
            layers.push(LayerSpec::Relu);
        }
        if rng.gen_bool(0.7) && hh >= 2 && ww >= 2 {
            let kernel_size = rng.gen_range(2..=3.min(hh).min(ww));
            let (stride, padding) = match rng.gen_range(0..4) {
                0 => (kernel_size + 1, 0),
                1 => (1, 0),
                2 => (kernel_size, kernel_size / 2),
                _ => (kernel_size, 0),
            };
            let spec = PoolSpec {
                kernel_size,
                stride,
                padding,
            };
            let oh = (hh + 2 * padding).checked_sub(kernel_size)? / stride + 1;
            let ow = (ww + 2 * padding).checked_sub(kernel_size)? / stride + 1;
            layers.push(LayerSpec::MaxPool2d(spec));
            hh = oh;
            ww = ow;
        }
    }
    if rng.gen_bool(0.6) {
        layers.push(LayerSpec::Flatten);
        let mut features = ch * hh * ww;
        for _ in 0..rng.gen_range(1..=2) {
            let out_features = rng.gen_range(2..=12);
            layers.push(LayerSpec::Linear(LinearSpec {
                in_features: features,
                out_features,
                has_bias: rng.gen_bool(0.8),
            }));
            features = out_features;
            if rng.gen_bool(0.5) {
                layers.push(LayerSpec::Relu);
            }
        }
    }
    ModelGraph::new(input, ElementType::F32, layers).ok()
}
