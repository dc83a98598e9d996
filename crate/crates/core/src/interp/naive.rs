use super::fused::StoreElement;
use super::kernels::{self, ConvGeom, Element, F32Arith, NoProbe, PoolGeom};
use super::{Tensor, TensorData};
use crate::error::{Error, Result};
use crate::model::{
    Conv2dSpec, ElementType, LayerSpec, LinearSpec, ModelGraph, PoolSpec, TensorShape,
    WeightStore,
};

pub(crate) fn conv_geom(spec: &Conv2dSpec, input: TensorShape, output: TensorShape) -> ConvGeom {
    let (in_channels, in_height, in_width) = input.dims();
    let (out_channels, out_height, out_width) = output.dims();
    ConvGeom {
        in_channels,
        in_height,
        in_width,
        out_channels,
        kernel: spec.kernel_size,
        stride: spec.stride,
        padding: spec.padding,
        out_height,
        out_width,
    }
}

pub(crate) fn pool_geom(spec: &PoolSpec, input: TensorShape, output: TensorShape) -> PoolGeom {
    let (channels, in_height, in_width) = input.dims();
    let (_, out_height, out_width) = output.dims();
    PoolGeom {
        channels,
        in_height,
        in_width,
        kernel: spec.kernel_size,
        stride: spec.stride,
        padding: spec.padding,
        out_height,
        out_width,
    }
}

fn single_layer_output(layer: LayerSpec, input: TensorShape) -> Result<TensorShape> {
    layer.output_shape(0, input)
}

fn require_f32(t: &Tensor) -> Result<&[f32]> {
    t.as_f32().ok_or(Error::ElementTypeMismatch {
        expected: "f32",
        found: "i8",
    })
}

/// FP32 cross-correlation with zero padding; `weight` is
/// `[out_channels][in_channels][k][k]`.
pub fn conv2d_naive(
    input: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    spec: &Conv2dSpec,
) -> Result<Tensor> {
    let out_shape = single_layer_output(LayerSpec::Conv2d(*spec), input.shape())?;
    if weight.len() != spec.weight_elements()
        || bias.is_some_and(|b| b.len() != spec.out_channels)
    {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects {} weights and {} biases",
            spec.weight_elements(),
            spec.out_channels
        )));
    }
    let g = conv_geom(spec, input.shape(), out_shape);
    let out = kernels::conv2d(&F32Arith { bias }, require_f32(input)?, weight, &g);
    Tensor::from_f32(out_shape, out)
}

pub fn maxpool2d_naive(input: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let out_shape = single_layer_output(LayerSpec::MaxPool2d(*spec), input.shape())?;
    let g = pool_geom(spec, input.shape(), out_shape);
    let n = out_shape.element_count();
    match input.data() {
        TensorData::F32(v) => {
            let mut out = vec![0.0f32; n];
            kernels::maxpool_into(v, &g, &mut out, &mut NoProbe);
            Tensor::from_f32(out_shape, out)
        }
        TensorData::I8(v) => {
            let mut out = vec![0i8; n];
            kernels::maxpool_into(v, &g, &mut out, &mut NoProbe);
            Tensor::from_i8(out_shape, out, input.scale().expect("int8 tensors carry a scale"))
        }
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    let data = match t.data() {
        TensorData::F32(v) => TensorData::F32(v.iter().map(|x| x.relu()).collect()),
        TensorData::I8(v) => TensorData::I8(v.iter().map(|x| x.relu()).collect()),
    };
    Tensor {
        shape: t.shape(),
        data,
        scale: t.scale(),
    }
}

/// `out[j] = sum_i in[i] * weight[j * in + i] + bias[j]`.
pub fn linear_naive(
    input: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    spec: &LinearSpec,
) -> Result<Tensor> {
    let out_shape = single_layer_output(LayerSpec::Linear(*spec), input.shape())?;
    if weight.len() != spec.weight_elements()
        || bias.is_some_and(|b| b.len() != spec.out_features)
    {
        return Err(Error::ShapeMismatch(format!(
            "linear expects {} weights and {} biases",
            spec.weight_elements(),
            spec.out_features
        )));
    }
    let mut out = vec![0.0f32; spec.out_features];
    kernels::linear_into(
        &F32Arith { bias },
        require_f32(input)?,
        weight,
        spec.out_features,
        false,
        &mut out,
        &mut NoProbe,
    );
    Tensor::from_f32(out_shape, out)
}

pub fn flatten(t: &Tensor) -> Tensor {
    t.clone()
        .reshaped(TensorShape::flat(t.len()))
        .expect("element count preserved")
}

/// Every intermediate tensor: the input followed by each layer output.
pub fn run_naive_trace(
    graph: &ModelGraph,
    store: &WeightStore,
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    check_inputs(graph.input_shape(), graph.element_type(), store, input)?;
    match graph.element_type() {
        ElementType::F32 => trace_typed::<f32>(graph, store, input),
        ElementType::I8 => trace_typed::<i8>(graph, store, input),
    }
}

/// Sequential application of every layer, one fresh buffer per layer.
pub fn run_naive(graph: &ModelGraph, store: &WeightStore, input: &Tensor) -> Result<Tensor> {
    Ok(run_naive_trace(graph, store, input)?
        .pop()
        .expect("trace contains the input"))
}

pub(crate) fn check_inputs(
    shape: TensorShape,
    element_type: ElementType,
    store: &WeightStore,
    input: &Tensor,
) -> Result<()> {
    if store.element_type() != element_type {
        return Err(Error::ElementTypeMismatch {
            expected: element_type.name(),
            found: store.element_type().name(),
        });
    }
    if input.element_type() != element_type {
        return Err(Error::ElementTypeMismatch {
            expected: element_type.name(),
            found: input.element_type().name(),
        });
    }
    if input.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "model input is {shape}, tensor is {}",
            input.shape()
        )));
    }
    Ok(())
}

fn trace_typed<E: StoreElement>(
    graph: &ModelGraph,
    store: &WeightStore,
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    let shapes = graph.infer_shapes();
    let mut current: Vec<E> = E::slice(input).expect("checked element type").to_vec();
    let mut trace = vec![input.clone()];

    for (index, layer) in graph.layers().iter().enumerate() {
        let (in_shape, out_shape) = (shapes[index], shapes[index + 1]);
        let next = match layer {
            LayerSpec::Conv2d(spec) => {
                let (arith, weight) = E::arith(store, index)?;
                kernels::conv2d(&arith, &current, weight, &conv_geom(spec, in_shape, out_shape))
            }
            LayerSpec::Relu => current.iter().map(|x| x.relu()).collect(),
            LayerSpec::MaxPool2d(spec) => {
                let mut out = vec![E::default(); out_shape.element_count()];
                kernels::maxpool_into(
                    &current,
                    &pool_geom(spec, in_shape, out_shape),
                    &mut out,
                    &mut NoProbe,
                );
                out
            }
            LayerSpec::Flatten => current.clone(),
            LayerSpec::Linear(spec) => {
                let (arith, weight) = E::arith(store, index)?;
                let mut out = vec![E::default(); spec.out_features];
                kernels::linear_into(
                    &arith,
                    &current,
                    weight,
                    spec.out_features,
                    false,
                    &mut out,
                    &mut NoProbe,
                );
                out
            }
        };
        trace.push(E::tensor(out_shape, next.clone(), store, index + 1)?);
        current = next;
    }
    Ok(trace)
}
