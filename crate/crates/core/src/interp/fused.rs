use serde::Serialize;

use super::kernels::{self, Arith, Element, F32Arith, I8Arith, NoProbe, Probe};
use super::naive::{check_inputs, conv_geom, pool_geom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::fusion::{ExecutionPlan, ExecutionUnit, PlanStep};
use crate::model::{ElementType, LayerSpec, TensorShape, WeightStore};
use crate::planner::{BufferId, BufferPlan};

/// Scalar temporaries a unit keeps besides the two buffers: the
/// accumulator, the activated score and the running pool maximum.
pub const SCALAR_SLOTS: usize = 3;

/// Element types the executors run on, with access to their parameters.
pub(crate) trait StoreElement: Element {
    type Arith<'a>: Arith<Elem = Self>;

    fn arith(store: &WeightStore, layer: usize) -> Result<(Self::Arith<'_>, &[Self])>;
    fn slice(t: &Tensor) -> Option<&[Self]>;
    /// Wrap data for graph tensor `tensor_index` (0 = input).
    fn tensor(
        shape: TensorShape,
        data: Vec<Self>,
        store: &WeightStore,
        tensor_index: usize,
    ) -> Result<Tensor>;
}

fn missing_weight(layer: usize) -> Error {
    Error::MissingTensor {
        layer,
        tensor: "weight",
    }
}

impl StoreElement for f32 {
    type Arith<'a> = F32Arith<'a>;

    fn arith(store: &WeightStore, layer: usize) -> Result<(F32Arith<'_>, &[f32])> {
        let params = store.layer(layer).ok_or_else(|| missing_weight(layer))?;
        let weight = params.weight.as_f32().ok_or_else(|| missing_weight(layer))?;
        let bias = params.bias.as_ref().and_then(|b| b.as_f32());
        Ok((F32Arith { bias }, weight))
    }

    fn slice(t: &Tensor) -> Option<&[f32]> {
        t.as_f32()
    }

    fn tensor(shape: TensorShape, data: Vec<f32>, _: &WeightStore, _: usize) -> Result<Tensor> {
        Tensor::from_f32(shape, data)
    }
}

impl StoreElement for i8 {
    type Arith<'a> = I8Arith<'a>;

    fn arith(store: &WeightStore, layer: usize) -> Result<(I8Arith<'_>, &[i8])> {
        let params = store.layer(layer).ok_or_else(|| missing_weight(layer))?;
        let weight = params.weight.as_i8().ok_or_else(|| missing_weight(layer))?;
        let bias = params.bias.as_ref().and_then(|b| b.as_i32());
        let quant = store
            .quant()
            .ok_or_else(|| Error::MissingScale(format!("layer {layer}")))?;
        Ok((
            I8Arith {
                bias,
                multiplier: quant.multiplier(layer),
            },
            weight,
        ))
    }

    fn slice(t: &Tensor) -> Option<&[i8]> {
        t.as_i8()
    }

    fn tensor(
        shape: TensorShape,
        data: Vec<i8>,
        store: &WeightStore,
        tensor_index: usize,
    ) -> Result<Tensor> {
        let quant = store
            .quant()
            .ok_or_else(|| Error::MissingScale(format!("tensor {tensor_index}")))?;
        Tensor::from_i8(shape, data, quant.activation_scale(tensor_index))
    }
}

/// Run one plan step from `src` into `dst`.
pub(crate) fn execute_step<E: StoreElement, P: Probe>(
    step: &PlanStep,
    store: &WeightStore,
    src: &[E],
    dst: &mut [E],
    probe: &mut P,
) -> Result<()> {
    match &step.unit {
        ExecutionUnit::FusedConv {
            conv,
            activation,
            pool,
        } => {
            let conv_out = LayerSpec::Conv2d(*conv).output_shape(step.layers.start, step.input_shape)?;
            let (arith, weight) = E::arith(store, step.layers.start)?;
            kernels::fused_conv_into(
                &arith,
                src,
                weight,
                &conv_geom(conv, step.input_shape, conv_out),
                activation.is_some(),
                pool.map(|p| (p.kernel_size, p.stride)),
                dst,
                probe,
            );
        }
        ExecutionUnit::FusedLinear { linear, activation } => {
            let (arith, weight) = E::arith(store, step.layers.start)?;
            kernels::linear_into(
                &arith,
                src,
                weight,
                linear.out_features,
                activation.is_some(),
                dst,
                probe,
            );
        }
        ExecutionUnit::Standalone {
            layer: LayerSpec::MaxPool2d(spec),
        } => {
            kernels::maxpool_into(
                src,
                &pool_geom(spec, step.input_shape, step.output_shape),
                dst,
                probe,
            );
        }
        ExecutionUnit::Standalone {
            layer: LayerSpec::Flatten,
        } => dst.copy_from_slice(src),
        ExecutionUnit::Standalone { layer } => {
            return Err(Error::IncompatibleLayer {
                layer: step.layers.start,
                detail: format!("{} cannot execute as a standalone unit", layer.kind()),
            })
        }
    }
    Ok(())
}

/// Execute the fused plan using only the two planned buffers.
pub fn run_fused(
    plan: &ExecutionPlan,
    store: &WeightStore,
    input: &Tensor,
    buffers: &BufferPlan,
) -> Result<Tensor> {
    dispatch(plan, store, input, buffers, &mut NoProbe)
}

/// High-water marks observed by an instrumented [`run_fused`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LivenessReport {
    /// Largest extent of buffer A ever written, in bytes.
    pub buffer_a_high_water_bytes: usize,
    pub buffer_b_high_water_bytes: usize,
    /// Largest (input tensor + output written so far) during any unit.
    pub peak_live_bytes: usize,
    pub scalar_slots: usize,
}

impl LivenessReport {
    pub fn touched_bytes(&self) -> usize {
        self.buffer_a_high_water_bytes + self.buffer_b_high_water_bytes
    }
}

/// [`run_fused`] with every buffer write recorded.
pub fn run_fused_instrumented(
    plan: &ExecutionPlan,
    store: &WeightStore,
    input: &Tensor,
    buffers: &BufferPlan,
) -> Result<(Tensor, LivenessReport)> {
    let mut probe = LivenessProbe::default();
    let out = dispatch(plan, store, input, buffers, &mut probe)?;
    let width = plan.element_type.byte_width();
    Ok((
        out,
        LivenessReport {
            buffer_a_high_water_bytes: probe.touched[0] * width,
            buffer_b_high_water_bytes: probe.touched[1] * width,
            peak_live_bytes: probe.peak * width,
            scalar_slots: SCALAR_SLOTS,
        },
    ))
}

#[derive(Default)]
struct LivenessProbe {
    touched: [usize; 2],
    live_input: usize,
    written: usize,
    output: usize,
    peak: usize,
}

impl LivenessProbe {
    fn begin(&mut self, input_len: usize, output: BufferId) {
        self.live_input = input_len;
        self.written = 0;
        self.output = output as usize;
    }
}

impl Probe for LivenessProbe {
    fn write(&mut self, index: usize) {
        self.written = self.written.max(index + 1);
        self.touched[self.output] = self.touched[self.output].max(index + 1);
        self.peak = self.peak.max(self.live_input + self.written);
    }
}

trait StepProbe: Probe {
    fn begin_step(&mut self, _input_len: usize, _output: BufferId) {}
}

impl StepProbe for NoProbe {}

impl StepProbe for LivenessProbe {
    fn begin_step(&mut self, input_len: usize, output: BufferId) {
        self.begin(input_len, output);
    }
}

fn dispatch<P: StepProbe>(
    plan: &ExecutionPlan,
    store: &WeightStore,
    input: &Tensor,
    buffers: &BufferPlan,
    probe: &mut P,
) -> Result<Tensor> {
    check_inputs(plan.input_shape, plan.element_type, store, input)?;
    if buffers.steps.len() != plan.steps.len()
        || buffers.element_bytes != plan.element_type.byte_width()
    {
        return Err(Error::ShapeMismatch(
            "buffer plan was derived from a different execution plan".into(),
        ));
    }
    match plan.element_type {
        ElementType::F32 => execute_plan::<f32, P>(plan, store, input, buffers, probe),
        ElementType::I8 => execute_plan::<i8, P>(plan, store, input, buffers, probe),
    }
}

fn execute_plan<E: StoreElement, P: StepProbe>(
    plan: &ExecutionPlan,
    store: &WeightStore,
    input: &Tensor,
    buffers: &BufferPlan,
    probe: &mut P,
) -> Result<Tensor> {
    let mut a = vec![E::default(); buffers.capacity_elements(BufferId::A)];
    let mut b = vec![E::default(); buffers.capacity_elements(BufferId::B)];

    let data = E::slice(input).expect("checked element type");
    if data.len() > a.len() {
        return Err(Error::BufferTooSmall {
            buffer: 'A',
            unit: 0,
            capacity: a.len(),
            needed: data.len(),
        });
    }
    probe.begin_step(0, BufferId::A);
    for (i, &x) in data.iter().enumerate() {
        probe.write(i);
        a[i] = x;
    }

    let mut tensor_len = data.len();
    for (index, (step, io)) in plan.steps.iter().zip(&buffers.steps).enumerate() {
        let out_len = step.output_shape.element_count();
        if step.unit.is_flatten() {
            debug_assert_eq!(io.input, io.output);
            debug_assert_eq!(tensor_len, out_len);
            continue;
        }
        debug_assert_eq!(io.output, io.input.other());
        let (src_buf, dst_buf) = match io.input {
            BufferId::A => (&a, &mut b),
            BufferId::B => (&b, &mut a),
        };
        if out_len > dst_buf.len() {
            return Err(Error::BufferTooSmall {
                buffer: io.output.label(),
                unit: index,
                capacity: dst_buf.len(),
                needed: out_len,
            });
        }
        probe.begin_step(tensor_len, io.output);
        execute_step(
            step,
            store,
            &src_buf[..tensor_len],
            &mut dst_buf[..out_len],
            probe,
        )?;
        tensor_len = out_len;
    }

    let last = match buffers.output_buffer() {
        BufferId::A => &a,
        BufferId::B => &b,
    };
    let tensor_index = plan.steps.last().map_or(0, |s| s.layers.end);
    E::tensor(
        plan.output_shape(),
        last[..tensor_len].to_vec(),
        store,
        tensor_index,
    )
}
