//! Static memory planning: naive and fused footprints, and the two-buffer
//! ping-pong assignment.
//!
//! Tensors (network input, then every non-Flatten unit output) alternate
//! between buffers A and B starting with A. Each buffer is sized to the
//! largest tensor of its parity, so the total never exceeds the sum of the
//! two largest tensors. Flatten is a pure reinterpretation: it keeps its
//! input's buffer and adds no tensor.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{fuse, ExecutionPlan};
use crate::model::{LayerSpec, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BufferId {
    A,
    B,
}

impl BufferId {
    pub const fn other(self) -> Self {
        match self {
            BufferId::A => BufferId::B,
            BufferId::B => BufferId::A,
        }
    }

    pub const fn label(self) -> char {
        match self {
            BufferId::A => 'A',
            BufferId::B => 'B',
        }
    }

    const fn for_tensor(tensor: usize) -> Self {
        if tensor % 2 == 0 {
            BufferId::A
        } else {
            BufferId::B
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferAssignment {
    /// 0 is the network input, then one per non-Flatten unit output.
    pub tensor: usize,
    /// Plan step producing this tensor; `None` for the network input.
    pub step: Option<usize>,
    pub buffer: BufferId,
    pub size: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepBuffers {
    pub input: BufferId,
    pub output: BufferId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BufferPlan {
    pub buffer_a_bytes: usize,
    pub buffer_b_bytes: usize,
    pub total_bytes: usize,
    pub assignments: Vec<BufferAssignment>,
    /// Per-tensor byte sizes the plan was derived from.
    pub tensor_bytes: Vec<usize>,
    /// Input/output buffer of every plan step. Flatten steps read and
    /// write the same buffer.
    pub steps: Vec<StepBuffers>,
    pub element_bytes: usize,
}

impl BufferPlan {
    pub fn capacity_bytes(&self, buffer: BufferId) -> usize {
        match buffer {
            BufferId::A => self.buffer_a_bytes,
            BufferId::B => self.buffer_b_bytes,
        }
    }

    pub fn capacity_elements(&self, buffer: BufferId) -> usize {
        self.capacity_bytes(buffer) / self.element_bytes
    }

    /// Buffer holding the network output.
    pub fn output_buffer(&self) -> BufferId {
        self.steps.last().map_or(BufferId::A, |s| s.output)
    }
}

/// Per-parity maxima of an alternating assignment of `sizes`.
pub fn alternating_capacities(sizes: &[usize]) -> (usize, usize) {
    let max_of = |parity: usize| {
        sizes
            .iter()
            .skip(parity)
            .step_by(2)
            .copied()
            .max()
            .unwrap_or(0)
    };
    (max_of(0), max_of(1))
}

/// Sum of the largest and second-largest entries.
pub fn top_two_sum(sizes: &[usize]) -> usize {
    let mut first = 0;
    let mut second = 0;
    for &s in sizes {
        if s > first {
            second = first;
            first = s;
        } else if s > second {
            second = s;
        }
    }
    first + second
}

pub fn pingpong_plan(plan: &ExecutionPlan) -> Result<BufferPlan> {
    if plan.steps.is_empty() {
        return Err(Error::EmptyPlan);
    }
    let width = plan.element_type.byte_width();

    let mut assignments = vec![BufferAssignment {
        tensor: 0,
        step: None,
        buffer: BufferId::A,
        size: plan.input_shape.bytes(plan.element_type),
        offset: 0,
    }];
    let mut steps = Vec::with_capacity(plan.steps.len());
    let mut current = BufferId::A;
    for (index, step) in plan.steps.iter().enumerate() {
        if step.unit.is_flatten() {
            steps.push(StepBuffers {
                input: current,
                output: current,
            });
            continue;
        }
        let tensor = assignments.len();
        let output = BufferId::for_tensor(tensor);
        debug_assert_eq!(output, current.other());
        assignments.push(BufferAssignment {
            tensor,
            step: Some(index),
            buffer: output,
            size: step.output_shape.bytes(plan.element_type),
            offset: 0,
        });
        steps.push(StepBuffers {
            input: current,
            output,
        });
        current = output;
    }

    let tensor_bytes: Vec<usize> = assignments.iter().map(|a| a.size).collect();
    let (buffer_a_bytes, buffer_b_bytes) = alternating_capacities(&tensor_bytes);
    Ok(BufferPlan {
        buffer_a_bytes,
        buffer_b_bytes,
        total_bytes: buffer_a_bytes + buffer_b_bytes,
        assignments,
        tensor_bytes,
        steps,
        element_bytes: width,
    })
}

/// Input plus every layer output, with ReLU (in place) and Flatten (alias)
/// contributing nothing.
pub fn naive_footprint(graph: &ModelGraph) -> usize {
    let et = graph.element_type();
    let shapes = graph.infer_shapes();
    shapes[0].bytes(et)
        + graph
            .layers()
            .iter()
            .zip(&shapes[1..])
            .filter(|(layer, _)| !matches!(layer, LayerSpec::Relu | LayerSpec::Flatten))
            .map(|(_, shape)| shape.bytes(et))
            .sum::<usize>()
}

/// Input plus every unit output, Flatten contributing nothing.
pub fn fused_footprint(plan: &ExecutionPlan) -> usize {
    let et = plan.element_type;
    plan.input_shape.bytes(et)
        + plan
            .steps
            .iter()
            .filter(|s| !s.unit.is_flatten())
            .map(|s| s.output_shape.bytes(et))
            .sum::<usize>()
}

/// `round(100 * (1 - after / before))`.
pub fn savings_pct(before: usize, after: usize) -> i64 {
    if before == 0 {
        return 0;
    }
    (100.0 * (1.0 - after as f64 / before as f64)).round() as i64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub element_type: &'static str,
    pub parameter_elements: usize,
    pub parameter_bytes: usize,
    pub naive_buffer_bytes: usize,
    pub fused_buffer_bytes: usize,
    pub pingpong_bytes: usize,
    pub buffer_a_bytes: usize,
    pub buffer_b_bytes: usize,
    pub savings_fused_pct: i64,
    pub savings_pingpong_vs_fused_pct: i64,
    pub savings_total_pct: i64,
}

pub fn memory_report(graph: &ModelGraph) -> Result<MemoryReport> {
    let plan = fuse(graph)?;
    let buffers = pingpong_plan(&plan)?;
    let params = graph.parameter_count();
    let naive = naive_footprint(graph);
    let fused = fused_footprint(&plan);
    Ok(MemoryReport {
        element_type: graph.element_type().name(),
        parameter_elements: params.elements,
        parameter_bytes: params.bytes,
        naive_buffer_bytes: naive,
        fused_buffer_bytes: fused,
        pingpong_bytes: buffers.total_bytes,
        buffer_a_bytes: buffers.buffer_a_bytes,
        buffer_b_bytes: buffers.buffer_b_bytes,
        savings_fused_pct: savings_pct(naive, fused),
        savings_pingpong_vs_fused_pct: savings_pct(fused, buffers.total_bytes),
        savings_total_pct: savings_pct(naive, buffers.total_bytes),
    })
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>10} {:>8}", "region", "bytes", "saving")?;
        writeln!(
            f,
            "{:<28} {:>10} {:>8}",
            format!("parameters ({})", self.element_type),
            self.parameter_bytes,
            "-"
        )?;
        writeln!(
            f,
            "{:<28} {:>10} {:>8}",
            "buffers, naive", self.naive_buffer_bytes, "-"
        )?;
        writeln!(
            f,
            "{:<28} {:>10} {:>7}%",
            "buffers, fused pooling", self.fused_buffer_bytes, self.savings_fused_pct
        )?;
        writeln!(
            f,
            "{:<28} {:>10} {:>7}%",
            "buffers, ping-pong", self.pingpong_bytes, self.savings_pingpong_vs_fused_pct
        )?;
        writeln!(
            f,
            "{:<28} {:>10} {:>8}",
            "  buffer A", self.buffer_a_bytes, ""
        )?;
        writeln!(
            f,
            "{:<28} {:>10} {:>8}",
            "  buffer B", self.buffer_b_bytes, ""
        )?;
        write!(
            f,
            "{:<28} {:>10} {:>7}%",
            "total saving vs naive", "", self.savings_total_pct
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use proptest::prelude::*;

    const LENET: &str = include_str!("../../../models/lenet5.json");
    const TESTNET: &str = include_str!("../../../models/testnet_i8.json");

    fn graph(text: &str) -> ModelGraph {
        parse_model(text).unwrap()
    }

    /// Minimum total over every two-buffer labelling that never puts
    /// neighbouring tensors in the same buffer.
    fn brute_force_min(sizes: &[usize]) -> usize {
        let n = sizes.len();
        (0u32..1 << n)
            .filter(|mask| (1..n).all(|i| (mask >> i & 1) != (mask >> (i - 1) & 1)))
            .map(|mask| {
                let (mut a, mut b) = (0, 0);
                for (i, &s) in sizes.iter().enumerate() {
                    if mask >> i & 1 == 0 {
                        a = a.max(s);
                    } else {
                        b = b.max(s);
                    }
                }
                a + b
            })
            .min()
            .unwrap()
    }

    #[test]
    fn lenet_numbers() {
        let g = graph(LENET);
        assert_eq!(naive_footprint(&g), 36472);
        let plan = fuse(&g).unwrap();
        assert_eq!(fused_footprint(&plan), 11256);
        let buffers = pingpong_plan(&plan).unwrap();
        assert_eq!(buffers.tensor_bytes, [4096, 4704, 1600, 480, 336, 40]);
        assert_eq!(buffers.buffer_a_bytes, 4096);
        assert_eq!(buffers.buffer_b_bytes, 4704);
        assert_eq!(buffers.total_bytes, 8800);
    }

    #[test]
    fn lenet_report() {
        let r = memory_report(&graph(LENET)).unwrap();
        assert_eq!(
            (
                r.parameter_bytes,
                r.naive_buffer_bytes,
                r.fused_buffer_bytes,
                r.pingpong_bytes
            ),
            (246824, 36472, 11256, 8800)
        );
        assert_eq!(
            (
                r.savings_fused_pct,
                r.savings_pingpong_vs_fused_pct,
                r.savings_total_pct
            ),
            (69, 22, 76)
        );
    }

    #[test]
    fn testnet_report() {
        let r = memory_report(&graph(TESTNET)).unwrap();
        assert_eq!(r.parameter_bytes, 33120);
        // 3072 + 32768 + 8192 + 4096 + 1024 + 2048 + 512 + 10
        assert_eq!(r.naive_buffer_bytes, 51722);
        assert_eq!(r.fused_buffer_bytes, 3072 + 8192 + 1024 + 512 + 10);
        assert_eq!((r.buffer_a_bytes, r.buffer_b_bytes), (3072, 8192));
        assert_eq!(r.pingpong_bytes, 11264);
    }

    #[test]
    fn single_unit_plan() {
        let g = graph(
            r#"{"input": {"len": 25}, "dtype": "f32",
                "layers": [{"type": "linear", "in_features": 25, "out_features": 15}]}"#,
        );
        let b = pingpong_plan(&fuse(&g).unwrap()).unwrap();
        assert_eq!((b.buffer_a_bytes, b.buffer_b_bytes, b.total_bytes), (100, 60, 160));
    }

    #[test]
    fn single_linear_naive() {
        let g = graph(
            r#"{"input": {"len": 4}, "dtype": "f32",
                "layers": [{"type": "linear", "in_features": 4, "out_features": 2}]}"#,
        );
        assert_eq!(naive_footprint(&g), 24);
    }

    #[test]
    fn alternating_beats_formula_when_largest_share_parity() {
        let sizes = [10, 100, 5, 90];
        assert_eq!(alternating_capacities(&sizes), (10, 100));
        assert_eq!(top_two_sum(&sizes), 190);
        assert_eq!(brute_force_min(&sizes), 110);
    }

    #[test]
    fn identity_graph() {
        let g = graph(
            r#"{"input": {"c": 2, "h": 3, "w": 3}, "dtype": "f32",
                "layers": [{"type": "flatten"}]}"#,
        );
        let r = memory_report(&g).unwrap();
        assert_eq!(r.naive_buffer_bytes, 72);
        assert_eq!(r.fused_buffer_bytes, 72);
        assert_eq!((r.buffer_a_bytes, r.buffer_b_bytes, r.pingpong_bytes), (72, 0, 72));
    }

    #[test]
    fn pool_only_rows_equal() {
        let g = graph(
            r#"{"input": {"c": 1, "h": 4, "w": 4}, "dtype": "f32",
                "layers": [{"type": "maxpool2d", "kernel_size": 2}]}"#,
        );
        let r = memory_report(&g).unwrap();
        assert_eq!(r.naive_buffer_bytes, 80);
        assert_eq!(r.fused_buffer_bytes, 80);
        assert_eq!(r.pingpong_bytes, 80);
        assert_eq!(r.parameter_bytes, 0);
    }

    #[test]
    fn no_fused_pool_equals_naive() {
        let g = graph(
            r#"{"input": {"c": 1, "h": 8, "w": 8}, "dtype": "f32", "layers": [
                {"type": "conv2d", "in_channels": 1, "out_channels": 2, "kernel_size": 3},
                {"type": "relu"},
                {"type": "maxpool2d", "kernel_size": 3, "stride": 1}]}"#,
        );
        assert_eq!(naive_footprint(&g), fused_footprint(&fuse(&g).unwrap()));
    }

    #[test]
    fn flatten_keeps_buffer() {
        let plan = fuse(&graph(LENET)).unwrap();
        let b = pingpong_plan(&plan).unwrap();
        assert_eq!(b.steps[2].input, b.steps[2].output);
        for (step, io) in plan.steps.iter().zip(&b.steps) {
            if !step.unit.is_flatten() {
                assert_ne!(io.input, io.output);
            }
        }
        assert_eq!(b.output_buffer(), BufferId::B);
    }

    #[test]
    fn savings_rounding() {
        assert_eq!(savings_pct(36472, 11256), 69);
        assert_eq!(savings_pct(11256, 8800), 22);
        assert_eq!(savings_pct(36472, 8800), 76);
        assert_eq!(savings_pct(0, 0), 0);
    }

    proptest! {
        #[test]
        fn alternating_is_minimal(sizes in prop::collection::vec(1usize..10_000, 1..=8)) {
            let (a, b) = alternating_capacities(&sizes);
            prop_assert_eq!(a + b, brute_force_min(&sizes));
            prop_assert!(a + b <= top_two_sum(&sizes));
        }

        #[test]
        fn formula_is_tight_for_opposite_parity(sizes in prop::collection::vec(1usize..10_000, 2..=8)) {
            let mut order: Vec<usize> = (0..sizes.len()).collect();
            order.sort_by_key(|&i| std::cmp::Reverse(sizes[i]));
            let (a, b) = alternating_capacities(&sizes);
            if order[0] % 2 != order[1] % 2 {
                prop_assert_eq!(a + b, top_two_sum(&sizes));
            }
        }
    }
}
