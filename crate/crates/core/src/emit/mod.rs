//! Freestanding C99 emission.
//!
//! Three files come out:
//!
//! * `weights.c` - every parameter as a `static const` array, so the
//!   toolchain places it in flash rather than RAM. It is `#include`d by
//!   `network.c` to keep internal linkage.
//! * `network.c` - one function per execution unit plus `nn_forward`, with
//!   exactly two statically allocated ping-pong buffers.
//! * `network.h` - the entry point and input/output dimensions.
//!
//! No dynamic allocation, recursion or library calls appear in the
//! inference path. Fused convolution units keep the pooled-coordinate
//! outer loops: the full convolution map is never stored.

mod verify;

pub use verify::{verify_emitted, InputOutcome, Toolchain, VerificationReport, HARNESS_SOURCE};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{Activation, ExecutionPlan, ExecutionUnit, PlanStep};
use crate::model::{ElementType, LayerSpec, ParamData, WeightStore};
use crate::planner::{BufferId, BufferPlan};

pub const WEIGHTS_FILE: &str = "weights.c";
pub const NETWORK_FILE: &str = "network.c";
pub const HEADER_FILE: &str = "network.h";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SizePrediction {
    /// Bytes of read-only parameter tables.
    pub flash_bytes_min: usize,
    /// Ping-pong buffers plus any declared scratch.
    pub ram_bytes: usize,
    pub buffer_bytes: usize,
    pub scratch_bytes: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedBundle {
    pub weights_unit: String,
    pub inference_unit: String,
    pub header: String,
    pub size_prediction: SizePrediction,
    pub element_type: ElementType,
    pub input_len: usize,
    pub output_len: usize,
}

impl EmittedBundle {
    pub fn files(&self) -> [(&'static str, &str); 3] {
        [
            (WEIGHTS_FILE, &self.weights_unit),
            (NETWORK_FILE, &self.inference_unit),
            (HEADER_FILE, &self.header),
        ]
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, text) in self.files() {
            fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

pub fn predict_sizes(bundle: &EmittedBundle) -> SizePrediction {
    bundle.size_prediction.clone()
}

struct CTypes {
    elem: &'static str,
    acc: &'static str,
    zero: &'static str,
}

impl CTypes {
    fn for_type(element_type: ElementType) -> Self {
        match element_type {
            ElementType::F32 => CTypes {
                elem: "float",
                acc: "float",
                zero: "0.0f",
            },
            ElementType::I8 => CTypes {
                elem: "int8_t",
                acc: "int32_t",
                zero: "0",
            },
        }
    }
}

fn float_literal(v: f32) -> String {
    // Debug prints the shortest string that round-trips
    let mut s = format!("{v:?}");
    if !s.contains(['.', 'e', 'E']) {
        s.push_str(".0");
    }
    s.push('f');
    s
}

fn i32_literal(v: i32) -> String {
    if v == i32::MIN {
        "(-2147483647 - 1)".into()
    } else {
        v.to_string()
    }
}

fn weight_name(layer: usize) -> String {
    format!("nn_l{layer}_weight")
}

fn bias_name(layer: usize) -> String {
    format!("nn_l{layer}_bias")
}

fn write_array(out: &mut String, name: &str, data: &ParamData) -> Result<()> {
    let (ty, values): (&str, Vec<String>) = match data {
        ParamData::F32(v) => (
            "float",
            v.iter()
                .map(|&x| {
                    if x.is_finite() {
                        Ok(float_literal(x))
                    } else {
                        Err(())
                    }
                })
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidField {
                    context: name.to_string(),
                    field: "value".into(),
                    reason: "non-finite parameter cannot be emitted".into(),
                })?,
        ),
        ParamData::I8(v) => ("int8_t", v.iter().map(|x| x.to_string()).collect()),
        ParamData::I32(v) => ("int32_t", v.iter().map(|&x| i32_literal(x)).collect()),
    };
    writeln!(out, "static const {ty} {name}[{}] = {{", values.len()).unwrap();
    for chunk in values.chunks(8) {
        writeln!(out, "    {},", chunk.join(", ")).unwrap();
    }
    out.push_str("};\n\n");
    Ok(())
}

pub fn emit(plan: &ExecutionPlan, store: &WeightStore, buffers: &BufferPlan) -> Result<EmittedBundle> {
    let et = plan.element_type;
    if store.element_type() != et {
        return Err(Error::ElementTypeMismatch {
            expected: et.name(),
            found: store.element_type().name(),
        });
    }
    if buffers.steps.len() != plan.steps.len() || buffers.element_bytes != et.byte_width() {
        return Err(Error::ShapeMismatch(
            "buffer plan was derived from a different execution plan".into(),
        ));
    }
    let quant = match et {
        ElementType::I8 => Some(
            store
                .quant()
                .ok_or_else(|| Error::MissingScale("int8 weight store".into()))?,
        ),
        ElementType::F32 => None,
    };
    let ty = CTypes::for_type(et);
    let input_len = plan.input_shape.element_count();
    let output_len = plan.output_shape().element_count();

    // weights.c
    let mut weights = String::new();
    weights.push_str(
        "/* Generated parameter tables. Included by network.c; do not compile separately. */\n",
    );
    weights.push_str("#include <stdint.h>\n\n");
    let mut flash = 0;
    for step in &plan.steps {
        let Some(layer) = step.parameter_layer() else {
            continue;
        };
        let params = store.layer(layer).ok_or(Error::MissingTensor {
            layer,
            tensor: "weight",
        })?;
        write_array(&mut weights, &weight_name(layer), &params.weight)?;
        flash += params.weight.byte_len();
        if let Some(bias) = &params.bias {
            write_array(&mut weights, &bias_name(layer), bias)?;
            flash += bias.byte_len();
        }
    }

    // network.h
    let mut header = String::new();
    header.push_str("/* Generated network entry point. */\n");
    header.push_str("#ifndef NN_NETWORK_H\n#define NN_NETWORK_H\n\n#include <stdint.h>\n\n");
    writeln!(header, "#define NN_INPUT_LEN {input_len}").unwrap();
    writeln!(header, "#define NN_OUTPUT_LEN {output_len}").unwrap();
    writeln!(header, "#define NN_ELEM_IS_FLOAT {}", u8::from(et == ElementType::F32)).unwrap();
    writeln!(header, "\ntypedef {} nn_elem_t;\n", ty.elem).unwrap();
    header.push_str(
        "/* Runs the network on NN_INPUT_LEN elements (channel, row, column order),\n\
         \x20* writes NN_OUTPUT_LEN logits and returns the index of the largest one. */\n",
    );
    writeln!(
        header,
        "int nn_forward(const {0} *input, {0} *logits_out);\n",
        ty.elem
    )
    .unwrap();
    header.push_str("#endif /* NN_NETWORK_H */\n");

    // network.c
    let decl_a = buffers.capacity_elements(BufferId::A).max(1);
    let decl_b = buffers.capacity_elements(BufferId::B).max(1);
    let mut net = String::new();
    net.push_str("/* Generated inference engine. */\n");
    writeln!(net, "#include \"{HEADER_FILE}\"\n#include \"{WEIGHTS_FILE}\"\n").unwrap();
    writeln!(net, "static {} nn_buf_a[{decl_a}];", ty.elem).unwrap();
    writeln!(net, "static {} nn_buf_b[{decl_b}];\n", ty.elem).unwrap();

    if quant.is_some() {
        net.push_str(REQUANT_C);
    }

    for (index, step) in plan.steps.iter().enumerate() {
        let multiplier = match (quant, step.parameter_layer()) {
            (Some(q), Some(layer)) => Some(q.multiplier(layer)),
            _ => None,
        };
        emit_unit(&mut net, index, step, &ty, multiplier)?;
    }

    writeln!(
        net,
        "int nn_forward(const {0} *input, {0} *logits_out)\n{{\n    int i;\n    int best;\n",
        ty.elem
    )
    .unwrap();
    writeln!(
        net,
        "    for (i = 0; i < {input_len}; ++i) {{\n        nn_buf_a[i] = input[i];\n    }}"
    )
    .unwrap();
    for (index, (step, io)) in plan.steps.iter().zip(&buffers.steps).enumerate() {
        if step.unit.is_flatten() {
            writeln!(net, "    /* unit {index}: flatten (no data movement) */").unwrap();
        } else {
            writeln!(
                net,
                "    nn_unit{index}({}, {});",
                buffer_name(io.input),
                buffer_name(io.output)
            )
            .unwrap();
        }
    }
    let out_buf = buffer_name(buffers.output_buffer());
    writeln!(
        net,
        "    for (i = 0; i < {output_len}; ++i) {{\n        logits_out[i] = {out_buf}[i];\n    }}\n\
         \x20   best = 0;\n\
         \x20   for (i = 1; i < {output_len}; ++i) {{\n\
         \x20       if (logits_out[i] > logits_out[best]) {{\n\
         \x20           best = i;\n\
         \x20       }}\n\
         \x20   }}\n\
         \x20   return best;\n}}"
    )
    .unwrap();

    let buffer_bytes = buffers.total_bytes;
    let ram_bytes = (decl_a + decl_b) * et.byte_width();
    let mut notes = vec![
        "flash_bytes_min counts parameter tables only; code, runtime and libraries are toolchain overhead".to_string(),
        "ram_bytes counts the two ping-pong buffers plus declared scratch; the stack/heap reserve is toolchain-specific and excluded".to_string(),
    ];
    if quant.is_some() {
        notes.push(
            "requantization multipliers are inlined float constants in code, not tables"
                .to_string(),
        );
    }
    if ram_bytes != buffer_bytes {
        notes.push(format!(
            "{} bytes of scratch pad an empty buffer to one element",
            ram_bytes - buffer_bytes
        ));
    }

    Ok(EmittedBundle {
        weights_unit: weights,
        inference_unit: net,
        header,
        size_prediction: SizePrediction {
            flash_bytes_min: flash,
            ram_bytes,
            buffer_bytes,
            scratch_bytes: ram_bytes - buffer_bytes,
            notes,
        },
        element_type: et,
        input_len,
        output_len,
    })
}

const REQUANT_C: &str = "\
static int8_t nn_requant(int32_t acc, float multiplier)
{
    const double x = (double)acc * (double)multiplier;
    int32_t t;
    double frac;
    if (x >= 127.0) {
        return 127;
    }
    if (x <= -127.0) {
        return -127;
    }
    t = (int32_t)x;
    frac = x - (double)t;
    if (frac >= 0.5) {
        t += 1;
    } else if (frac <= -0.5) {
        t -= 1;
    }
    return (int8_t)t;
}

";

fn buffer_name(id: BufferId) -> &'static str {
    match id {
        BufferId::A => "nn_buf_a",
        BufferId::B => "nn_buf_b",
    }
}

/// Statements turning accumulator `sum` (bias already added) into
/// `score` of element type.
fn finish_stmt(ty: &CTypes, multiplier: Option<f32>, relu: bool, indent: &str) -> String {
    let mut s = String::new();
    match multiplier {
        Some(m) => writeln!(
            s,
            "{indent}score = nn_requant(sum, {});",
            float_literal(m)
        )
        .unwrap(),
        None => writeln!(s, "{indent}score = sum;").unwrap(),
    }
    if relu {
        writeln!(
            s,
            "{indent}score = score > {0} ? score : {0};",
            ty.zero
        )
        .unwrap();
    }
    s
}

fn emit_unit(
    out: &mut String,
    index: usize,
    step: &PlanStep,
    ty: &CTypes,
    multiplier: Option<f32>,
) -> Result<()> {
    let elem = ty.elem;
    let acc = ty.acc;
    let mac = |x: &str, w: &str| match multiplier {
        Some(_) => format!("sum += (int32_t){x} * (int32_t){w};"),
        None => format!("sum += {x} * {w};"),
    };
    match &step.unit {
        ExecutionUnit::Standalone {
            layer: LayerSpec::Flatten,
        } => return Ok(()),
        ExecutionUnit::FusedConv {
            conv,
            activation,
            pool,
        } => {
            let layer = step.layers.start;
            let (ic, ih, iw) = step.input_shape.dims();
            let conv_out = LayerSpec::Conv2d(*conv).output_shape(layer, step.input_shape)?;
            let (oc, oh, ow) = conv_out.dims();
            let (k, s, p) = (conv.kernel_size, conv.stride, conv.padding);
            let relu = *activation == Some(Activation::Relu);
            let taps = ic * k * k;
            let (_, ph, pw) = step.output_shape.dims();

            writeln!(out, "/* unit {index}: {} */", step.unit).unwrap();
            writeln!(out, "static void nn_unit{index}(const {elem} *in, {elem} *out)\n{{").unwrap();
            writeln!(out, "    int oc, py, px, i, j, ic, z, t;").unwrap();
            writeln!(out, "    for (oc = 0; oc < {oc}; ++oc) {{").unwrap();
            writeln!(
                out,
                "        const {elem} *kern = {} + oc * {taps};",
                weight_name(layer)
            )
            .unwrap();
            let (pk, ps) = pool.map_or((1, 1), |p| (p.kernel_size, p.stride));
            writeln!(out, "        for (py = 0; py < {ph}; ++py) {{").unwrap();
            writeln!(out, "            for (px = 0; px < {pw}; ++px) {{").unwrap();
            writeln!(out, "                {elem} best = {};", ty.zero).unwrap();
            writeln!(out, "                for (i = 0; i < {pk}; ++i) {{").unwrap();
            writeln!(out, "                    for (j = 0; j < {pk}; ++j) {{").unwrap();
            let ind = "                        ";
            writeln!(out, "{ind}const int cy = py * {ps} + i;").unwrap();
            writeln!(out, "{ind}const int cx = px * {ps} + j;").unwrap();
            writeln!(out, "{ind}{acc} sum = {};", ty.zero).unwrap();
            writeln!(out, "{ind}{elem} score;").unwrap();
            writeln!(out, "{ind}for (ic = 0; ic < {ic}; ++ic) {{").unwrap();
            writeln!(out, "{ind}    for (z = 0; z < {k}; ++z) {{").unwrap();
            writeln!(out, "{ind}        const int iy = cy * {s} + z - {p};").unwrap();
            writeln!(out, "{ind}        if (iy < 0 || iy >= {ih}) {{\n{ind}            continue;\n{ind}        }}").unwrap();
            writeln!(out, "{ind}        for (t = 0; t < {k}; ++t) {{").unwrap();
            writeln!(out, "{ind}            const int ix = cx * {s} + t - {p};").unwrap();
            writeln!(out, "{ind}            if (ix < 0 || ix >= {iw}) {{\n{ind}                continue;\n{ind}            }}").unwrap();
            writeln!(
                out,
                "{ind}            {}",
                mac(
                    &format!("in[(ic * {ih} + iy) * {iw} + ix]"),
                    &format!("kern[(ic * {k} + z) * {k} + t]")
                )
            )
            .unwrap();
            writeln!(out, "{ind}        }}\n{ind}    }}\n{ind}}}").unwrap();
            if conv.has_bias {
                writeln!(out, "{ind}sum += {}[oc];", bias_name(layer)).unwrap();
            }
            out.push_str(&finish_stmt(ty, multiplier, relu, ind));
            if relu {
                // scores are non-negative, so the zero start is exact
                writeln!(out, "{ind}if (score > best) {{\n{ind}    best = score;\n{ind}}}").unwrap();
            } else {
                writeln!(
                    out,
                    "{ind}if ((i == 0 && j == 0) || score > best) {{\n{ind}    best = score;\n{ind}}}"
                )
                .unwrap();
            }
            writeln!(out, "                    }}\n                }}").unwrap();
            writeln!(out, "                out[(oc * {ph} + py) * {pw} + px] = best;").unwrap();
            writeln!(out, "            }}\n        }}\n    }}\n}}\n").unwrap();
            let _ = (oh, ow);
        }
        ExecutionUnit::FusedLinear { linear, activation } => {
            let layer = step.layers.start;
            let (n_in, n_out) = (linear.in_features, linear.out_features);
            let relu = *activation == Some(Activation::Relu);
            writeln!(out, "/* unit {index}: {} */", step.unit).unwrap();
            writeln!(out, "static void nn_unit{index}(const {elem} *in, {elem} *out)\n{{").unwrap();
            writeln!(out, "    int o, i;").unwrap();
            writeln!(out, "    for (o = 0; o < {n_out}; ++o) {{").unwrap();
            writeln!(
                out,
                "        const {elem} *row = {} + o * {n_in};",
                weight_name(layer)
            )
            .unwrap();
            writeln!(out, "        {acc} sum = {};", ty.zero).unwrap();
            writeln!(out, "        {elem} score;").unwrap();
            writeln!(
                out,
                "        for (i = 0; i < {n_in}; ++i) {{\n            {}\n        }}",
                mac("in[i]", "row[i]")
            )
            .unwrap();
            if linear.has_bias {
                writeln!(out, "        sum += {}[o];", bias_name(layer)).unwrap();
            }
            out.push_str(&finish_stmt(ty, multiplier, relu, "        "));
            writeln!(out, "        out[o] = score;\n    }}\n}}\n").unwrap();
        }
        ExecutionUnit::Standalone {
            layer: LayerSpec::MaxPool2d(pool),
        } => {
            let (c, ih, iw) = step.input_shape.dims();
            let (_, oh, ow) = step.output_shape.dims();
            let (k, s, p) = (pool.kernel_size, pool.stride, pool.padding);
            writeln!(out, "/* unit {index}: {} */", step.unit).unwrap();
            writeln!(out, "static void nn_unit{index}(const {elem} *in, {elem} *out)\n{{").unwrap();
            writeln!(out, "    int c, oy, ox, ky, kx;").unwrap();
            writeln!(out, "    for (c = 0; c < {c}; ++c) {{").unwrap();
            writeln!(out, "        for (oy = 0; oy < {oh}; ++oy) {{").unwrap();
            writeln!(out, "            for (ox = 0; ox < {ow}; ++ox) {{").unwrap();
            writeln!(out, "                {elem} best = {};", ty.zero).unwrap();
            writeln!(out, "                int have = 0;").unwrap();
            writeln!(out, "                for (ky = 0; ky < {k}; ++ky) {{").unwrap();
            writeln!(out, "                    const int iy = oy * {s} + ky - {p};").unwrap();
            writeln!(out, "                    if (iy < 0 || iy >= {ih}) {{\n                        continue;\n                    }}").unwrap();
            writeln!(out, "                    for (kx = 0; kx < {k}; ++kx) {{").unwrap();
            writeln!(out, "                        const int ix = ox * {s} + kx - {p};").unwrap();
            writeln!(out, "                        {elem} v;").unwrap();
            writeln!(out, "                        if (ix < 0 || ix >= {iw}) {{\n                            continue;\n                        }}").unwrap();
            writeln!(out, "                        v = in[(c * {ih} + iy) * {iw} + ix];").unwrap();
            writeln!(out, "                        if (!have || v > best) {{\n                            best = v;\n                            have = 1;\n                        }}").unwrap();
            writeln!(out, "                    }}\n                }}").unwrap();
            writeln!(out, "                out[(c * {oh} + oy) * {ow} + ox] = best;").unwrap();
            writeln!(out, "            }}\n        }}\n    }}\n}}\n").unwrap();
        }
        ExecutionUnit::Standalone { layer } => {
            return Err(Error::IncompatibleLayer {
                layer: step.layers.start,
                detail: format!("cannot emit a standalone {}", layer.kind()),
            })
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_literals_round_trip() {
        for v in [0.0f32, -0.0, 1.0, 0.1, 1e-7, f32::MIN, f32::MIN_POSITIVE, 123456.0] {
            let lit = float_literal(v);
            assert!(lit.ends_with('f'));
            let parsed: f32 = lit.trim_end_matches('f').parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits(), "{lit}");
        }
        assert_eq!(float_literal(2.0), "2.0f");
        assert_eq!(i32_literal(i32::MIN), "(-2147483647 - 1)");
    }
}
