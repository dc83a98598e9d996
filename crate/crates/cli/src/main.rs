use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tinydeploy::emit::{emit, verify_emitted, Toolchain, HEADER_FILE, NETWORK_FILE, WEIGHTS_FILE};
use tinydeploy::interp::TensorData;
use tinydeploy::model::{graph_to_json, load_weights, parse_model};
use tinydeploy::preprocess::{image_to_input, pixels_to_input};
use tinydeploy::quant::{calibrate_activations, quantize_weights, QuantParams};
use tinydeploy::{
    classify, fuse, memory_report, pingpong_plan, run_fused, ElementType, LayerSpec, ModelGraph,
    Tensor, WeightStore,
};

/// Number of seeded random inputs `verify` checks.
const VERIFY_INPUTS: usize = 16;
const VERIFY_SEED: u64 = 0x5eed;

#[derive(Parser)]
#[command(name = "tinydeploy", version, about = "Plan, quantize and emit small CNNs as static C")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer output shapes and parameter counts.
    Inspect(ModelArgs),
    /// Naive, fused and ping-pong activation memory.
    Plan(ModelArgs),
    /// Quantize FP32 weights to INT8 using calibration images.
    Quantize(QuantizeArgs),
    /// Camera preprocessing: invert, threshold and scale to a model input.
    Preprocess(PreprocessArgs),
    /// Run the fused interpreter on one image.
    Run(RunArgs),
    /// Write weights.c, network.c and network.h.
    Emit(EmitArgs),
    /// Compile the emitted C on the host and compare with the interpreter.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F32,
    I8,
}

impl From<Dtype> for ElementType {
    fn from(d: Dtype) -> Self {
        match d {
            Dtype::F32 => ElementType::F32,
            Dtype::I8 => ElementType::I8,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Override the element type declared by the model.
    #[arg(long, value_enum)]
    dtype: Option<Dtype>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct WeightArgs {
    #[arg(long)]
    model: PathBuf,
    /// Little-endian weight blob.
    #[arg(long)]
    weights: PathBuf,
    /// JSON manifest describing the blob.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    weights: WeightArgs,
    /// Calibration image (raw 8-bit, model input size); repeatable.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Output directory for model.json, weights.manifest.json, weights.bin.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    model: PathBuf,
    /// Needed for INT8 models, which quantize at the input scale.
    #[arg(long, requires = "manifest")]
    weights: Option<PathBuf>,
    #[arg(long, requires = "weights")]
    manifest: Option<PathBuf>,
    /// Raw 8-bit grayscale frame.
    #[arg(long)]
    input: PathBuf,
    /// Model-ready little-endian tensor.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    weights: WeightArgs,
    /// Raw 8-bit image, one byte per pixel, scaled by 1/255.
    #[arg(long)]
    input: PathBuf,
    /// Apply the camera rule (invert, threshold) before scaling.
    #[arg(long, conflicts_with = "tensor")]
    camera: bool,
    /// Treat the input as a model-ready tensor, e.g. from `preprocess`.
    #[arg(long)]
    tensor: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct EmitArgs {
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    weights: WeightArgs,
    /// C compiler; defaults to $CC, then `cc`.
    #[arg(long)]
    cc: Option<PathBuf>,
    /// Also keep the emitted sources here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

enum Outcome {
    Ok,
    Mismatch,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Mismatch) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Inspect(a) => inspect(&a),
        Command::Plan(a) => plan(&a),
        Command::Quantize(a) => quantize(&a),
        Command::Preprocess(a) => preprocess(&a),
        Command::Run(a) => run(&a),
        Command::Emit(a) => emit_cmd(&a),
        Command::Verify(a) => return verify(&a),
    }?;
    Ok(Outcome::Ok)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_graph(path: &Path, dtype: Option<Dtype>) -> Result<ModelGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let graph = parse_model(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(match dtype {
        Some(d) => graph.with_element_type(d.into()),
        None => graph,
    })
}

fn load_model(args: &WeightArgs) -> Result<(ModelGraph, WeightStore)> {
    let graph = load_graph(&args.model, None)?;
    let manifest = fs::read_to_string(&args.manifest)
        .with_context(|| format!("reading {}", args.manifest.display()))?;
    let blob = read(&args.weights)?;
    let store = load_weights(&graph, &manifest, &blob)
        .with_context(|| format!("loading {}", args.weights.display()))?;
    Ok((graph, store))
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn describe(layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Conv2d(c) => format!(
            "Conv2d({}, {}, kernel_size={}, stride={}, padding={}, bias={})",
            c.in_channels, c.out_channels, c.kernel_size, c.stride, c.padding, c.has_bias
        ),
        LayerSpec::Relu => "ReLU()".into(),
        LayerSpec::MaxPool2d(p) => format!(
            "MaxPool2d(kernel_size={}, stride={}, padding={})",
            p.kernel_size, p.stride, p.padding
        ),
        LayerSpec::Flatten => "Flatten()".into(),
        LayerSpec::Linear(l) => format!(
            "Linear(in_features={}, out_features={}, bias={})",
            l.in_features, l.out_features, l.has_bias
        ),
    }
}

fn inspect(args: &ModelArgs) -> Result<()> {
    let graph = load_graph(&args.model, args.dtype)?;
    let shapes = graph.infer_shapes();
    let totals = graph.parameter_count();
    let params = |layer: &LayerSpec| layer.parameter_shape().map_or(0, |(w, b)| w + b);
    match args.format {
        Format::Json => print_json(&json!({
            "element_type": graph.element_type().name(),
            "input_shape": shapes[0].to_string(),
            "layers": graph.layers().iter().zip(&shapes[1..]).enumerate().map(|(i, (layer, shape))| json!({
                "index": i,
                "layer": describe(layer),
                "output_shape": shape.to_string(),
                "params": params(layer),
            })).collect::<Vec<_>>(),
            "parameter_elements": totals.elements,
            "parameter_bytes": totals.bytes,
        })),
        Format::Table => {
            println!("element type {}", graph.element_type().name());
            println!("{:>3}  {:<60} {:<14} {:>8}", "#", "layer", "output", "params");
            println!("{:>3}  {:<60} {:<14} {:>8}", "", "input", shapes[0].to_string(), "");
            for (i, (layer, shape)) in graph.layers().iter().zip(&shapes[1..]).enumerate() {
                println!("{i:>3}  {:<60} {:<14} {:>8}", describe(layer), shape.to_string(), params(layer));
            }
            println!("{} params / {} bytes", totals.elements, totals.bytes);
        }
    }
    Ok(())
}

fn plan(args: &ModelArgs) -> Result<()> {
    let graph = load_graph(&args.model, args.dtype)?;
    let report = memory_report(&graph)?;
    let exec = fuse(&graph)?;
    let buffers = pingpong_plan(&exec)?;
    match args.format {
        Format::Json => print_json(&json!({
            "memory": report,
            "units": exec.steps.iter().zip(&buffers.steps).map(|(step, io)| json!({
                "unit": step.unit.to_string(),
                "layers": [step.layers.start, step.layers.end],
                "output_shape": step.output_shape.to_string(),
                "input_buffer": io.input.label().to_string(),
                "output_buffer": io.output.label().to_string(),
            })).collect::<Vec<_>>(),
        })),
        Format::Table => {
            println!("{report}");
            println!();
            println!("{:>3}  {:<58} {:<14} buffers", "#", "unit", "output");
            for (i, (step, io)) in exec.steps.iter().zip(&buffers.steps).enumerate() {
                println!(
                    "{i:>3}  {:<58} {:<14} {} -> {}",
                    step.unit.to_string(),
                    step.output_shape.to_string(),
                    io.input.label(),
                    io.output.label()
                );
            }
        }
    }
    Ok(())
}

fn image_input(graph: &ModelGraph, store: &WeightStore, bytes: &[u8], camera: bool) -> Result<Tensor> {
    let shape = graph.input_shape();
    let et = graph.element_type();
    Ok(if camera {
        image_to_input(bytes, shape, et, store.quant())?
    } else {
        pixels_to_input(bytes, shape, et, store.quant())?
    })
}

fn quantize(args: &QuantizeArgs) -> Result<()> {
    let (graph, store) = load_model(&args.weights)?;
    if graph.element_type() != ElementType::F32 {
        bail!("quantize expects an f32 model, found {}", graph.element_type().name());
    }
    let samples = args
        .input
        .iter()
        .map(|p| image_input(&graph, &store, &read(p)?, false))
        .collect::<Result<Vec<_>>>()?;
    let calibration = calibrate_activations(&graph, &store, &samples)?;
    let (qgraph, qstore) = quantize_weights(&graph, &store, &calibration)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let (manifest, blob) = qstore.manifest_json();
    let files = [
        ("model.json", (serde_json::to_string_pretty(&graph_to_json(&qgraph))? + "\n").into_bytes()),
        ("weights.manifest.json", manifest.into_bytes()),
        ("weights.bin", blob),
    ];
    for (name, data) in &files {
        let path = args.out.join(name);
        fs::write(&path, data).with_context(|| format!("writing {}", path.display()))?;
    }
    let quant = qstore.quant().expect("int8 store");
    match args.format {
        Format::Json => print_json(&json!({
            "samples": samples.len(),
            "input_scale": quant.input_scale(),
            "weight_scales": quant.weight_scales(),
            "activation_scales": quant.activation_scales(),
            "weight_bytes": files[2].1.len(),
        })),
        Format::Table => {
            print_scales(quant);
            println!(
                "wrote {} bytes of int8 weights to {}",
                files[2].1.len(),
                args.out.display()
            );
        }
    }
    Ok(())
}

fn print_scales(quant: &QuantParams) {
    println!("input scale {:.6e}", quant.input_scale());
    for (layer, s) in quant.weight_scales() {
        println!(
            "layer {layer:>2}: weight scale {s:.6e}, output scale {:.6e}, multiplier {:?}",
            quant.activation_scale(layer + 1),
            quant.multiplier(*layer)
        );
    }
}

fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let graph = load_graph(&args.model, None)?;
    let store = match (&args.weights, &args.manifest) {
        (Some(weights), Some(manifest)) => Some(load_model(&WeightArgs {
            model: args.model.clone(),
            weights: weights.clone(),
            manifest: manifest.clone(),
        })?.1),
        _ => None,
    };
    if graph.element_type() == ElementType::I8 && store.is_none() {
        bail!("int8 models need --weights and --manifest for the input scale");
    }
    let raw = read(&args.input)?;
    let tensor = image_to_input(
        &raw,
        graph.input_shape(),
        graph.element_type(),
        store.as_ref().and_then(WeightStore::quant),
    )?;
    fs::write(&args.out, tensor.to_le_bytes())
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let (graph, store) = load_model(&args.weights)?;
    let bytes = read(&args.input)?;
    let input = if args.tensor {
        Tensor::from_le_bytes(
            graph.input_shape(),
            graph.element_type(),
            &bytes,
            store.quant().map(QuantParams::input_scale),
        )?
    } else {
        image_input(&graph, &store, &bytes, args.camera)?
    };
    let plan = fuse(&graph)?;
    let buffers = pingpong_plan(&plan)?;
    let logits = run_fused(&plan, &store, &input, &buffers)?;
    let class = classify(&logits)?;
    match args.format {
        Format::Json => {
            let values: Vec<Value> = match logits.data() {
                TensorData::F32(v) => v.iter().map(|&x| json!(x)).collect(),
                TensorData::I8(v) => v.iter().map(|&x| json!(x)).collect(),
            };
            print_json(&json!({ "logits": values, "class": class }));
        }
        Format::Table => {
            match logits.data() {
                TensorData::F32(v) => v.iter().for_each(|x| println!("{x:?}")),
                TensorData::I8(v) => v.iter().for_each(|x| println!("{x}")),
            }
            println!("class={class}");
        }
    }
    Ok(())
}

fn emit_cmd(args: &EmitArgs) -> Result<()> {
    let (graph, store) = load_model(&args.weights)?;
    let plan = fuse(&graph)?;
    let buffers = pingpong_plan(&plan)?;
    let bundle = emit(&plan, &store, &buffers)?;
    bundle
        .write_to(&args.out)
        .with_context(|| format!("writing to {}", args.out.display()))?;
    let sizes = &bundle.size_prediction;
    match args.format {
        Format::Json => print_json(&json!({
            "files": [WEIGHTS_FILE, NETWORK_FILE, HEADER_FILE],
            "size_prediction": sizes,
        })),
        Format::Table => {
            for name in [WEIGHTS_FILE, NETWORK_FILE, HEADER_FILE] {
                println!("wrote {}", args.out.join(name).display());
            }
            println!("flash_bytes_min  {:>8}", sizes.flash_bytes_min);
            println!("ram_bytes        {:>8}", sizes.ram_bytes);
            for note in &sizes.notes {
                println!("  note: {note}");
            }
        }
    }
    Ok(())
}

fn random_inputs(graph: &ModelGraph, store: &WeightStore) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
    let n = graph.input_shape().element_count();
    (0..VERIFY_INPUTS)
        .map(|_| {
            let pixels: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
            image_input(graph, store, &pixels, false)
        })
        .collect()
}

fn verify(args: &VerifyArgs) -> Result<Outcome> {
    let (graph, store) = load_model(&args.weights)?;
    let plan = fuse(&graph)?;
    let buffers = pingpong_plan(&plan)?;
    let bundle = emit(&plan, &store, &buffers)?;
    if let Some(out) = &args.out {
        bundle
            .write_to(out)
            .with_context(|| format!("writing to {}", out.display()))?;
    }
    let toolchain = match &args.cc {
        Some(cc) => Toolchain::with_cc(cc),
        None => Toolchain::default(),
    };
    let inputs = random_inputs(&graph, &store)?;
    let report = verify_emitted(&bundle, &graph, &store, &inputs, &toolchain)?;
    match args.format {
        Format::Json => print_json(&json!({
            "matched": report.matched(),
            "total": report.results.len(),
            "results": report.results,
        })),
        Format::Table => {
            for (i, r) in report.results.iter().enumerate() {
                match &r.mismatch {
                    None => println!("input {i:>2}: match (class {})", r.reference_class),
                    Some(why) => println!("input {i:>2}: MISMATCH {why}"),
                }
            }
            println!("{}/{} match", report.matched(), report.results.len());
        }
    }
    Ok(if report.all_matched() {
        Outcome::Ok
    } else {
        Outcome::Mismatch
    })
}
