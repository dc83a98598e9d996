//! Host-side check that emitted C matches the reference interpreter.

use std::env;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;

use super::EmittedBundle;
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::interp::{classify, run_fused, Tensor};
use crate::model::{ElementType, ModelGraph, WeightStore};
use crate::planner::pingpong_plan;

/// Source of the host harness compiled next to `network.c`.
pub const HARNESS_SOURCE: &str = include_str!("harness.c");

#[derive(Debug, Clone)]
pub struct Toolchain {
    pub cc: OsString,
    pub flags: Vec<String>,
    /// Replacement harness source, mainly for tests.
    pub harness: Option<String>,
}

impl Default for Toolchain {
    fn default() -> Self {
        Toolchain {
            cc: env::var_os("CC").unwrap_or_else(|| "cc".into()),
            flags: ["-std=c99", "-O2", "-ffp-contract=off"]
                .map(String::from)
                .to_vec(),
            harness: None,
        }
    }
}

impl Toolchain {
    pub fn with_cc(cc: impl Into<OsString>) -> Self {
        Toolchain {
            cc: cc.into(),
            ..Toolchain::default()
        }
    }

    /// Full path of the compiler, if it can be found.
    pub fn resolve(&self) -> Option<PathBuf> {
        let cc = Path::new(&self.cc);
        if cc.components().count() > 1 {
            return cc.is_file().then(|| cc.to_path_buf());
        }
        env::split_paths(&env::var_os("PATH")?)
            .map(|dir| dir.join(cc))
            .find(|p| p.is_file())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputOutcome {
    pub matched: bool,
    pub reference_class: usize,
    pub emitted_class: Option<usize>,
    /// First differing logit, or the harness failure.
    pub mismatch: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub results: Vec<InputOutcome>,
}

impl VerificationReport {
    pub fn matched(&self) -> usize {
        self.results.iter().filter(|r| r.matched).count()
    }

    pub fn all_matched(&self) -> bool {
        self.matched() == self.results.len()
    }
}

/// Compile the bundle with a host harness, run it on every input and
/// compare outputs bitwise against the fused interpreter.
pub fn verify_emitted(
    bundle: &EmittedBundle,
    graph: &ModelGraph,
    store: &WeightStore,
    inputs: &[Tensor],
    toolchain: &Toolchain,
) -> Result<VerificationReport> {
    let cc = toolchain
        .resolve()
        .ok_or_else(|| Error::ToolchainUnavailable(PathBuf::from(&toolchain.cc)))?;
    if graph.element_type() != bundle.element_type {
        return Err(Error::ElementTypeMismatch {
            expected: bundle.element_type.name(),
            found: graph.element_type().name(),
        });
    }

    let plan = fuse(graph)?;
    let buffers = pingpong_plan(&plan)?;
    let references = inputs
        .iter()
        .map(|x| run_fused(&plan, store, x, &buffers))
        .collect::<Result<Vec<_>>>()?;

    let dir = tempfile::tempdir()?;
    bundle.write_to(dir.path())?;
    let harness_path = dir.path().join("harness.c");
    fs::write(
        &harness_path,
        toolchain.harness.as_deref().unwrap_or(HARNESS_SOURCE),
    )?;
    let exe = dir.path().join("harness");
    let output = Command::new(&cc)
        .args(&toolchain.flags)
        .arg("-I")
        .arg(dir.path())
        .arg(&harness_path)
        .arg(dir.path().join(super::NETWORK_FILE))
        .arg("-o")
        .arg(&exe)
        .output()?;
    if !output.status.success() {
        return Err(Error::CompileFailed(
            String::from_utf8_lossy(&output.stderr).into_owned(),
        ));
    }

    let mut results = Vec::with_capacity(inputs.len());
    for (n, (input, reference)) in inputs.iter().zip(&references).enumerate() {
        let path = dir.path().join(format!("input{n}.bin"));
        fs::write(&path, input.to_le_bytes())?;
        let run = Command::new(&exe).arg(&path).output()?;
        let reference_class = classify(reference)?;
        if !run.status.success() {
            results.push(InputOutcome {
                matched: false,
                reference_class,
                emitted_class: None,
                mismatch: Some(format!(
                    "harness exited with {}: {}",
                    run.status,
                    String::from_utf8_lossy(&run.stderr).trim()
                )),
            });
            continue;
        }
        let text = String::from_utf8_lossy(&run.stdout);
        results.push(compare(&text, reference, bundle.element_type, reference_class));
    }
    Ok(VerificationReport { results })
}

fn compare(text: &str, reference: &Tensor, et: ElementType, reference_class: usize) -> InputOutcome {
    let fail = |emitted_class, why: String| InputOutcome {
        matched: false,
        reference_class,
        emitted_class,
        mismatch: Some(why),
    };
    let mut lines = text.lines();
    let expected: Vec<f64> = match (reference.as_f32(), reference.as_i8()) {
        (Some(v), _) => v.iter().map(|&x| f64::from(x)).collect(),
        (_, Some(v)) => v.iter().map(|&x| f64::from(x)).collect(),
        _ => unreachable!("tensor holds f32 or i8"),
    };
    let mut logits = Vec::with_capacity(expected.len());
    for _ in 0..expected.len() {
        let Some(line) = lines.next() else {
            return fail(None, "harness output truncated".into());
        };
        let value = match et {
            ElementType::F32 => line.trim().parse::<f32>().map(f64::from).ok(),
            ElementType::I8 => line.trim().parse::<i8>().map(f64::from).ok(),
        };
        match value {
            Some(v) => logits.push(v),
            None => return fail(None, format!("unparsable logit {line:?}")),
        }
    }
    let class = lines
        .next()
        .and_then(|l| l.trim().strip_prefix("class="))
        .and_then(|k| k.parse::<usize>().ok());
    let Some(class) = class else {
        return fail(None, "missing class line".into());
    };
    // %.9g round-trips every f32, so bit comparison is exact
    for (i, (got, want)) in logits.iter().zip(&expected).enumerate() {
        if got.to_bits() != want.to_bits() {
            return fail(Some(class), format!("logit {i}: emitted {got}, reference {want}"));
        }
    }
    if class != reference_class {
        return fail(
            Some(class),
            format!("class {class} differs from reference {reference_class}"),
        );
    }
    InputOutcome {
        matched: true,
        reference_class,
        emitted_class: Some(class),
        mismatch: None,
    }
}
